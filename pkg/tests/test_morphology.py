"""
Morphology Tests
几何内核测试：连通域、闭运算、平滑、距离变换、骨架与后处理链
"""

import os
import sys
import unittest
from collections import deque

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.errors import DataError, UnknownLabel, UnknownLabelClass  # noqa: E402
from src.morphology import (  # noqa: E402
    PostprocessRule, clean_volume_labels, connected_components, edt, gaussian_smooth, medial_axis,
    morphological_close, postprocess_prediction, remove_small_objects, resample_mask_nearest,
)
from src.volume_core import LabeledVolume, Mask2D, VoxelGeometry  # noqa: E402


def flood_fill_count(bits: np.ndarray, eight: bool) -> int:
    """BFS 连通域计数"""
    seen = np.zeros_like(bits, dtype=bool)
    if eight:
        steps = [(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1) if (dx, dy) != (0, 0)]
    else:
        steps = [(1, 0), (-1, 0), (0, 1), (0, -1)]
    count = 0
    nx, ny = bits.shape
    for x in range(nx):
        for y in range(ny):
            if not bits[x, y] or seen[x, y]:
                continue
            count += 1
            queue = deque([(x, y)])
            seen[x, y] = True
            while queue:
                cx, cy = queue.popleft()
                for dx, dy in steps:
                    px, py = cx + dx, cy + dy
                    if 0 <= px < nx and 0 <= py < ny and bits[px, py] and not seen[px, py]:
                        seen[px, py] = True
                        queue.append((px, py))
    return count


def brute_force_edt(bits: np.ndarray, spacing) -> np.ndarray:
    """全对距离；图像外一圈视为背景"""
    padded = np.pad(bits, 1, constant_values=False)
    bx, by = np.nonzero(~padded)
    out = np.zeros(bits.shape)
    fx, fy = np.nonzero(bits)
    for x, y in zip(fx, fy):
        d = np.hypot((bx - (x + 1)) * spacing[0], (by - (y + 1)) * spacing[1])
        out[x, y] = d.min()
    return out


class TestConnectedComponents(unittest.TestCase):
    """连通域测试"""

    def test_two_squares(self):
        """两个被背景列隔开的方块 -> K = 2"""
        bits = np.zeros((5, 5), dtype=bool)
        bits[0:2, 0:2] = True
        bits[3:5, 0:2] = True
        labeling = connected_components(bits)
        self.assertEqual(labeling.count, 2)
        self.assertEqual(labeling.sizes.tolist(), [4, 4])

    def test_diagonal_connectivity(self):
        """对角相邻：4 邻接 K = 2，8 邻接 K = 1"""
        bits = np.array([[1, 0], [0, 1]], dtype=bool)
        self.assertEqual(connected_components(bits, 4).count, 2)
        self.assertEqual(connected_components(bits, 8).count, 1)

    def test_empty(self):
        labeling = connected_components(np.zeros((4, 4), dtype=bool))
        self.assertEqual(labeling.count, 0)

    def test_matches_flood_fill_on_random_masks(self):
        """随机 32×32 掩码与 BFS 结果一致"""
        rng = np.random.default_rng(0)
        for trial in range(200):
            bits = rng.random((32, 32)) < rng.uniform(0.2, 0.6)
            for conn, eight in ((4, False), (8, True)):
                labeling = connected_components(bits, conn)
                self.assertEqual(labeling.count, flood_fill_count(bits, eight))
                self.assertEqual(int(labeling.sizes.sum()), int(bits.sum()))
                if labeling.count:
                    self.assertEqual(sorted(np.unique(labeling.ids[bits]).tolist()),
                                     list(range(1, labeling.count + 1)))

    def test_invalid_connectivity(self):
        with self.assertRaises(DataError):
            connected_components(np.zeros((3, 3), dtype=bool), 6)


class TestRemoveSmallObjects(unittest.TestCase):
    """小目标移除测试"""

    def test_2d_threshold(self):
        """{50, 150} 像素，min_size 100 -> 只保留 150"""
        bits = np.zeros((40, 40), dtype=bool)
        bits[0:5, 0:10] = True       # 50
        bits[20:35, 20:30] = True    # 150
        kept = remove_small_objects(connected_components(bits), 100)
        self.assertEqual(int(kept.sum()), 150)
        self.assertFalse(kept[0:5, 0:10].any())

    def test_min_size_one_is_identity(self):
        rng = np.random.default_rng(5)
        bits = rng.random((16, 16)) < 0.4
        np.testing.assert_array_equal(remove_small_objects(connected_components(bits), 1), bits)

    def test_3d_boundary_inclusive(self):
        """3D {999, 1000} 体素，min_size 1000 -> 只保留 1000"""
        vol = np.zeros((30, 30, 30), dtype=bool)
        vol[0:10, 0:10, 0:10] = True          # 1000
        vol[15:24, 0:11, 0:10] = True         # 990
        vol[15:24, 11, 0] = True              # +9 -> 999
        labeling = connected_components(vol, 26)
        self.assertEqual(sorted(labeling.sizes.tolist()), [999, 1000])
        kept = remove_small_objects(labeling, 1000)
        self.assertEqual(int(kept.sum()), 1000)

    def test_invalid_min_size(self):
        with self.assertRaises(DataError):
            remove_small_objects(connected_components(np.ones((2, 2), dtype=bool)), 0)


class TestClosingAndSmoothing(unittest.TestCase):
    """闭运算与高斯平滑测试"""

    def test_close_solid_square_unchanged(self):
        bits = np.zeros((20, 20), dtype=bool)
        bits[5:15, 5:15] = True
        np.testing.assert_array_equal(morphological_close(bits, 7), bits)

    def test_close_fills_one_pixel_hole(self):
        bits = np.zeros((9, 9), dtype=bool)
        bits[2:7, 2:7] = True
        bits[4, 4] = False
        closed = morphological_close(bits, 3)
        self.assertTrue(closed[4, 4])
        self.assertEqual(int(closed.sum()), 25)

    def test_close_empty(self):
        self.assertFalse(morphological_close(np.zeros((6, 6), dtype=bool), 5).any())

    def test_close_idempotent_and_extensive(self):
        """close(close(m)) == close(m) 且 close(m) ⊇ m"""
        rng = np.random.default_rng(9)
        for _ in range(50):
            bits = rng.random((24, 24)) < 0.3
            closed = morphological_close(bits, 3)
            self.assertTrue(np.all(closed[bits]))
            np.testing.assert_array_equal(morphological_close(closed, 3), closed)

    def test_even_kernel_rejected(self):
        with self.assertRaises(DataError):
            morphological_close(np.zeros((4, 4), dtype=bool), 4)

    def test_mask2d_type_preserved(self):
        mask = Mask2D(np.ones((5, 5), dtype=bool), (0.5, 0.7))
        closed = morphological_close(mask, 3)
        self.assertIsInstance(closed, Mask2D)
        self.assertEqual(closed.spacing, (0.5, 0.7))

    def test_smooth_keeps_large_square_interior(self):
        bits = np.zeros((40, 40), dtype=bool)
        bits[5:35, 5:35] = True
        smoothed = gaussian_smooth(bits, 7)
        self.assertTrue(smoothed[8:32, 8:32].all())
        self.assertFalse(smoothed[0:2, :].any())

    def test_smooth_erases_isolated_pixel(self):
        """孤立像素经 k=7 模糊后峰值 < 0.5"""
        bits = np.zeros((15, 15), dtype=bool)
        bits[7, 7] = True
        self.assertFalse(gaussian_smooth(bits, 7).any())

    def test_smooth_fills_boundary_notch(self):
        """大方块边缘的 1 像素缺口被抹平"""
        square = np.zeros((40, 40), dtype=bool)
        square[5:35, 5:35] = True
        notched = square.copy()
        notched[5, 20] = False
        np.testing.assert_array_equal(gaussian_smooth(notched, 7), gaussian_smooth(square, 7))

    def test_smooth_rejects_nonpositive_sigma(self):
        with self.assertRaises(DataError):
            gaussian_smooth(np.zeros((5, 5), dtype=bool), 3, sigma=0.0)


class TestEdt(unittest.TestCase):
    """距离变换测试"""

    def test_single_pixel(self):
        bits = np.zeros((5, 5), dtype=bool)
        bits[2, 2] = True
        self.assertAlmostEqual(edt(bits, (1.0, 1.0)).values[2, 2], 1.0)

    def test_full_foreground_uses_virtual_border(self):
        """全前景 5×5：中心距图像外背景 3.0 mm"""
        field = edt(np.ones((5, 5), dtype=bool), (1.0, 1.0)).values
        self.assertAlmostEqual(field[2, 2], 3.0)
        self.assertAlmostEqual(field[0, 0], 1.0)

    def test_anisotropic_neighbours(self):
        """间距 (0.5, 2.0)：水平/垂直邻居距离 0.5 / 2.0 mm"""
        bits = np.ones((7, 7), dtype=bool)
        bits[3, 3] = False
        field = edt(bits, (0.5, 2.0)).values
        self.assertAlmostEqual(field[2, 3], 0.5)
        self.assertAlmostEqual(field[4, 3], 0.5)
        self.assertAlmostEqual(field[3, 2], 2.0)
        self.assertEqual(field[3, 3], 0.0)

    def test_zero_on_background(self):
        rng = np.random.default_rng(2)
        bits = rng.random((20, 20)) < 0.5
        field = edt(bits).values
        self.assertTrue(np.all(field[~bits] == 0))
        self.assertTrue(np.all(field[bits] > 0))

    def test_matches_brute_force(self):
        """随机 64×64 掩码（含各向异性间距）与全对暴力计算一致"""
        rng = np.random.default_rng(42)
        for trial in range(40):
            bits = rng.random((64, 64)) < rng.uniform(0.3, 0.9)
            spacing = (0.3, 1.2) if trial % 2 else (1.0, 1.0)
            fast = edt(Mask2D(bits, spacing)).values
            np.testing.assert_allclose(fast, brute_force_edt(bits, spacing), atol=1e-9, rtol=0)

    def test_spacing_taken_from_mask(self):
        mask = Mask2D(np.ones((3, 3), dtype=bool), (0.25, 4.0))
        result = edt(mask)
        self.assertEqual(result.spacing, (0.25, 4.0))
        self.assertAlmostEqual(result.values[1, 1], 0.5)

    def test_nonpositive_spacing(self):
        with self.assertRaises(DataError):
            edt(np.ones((2, 2), dtype=bool), (0.0, 1.0))


class TestMedialAxis(unittest.TestCase):
    """骨架测试"""

    def test_3x11_rectangle(self):
        """3×11 矩形骨架落在中间一行"""
        bits = np.zeros((5, 13), dtype=bool)
        bits[1:4, 1:12] = True
        skeleton = medial_axis(bits)
        self.assertTrue(np.all(bits[skeleton]))
        self.assertTrue(7 <= int(skeleton.sum()) <= 11)
        self.assertGreaterEqual(int(skeleton[2, :].sum()), int(skeleton.sum()) - 2)
        self.assertEqual(connected_components(skeleton, 8).count, 1)

    def test_single_pixel_and_empty(self):
        bits = np.zeros((5, 5), dtype=bool)
        self.assertFalse(medial_axis(bits).any())
        bits[2, 2] = True
        np.testing.assert_array_equal(medial_axis(bits), bits)

    def test_subset_and_component_count(self):
        """骨架 ⊆ 输入且连通域数不变"""
        bits = np.zeros((40, 40), dtype=bool)
        bits[3:10, 3:30] = True
        bits[20:35, 15:22] = True
        skeleton = medial_axis(Mask2D(bits, (0.5, 0.5)))
        self.assertIsInstance(skeleton, Mask2D)
        self.assertTrue(np.all(bits[skeleton.bits]))
        self.assertEqual(connected_components(skeleton.bits, 8).count, 2)


class TestPostprocess(unittest.TestCase):
    """预测后处理链测试"""

    def setUp(self):
        self.rules = {"cartilage": PostprocessRule(min_size=100, kernel=7), "bone": PostprocessRule(100, 15)}

    def test_negative_logits_give_empty_mask(self):
        mask = postprocess_prediction(np.full((32, 32), -10.0), "cartilage", self.rules)
        self.assertEqual(mask.count, 0)

    def test_satellite_removed(self):
        """200 像素主体 + 60 像素卫星，min_size 100 -> 卫星被移除"""
        logits = np.full((64, 64), -10.0)
        logits[10:30, 10:20] = 10.0     # 200
        logits[45:51, 45:55] = 10.0     # 60
        mask = postprocess_prediction(logits, "cartilage", self.rules, (0.5, 0.5))
        self.assertFalse(mask.bits[40:60, 40:60].any())
        self.assertTrue(mask.bits[15:25, 12:18].all())
        self.assertEqual(mask.spacing, (0.5, 0.5))

    def test_idempotent_on_clean_blob(self):
        """对干净的块重复后处理结果不变"""
        logits = np.full((64, 64), -10.0)
        logits[12:52, 12:52] = 10.0
        once = postprocess_prediction(logits, "cartilage", self.rules)
        again = postprocess_prediction(np.where(once.bits, 10.0, -10.0), "cartilage", self.rules)
        np.testing.assert_array_equal(once.bits, again.bits)

    def test_rule_order_does_not_matter(self):
        logits = np.random.default_rng(1).normal(0, 3, size=(48, 48))
        reordered = dict(reversed(list(self.rules.items())))
        np.testing.assert_array_equal(
            postprocess_prediction(logits, "bone", self.rules).bits,
            postprocess_prediction(logits, "bone", reordered).bits,
        )

    def test_unknown_label_class(self):
        with self.assertRaises(UnknownLabelClass):
            postprocess_prediction(np.zeros((8, 8)), "meniscus", self.rules)

    def test_rule_from_dict_defaults(self):
        rule = PostprocessRule.from_dict({})
        self.assertEqual((rule.min_size, rule.kernel, rule.sigma), (100, 7, None))
        with self.assertRaises(DataError):
            PostprocessRule(kernel=8)


class TestVolumeHelpers(unittest.TestCase):
    """三维标签清理与掩码重采样测试"""

    def test_clean_volume_labels(self):
        labels = np.zeros((20, 20, 20), dtype=np.uint8)
        labels[0:10, 0:10, 0:10] = 1      # 1000 保留
        labels[15:18, 15:18, 15:18] = 1   # 27 删除
        labels[12:14, 0:2, 0:2] = 2       # 未列出的标签被剔除
        volume = LabeledVolume(labels, VoxelGeometry(1, 1, 1), {1: "femur", 2: "tibia"})
        cleaned = clean_volume_labels(volume, keep_codes=[1], min_size=1000)
        self.assertEqual(int((cleaned.labels == 1).sum()), 1000)
        self.assertFalse((cleaned.labels == 2).any())
        self.assertEqual(cleaned.label_map, {1: "femur"})
        with self.assertRaises(UnknownLabelClass):
            clean_volume_labels(volume, keep_codes=[3])

    def test_resample_nearest_preserves_field_of_view(self):
        bits = np.zeros((4, 4), dtype=bool)
        bits[0:2, 0:2] = True
        out = resample_mask_nearest(Mask2D(bits, (1.0, 1.0)), (8, 8))
        self.assertEqual(out.dims, (8, 8))
        self.assertEqual(out.spacing, (0.5, 0.5))
        self.assertEqual(out.count, 16)
        self.assertTrue(out.bits[0:4, 0:4].all())

    def test_code_for_unknown_structure(self):
        volume = LabeledVolume(np.zeros((2, 2, 1), dtype=np.uint8), VoxelGeometry(1, 1, 1), {1: "a"})
        with self.assertRaises(UnknownLabel):
            volume.code_for("b")


if __name__ == "__main__":
    unittest.main()
