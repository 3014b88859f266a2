"""
Overlap Metrics Tests
重叠度指标、聚合层级与边界框提示测试
"""

import os
import sys
import unittest

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.errors import DataError, DimMismatch, EmptyInput, EmptyMask  # noqa: E402
from src.overlap_metrics import (  # noqa: E402
    ALL_LABELS, OverlapScore, aggregate, bbox_from_mask, dice, jaccard, score_volume_pair,
)
from src.volume_core import LabeledVolume, Mask2D, VoxelGeometry  # noqa: E402


def _find(records, level, label, metric="dice", subject_id=""):
    for record in records:
        if (record.level, record.label, record.metric, record.subject_id) == (level, label, metric, subject_id):
            return record
    raise AssertionError(f"record not found: {level} {label} {metric} {subject_id}")


class TestDiceJaccard(unittest.TestCase):
    """Dice / Jaccard 测试"""

    def test_identical_masks(self):
        bits = np.zeros((8, 8), dtype=bool)
        bits[2:5, 2:6] = True
        self.assertEqual(dice(bits, bits), 1.0)
        self.assertEqual(jaccard(bits, bits), 1.0)

    def test_both_empty(self):
        empty = np.zeros((4, 4), dtype=bool)
        self.assertEqual(dice(empty, empty), 1.0)
        self.assertEqual(jaccard(empty, empty), 1.0)

    def test_one_empty(self):
        empty = np.zeros((4, 4), dtype=bool)
        full = np.ones((4, 4), dtype=bool)
        self.assertEqual(dice(empty, full), 0.0)
        self.assertEqual(jaccard(full, empty), 0.0)

    def test_half_overlap(self):
        """|A|=|B|=4，交集 2 -> D=0.5, J=1/3"""
        a = np.zeros((4, 4), dtype=bool)
        b = np.zeros((4, 4), dtype=bool)
        a[0, 0:4] = True
        b[0, 2:4] = True
        b[1, 0:2] = True
        self.assertAlmostEqual(dice(a, b), 0.5)
        self.assertAlmostEqual(jaccard(a, b), 1.0 / 3.0)

    def test_symmetry_bounds_and_identity(self):
        """随机掩码：对称、取值在 [0,1]、J = D/(2-D)"""
        rng = np.random.default_rng(11)
        for _ in range(200):
            a = rng.random((12, 12)) < rng.uniform(0.0, 0.6)
            b = rng.random((12, 12)) < rng.uniform(0.0, 0.6)
            d, j = dice(a, b), jaccard(a, b)
            self.assertEqual(d, dice(b, a))
            self.assertEqual(j, jaccard(b, a))
            self.assertTrue(0.0 <= j <= d <= 1.0)
            self.assertAlmostEqual(j, d / (2.0 - d), places=12)

    def test_mask2d_inputs(self):
        a = Mask2D(np.eye(5, dtype=bool), (0.5, 0.5))
        self.assertEqual(dice(a, a), 1.0)

    def test_shape_mismatch(self):
        with self.assertRaises(DimMismatch):
            dice(np.zeros((3, 3)), np.zeros((3, 4)))


class TestAggregate(unittest.TestCase):
    """聚合层级测试"""

    def setUp(self):
        self.scores = [
            OverlapScore("s1", "femur", 0, 0.9, 0.9 / 1.1),
            OverlapScore("s1", "femur", 1, 0.7, 0.7 / 1.3),
            OverlapScore("s1", "tibia", 0, 0.6, 0.6 / 1.4),
            OverlapScore("s2", "femur", 0, 0.5, 0.5 / 1.5),
        ]

    def test_subject_and_dataset_means(self):
        records = aggregate(self.scores)
        self.assertAlmostEqual(_find(records, "subject", "femur", subject_id="s1").value, 0.8)
        self.assertEqual(_find(records, "subject", "femur", subject_id="s1").n, 2)
        # 数据集均值 = 受试者均值的非加权平均
        self.assertAlmostEqual(_find(records, "dataset", "femur").value, (0.8 + 0.5) / 2)
        self.assertEqual(_find(records, "dataset", "femur").n, 2)
        self.assertAlmostEqual(_find(records, "dataset", "tibia").value, 0.6)

    def test_all_label_per_label_then_mean(self):
        records = aggregate(self.scores, pooling="per_label_then_mean")
        self.assertAlmostEqual(_find(records, "subject", ALL_LABELS, subject_id="s1").value, (0.8 + 0.6) / 2)
        self.assertAlmostEqual(_find(records, "dataset", ALL_LABELS).value, (0.7 + 0.5) / 2)

    def test_all_label_pooled_then_mean(self):
        records = aggregate(self.scores, pooling="pooled_then_mean")
        self.assertAlmostEqual(_find(records, "subject", ALL_LABELS, subject_id="s1").value, (0.9 + 0.7 + 0.6) / 3)
        self.assertEqual(_find(records, "subject", ALL_LABELS, subject_id="s1").n, 3)

    def test_slice_records_optional(self):
        without = aggregate(self.scores)
        self.assertFalse(any(r.level == "slice" for r in without))
        with_slices = aggregate(self.scores, include_slices=True)
        self.assertEqual(sum(1 for r in with_slices if r.level == "slice"), 2 * len(self.scores))
        self.assertEqual(with_slices[0].level, "slice")
        self.assertEqual(with_slices[-1].level, "dataset")

    def test_jaccard_metric(self):
        records = aggregate(self.scores, metrics=["jaccard"])
        self.assertTrue(all(r.metric == "jaccard" for r in records))
        self.assertAlmostEqual(_find(records, "dataset", "tibia", metric="jaccard").value, 0.6 / 1.4)

    def test_order_independent(self):
        forward = aggregate(self.scores)
        backward = aggregate(list(reversed(self.scores)))
        self.assertEqual([r.to_row() for r in forward], [r.to_row() for r in backward])

    def test_errors(self):
        with self.assertRaises(EmptyInput):
            aggregate([])
        with self.assertRaises(DataError):
            aggregate(self.scores, pooling="median")
        with self.assertRaises(DataError):
            aggregate(self.scores, metrics=["hausdorff"])


class TestScoreVolumePair(unittest.TestCase):
    """体对体逐切片评分测试"""

    def test_skips_slices_without_truth(self):
        geometry = VoxelGeometry(0.5, 0.5, 3.0)
        truth = np.zeros((6, 6, 3), dtype=np.uint8)
        truth[1:4, 1:4, 0] = 1
        truth[1:4, 1:4, 2] = 1
        pred = truth.copy()
        pred[1:4, 1:4, 2] = 0
        pred[0, 0, 1] = 1
        label_map = {1: "cartilage"}
        scores = score_volume_pair(LabeledVolume(pred, geometry, label_map),
                                   LabeledVolume(truth, geometry, label_map), "s9")
        self.assertEqual([s.slice_index for s in scores], [0, 2])
        self.assertEqual(scores[0].dice, 1.0)
        self.assertEqual(scores[1].dice, 0.0)
        self.assertEqual(scores[0].label, "cartilage")

    def test_dims_mismatch(self):
        a = LabeledVolume(np.zeros((2, 2, 1), dtype=np.uint8), VoxelGeometry(1, 1, 1))
        b = LabeledVolume(np.zeros((2, 3, 1), dtype=np.uint8), VoxelGeometry(1, 1, 1))
        with self.assertRaises(DimMismatch):
            score_volume_pair(a, b, "x")


class TestBoundingBox(unittest.TestCase):
    """边界框提示测试"""

    def setUp(self):
        bits = np.zeros((64, 64), dtype=bool)
        bits[20:30, 10:40] = True
        self.mask = Mask2D(bits)

    def test_tight_box_without_shift(self):
        box = bbox_from_mask(self.mask, shift=0)
        self.assertEqual(box.as_tuple(), (20, 10, 29, 39))

    def test_shifted_box_within_bounds(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            box = bbox_from_mask(self.mask, shift=20, seed=rng)
            self.assertTrue(0 <= box.x_min <= box.x_max <= 63)
            self.assertTrue(0 <= box.y_min <= box.y_max <= 63)
            self.assertTrue(abs(box.x_min - 20) <= 20 or box.x_min == 0)

    def test_seed_determinism(self):
        self.assertEqual(bbox_from_mask(self.mask, 20, seed=5), bbox_from_mask(self.mask, 20, seed=5))

    def test_contains(self):
        box = bbox_from_mask(self.mask, shift=0)
        self.assertTrue(box.contains(20, 10))
        self.assertTrue(box.contains(29, 39))
        self.assertFalse(box.contains(30, 39))

    def test_errors(self):
        with self.assertRaises(EmptyMask):
            bbox_from_mask(np.zeros((4, 4), dtype=bool))
        with self.assertRaises(DataError):
            bbox_from_mask(self.mask, shift=-1)


if __name__ == "__main__":
    unittest.main()
