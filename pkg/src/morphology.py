"""
Morphology - 几何内核

职责：
- 连通域标记（2D 4/8 邻接，3D 6/26 邻接）与小目标移除
- 方形结构元闭运算、高斯平滑后重新二值化
- 各向异性精确欧氏距离变换（图像外视为背景）
- Zhang-Suen 细化骨架
- 预测 logits 的后处理链：sigmoid -> 0.5 阈值 -> 去小目标 -> 闭运算 -> 平滑
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.special import expit
from skimage.morphology import skeletonize
from skimage.transform import resize

from .errors import DataError, UnknownLabelClass
from .volume_core import LabeledVolume, Mask2D

logger = logging.getLogger(__name__)

MaskLike = Union[Mask2D, np.ndarray]

DEFAULT_CONNECTIVITY = {2: 8, 3: 26}
# 邻接数 -> ndimage.generate_binary_structure 的 connectivity 参数
_CONNECTIVITY_RANK = {(2, 4): 1, (2, 8): 2, (3, 6): 1, (3, 26): 3}


@dataclass(frozen=True)
class ComponentLabeling:
    """连通域标记结果；ids 稠密编号 1..K，sizes[i] 为第 i+1 个连通域的像素数"""
    ids: np.ndarray
    sizes: np.ndarray

    @property
    def count(self) -> int:
        return int(self.sizes.size)

    @property
    def foreground(self) -> np.ndarray:
        return self.ids > 0


@dataclass(frozen=True)
class DistanceField2D:
    values: np.ndarray
    spacing: Tuple[float, float]


@dataclass(frozen=True)
class PostprocessRule:
    """单个标签类别的后处理参数"""
    min_size: int = 100
    kernel: int = 7
    sigma: Optional[float] = None

    def __post_init__(self):
        if self.min_size < 1:
            raise DataError(f"min_size 必须 >= 1: {self.min_size}")
        _check_kernel(self.kernel)
        if self.sigma is not None and self.sigma <= 0:
            raise DataError(f"sigma 必须为正: {self.sigma}")

    @classmethod
    def from_dict(cls, data: Mapping) -> "PostprocessRule":
        return cls(
            min_size=int(data.get("min_size", 100)),
            kernel=int(data.get("kernel", 7)),
            sigma=None if data.get("sigma") is None else float(data["sigma"]),
        )


def _check_kernel(k: int) -> None:
    if k < 1 or k % 2 == 0:
        raise DataError(f"结构元尺寸必须为正奇数: {k}")


def _bits(mask: MaskLike) -> np.ndarray:
    if isinstance(mask, Mask2D):
        return mask.bits
    return np.asarray(mask, dtype=bool)


def _like(mask: MaskLike, bits: np.ndarray) -> MaskLike:
    if isinstance(mask, Mask2D):
        return mask.with_bits(bits)
    return bits


def connected_components(mask: MaskLike, connectivity: Optional[int] = None) -> ComponentLabeling:
    """连通域标记。两像素同 id 当且仅当在给定邻接下连通。"""
    bits = _bits(mask)
    rank = bits.ndim
    if connectivity is None:
        connectivity = DEFAULT_CONNECTIVITY.get(rank, 8)
    key = (rank, int(connectivity))
    if key not in _CONNECTIVITY_RANK:
        raise DataError(f"{rank}D 不支持邻接数 {connectivity}")
    structure = ndimage.generate_binary_structure(rank, _CONNECTIVITY_RANK[key])
    ids, count = ndimage.label(bits, structure=structure)
    sizes = np.bincount(ids.ravel(), minlength=count + 1)[1:]
    return ComponentLabeling(ids=ids, sizes=sizes.astype(np.int64))


def remove_small_objects(labeling: ComponentLabeling, min_size: int) -> np.ndarray:
    """删除像素数 < min_size 的连通域；恰好等于 min_size 的保留"""
    if min_size < 1:
        raise DataError(f"min_size 必须 >= 1: {min_size}")
    keep = np.concatenate([[False], labeling.sizes >= min_size])
    return keep[labeling.ids]


def morphological_close(mask: MaskLike, kernel: int) -> MaskLike:
    """k×k 方形结构元闭运算（先膨胀后腐蚀）"""
    _check_kernel(kernel)
    bits = _bits(mask)
    if kernel == 1 or not bits.any():
        return _like(mask, bits.copy())
    pad = kernel
    padded = np.pad(bits, pad, mode="constant", constant_values=False)
    closed = ndimage.binary_closing(padded, structure=np.ones((kernel,) * bits.ndim, dtype=bool))
    crop = tuple(slice(pad, pad + n) for n in bits.shape)
    return _like(mask, closed[crop])


def gaussian_smooth(mask: MaskLike, kernel: int, sigma: Optional[float] = None) -> MaskLike:
    """对 0/1 场做高斯模糊（边缘复制），在 0.5 处重新二值化。sigma 缺省为 k/6。"""
    _check_kernel(kernel)
    if sigma is None:
        sigma = kernel / 6.0
    if sigma <= 0:
        raise DataError(f"sigma 必须为正: {sigma}")
    bits = _bits(mask)
    blurred = ndimage.gaussian_filter(bits.astype(np.float64), sigma=sigma, mode="nearest", radius=kernel // 2)
    return _like(mask, blurred >= 0.5)


def edt(mask: MaskLike, spacing: Optional[Sequence[float]] = None) -> DistanceField2D:
    """精确各向异性欧氏距离变换（mm）；图像外一圈视为背景"""
    bits = _bits(mask)
    if spacing is None:
        spacing = mask.spacing if isinstance(mask, Mask2D) else (1.0,) * bits.ndim
    spacing = tuple(float(s) for s in spacing)
    if any(s <= 0 for s in spacing):
        raise DataError(f"像素间距必须为正: {spacing}")
    padded = np.pad(bits, 1, mode="constant", constant_values=False)
    dist = ndimage.distance_transform_edt(padded, sampling=spacing)
    crop = tuple(slice(1, 1 + n) for n in bits.shape)
    values = np.where(bits, dist[crop], 0.0)
    return DistanceField2D(values=values, spacing=spacing)


def medial_axis(mask: MaskLike) -> MaskLike:
    """Zhang-Suen 细化骨架（8 邻接，单像素宽）"""
    bits = _bits(mask)
    if not bits.any():
        return _like(mask, np.zeros_like(bits))
    padded = np.pad(bits, 1, mode="constant", constant_values=False)
    skeleton = skeletonize(padded, method="zhang")
    crop = tuple(slice(1, 1 + n) for n in bits.shape)
    return _like(mask, skeleton[crop] & bits)


def postprocess_prediction(
    logits: np.ndarray,
    label_class: str,
    rules: Mapping[str, PostprocessRule],
    spacing: Tuple[float, float] = (1.0, 1.0),
) -> Mask2D:
    """将预测 logits 转为精修后的二值掩码，步骤顺序固定"""
    if label_class not in rules:
        raise UnknownLabelClass(f"未配置后处理规则的标签类别: {label_class}")
    rule = rules[label_class]
    if isinstance(rule, Mapping):
        rule = PostprocessRule.from_dict(rule)

    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise DataError(f"logits 必须为二维: {logits.shape}")
    bits = expit(logits) >= 0.5
    bits = remove_small_objects(connected_components(bits), rule.min_size)
    bits = morphological_close(bits, rule.kernel)
    bits = gaussian_smooth(bits, rule.kernel, rule.sigma)
    return Mask2D(bits, spacing)


def resample_mask_nearest(mask: Mask2D, shape: Tuple[int, int]) -> Mask2D:
    """最近邻重采样掩码到目标尺寸，物理视野不变"""
    if len(shape) != 2 or min(shape) < 1:
        raise DataError(f"目标尺寸无效: {shape}")
    out = resize(
        mask.bits.astype(np.uint8), shape, order=0,
        preserve_range=True, anti_aliasing=False, mode="edge",
    )
    nx, ny = mask.dims
    spacing = (mask.spacing[0] * nx / shape[0], mask.spacing[1] * ny / shape[1])
    return Mask2D(out > 0, spacing)


def clean_volume_labels(
    volume: LabeledVolume,
    keep_codes: Optional[Sequence[int]] = None,
    min_size: int = 1000,
    connectivity: int = 26,
) -> LabeledVolume:
    """三维标签预处理：剔除未列出的标签，逐标签删除 < min_size 体素的目标"""
    labels = np.array(volume.labels, copy=True)
    codes = sorted(volume.label_map) if keep_codes is None else sorted(int(c) for c in keep_codes)
    unknown = [c for c in codes if c not in volume.label_map]
    if unknown:
        raise UnknownLabelClass(f"保留列表中存在未定义的标签: {unknown}")

    labels[~np.isin(labels, codes)] = 0
    removed: Dict[int, int] = {}
    for code in codes:
        binary = labels == code
        if not binary.any():
            continue
        kept = remove_small_objects(connected_components(binary, connectivity), min_size)
        dropped = int(np.count_nonzero(binary & ~kept))
        if dropped:
            removed[code] = dropped
            labels[binary & ~kept] = 0
    if removed:
        logger.info(f"小目标移除体素数: {removed}")
    label_map = {c: volume.label_map[c] for c in codes}
    return LabeledVolume(labels, volume.geometry, label_map)
