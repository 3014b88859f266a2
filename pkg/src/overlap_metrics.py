"""
Overlap Metrics - 分割重叠度评估

Dice / Jaccard 计算，以及 切片 -> 受试者 -> 数据集 的聚合层级；
另外提供从掩码生成边界框提示（含随机平移增强）。
"""
from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DataError, DimMismatch, EmptyInput, EmptyMask
from .volume_core import LabeledVolume, Mask2D

logger = logging.getLogger(__name__)

METRICS = ("dice", "jaccard")
POOLING_MODES = ("per_label_then_mean", "pooled_then_mean")
ALL_LABELS = "all"
DEFAULT_BBOX_SHIFT = 20


@dataclass(frozen=True)
class OverlapScore:
    subject_id: str
    label: str
    slice_index: int
    dice: float
    jaccard: float


@dataclass(frozen=True)
class MetricRecord:
    subject_id: str
    level: str
    label: str
    metric: str
    value: float
    n: int

    def to_row(self) -> Dict:
        return asdict(self)


@dataclass(frozen=True)
class BoundingBox:
    """闭区间像素坐标框"""
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def contains(self, x: int, y: int) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    def as_tuple(self) -> Tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def _pair_bits(a, b) -> Tuple[np.ndarray, np.ndarray]:
    a_bits = a.bits if isinstance(a, Mask2D) else np.asarray(a, dtype=bool)
    b_bits = b.bits if isinstance(b, Mask2D) else np.asarray(b, dtype=bool)
    if a_bits.shape != b_bits.shape:
        raise DimMismatch(f"掩码尺寸不一致: {a_bits.shape} vs {b_bits.shape}")
    return a_bits, b_bits


def dice(a, b) -> float:
    """2|A∩B| / (|A|+|B|)；两者皆空时为 1.0"""
    a_bits, b_bits = _pair_bits(a, b)
    total = int(np.count_nonzero(a_bits)) + int(np.count_nonzero(b_bits))
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a_bits & b_bits)) / total


def jaccard(a, b) -> float:
    """|A∩B| / |A∪B|；两者皆空时为 1.0"""
    a_bits, b_bits = _pair_bits(a, b)
    union = int(np.count_nonzero(a_bits | b_bits))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a_bits & b_bits)) / union


def _mean(values: Iterable[float]) -> float:
    values = sorted(values)
    return math.fsum(values) / len(values)


def aggregate(
    scores: Sequence[OverlapScore],
    metrics: Sequence[str] = METRICS,
    pooling: str = "per_label_then_mean",
    include_slices: bool = False,
) -> List[MetricRecord]:
    """切片分数聚合为受试者均值与数据集均值。

    受试者均值 = 该受试者切片分数的非加权平均；数据集均值 = 受试者均值的非加权平均。
    额外输出 label="all" 的记录：per_label_then_mean 先按标签求受试者均值再跨标签平均，
    pooled_then_mean 则把该受试者所有标签的切片分数合并后平均。
    """
    if not scores:
        raise EmptyInput("没有可聚合的重叠分数")
    if pooling not in POOLING_MODES:
        raise DataError(f"未知的聚合方式: {pooling}")
    unknown = [m for m in metrics if m not in METRICS]
    if unknown:
        raise DataError(f"未知指标: {unknown}")

    records: List[MetricRecord] = []
    for metric in metrics:
        by_subject_label: Dict[Tuple[str, str], List[float]] = defaultdict(list)
        for score in scores:
            value = getattr(score, metric)
            by_subject_label[(score.subject_id, score.label)].append(value)
            if include_slices:
                records.append(MetricRecord(score.subject_id, "slice", score.label, metric, value, 1))

        subject_means: Dict[Tuple[str, str], float] = {
            key: _mean(values) for key, values in by_subject_label.items()
        }
        for (subject_id, label), value in subject_means.items():
            records.append(MetricRecord(subject_id, "subject", label, metric, value,
                                        len(by_subject_label[(subject_id, label)])))

        by_label: Dict[str, List[float]] = defaultdict(list)
        for (_, label), value in subject_means.items():
            by_label[label].append(value)
        for label, values in by_label.items():
            records.append(MetricRecord("", "dataset", label, metric, _mean(values), len(values)))

        pooled: Dict[str, List[float]] = defaultdict(list)
        if pooling == "per_label_then_mean":
            for (subject_id, _), value in subject_means.items():
                pooled[subject_id].append(value)
        else:
            for (subject_id, _), values in by_subject_label.items():
                pooled[subject_id].extend(values)
        all_means = {subject_id: _mean(values) for subject_id, values in pooled.items()}
        for subject_id, value in all_means.items():
            records.append(MetricRecord(subject_id, "subject", ALL_LABELS, metric, value, len(pooled[subject_id])))
        records.append(MetricRecord("", "dataset", ALL_LABELS, metric,
                                    _mean(all_means.values()), len(all_means)))

    level_order = {"slice": 0, "subject": 1, "dataset": 2}
    records.sort(key=lambda r: (level_order[r.level], r.metric, r.label == ALL_LABELS, r.label, r.subject_id))
    return records


def score_volume_pair(
    prediction: LabeledVolume,
    truth: LabeledVolume,
    subject_id: str,
    label_codes: Optional[Sequence[int]] = None,
) -> List[OverlapScore]:
    """逐标签逐切片计算 Dice/Jaccard；真值中不存在该标签的切片不计入"""
    if prediction.dims != truth.dims:
        raise DimMismatch(f"预测与真值体尺寸不一致: {prediction.dims} vs {truth.dims}")
    codes = sorted(truth.label_map) if label_codes is None else sorted(int(c) for c in label_codes)

    scores: List[OverlapScore] = []
    for code in codes:
        name = truth.label_map.get(code, f"label_{code}")
        truth_bin = truth.binary(code)
        pred_bin = prediction.binary(code)
        present = np.flatnonzero(truth_bin.any(axis=(0, 1)))
        for k in present:
            t, p = truth_bin[:, :, k], pred_bin[:, :, k]
            scores.append(OverlapScore(subject_id, name, int(k), dice(p, t), jaccard(p, t)))
    logger.debug(f"{subject_id}: {len(scores)} 个切片分数")
    return scores


def bbox_from_mask(
    mask: Mask2D,
    shift: int = DEFAULT_BBOX_SHIFT,
    seed: Union[int, np.random.Generator, None] = None,
) -> BoundingBox:
    """由掩码前景生成紧致边界框，四条边各自独立平移 [-shift, +shift] 像素后截断到图像内"""
    bits = mask.bits if isinstance(mask, Mask2D) else np.asarray(mask, dtype=bool)
    xs, ys = np.nonzero(bits)
    if xs.size == 0:
        raise EmptyMask("掩码为空，无法生成边界框")
    if shift < 0:
        raise DataError(f"shift 不能为负: {shift}")
    box = [int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())]
    if shift == 0:
        return BoundingBox(*box)

    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    offsets = rng.integers(-shift, shift + 1, size=4)
    nx, ny = bits.shape
    x_min, y_min, x_max, y_max = (b + int(o) for b, o in zip(box, offsets))
    x_min, x_max = (int(np.clip(v, 0, nx - 1)) for v in (x_min, x_max))
    y_min, y_max = (int(np.clip(v, 0, ny - 1)) for v in (y_min, y_max))
    if x_min > x_max:
        x_min, x_max = x_max, x_min
    if y_min > y_max:
        y_min, y_max = y_max, y_min
    return BoundingBox(x_min, y_min, x_max, y_max)
