"""
Biomarkers - 影像生物标志物计算
生物标志物提取模块

功能特性：
- 软骨厚度：骨架像素处的 EDT 值（半宽，可配置为全宽）
- 椎间盘高度：凸包 + 旋转卡壳最小面积外接矩形
- 组织体积：体素计数 × 体素体积，单位 cm³
- T1ρ/T2 弛豫时间：截断到 [0, 100] ms 后按区域求均值
- 受试者级聚合与参考人群 z 分数
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull

try:
    from scipy.spatial import QhullError
except ImportError:  # scipy < 1.11
    from scipy.spatial.qhull import QhullError

from .errors import DataError, DimMismatch, EmptyMask, UnknownLabel
from .morphology import connected_components, edt, medial_axis
from .volume_core import LabeledVolume, Mask2D, ScalarVolume, VoxelGeometry

logger = logging.getLogger(__name__)

METRIC_UNITS = {
    "thickness_mm": "mm",
    "disc_height_mm": "mm",
    "volume_cm3": "cm3",
    "t1rho_ms": "ms",
    "t2_ms": "ms",
}
RELAXATION_METRICS = ("t1rho_ms", "t2_ms")
RELAXATION_CLIP_MS = (0.0, 100.0)
TOTAL_STRUCTURE = "total"
ALL_REGIONS = "all"
# 两条边与列轴夹角差异过小（|dot| 差 < 该值）时取短边作为高度
ORIENTATION_TIE_TOLERANCE = 0.15


@dataclass(frozen=True)
class BiomarkerRecord:
    subject_id: str
    structure: str
    metric: str
    value: float
    unit: str
    slice_index: Optional[int] = None

    def __post_init__(self):
        if self.metric not in METRIC_UNITS:
            raise DataError(f"未知生物标志物: {self.metric}")
        if self.unit != METRIC_UNITS[self.metric]:
            raise DataError(f"单位与指标不符: {self.metric} -> {self.unit}")
        if not math.isfinite(self.value) or self.value < 0:
            raise DataError(f"生物标志物取值必须为非负有限值: {self.metric}={self.value}")

    def to_row(self) -> Dict:
        row = asdict(self)
        row["slice_index"] = "" if self.slice_index is None else self.slice_index
        return row


@dataclass
class ThicknessProfile:
    values: np.ndarray
    mean: float
    slice_index: Optional[int] = None
    fallback: bool = False


@dataclass
class RelaxationStats:
    region_means: Dict[str, float]
    overall: Optional[float]
    skipped: List[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# 软骨厚度
# ---------------------------------------------------------------------------

def cartilage_thickness(
    mask: Mask2D,
    geometry: Optional[VoxelGeometry] = None,
    full_width: bool = False,
    ridge_snap: bool = False,
    slice_index: Optional[int] = None,
) -> ThicknessProfile:
    """骨架像素处的 EDT 值（mm）取平均。

    默认直接取骨架像素处的 EDT。ridge_snap 为可选项：每个骨架像素改取其 3×3
    邻域内 EDT 的最大值，结果只会增大。
    骨架为空时退化为全部前景像素的 EDT 并记录警告。
    """
    if geometry is not None:
        mask = Mask2D(mask.bits, geometry.in_plane)
    if not mask.bits.any():
        raise EmptyMask("软骨掩码为空")

    field_ = edt(mask).values
    skeleton = medial_axis(mask).bits
    fallback = False
    if not skeleton.any():
        logger.warning("EmptySkeleton: 骨架为空, 使用前景像素 EDT 代替")
        skeleton = mask.bits
        fallback = True

    if ridge_snap and not fallback:
        field_ = ndimage.maximum_filter(field_, size=3, mode="constant", cval=0.0)
    values = field_[skeleton]
    if full_width:
        values = values * 2.0
    return ThicknessProfile(values=values, mean=float(np.mean(values)), slice_index=slice_index, fallback=fallback)


# ---------------------------------------------------------------------------
# 椎间盘高度
# ---------------------------------------------------------------------------

def _direction_pitch(direction: np.ndarray, spacing: Tuple[float, float]) -> float:
    """沿单位方向的栅格像素跨度（mm），用于把像素中心极差换算成边长"""
    sx, sy = spacing
    return 1.0 / math.hypot(direction[0] / sx, direction[1] / sy)


def _min_area_rectangle(points: np.ndarray) -> Optional[Tuple[np.ndarray, np.ndarray, float, float]]:
    """旋转卡壳求最小面积外接矩形，返回 (u, v, u 向极差, v 向极差)"""
    try:
        hull = ConvexHull(points)
    except QhullError:
        return None
    vertices = points[hull.vertices]
    best = None
    for i in range(len(vertices)):
        edge = vertices[(i + 1) % len(vertices)] - vertices[i]
        norm = math.hypot(edge[0], edge[1])
        if norm == 0:
            continue
        u = edge / norm
        v = np.array([-u[1], u[0]])
        pu, pv = vertices @ u, vertices @ v
        eu, ev = float(pu.max() - pu.min()), float(pv.max() - pv.min())
        area = eu * ev
        if best is None or area < best[0] - 1e-12:
            best = (area, u, v, eu, ev)
    if best is None:
        return None
    return best[1], best[2], best[3], best[4]


def _component_height(xs: np.ndarray, ys: np.ndarray, spacing: Tuple[float, float]) -> float:
    sx, sy = spacing
    y_extent = (int(ys.max()) - int(ys.min()) + 1) * sy
    if xs.size < 3:
        return y_extent
    points = np.column_stack([xs * sx, ys * sy]).astype(np.float64)
    centered = points - points.mean(axis=0)
    if np.linalg.matrix_rank(centered, tol=1e-9) < 2:
        return y_extent

    rect = _min_area_rectangle(points)
    if rect is None:
        logger.debug("DegenerateComponent: 凸包失败, 使用 y 向极差")
        return y_extent
    u, v, eu, ev = rect
    side_u = eu + _direction_pitch(u, spacing)
    side_v = ev + _direction_pitch(v, spacing)
    dot_u, dot_v = abs(u[1]), abs(v[1])
    if abs(dot_u - dot_v) < ORIENTATION_TIE_TOLERANCE:
        return min(side_u, side_v)
    return side_u if dot_u > dot_v else side_v


def disc_height(mask: Mask2D, geometry: Optional[VoxelGeometry] = None) -> Dict[int, float]:
    """逐连通域计算椎间盘高度（mm），键为连通域编号"""
    spacing = geometry.in_plane if geometry is not None else mask.spacing
    if not mask.bits.any():
        raise EmptyMask("椎间盘掩码为空")
    labeling = connected_components(mask.bits, connectivity=8)
    heights: Dict[int, float] = {}
    for component in range(1, labeling.count + 1):
        xs, ys = np.nonzero(labeling.ids == component)
        heights[component] = _component_height(xs, ys, spacing)
    return heights


# ---------------------------------------------------------------------------
# 组织体积
# ---------------------------------------------------------------------------

def tissue_volume(volume: LabeledVolume, label_code: int) -> float:
    """体素数 × 体素体积 / 1000，单位 cm³"""
    if label_code not in volume.label_map:
        raise UnknownLabel(f"标签编码不在 label_map 中: {label_code}")
    count = int(np.count_nonzero(volume.labels == label_code))
    return count * volume.geometry.voxel_volume_mm3 / 1000.0


def tissue_volumes(volume: LabeledVolume, label_codes: Optional[Sequence[int]] = None) -> Dict[str, float]:
    """各结构体积及合计"""
    codes = sorted(volume.label_map) if label_codes is None else sorted(int(c) for c in label_codes)
    voxel_cm3 = volume.geometry.voxel_volume_mm3 / 1000.0
    result: Dict[str, float] = {}
    total = 0
    for code in codes:
        if code not in volume.label_map:
            raise UnknownLabel(f"标签编码不在 label_map 中: {code}")
        count = int(np.count_nonzero(volume.labels == code))
        result[volume.label_map[code]] = count * voxel_cm3
        total += count
    result[TOTAL_STRUCTURE] = total * voxel_cm3
    return result


# ---------------------------------------------------------------------------
# 弛豫时间
# ---------------------------------------------------------------------------

def relaxation_stats(
    regions: Mapping[str, Union[Mask2D, np.ndarray]],
    values: np.ndarray,
    clip: Tuple[float, float] = RELAXATION_CLIP_MS,
) -> RelaxationStats:
    """区域均值取截断后的值；总体值为区域均值的非加权平均，空区域跳过"""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = clip
    region_means: Dict[str, float] = {}
    skipped: List[str] = []
    for name in sorted(regions):
        region = regions[name]
        bits = region.bits if isinstance(region, Mask2D) else np.asarray(region, dtype=bool)
        if bits.shape != values.shape:
            raise DimMismatch(f"区域 {name} 与弛豫图尺寸不一致: {bits.shape} vs {values.shape}")
        sample = values[bits & np.isfinite(values)]
        if sample.size == 0:
            logger.warning(f"EmptyRegion: 区域 {name} 无有效体素, 已跳过")
            skipped.append(name)
            continue
        region_means[name] = float(np.mean(np.clip(sample, lo, hi)))
    overall = float(np.mean(list(region_means.values()))) if region_means else None
    return RelaxationStats(region_means=region_means, overall=overall, skipped=skipped)


# ---------------------------------------------------------------------------
# 受试者级聚合
# ---------------------------------------------------------------------------

@dataclass
class BiomarkerConfig:
    """生物标志物提取选项（结构名称对应 label_map 中的名称）"""
    thickness_structures: List[str] = field(default_factory=list)
    disc_structures: List[str] = field(default_factory=list)
    volume_structures: Optional[List[str]] = None
    relaxation_structures: List[str] = field(default_factory=list)
    full_width: bool = False
    ridge_snap: bool = False
    relaxation_clip: Tuple[float, float] = RELAXATION_CLIP_MS

    @classmethod
    def from_dict(cls, data: Mapping) -> "BiomarkerConfig":
        clip = data.get("relaxation_clip_ms", RELAXATION_CLIP_MS)
        return cls(
            thickness_structures=list(data.get("thickness", []) or []),
            disc_structures=list(data.get("disc_height", []) or []),
            volume_structures=None if data.get("volume") in (None, "all") else list(data["volume"]),
            relaxation_structures=list(data.get("relaxation", []) or []),
            full_width=bool(data.get("full_width", False)),
            ridge_snap=bool(data.get("ridge_snap", False)),
            relaxation_clip=(float(clip[0]), float(clip[1])),
        )


class BiomarkerExtractor:
    """按受试者提取全部生物标志物记录（切片级 + 受试者级）"""

    def __init__(self, config: BiomarkerConfig):
        self.config = config
        self.logger = logging.getLogger(__name__)

    def extract(
        self,
        subject_id: str,
        labels: LabeledVolume,
        maps: Optional[Mapping[str, ScalarVolume]] = None,
    ) -> List[BiomarkerRecord]:
        records: List[BiomarkerRecord] = []
        records.extend(self._thickness(subject_id, labels))
        records.extend(self._disc_heights(subject_id, labels))
        records.extend(self._volumes(subject_id, labels))
        for metric, scalar in sorted((maps or {}).items()):
            records.extend(self._relaxation(subject_id, labels, metric, scalar))
        records.sort(key=record_sort_key)
        return records

    def _slices_with(self, labels: LabeledVolume, code: int) -> List[int]:
        return [int(k) for k in np.flatnonzero((labels.labels == code).any(axis=(0, 1)))]

    def _thickness(self, subject_id: str, labels: LabeledVolume) -> List[BiomarkerRecord]:
        records = []
        for name in self.config.thickness_structures:
            code = labels.code_for(name)
            slice_means = []
            for k in self._slices_with(labels, code):
                profile = cartilage_thickness(
                    labels.slice_mask(code, k),
                    full_width=self.config.full_width,
                    ridge_snap=self.config.ridge_snap,
                    slice_index=k,
                )
                slice_means.append(profile.mean)
                records.append(BiomarkerRecord(subject_id, name, "thickness_mm", profile.mean, "mm", k))
            if slice_means:
                records.append(BiomarkerRecord(subject_id, name, "thickness_mm", float(np.mean(slice_means)), "mm"))
        return records

    def _disc_heights(self, subject_id: str, labels: LabeledVolume) -> List[BiomarkerRecord]:
        records = []
        for name in self.config.disc_structures:
            code = labels.code_for(name)
            per_slice = []
            for k in self._slices_with(labels, code):
                tallest = max(disc_height(labels.slice_mask(code, k)).values())
                per_slice.append(tallest)
                records.append(BiomarkerRecord(subject_id, name, "disc_height_mm", tallest, "mm", k))
            if per_slice:
                records.append(BiomarkerRecord(subject_id, name, "disc_height_mm", max(per_slice), "mm"))
        return records

    def _volumes(self, subject_id: str, labels: LabeledVolume) -> List[BiomarkerRecord]:
        if self.config.volume_structures is None:
            codes = sorted(labels.label_map)
        else:
            codes = [labels.code_for(name) for name in self.config.volume_structures]
        volumes = tissue_volumes(labels, codes)
        return [BiomarkerRecord(subject_id, name, "volume_cm3", value, "cm3") for name, value in volumes.items()]

    def _relaxation(self, subject_id: str, labels: LabeledVolume, metric: str, scalar: ScalarVolume) -> List[BiomarkerRecord]:
        if metric not in RELAXATION_METRICS:
            raise DataError(f"未知弛豫指标: {metric}")
        if scalar.dims != labels.dims:
            raise DimMismatch(f"{metric} 图与标签体尺寸不一致: {scalar.dims} vs {labels.dims}")
        records = []
        codes = {name: labels.code_for(name) for name in self.config.relaxation_structures}
        per_region: Dict[str, List[float]] = {name: [] for name in codes}
        overall_by_slice: List[float] = []
        for k in range(labels.n_slices):
            slice_labels = labels.slice_labels(k)
            regions = {name: slice_labels == code for name, code in codes.items() if (slice_labels == code).any()}
            if not regions:
                continue
            stats = relaxation_stats(regions, scalar.slice(k), self.config.relaxation_clip)
            for name, value in stats.region_means.items():
                per_region[name].append(value)
                records.append(BiomarkerRecord(subject_id, name, metric, value, "ms", k))
            if stats.overall is not None:
                overall_by_slice.append(stats.overall)
                records.append(BiomarkerRecord(subject_id, ALL_REGIONS, metric, stats.overall, "ms", k))
        for name, values in per_region.items():
            if values:
                records.append(BiomarkerRecord(subject_id, name, metric, float(np.mean(values)), "ms"))
        if overall_by_slice:
            records.append(BiomarkerRecord(subject_id, ALL_REGIONS, metric, float(np.mean(overall_by_slice)), "ms"))
        return records


def record_sort_key(record: BiomarkerRecord) -> Tuple:
    """(subject, structure, metric, slice)；受试者级行排在切片行之后"""
    slice_key = (1, 0) if record.slice_index is None else (0, record.slice_index)
    return (record.subject_id, record.structure, record.metric, slice_key)


def zscore_to_reference(
    records: Sequence[BiomarkerRecord],
    reference: Mapping[Tuple[str, str], Tuple[float, float]],
) -> List[Dict]:
    """按 (structure, metric) 对照参考人群均值/标准差计算 z 分数；参考表缺失的记录跳过"""
    out = []
    missing = set()
    for record in records:
        key = (record.structure, record.metric)
        if key not in reference:
            missing.add(key)
            continue
        mean, sd = reference[key]
        if not sd > 0:
            raise DataError(f"参考标准差必须为正: {key} sd={sd}")
        row = record.to_row()
        row["zscore"] = (record.value - mean) / sd
        out.append(row)
    if missing:
        logger.warning(f"参考表中缺少以下生物标志物, 未计算 z 分数: {sorted(missing)}")
    return out
