"""
Phantoms - 解析体模

生成几何已知的标签体与标量图，用于校验生物标志物与形态学结果。
像素纳入规则：像素中心落在形状内（半开区间），坐标以像素中心为原点。
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np

from .errors import DataError, SpecOutOfBounds
from .volume_core import LabeledVolume, ScalarVolume, VoxelGeometry

logger = logging.getLogger(__name__)

PHANTOM_KINDS = ("annulus", "sphere", "rect_disc", "rotated_disc", "uniform_map")
DEFAULT_LABELS = {
    "annulus": "cartilage",
    "sphere": "tissue",
    "rect_disc": "disc",
    "rotated_disc": "disc",
    "uniform_map": "cartilage",
}


@dataclass(frozen=True)
class PhantomSpec:
    name: str
    kind: str
    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    params: Dict[str, float] = field(default_factory=dict)
    label: Optional[str] = None

    def __post_init__(self):
        if self.kind not in PHANTOM_KINDS:
            raise DataError(f"未知体模类型: {self.kind}")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise DataError(f"体模尺寸无效: {self.dims}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def geometry(self) -> VoxelGeometry:
        return VoxelGeometry(*self.spacing)

    @property
    def structure(self) -> str:
        return self.label or DEFAULT_LABELS[self.kind]

    def param(self, key: str, default: Optional[float] = None) -> float:
        if key in self.params and self.params[key] is not None:
            return float(self.params[key])
        if default is None:
            raise DataError(f"体模 {self.name} 缺少参数: {key}")
        return float(default)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PhantomSpec":
        reserved = {"name", "kind", "dims", "spacing", "label"}
        return cls(
            name=str(data["name"]),
            kind=str(data["kind"]),
            dims=tuple(data["dims"]),
            spacing=tuple(data["spacing"]),
            params={k: v for k, v in data.items() if k not in reserved},
            label=data.get("label"),
        )


@dataclass
class Phantom:
    spec: PhantomSpec
    labels: LabeledVolume
    maps: Dict[str, ScalarVolume]
    truth: Dict[str, Any]


def _centers(n: int) -> Tuple[np.ndarray, float]:
    """像素中心坐标与体模中心"""
    return np.arange(n, dtype=np.float64), (n - 1) / 2.0


def _require_isotropic(spec: PhantomSpec) -> float:
    sx, sy, _ = spec.spacing
    if not math.isclose(sx, sy, rel_tol=1e-12):
        raise DataError(f"体模 {spec.name} 需要各向同性的平面内间距: {sx} vs {sy}")
    return sx


def _check_inside(spec: PhantomSpec, extent_x: float, extent_y: float, extent_z: float = 0.0) -> None:
    """形状在各轴上距中心的最大半径不得超出图像边界（像素单位）"""
    for n, extent, axis in zip(spec.dims, (extent_x, extent_y, extent_z), "xyz"):
        if extent > n / 2.0 + 1e-9:
            raise SpecOutOfBounds(f"体模 {spec.name} 在 {axis} 轴超出图像范围: 半径 {extent} > {n / 2.0}")


def _planar_grid(spec: PhantomSpec) -> Tuple[np.ndarray, np.ndarray]:
    xs, cx = _centers(spec.dims[0])
    ys, cy = _centers(spec.dims[1])
    dx, dy = np.meshgrid(xs - cx, ys - cy, indexing="ij")
    return dx, dy


def _stack(plane: np.ndarray, nz: int) -> np.ndarray:
    return np.repeat(plane[:, :, None], nz, axis=2)


def _annulus(spec: PhantomSpec) -> Tuple[np.ndarray, Dict[str, Any]]:
    r_in, r_out = spec.param("r_in"), spec.param("r_out")
    if r_in < 0 or r_out <= r_in:
        raise DataError(f"环形体模半径无效: r_in={r_in}, r_out={r_out}")
    s = _require_isotropic(spec)
    _check_inside(spec, r_out, r_out)
    dx, dy = _planar_grid(spec)
    radius = np.hypot(dx, dy)
    plane = (radius >= r_in) & (radius < r_out)
    truth = {
        "thickness_half_width_mm": (r_out - r_in) * s / 2.0,
        "thickness_full_width_mm": (r_out - r_in) * s,
        "area_mm2": math.pi * (r_out ** 2 - r_in ** 2) * s * s,
    }
    return _stack(plane, spec.dims[2]), truth


def _sphere(spec: PhantomSpec) -> Tuple[np.ndarray, Dict[str, Any]]:
    radius = spec.param("radius_mm")
    if radius <= 0:
        raise DataError(f"球体半径必须为正: {radius}")
    sx, sy, sz = spec.spacing
    _check_inside(spec, radius / sx, radius / sy, radius / sz)
    axes = []
    for n, s in zip(spec.dims, spec.spacing):
        centers, c = _centers(n)
        axes.append((centers - c) * s)
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    mask = gx ** 2 + gy ** 2 + gz ** 2 < radius ** 2
    truth = {"volume_cm3": 4.0 / 3.0 * math.pi * radius ** 3 / 1000.0, "radius_mm": radius}
    return mask, truth


def _disc(spec: PhantomSpec, angle_deg: float) -> Tuple[np.ndarray, Dict[str, Any]]:
    width, height = spec.param("width_px"), spec.param("height_px")
    if width <= 0 or height <= 0:
        raise DataError(f"椎间盘体模边长必须为正: {width}×{height}")
    theta = math.radians(angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    # 长边沿旋转后的 x 方向，高度沿旋转后的 y 方向
    half_w, half_h = width / 2.0, height / 2.0
    _check_inside(spec, abs(half_w * c) + abs(half_h * s), abs(half_w * s) + abs(half_h * c))
    dx, dy = _planar_grid(spec)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    plane = (u >= -half_w) & (u < half_w) & (v >= -half_h) & (v < half_h)
    sx, sy, _ = spec.spacing
    if angle_deg % 180 == 0:
        height_mm, width_mm = height * sy, width * sx
    else:
        pitch = _require_isotropic(spec)
        height_mm, width_mm = height * pitch, width * pitch
    truth = {"height_mm": height_mm, "width_mm": width_mm, "angle_deg": angle_deg}
    return _stack(plane, spec.dims[2]), truth


def _uniform_region(spec: PhantomSpec) -> Tuple[np.ndarray, Dict[str, Any]]:
    side = spec.param("region_px", min(spec.dims[0], spec.dims[1]) // 2)
    if side <= 0:
        raise DataError(f"区域边长必须为正: {side}")
    _check_inside(spec, side / 2.0, side / 2.0)
    value = spec.param("value_ms")
    if not 0.0 <= value:
        raise DataError(f"弛豫时间不能为负: {value}")
    dx, dy = _planar_grid(spec)
    half = side / 2.0
    plane = (dx >= -half) & (dx < half) & (dy >= -half) & (dy < half)
    return _stack(plane, spec.dims[2]), {"mean_ms": value}


def rasterize(spec: PhantomSpec) -> Phantom:
    """按规格栅格化体模并给出解析真值"""
    if spec.kind == "annulus":
        mask, truth = _annulus(spec)
    elif spec.kind == "sphere":
        mask, truth = _sphere(spec)
    elif spec.kind == "rect_disc":
        mask, truth = _disc(spec, 0.0)
    elif spec.kind == "rotated_disc":
        mask, truth = _disc(spec, spec.param("angle_deg"))
    else:
        mask, truth = _uniform_region(spec)

    if not mask.any():
        raise SpecOutOfBounds(f"体模 {spec.name} 栅格化后为空")
    geometry = spec.geometry
    labels = LabeledVolume(mask.astype(np.uint8), geometry, {1: spec.structure})
    maps: Dict[str, ScalarVolume] = {}
    if spec.kind == "uniform_map":
        values = np.full(spec.dims, truth["mean_ms"], dtype=np.float32)
        maps["t2_ms"] = ScalarVolume(values, geometry, "ms")

    truth.update({
        "name": spec.name, "kind": spec.kind, "structure": spec.structure,
        "dims": list(spec.dims), "spacing": list(spec.spacing),
        "voxel_count": int(np.count_nonzero(mask)),
    })
    logger.debug(f"体模 {spec.name}: {truth['voxel_count']} 个前景体素")
    return Phantom(spec=spec, labels=labels, maps=maps, truth=truth)
