"""
Volume Core - 体数据核心

负责标签体/标量图的加载、校验与归一化，持有全部物理几何元数据，并完成受试者数据集划分。

数组约定：体素数组按 [x, y, z] 索引，磁盘上按 x 最快（Fortran 序）存储；
切片沿第三轴按存储顺序获取，不做仿射重定向。
"""

import io
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import jsonschema
import nibabel as nib
import numpy as np

from .errors import (
    AllZeroVolume, BadMagic, DataError, DuplicateSubject, EmptyCohort, MalformedHeader,
    NonPositiveSpacing, PayloadLengthMismatch, TruncatedFile, UnknownLabel,
    UnsupportedDatatype, UnsupportedLayout,
)

logger = logging.getLogger(__name__)

NIFTI_HEADER_SIZE = 348
NIFTI_MIN_FILE_SIZE = 352
NIFTI_VOX_OFFSET = 352
NIFTI_MAGIC = b"n+1\x00"

# NIfTI datatype code -> numpy 基础类型
NIFTI_DATATYPES = {
    2: np.uint8,
    4: np.int16,
    512: np.uint16,
    16: np.float32,
}

MVOL_MAGIC = b"MVOL"
MVOL_DTYPES = {
    "u8": np.dtype("<u1"),
    "i16": np.dtype("<i2"),
    "u16": np.dtype("<u2"),
    "f32": np.dtype("<f4"),
}

MVOL_HEADER_SCHEMA = {
    "type": "object",
    "properties": {
        "dims": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3, "maxItems": 3},
        "dtype": {"type": "string", "enum": sorted(MVOL_DTYPES)},
        "spacing": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        "kind": {"type": "string", "enum": ["labels", "scalar"]},
        "label_map": {"type": "object", "additionalProperties": {"type": "string"}},
    },
    "required": ["dims", "dtype", "spacing", "kind"],
}


@dataclass(frozen=True)
class VoxelGeometry:
    """体素几何（单位 mm）"""
    pixel_spacing_x: float
    pixel_spacing_y: float
    slice_thickness: float

    def __post_init__(self):
        for name in ("pixel_spacing_x", "pixel_spacing_y", "slice_thickness"):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value <= 0:
                raise NonPositiveSpacing(f"体素间距必须为正的有限值: {name}={value}")
            object.__setattr__(self, name, value)

    @property
    def spacing(self) -> Tuple[float, float, float]:
        return (self.pixel_spacing_x, self.pixel_spacing_y, self.slice_thickness)

    @property
    def in_plane(self) -> Tuple[float, float]:
        return (self.pixel_spacing_x, self.pixel_spacing_y)

    @property
    def voxel_volume_mm3(self) -> float:
        return self.pixel_spacing_x * self.pixel_spacing_y * self.slice_thickness


@dataclass(frozen=True)
class Mask2D:
    """单个标签在一个切片上的二值视图"""
    bits: np.ndarray
    spacing: Tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise DataError(f"Mask2D 需要二维数组, 实际维度: {bits.ndim}")
        sx, sy = (float(s) for s in self.spacing)
        if not (math.isfinite(sx) and math.isfinite(sy)) or sx <= 0 or sy <= 0:
            raise NonPositiveSpacing(f"像素间距必须为正: {self.spacing}")
        bits = bits.copy()
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "spacing", (sx, sy))

    @property
    def dims(self) -> Tuple[int, int]:
        return self.bits.shape

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def with_bits(self, bits: np.ndarray) -> "Mask2D":
        return Mask2D(bits, self.spacing)


@dataclass(frozen=True)
class LabeledVolume:
    """三维整数标签场（0 为背景）"""
    labels: np.ndarray
    geometry: VoxelGeometry
    label_map: Dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise DataError(f"LabeledVolume 需要三维数组, 实际维度: {labels.ndim}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise UnsupportedDatatype(f"标签体必须为整数类型: {labels.dtype}")
        label_map = {int(k): str(v) for k, v in (self.label_map or {}).items()}
        present = [int(c) for c in np.unique(labels) if c != 0]
        missing = [c for c in present if c not in label_map]
        if missing:
            raise UnknownLabel(f"标签编码未在 label_map 中定义: {missing}")
        labels = labels.copy()
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "label_map", label_map)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.labels.shape

    @property
    def n_slices(self) -> int:
        return self.labels.shape[2]

    def binary(self, code: int) -> np.ndarray:
        return self.labels == code

    def slice_labels(self, k: int) -> np.ndarray:
        return self.labels[:, :, k]

    def slice_mask(self, code: int, k: int) -> Mask2D:
        return Mask2D(self.labels[:, :, k] == code, self.geometry.in_plane)

    def code_for(self, name: str) -> int:
        for code, label_name in self.label_map.items():
            if label_name == name:
                return code
        raise UnknownLabel(f"未知结构名称: {name}")


@dataclass(frozen=True)
class ScalarVolume:
    """标量体（例如以 ms 为单位的弛豫时间图）；非有限值视为缺失"""
    values: np.ndarray
    geometry: VoxelGeometry
    unit: str = ""

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise DataError(f"ScalarVolume 需要三维数组, 实际维度: {values.ndim}")
        if not np.issubdtype(values.dtype, np.floating):
            values = values.astype(np.float32)
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.values.shape

    @property
    def missing(self) -> np.ndarray:
        return ~np.isfinite(self.values)

    def slice(self, k: int) -> np.ndarray:
        return self.values[:, :, k]


Volume = Union[LabeledVolume, ScalarVolume]


@dataclass
class AcquisitionMetadata:
    """采集参数，用于 VIF 共线性筛查"""
    echo_time_ms: Optional[float] = None
    repetition_time_ms: Optional[float] = None
    flip_angle_deg: Optional[float] = None
    field_strength_T: Optional[float] = None
    slice_thickness_mm: Optional[float] = None
    pixel_spacing_mm: Optional[float] = None
    image_row_size: Optional[int] = None
    acquisition_mode: str = "2D"
    vendor: str = ""
    sar: Optional[float] = None

    NUMERIC_FIELDS = (
        "echo_time_ms", "repetition_time_ms", "flip_angle_deg", "field_strength_T",
        "slice_thickness_mm", "pixel_spacing_mm", "image_row_size", "sar",
    )

    def __post_init__(self):
        for name in self.NUMERIC_FIELDS:
            value = getattr(self, name)
            if value is not None and float(value) < 0:
                raise DataError(f"采集参数不能为负: {name}={value}")
        if self.acquisition_mode not in ("2D", "3D"):
            raise DataError(f"acquisition_mode 只能为 2D 或 3D: {self.acquisition_mode}")

    @property
    def acquisition_mode_code(self) -> int:
        return 1 if self.acquisition_mode == "3D" else 0

    def to_feature_row(self, vendors: Sequence[str] = ()) -> Dict[str, float]:
        """转为数值特征行（厂商做 one-hot）"""
        row = {name: float(getattr(self, name)) if getattr(self, name) is not None else float("nan")
               for name in self.NUMERIC_FIELDS}
        row["acquisition_mode"] = float(self.acquisition_mode_code)
        for vendor in vendors:
            row[f"vendor_{vendor}"] = 1.0 if self.vendor == vendor else 0.0
        return row


@dataclass
class SubjectRecord:
    subject_id: str
    anatomy: str = ""
    sex: Optional[str] = None
    volumes: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.sex is not None and self.sex not in ("F", "M"):
            raise DataError(f"sex 只能为 F/M: {self.sex}")


class SplitResult(NamedTuple):
    train: List[SubjectRecord]
    val: List[SubjectRecord]
    test: List[SubjectRecord]


# ---------------------------------------------------------------------------
# NIfTI-1
# ---------------------------------------------------------------------------

def _detect_endianness(raw: bytes) -> str:
    """通过 dim[0] ∈ [1,7] 判断字节序"""
    little = int(np.frombuffer(raw, dtype="<i2", count=1, offset=40)[0])
    if 1 <= little <= 7:
        return "<"
    big = int(np.frombuffer(raw, dtype=">i2", count=1, offset=40)[0])
    if 1 <= big <= 7:
        return ">"
    raise MalformedHeader(f"dim[0] 无效（两种字节序下均不在 [1,7]）: {little}")


def load_nifti1(path: Union[str, Path], label_map: Optional[Mapping[int, str]] = None) -> Volume:
    """读取单文件 NIfTI-1（n+1）。整数类型返回 LabeledVolume，浮点返回 ScalarVolume。"""
    raw = Path(path).read_bytes()
    if len(raw) < NIFTI_MIN_FILE_SIZE:
        raise TruncatedFile(f"文件过短 ({len(raw)} 字节): {path}")
    if raw[344:348] != NIFTI_MAGIC:
        raise BadMagic(f"不支持的 NIfTI magic {raw[344:348]!r}: {path}")

    endian = _detect_endianness(raw)
    header = nib.Nifti1Header(binaryblock=raw[:NIFTI_HEADER_SIZE], endianness=endian, check=False)

    code = int(header["datatype"])
    if code not in NIFTI_DATATYPES:
        raise UnsupportedDatatype(f"不支持的 NIfTI datatype {code}: {path}")
    dtype = np.dtype(NIFTI_DATATYPES[code]).newbyteorder(endian)

    dim = [int(d) for d in header["dim"]]
    ndim = dim[0]
    if any(d > 1 for d in dim[4:ndim + 1]):
        raise UnsupportedLayout(f"不支持超过三维的数据: dim={dim[:ndim + 1]}")
    dims = tuple(dim[i] if i <= ndim else 1 for i in (1, 2, 3))
    if any(d < 1 for d in dims):
        raise MalformedHeader(f"维度无效: {dims}")

    pixdim = [float(p) for p in header["pixdim"]]
    spacing = [pixdim[i] if i <= ndim else 1.0 for i in (1, 2, 3)]
    geometry = VoxelGeometry(*spacing)

    offset = int(header["vox_offset"])
    if offset < NIFTI_MIN_FILE_SIZE:
        offset = NIFTI_VOX_OFFSET
    count = int(np.prod(dims))
    if len(raw) < offset + count * dtype.itemsize:
        raise TruncatedFile(f"体素数据不完整: 需要 {offset + count * dtype.itemsize} 字节, 实际 {len(raw)}")

    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = data.astype(dtype.newbyteorder("="), copy=True).reshape(dims, order="F")

    logger.debug(f"读取 NIfTI {path}: dims={dims} spacing={geometry.spacing} dtype={dtype}")
    if np.issubdtype(data.dtype, np.integer):
        return LabeledVolume(data, geometry, _resolve_label_map(data, label_map))
    return ScalarVolume(data, geometry, unit="ms")


def save_nifti1(volume: Volume, path: Union[str, Path]) -> None:
    """写出单文件 NIfTI-1，vox_offset 固定为 352"""
    data = _storage_array(volume)
    header = nib.Nifti1Header()
    header.set_data_dtype(data.dtype)
    header.set_data_shape(data.shape)
    header.set_zooms(volume.geometry.spacing)
    header.set_xyzt_units("mm")
    header["vox_offset"] = NIFTI_VOX_OFFSET
    payload = (
        header.binaryblock
        + b"\x00" * (NIFTI_VOX_OFFSET - NIFTI_HEADER_SIZE)
        + np.ascontiguousarray(data.astype(data.dtype.newbyteorder("<"))).tobytes(order="F")
    )
    atomic_write_bytes(Path(path), payload)


# ---------------------------------------------------------------------------
# MVOL
# ---------------------------------------------------------------------------

def load_mvol(path: Union[str, Path]) -> Volume:
    """读取 MVOL 容器：magic + uint32 头长 + JSON 头 + 小端体素负载"""
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MVOL_MAGIC:
        raise MalformedHeader(f"MVOL magic 错误: {path}")
    header_len = int(np.frombuffer(raw, dtype="<u4", count=1, offset=4)[0])
    if 8 + header_len > len(raw):
        raise MalformedHeader(f"MVOL 头长度越界: {header_len}")
    try:
        header = json.loads(raw[8:8 + header_len].decode("utf-8"))
        jsonschema.validate(instance=header, schema=MVOL_HEADER_SCHEMA)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedHeader(f"MVOL 头解析失败: {e}") from e
    except jsonschema.ValidationError as e:
        raise MalformedHeader(f"MVOL 头字段错误: {e.message}") from e

    dims = tuple(int(d) for d in header["dims"])
    dtype = MVOL_DTYPES[header["dtype"]]
    payload = raw[8 + header_len:]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise PayloadLengthMismatch(f"负载长度 {len(payload)} 与声明 {expected} 不符: {path}")

    geometry = VoxelGeometry(*header["spacing"])
    data = np.frombuffer(payload, dtype=dtype).astype(dtype.newbyteorder("="), copy=True).reshape(dims, order="F")

    if header["kind"] == "labels":
        if not np.issubdtype(data.dtype, np.integer):
            raise MalformedHeader("labels 类型的 MVOL 必须为整数 dtype")
        try:
            label_map = {int(k): v for k, v in header.get("label_map", {}).items()}
        except ValueError as e:
            raise MalformedHeader(f"label_map 键必须为整数: {e}") from e
        try:
            return LabeledVolume(data, geometry, label_map)
        except UnknownLabel as e:
            raise MalformedHeader(str(e)) from e
    return ScalarVolume(data, geometry, unit="ms")


def save_mvol(volume: Volume, path: Union[str, Path]) -> None:
    data = _storage_array(volume)
    dtype_key = next(k for k, v in MVOL_DTYPES.items() if v == data.dtype.newbyteorder("<"))
    header = {
        "dims": list(data.shape),
        "dtype": dtype_key,
        "spacing": list(volume.geometry.spacing),
        "kind": "labels" if isinstance(volume, LabeledVolume) else "scalar",
    }
    if isinstance(volume, LabeledVolume):
        header["label_map"] = {str(k): v for k, v in sorted(volume.label_map.items())}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = (
        MVOL_MAGIC
        + np.array([len(header_bytes)], dtype="<u4").tobytes()
        + header_bytes
        + np.ascontiguousarray(data.astype(data.dtype.newbyteorder("<"))).tobytes(order="F")
    )
    atomic_write_bytes(Path(path), payload)


def load_volume(path: Union[str, Path], label_map: Optional[Mapping[int, str]] = None) -> Volume:
    """按 magic 分派到 NIfTI 或 MVOL 读取器"""
    with open(path, "rb") as f:
        head = f.read(4)
    if head == MVOL_MAGIC:
        volume = load_mvol(path)
        if label_map and isinstance(volume, LabeledVolume):
            merged = dict(volume.label_map)
            merged.update({int(k): v for k, v in label_map.items()})
            volume = LabeledVolume(volume.labels, volume.geometry, merged)
        return volume
    return load_nifti1(path, label_map)


def save_volume(volume: Volume, path: Union[str, Path]) -> None:
    if str(path).endswith(".nii"):
        save_nifti1(volume, path)
    else:
        save_mvol(volume, path)


def _resolve_label_map(data: np.ndarray, label_map: Optional[Mapping[int, str]]) -> Dict[int, str]:
    resolved = {int(k): str(v) for k, v in (label_map or {}).items()}
    for code in np.unique(data):
        code = int(code)
        if code != 0 and code not in resolved:
            resolved[code] = f"label_{code}"
    return resolved


def _storage_array(volume: Volume) -> np.ndarray:
    """选择受支持的存储 dtype"""
    data = volume.labels if isinstance(volume, LabeledVolume) else volume.values
    if data.dtype.newbyteorder("<") in MVOL_DTYPES.values():
        return data
    if isinstance(volume, ScalarVolume):
        return data.astype(np.float32)
    lo, hi = (int(data.min()), int(data.max())) if data.size else (0, 0)
    for candidate in (np.uint8, np.uint16, np.int16):
        info = np.iinfo(candidate)
        if info.min <= lo and hi <= info.max:
            return data.astype(candidate)
    raise UnsupportedDatatype(f"标签取值超出可存储范围: [{lo}, {hi}]")


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# 强度归一化
# ---------------------------------------------------------------------------

def normalize_intensity(volume: ScalarVolume, low_pct: float = 1.0, high_pct: float = 99.0) -> ScalarVolume:
    """按非零体素的 1/99 百分位截断并线性映射到 0..255；零体素保持 0。

    百分位使用顺序统计量之间的线性插值（numpy 默认 'linear'）。
    p1 == p99 时输出全零并记录警告。
    """
    values = np.asarray(volume.values, dtype=np.float64)
    finite = np.isfinite(values)
    nonzero = finite & (values != 0)
    if not nonzero.any():
        raise AllZeroVolume("体数据中没有非零体素")

    p_lo, p_hi = np.percentile(values[nonzero], [low_pct, high_pct])
    out = np.where(finite, 0.0, np.nan)
    if p_hi <= p_lo:
        logger.warning(f"DegenerateRange: p{low_pct:g} == p{high_pct:g} == {p_lo:g}, 输出全零")
        return ScalarVolume(out, volume.geometry, unit="")

    clipped = np.clip(values[nonzero], p_lo, p_hi)
    out[nonzero] = (clipped - p_lo) / (p_hi - p_lo) * 255.0
    return ScalarVolume(out, volume.geometry, unit="")


# ---------------------------------------------------------------------------
# 数据集划分
# ---------------------------------------------------------------------------

DEFAULT_SPLIT_RATIOS = (0.70, 0.15, 0.15)
MIN_STRATUM_SIZE = 3


def _largest_remainder(n: int, ratios: Sequence[float]) -> List[int]:
    """最大余数法分配；余数相同时靠前的分区优先"""
    quotas = [n * r for r in ratios]
    counts = [int(math.floor(q + 1e-9)) for q in quotas]
    remaining = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:remaining]:
        counts[i] += 1
    return counts


def split_subjects(
    subjects: Sequence[SubjectRecord],
    ratios: Sequence[float] = DEFAULT_SPLIT_RATIOS,
    strata: Iterable[str] = ("anatomy", "sex"),
    seed: int = 0,
) -> SplitResult:
    """按分层键做 train/val/test 划分。

    每个分层内先用最大余数法确定各分区人数，再用种子固定的洗牌分配；
    少于 3 人的分层整体进入训练集并记录警告。
    """
    if not subjects:
        raise EmptyCohort("受试者列表为空")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DataError(f"划分比例必须为三个非负数且和为 1: {ratios}")
    ids = [s.subject_id for s in subjects]
    if len(set(ids)) != len(ids):
        raise DuplicateSubject("subject_id 在数据集中重复")

    strata = tuple(strata)
    groups: Dict[Tuple[str, ...], List[SubjectRecord]] = {}
    for subject in subjects:
        key = tuple(str(getattr(subject, k, "")) for k in strata)
        groups.setdefault(key, []).append(subject)

    rng = np.random.default_rng(seed)
    parts: Tuple[List[SubjectRecord], List[SubjectRecord], List[SubjectRecord]] = ([], [], [])
    for key in sorted(groups):
        members = sorted(groups[key], key=lambda s: s.subject_id)
        if len(members) < MIN_STRATUM_SIZE:
            logger.warning(f"StratumTooSmall: 分层 {key} 仅 {len(members)} 人, 全部划入训练集")
            parts[0].extend(members)
            continue
        counts = _largest_remainder(len(members), ratios)
        order = rng.permutation(len(members))
        start = 0
        for part, count in zip(parts, counts):
            part.extend(members[i] for i in order[start:start + count])
            start += count

    return SplitResult(*(sorted(p, key=lambda s: s.subject_id) for p in parts))
