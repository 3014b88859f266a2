"""
Errors - 统一异常层次

所有模块抛出的异常都继承自 MskQuantError，CLI 据此映射退出码：
ConfigError -> 2，DataError -> 3。警告类情况（如退化强度范围）只记录日志，不抛异常。
"""


class MskQuantError(Exception):
    """根异常"""
    exit_code = 1


class ConfigError(MskQuantError):
    """配置错误（schema 校验失败、未知键等）"""
    exit_code = 2


class DataError(MskQuantError, ValueError):
    """数据错误"""
    exit_code = 3


# ---- volume_core ----
class VolumeFormatError(DataError):
    """体数据文件格式错误"""


class BadMagic(VolumeFormatError):
    pass


class UnsupportedDatatype(VolumeFormatError):
    pass


class UnsupportedLayout(VolumeFormatError):
    """超出三维的非平凡维度（4D 时间序列不支持）"""


class TruncatedFile(VolumeFormatError):
    pass


class MalformedHeader(VolumeFormatError):
    pass


class PayloadLengthMismatch(VolumeFormatError):
    pass


class NonPositiveSpacing(DataError):
    pass


class AllZeroVolume(DataError):
    pass


class EmptyCohort(DataError):
    pass


class DuplicateSubject(DataError):
    pass


class UnknownLabel(DataError):
    pass


# ---- morphology / overlap_metrics / biomarkers ----
class DimMismatch(DataError):
    pass


class EmptyInput(DataError):
    pass


class EmptyMask(DataError):
    pass


class UnknownLabelClass(DataError):
    pass


# ---- agreement_stats ----
class TooFewSamples(DataError):
    pass


class ZeroVariance(DataError):
    pass


class IncompleteRows(DataError):
    pass


class AllZeroDifferences(DataError):
    pass


class DegenerateX(DataError):
    pass


class TooFewSubjects(DataError):
    pass


class SingularKernel(DataError):
    pass


class ConstantColumn(DataError):
    pass


# ---- clinical_models ----
class SingleClass(DataError):
    pass


class TooFewGroups(DataError):
    pass


class NoComparablePairs(DataError):
    pass


class DegenerateResamples(DataError):
    pass


class EmptyStageInput(DataError):
    pass


# ---- pipeline ----
class NoOverlappingKeys(DataError):
    pass


class NoAtRiskSubjects(DataError):
    pass


class SpecOutOfBounds(DataError):
    pass
