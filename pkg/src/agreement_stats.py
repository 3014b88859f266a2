"""
Agreement Statistics - 一致性统计检验集
人工测量与自动测量的一致性分析

功能特性：
- 分布门控：Shapiro-Wilk 正态性检验 + 以中位数为中心的 Levene 方差齐性检验
- 秩检验：Friedman、Wilcoxon 符号秩 / 秩和检验，Benjamini-Hochberg FDR 校正
- ICC：参数 ICC(3,1) 与基于 bootstrap 的非参数方差分解 ICC
- Bland-Altman：参数 ±1.96 SD 与百分位两种一致性界限
- 回归：线性回归与 RBF + White 核的高斯过程回归（网格搜索超参数）
- Spearman 秩相关与 VIF 共线性筛查
"""

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from itertools import combinations, permutations
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats
from sklearn.gaussian_process import GaussianProcessRegressor
from sklearn.gaussian_process.kernels import RBF, ConstantKernel, WhiteKernel
from sklearn.linear_model import LinearRegression

from .errors import (
    AllZeroDifferences, ConstantColumn, DataError, DegenerateX, IncompleteRows, SingularKernel,
    TooFewSamples, TooFewSubjects, ZeroVariance,
)

logger = logging.getLogger(__name__)

DEFAULT_N_BOOT = 10000
LOA_Z = 1.96
ICC_F_CAP = 1e15
VIF_THRESHOLD = 10.0
WILCOXON_EXACT_MAX_N = 25
RANK_SUM_EXACT_MAX_CELLS = 400
SPEARMAN_EXACT_MAX_N = 9
FRIEDMAN_EXACT_MAX_PERMUTATIONS = 10 ** 7
BOOT_CHUNK = 1000
GPR_JITTERS = (1e-10, 1e-8, 1e-6)
ICC_NOTE = (
    "Parametric path reports ICC(3,1) (two-way mixed, consistency); "
    "the two-way random ICC(2,1) absolute-agreement form is not computed."
)


# ---------------------------------------------------------------------------
# 数据类型
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairedSample:
    subject_id: str
    manual: float
    automated: float

    def __post_init__(self):
        if not (math.isfinite(self.manual) and math.isfinite(self.automated)):
            raise DataError(f"配对样本必须为有限值: {self.subject_id}")


@dataclass
class TestResult:
    __test__ = False

    name: str
    statistic: float
    p_value: float
    ci: Optional[Tuple[float, float]] = None
    df: Optional[Union[float, Tuple[float, float]]] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.p_value = float(min(1.0, max(0.0, self.p_value)))

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class IccResult:
    icc: float
    method: str
    var_between: float
    var_residual: float
    ci95: Tuple[float, float]
    n_boot: int = 0
    point_estimate: Optional[float] = None
    f_statistic: Optional[float] = None
    df: Optional[Tuple[int, int]] = None
    p_value: Optional[float] = None
    degenerate: bool = False

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class BlandAltmanResult:
    bias: float
    loa: Tuple[float, float]
    method: str
    ci_bias: Optional[Tuple[float, float]] = None
    ci_loa_lo: Optional[Tuple[float, float]] = None
    ci_loa_hi: Optional[Tuple[float, float]] = None
    n_boot: int = 0
    means: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    differences: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    def to_dict(self) -> Dict:
        return {
            "bias": self.bias, "loa": list(self.loa), "method": self.method,
            "ci_bias": None if self.ci_bias is None else list(self.ci_bias),
            "ci_loa_lo": None if self.ci_loa_lo is None else list(self.ci_loa_lo),
            "ci_loa_hi": None if self.ci_loa_hi is None else list(self.ci_loa_hi),
            "n_boot": self.n_boot,
        }


@dataclass
class RegressionResult:
    slope: float
    intercept: float
    r: float
    r2: float
    p_value: float
    stderr: float
    intercept_stderr: float

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class GprModel:
    length_scale: float
    noise_level: float
    signal_variance: float
    x_train: np.ndarray
    y_train: np.ndarray
    y_mean: float
    y_scale: float
    jitter: float
    log_marginal_likelihood: float
    regressor: GaussianProcessRegressor = field(repr=False)

    def to_dict(self) -> Dict:
        return {
            "length_scale": self.length_scale, "noise_level": self.noise_level,
            "signal_variance": self.signal_variance, "y_mean": self.y_mean, "y_scale": self.y_scale,
            "jitter": self.jitter, "log_marginal_likelihood": self.log_marginal_likelihood,
            "n_train": int(self.x_train.size),
        }


@dataclass
class GprPrediction:
    x: np.ndarray
    y_pred: np.ndarray
    y_std: np.ndarray

    @property
    def ci95(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.y_pred - LOA_Z * self.y_std, self.y_pred + LOA_Z * self.y_std


@dataclass
class VifReport:
    vif: Dict[str, float]
    flagged: List[str]

    def to_dict(self) -> Dict:
        return asdict(self)


def make_rng(seed: Optional[int]) -> np.random.Generator:
    """可移植的 PCG64 随机数流"""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def _bootstrap_indices(rng: np.random.Generator, n_boot: int, n: int):
    """按迭代顺序分块生成 (n_boot, n) 的重采样下标"""
    done = 0
    while done < n_boot:
        size = min(BOOT_CHUNK, n_boot - done)
        yield rng.integers(0, n, size=(size, n))
        done += size


def _as_array(values: Sequence[float], name: str = "x") -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).ravel()
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} 包含非有限值")
    return arr


def _pairs_matrix(pairs: Sequence[PairedSample]) -> np.ndarray:
    ids = [p.subject_id for p in pairs]
    if len(set(ids)) != len(ids):
        raise DataError("配对样本中存在重复的受试者")
    return np.array([[p.manual, p.automated] for p in pairs], dtype=np.float64).reshape(-1, 2)


# ---------------------------------------------------------------------------
# 分布门控
# ---------------------------------------------------------------------------

def shapiro_wilk(x: Sequence[float]) -> TestResult:
    """Shapiro-Wilk 正态性检验"""
    arr = _as_array(x)
    if arr.size < 3:
        raise TooFewSamples(f"Shapiro-Wilk 至少需要 3 个样本, 实际 {arr.size}")
    if arr.size > 5000:
        raise DataError(f"Shapiro-Wilk 最多支持 5000 个样本, 实际 {arr.size}")
    if np.ptp(arr) == 0:
        raise ZeroVariance("样本方差为零")
    w, p = stats.shapiro(arr)
    return TestResult("shapiro_wilk", float(w), float(p))


def levene_median(x: Sequence[float], y: Sequence[float]) -> TestResult:
    """Brown-Forsythe 检验（以组中位数为中心）"""
    a, b = _as_array(x, "x"), _as_array(y, "y")
    if a.size < 2 or b.size < 2:
        raise TooFewSamples("Levene 检验每组至少需要 2 个样本")
    f_stat, p = stats.levene(a, b, center="median")
    if not math.isfinite(f_stat):
        f_stat, p = 0.0, 1.0
    return TestResult("levene_median", float(f_stat), float(p), df=(1, a.size + b.size - 2))


# ---------------------------------------------------------------------------
# 秩检验
# ---------------------------------------------------------------------------

def _friedman_exact_p(ranks2: np.ndarray, observed_ss: int) -> float:
    """逐行独立置换秩向量时，列秩和平方和 >= 观测值的精确概率（秩已乘 2 取整）"""
    distribution: Dict[Tuple[int, ...], int] = {tuple([0] * ranks2.shape[1]): 1}
    for row in ranks2:
        perms = list(permutations(row.tolist()))
        updated: Dict[Tuple[int, ...], int] = {}
        for sums, count in distribution.items():
            for perm in perms:
                key = tuple(s + r for s, r in zip(sums, perm))
                updated[key] = updated.get(key, 0) + count
        distribution = updated
    total = sum(distribution.values())
    hits = sum(count for sums, count in distribution.items() if sum(s * s for s in sums) >= observed_ss)
    return hits / total


def friedman(data: Union[np.ndarray, Sequence[Sequence[float]]], exact: Union[bool, str] = False) -> TestResult:
    """Friedman 检验：行内中秩 + 结校正的 χ² 统计量，p 值取自由度 k-1 的 χ² 分布。

    exact=True（或 "auto" 且 (k!)^n 不超过 1e7）时另外计算精确置换 p 值，
    记录在 extra["p_exact"]，不替换 p_value。
    """
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"Friedman 需要 n×k 矩阵: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise IncompleteRows("存在缺失值的行")
    n, k = arr.shape
    if n < 2 or k < 2:
        raise TooFewSamples(f"Friedman 需要 n >= 2 且 k >= 2, 实际 n={n}, k={k}")

    ranks = stats.rankdata(arr, axis=1)
    rank_sums = ranks.sum(axis=0)
    ties = 0.0
    for row in arr:
        _, counts = np.unique(row, return_counts=True)
        ties += float(np.sum(counts ** 3 - counts))
    correction = 1.0 - ties / (n * k * (k * k - 1))
    if correction <= 1e-12:
        return TestResult("friedman", 0.0, 1.0, df=k - 1, extra={"p_exact": 1.0} if exact else {})

    chi2 = (12.0 / (n * k * (k + 1)) * float(np.sum(rank_sums ** 2)) - 3.0 * n * (k + 1)) / correction
    chi2 = max(0.0, chi2)
    p_value = float(stats.chi2.sf(chi2, k - 1))

    extra: Dict[str, float] = {}
    use_exact = exact is True or (exact == "auto" and math.factorial(k) ** n <= FRIEDMAN_EXACT_MAX_PERMUTATIONS)
    if use_exact:
        ranks2 = np.rint(ranks * 2).astype(np.int64)
        observed = int(np.sum(ranks2.sum(axis=0) ** 2))
        extra["p_exact"] = _friedman_exact_p(ranks2, observed)
    return TestResult("friedman", chi2, p_value, df=k - 1, extra=extra)


def _signed_rank_exact_p(doubled_ranks: np.ndarray, t_plus2: int) -> float:
    """符号秩统计量（两倍秩）在零假设下的精确分布，双侧 p = 2·min(尾概率)"""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for w in doubled_ranks.tolist():
        shifted = np.zeros_like(counts)
        shifted[w:] = counts[:total + 1 - w]
        counts = counts + shifted
    n_patterns = float(2 ** doubled_ranks.size)
    lower = counts[:t_plus2 + 1].sum() / n_patterns
    upper = counts[t_plus2:].sum() / n_patterns
    return min(1.0, 2.0 * min(lower, upper))


def wilcoxon_signed_rank(x: Sequence[float], y: Optional[Sequence[float]] = None) -> TestResult:
    """Wilcoxon 符号秩检验；零差值剔除，n <= 25 精确分布，否则带连续性校正的正态近似"""
    d = _as_array(x, "x")
    if y is not None:
        other = _as_array(y, "y")
        if other.size != d.size:
            raise DataError("配对样本长度不一致")
        d = d - other
    d = d[d != 0]
    if d.size == 0:
        raise AllZeroDifferences("全部差值为零")

    ranks = stats.rankdata(np.abs(d))
    t_plus = float(ranks[d > 0].sum())
    n = int(d.size)
    if n <= WILCOXON_EXACT_MAX_N:
        doubled = np.rint(ranks * 2).astype(np.int64)
        p_value = _signed_rank_exact_p(doubled, int(round(t_plus * 2)))
        method = "exact"
    else:
        _, tie_counts = np.unique(ranks, return_counts=True)
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
        z = max(0.0, abs(t_plus - mean) - 0.5) / math.sqrt(var)
        p_value = float(2.0 * stats.norm.sf(z))
        method = "approx"
    return TestResult("wilcoxon_signed_rank", t_plus, p_value, extra={"n": n, "method": method})


def wilcoxon_rank_sum(x: Sequence[float], y: Sequence[float]) -> TestResult:
    """Wilcoxon 秩和（Mann-Whitney U）检验"""
    a, b = _as_array(x, "x"), _as_array(y, "y")
    if a.size == 0 or b.size == 0:
        raise TooFewSamples("秩和检验两组都必须非空")
    has_ties = np.unique(np.concatenate([a, b])).size < a.size + b.size
    method = "exact" if a.size * b.size <= RANK_SUM_EXACT_MAX_CELLS and not has_ties else "asymptotic"
    result = stats.mannwhitneyu(a, b, alternative="two-sided", use_continuity=True, method=method)
    return TestResult("wilcoxon_rank_sum", float(result.statistic), float(result.pvalue),
                      extra={"n1": int(a.size), "n2": int(b.size), "method": method})


def bh_fdr(pvals: Sequence[float]) -> np.ndarray:
    """Benjamini-Hochberg 阶梯式校正，输出顺序与输入一致"""
    p = np.asarray(pvals, dtype=np.float64).ravel()
    if p.size == 0:
        return p.copy()
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise DataError("p 值必须位于 [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    ranked = p[order] * m / np.arange(1, m + 1)
    ranked = np.minimum.accumulate(ranked[::-1])[::-1]
    adjusted = np.empty(m)
    adjusted[order] = np.minimum(ranked, 1.0)
    return adjusted


def spearman(x: Sequence[float], y: Sequence[float]) -> TestResult:
    """中秩 Spearman ρ；n <= 9 用全置换精确 p 值，否则 t 近似"""
    a, b = _as_array(x, "x"), _as_array(y, "y")
    if a.size != b.size:
        raise DataError("x 与 y 长度不一致")
    if a.size < 3:
        raise TooFewSamples("Spearman 至少需要 3 对样本")
    ra, rb = stats.rankdata(a), stats.rankdata(b)
    if np.ptp(ra) == 0 or np.ptp(rb) == 0:
        raise ZeroVariance("秩方差为零")

    def rank_pearson(u, v, axis=-1):
        u = u - u.mean(axis=axis, keepdims=True)
        v = v - v.mean(axis=axis, keepdims=True)
        return (u * v).sum(axis=axis) / np.sqrt((u * u).sum(axis=axis) * (v * v).sum(axis=axis))

    rho = float(np.clip(rank_pearson(ra, rb), -1.0, 1.0))
    if a.size <= SPEARMAN_EXACT_MAX_N:
        result = stats.permutation_test(
            (ra, rb), rank_pearson, permutation_type="pairings",
            vectorized=True, n_resamples=np.inf, alternative="two-sided",
        )
        return TestResult("spearman", rho, float(result.pvalue), extra={"method": "exact", "n": int(a.size)})
    p_value = float(stats.spearmanr(a, b).pvalue)
    return TestResult("spearman", rho, p_value, df=a.size - 2, extra={"method": "t", "n": int(a.size)})


# ---------------------------------------------------------------------------
# 回归
# ---------------------------------------------------------------------------

def linear_regression(x: Sequence[float], y: Sequence[float]) -> RegressionResult:
    a, b = _as_array(x, "x"), _as_array(y, "y")
    if a.size != b.size:
        raise DataError("x 与 y 长度不一致")
    if a.size < 3:
        raise TooFewSamples("线性回归至少需要 3 个点")
    if np.ptp(a) == 0:
        raise DegenerateX("x 方差为零")
    fit = stats.linregress(a, b)
    r = float(fit.rvalue) if math.isfinite(fit.rvalue) else 0.0
    p_value = float(fit.pvalue) if math.isfinite(fit.pvalue) else 1.0
    return RegressionResult(
        slope=float(fit.slope), intercept=float(fit.intercept), r=r, r2=r * r,
        p_value=p_value, stderr=float(fit.stderr), intercept_stderr=float(fit.intercept_stderr),
    )


def _gpr_kernel(signal: float, length: float, noise: float):
    bounds = (1e-12, 1e12)
    return (ConstantKernel(signal, constant_value_bounds=bounds) * RBF(length, length_scale_bounds=bounds)
            + WhiteKernel(noise, noise_level_bounds=bounds))


def gpr_fit(
    x: Sequence[float],
    y: Sequence[float],
    length_grid: Optional[Sequence[float]] = None,
    noise_grid: Optional[Sequence[float]] = None,
    signal_grid: Optional[Sequence[float]] = None,
) -> GprModel:
    """RBF + White 核高斯过程回归，超参数在对数网格上最大化对数边际似然。

    网格在标准化后的 y 上定义：length 覆盖 x 跨度的 1/100 到 10 倍（20 点），
    noise 1e-6..1（20 点），signal 1e-2..10（10 点）。
    """
    xs, ys = _as_array(x, "x"), _as_array(y, "y")
    if xs.size != ys.size:
        raise DataError("x 与 y 长度不一致")
    if xs.size < 3:
        raise TooFewSamples("GPR 至少需要 3 个点")
    span = float(np.ptp(xs))
    if span == 0:
        raise DegenerateX("x 方差为零")

    lengths = np.asarray(length_grid if length_grid is not None else np.logspace(np.log10(span / 100), np.log10(span * 10), 20))
    noises = np.asarray(noise_grid if noise_grid is not None else np.logspace(-6, 0, 20))
    signals = np.asarray(signal_grid if signal_grid is not None else np.logspace(-2, 1, 10))
    if min(lengths.min(), noises.min(), signals.min()) <= 0:
        raise DataError("GPR 网格取值必须为正")

    X = xs.reshape(-1, 1)
    last_error: Optional[Exception] = None
    for jitter in GPR_JITTERS:
        try:
            base = GaussianProcessRegressor(
                kernel=_gpr_kernel(float(signals[0]), float(lengths[0]), float(noises[0])),
                alpha=jitter, normalize_y=True, optimizer=None,
            ).fit(X, ys)
            best_theta, best_lml = None, -np.inf
            for signal in signals:
                for length in lengths:
                    for noise in noises:
                        theta = np.log([signal, length, noise])
                        lml = base.log_marginal_likelihood(theta)
                        if math.isfinite(lml) and lml > best_lml:
                            best_theta, best_lml = theta, float(lml)
            if best_theta is None:
                raise np.linalg.LinAlgError("网格上所有核矩阵均不可分解")
            signal, length, noise = np.exp(best_theta)
            regressor = GaussianProcessRegressor(
                kernel=_gpr_kernel(signal, length, noise), alpha=jitter, normalize_y=True, optimizer=None,
            ).fit(X, ys)
        except (np.linalg.LinAlgError, ValueError) as e:
            logger.debug(f"GPR jitter={jitter:g} 失败: {e}")
            last_error = e
            continue
        y_scale = float(np.std(ys)) or 1.0
        return GprModel(
            length_scale=float(length), noise_level=float(noise) * y_scale ** 2,
            signal_variance=float(signal) * y_scale ** 2, x_train=xs, y_train=ys,
            y_mean=float(np.mean(ys)), y_scale=y_scale, jitter=jitter,
            log_marginal_likelihood=best_lml, regressor=regressor,
        )
    raise SingularKernel(f"核矩阵在 jitter 升至 {GPR_JITTERS[-1]:g} 后仍奇异: {last_error}")


def gpr_predict(model: GprModel, x_star: Sequence[float]) -> GprPrediction:
    xq = np.asarray(x_star, dtype=np.float64).ravel()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        y_pred, y_std = model.regressor.predict(xq.reshape(-1, 1), return_std=True)
    return GprPrediction(x=xq, y_pred=np.asarray(y_pred, dtype=np.float64), y_std=np.maximum(y_std, 0.0))


def gpr_curve(model: GprModel, n_points: int = 100) -> GprPrediction:
    """训练 x 范围内的等距预测曲线（绘图用）"""
    grid = np.linspace(model.x_train.min(), model.x_train.max(), n_points)
    return gpr_predict(model, grid)


# ---------------------------------------------------------------------------
# ICC
# ---------------------------------------------------------------------------

def icc3_parametric(pairs: Sequence[PairedSample]) -> IccResult:
    """ICC(3,1)：双因素混合效应、一致性、单次测量"""
    Y = _pairs_matrix(pairs)
    n, k = Y.shape
    if n < 5:
        raise TooFewSubjects(f"ICC 至少需要 5 个受试者, 实际 {n}")

    grand = Y.mean()
    ss_rows = k * float(np.sum((Y.mean(axis=1) - grand) ** 2))
    ss_cols = n * float(np.sum((Y.mean(axis=0) - grand) ** 2))
    ss_total = float(np.sum((Y - grand) ** 2))
    ss_err = max(0.0, ss_total - ss_rows - ss_cols)
    df1, df2 = n - 1, (n - 1) * (k - 1)
    ms_r, ms_e = ss_rows / df1, ss_err / df2
    if ms_r <= 0 and ms_e <= 0:
        raise ZeroVariance("受试者间与残差方差均为零")

    if ms_e <= 1e-12 * max(ms_r, np.finfo(float).tiny):
        logger.info("ICC3: 残差均方为零, F 统计量截断")
        return IccResult(
            icc=1.0, method="parametric_icc3", var_between=ms_r / k, var_residual=0.0,
            ci95=(1.0, 1.0), f_statistic=ICC_F_CAP, df=(df1, df2), p_value=0.0, degenerate=True,
        )

    icc = (ms_r - ms_e) / (ms_r + (k - 1) * ms_e)
    f_stat = ms_r / ms_e
    p_value = float(stats.f.sf(f_stat, df1, df2))
    f_lo = f_stat / stats.f.ppf(0.975, df1, df2)
    f_hi = f_stat * stats.f.ppf(0.975, df2, df1)
    ci = ((f_lo - 1) / (f_lo + k - 1), (f_hi - 1) / (f_hi + k - 1))
    return IccResult(
        icc=float(icc), method="parametric_icc3", var_between=max(0.0, (ms_r - ms_e) / k),
        var_residual=ms_e, ci95=(float(ci[0]), float(ci[1])), f_statistic=float(f_stat),
        df=(df1, df2), p_value=p_value,
    )


def _oneway_icc(Y: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """单因素随机效应方差分解；Y 形如 (..., n, k)，0/0 视为完全一致"""
    n, k = Y.shape[-2], Y.shape[-1]
    row_means = Y.mean(axis=-1)
    grand = row_means.mean(axis=-1, keepdims=True)
    ms_b = k * np.sum((row_means - grand) ** 2, axis=-1) / (n - 1)
    ms_w = np.sum((Y - row_means[..., None]) ** 2, axis=(-2, -1)) / (n * (k - 1))
    var_b = np.maximum(0.0, (ms_b - ms_w) / k)
    total = var_b + ms_w
    with np.errstate(invalid="ignore", divide="ignore"):
        icc = np.where(total > 0, var_b / np.where(total > 0, total, 1.0), 1.0)
    return icc, var_b, ms_w


def icc_nonparametric(pairs: Sequence[PairedSample], n_boot: int = DEFAULT_N_BOOT, seed: Optional[int] = 0) -> IccResult:
    """方差分解 ICC，受试者成对重采样；报告 bootstrap 中位数与百分位 95% CI"""
    Y = _pairs_matrix(pairs)
    n = Y.shape[0]
    if n < 5:
        raise TooFewSubjects(f"ICC 至少需要 5 个受试者, 实际 {n}")
    if n_boot < 1:
        raise DataError(f"n_boot 必须 >= 1: {n_boot}")

    point, var_b, var_w = _oneway_icc(Y)
    rng = make_rng(seed)
    boot = np.concatenate([_oneway_icc(Y[idx])[0] for idx in _bootstrap_indices(rng, n_boot, n)])
    lo, hi = np.percentile(boot, [2.5, 97.5])
    return IccResult(
        icc=float(np.median(boot)), method="nonparametric_bootstrap",
        var_between=float(var_b), var_residual=float(var_w), ci95=(float(lo), float(hi)),
        n_boot=int(n_boot), point_estimate=float(point),
    )


# ---------------------------------------------------------------------------
# Bland-Altman
# ---------------------------------------------------------------------------

def bland_altman(
    pairs: Sequence[PairedSample],
    method: str = "parametric",
    n_boot: int = DEFAULT_N_BOOT,
    seed: Optional[int] = 0,
) -> BlandAltmanResult:
    """差值 = 自动 - 人工。参数法：均值 ± 1.96·SD（ddof=1），CI 为解析式；
    百分位法：中位数与 2.5/97.5 百分位（线性插值），CI 为 bootstrap 百分位区间。"""
    Y = _pairs_matrix(pairs)
    n = Y.shape[0]
    if n < 3:
        raise TooFewSamples(f"Bland-Altman 至少需要 3 对样本, 实际 {n}")
    diffs = Y[:, 1] - Y[:, 0]
    means = Y.mean(axis=1)

    if method == "parametric":
        bias = float(np.mean(diffs))
        sd = float(np.std(diffs, ddof=1))
        loa = (bias - LOA_Z * sd, bias + LOA_Z * sd)
        t = float(stats.t.ppf(0.975, n - 1))
        se_bias = sd / math.sqrt(n)
        se_loa = sd * math.sqrt(1.0 / n + LOA_Z ** 2 / (2.0 * (n - 1)))
        return BlandAltmanResult(
            bias=bias, loa=loa, method=method,
            ci_bias=(bias - t * se_bias, bias + t * se_bias),
            ci_loa_lo=(loa[0] - t * se_loa, loa[0] + t * se_loa),
            ci_loa_hi=(loa[1] - t * se_loa, loa[1] + t * se_loa),
            means=means, differences=diffs,
        )
    if method != "percentile":
        raise DataError(f"未知 Bland-Altman 方法: {method}")

    bias = float(np.median(diffs))
    lo, hi = (float(v) for v in np.percentile(diffs, [2.5, 97.5]))
    rng = make_rng(seed)
    boot_stats = []
    for idx in _bootstrap_indices(rng, n_boot, n):
        sample = diffs[idx]
        boot_stats.append(np.column_stack([
            np.median(sample, axis=1), np.percentile(sample, 2.5, axis=1), np.percentile(sample, 97.5, axis=1),
        ]))
    boot = np.concatenate(boot_stats)
    bounds = np.percentile(boot, [2.5, 97.5], axis=0)
    return BlandAltmanResult(
        bias=bias, loa=(lo, hi), method=method,
        ci_bias=(float(bounds[0, 0]), float(bounds[1, 0])),
        ci_loa_lo=(float(bounds[0, 1]), float(bounds[1, 1])),
        ci_loa_hi=(float(bounds[0, 2]), float(bounds[1, 2])),
        n_boot=int(n_boot), means=means, differences=diffs,
    )


# ---------------------------------------------------------------------------
# VIF
# ---------------------------------------------------------------------------

def vif(features: Union[pd.DataFrame, np.ndarray], names: Optional[Sequence[str]] = None) -> VifReport:
    """VIF_i = 1 / (1 - R_i²)，R_i² 来自第 i 列对其余列（含截距）的 OLS；完全共线记为 +inf"""
    if isinstance(features, pd.DataFrame):
        names = list(features.columns) if names is None else list(names)
        X = features.to_numpy(dtype=np.float64)
    else:
        X = np.asarray(features, dtype=np.float64)
        names = [f"x{i + 1}" for i in range(X.shape[1])] if names is None else list(names)
    if X.ndim != 2:
        raise DataError(f"特征矩阵必须为二维: {X.shape}")
    n, p = X.shape
    if p < 2 or n <= p:
        raise TooFewSamples(f"VIF 需要 n > p >= 2, 实际 n={n}, p={p}")
    constant = [names[i] for i in range(p) if np.ptp(X[:, i]) == 0]
    if constant:
        raise ConstantColumn(f"常数列: {constant}")

    values: Dict[str, float] = {}
    for i, name in enumerate(names):
        others = np.delete(X, i, axis=1)
        r2 = LinearRegression().fit(others, X[:, i]).score(others, X[:, i])
        values[name] = math.inf if r2 >= 1.0 - 1e-12 else max(1.0, 1.0 / (1.0 - r2))
    flagged = [name for name in names if values[name] > VIF_THRESHOLD]
    return VifReport(vif=values, flagged=flagged)


# ---------------------------------------------------------------------------
# 门控组合
# ---------------------------------------------------------------------------

@dataclass
class AgreementConfig:
    alpha: float = 0.05
    n_boot: int = DEFAULT_N_BOOT
    seed: int = 0
    path_override: Optional[str] = None
    gpr_curve_points: int = 100

    @classmethod
    def from_dict(cls, data: Mapping) -> "AgreementConfig":
        return cls(
            alpha=float(data.get("alpha", 0.05)),
            n_boot=int(data.get("n_boot", DEFAULT_N_BOOT)),
            seed=int(data.get("seed", 0)),
            path_override=data.get("path_override"),
            gpr_curve_points=int(data.get("gpr_curve_points", 100)),
        )


@dataclass
class AgreementOutcome:
    report: Dict[str, Any]
    bland_altman_points: pd.DataFrame
    regression_curve: pd.DataFrame


def _safe_test(fn, *args) -> Tuple[Optional[TestResult], Optional[str]]:
    try:
        return fn(*args), None
    except (ZeroVariance, TooFewSamples) as e:
        return None, f"{type(e).__name__}: {e}"


def gated_battery(pairs: Sequence[PairedSample], config: Optional[AgreementConfig] = None) -> AgreementOutcome:
    """正态性与方差齐性都通过时走参数路径（ICC3 / 参数 BA / 线性回归），
    否则走非参数路径（bootstrap ICC / 百分位 BA / GPR）；Spearman 两条路径都计算。"""
    config = config or AgreementConfig()
    Y = _pairs_matrix(pairs)
    manual, automated = Y[:, 0], Y[:, 1]
    notes: List[str] = []

    normal_m, note_m = _safe_test(shapiro_wilk, manual)
    normal_a, note_a = _safe_test(shapiro_wilk, automated)
    levene, note_l = _safe_test(levene_median, manual, automated)
    notes.extend(n for n in (note_m, note_a, note_l) if n)

    passes = (
        normal_m is not None and normal_m.p_value >= config.alpha
        and normal_a is not None and normal_a.p_value >= config.alpha
        and levene is not None and levene.p_value >= config.alpha
    )
    path = "parametric" if passes else "nonparametric"
    if config.path_override in ("parametric", "nonparametric"):
        if config.path_override != path:
            notes.append(f"path overridden: gate selected {path}")
        path = config.path_override

    report: Dict[str, Any] = {
        "n": int(Y.shape[0]),
        "normality": {
            "manual": None if normal_m is None else {"W": normal_m.statistic, "p": normal_m.p_value},
            "automated": None if normal_a is None else {"W": normal_a.statistic, "p": normal_a.p_value},
        },
        "levene": None if levene is None else {"F": levene.statistic, "p": levene.p_value},
        "path": path,
    }

    curve = pd.DataFrame(columns=["x", "y_pred", "y_lo", "y_hi"])
    if path == "parametric":
        icc = icc3_parametric(pairs)
        ba = bland_altman(pairs, "parametric")
        try:
            regression = {"model": "linear", **linear_regression(manual, automated).to_dict()}
            grid = np.linspace(manual.min(), manual.max(), config.gpr_curve_points)
            y_line = regression["intercept"] + regression["slope"] * grid
            curve = pd.DataFrame({"x": grid, "y_pred": y_line, "y_lo": y_line, "y_hi": y_line})
        except DegenerateX as e:
            regression = None
            notes.append(f"DegenerateX: {e}")
        notes.append(ICC_NOTE)
    else:
        icc = icc_nonparametric(pairs, config.n_boot, config.seed)
        ba = bland_altman(pairs, "percentile", config.n_boot, config.seed)
        try:
            model = gpr_fit(manual, automated)
            prediction = gpr_curve(model, config.gpr_curve_points)
            lo, hi = prediction.ci95
            regression = {"model": "gpr", **model.to_dict()}
            curve = pd.DataFrame({"x": prediction.x, "y_pred": prediction.y_pred, "y_lo": lo, "y_hi": hi})
        except (DegenerateX, SingularKernel, TooFewSamples) as e:
            regression = None
            notes.append(f"{type(e).__name__}: {e}")

    rho, note_s = _safe_test(spearman, manual, automated)
    if note_s:
        notes.append(note_s)

    report["icc"] = icc.to_dict()
    report["bland_altman"] = ba.to_dict()
    report["regression"] = regression
    report["spearman"] = None if rho is None else {"rho": rho.statistic, "p": rho.p_value}
    report["notes"] = notes

    points = pd.DataFrame({
        "subject_id": [p.subject_id for p in pairs],
        "mean": ba.means,
        "difference": ba.differences,
    })
    return AgreementOutcome(report=report, bland_altman_points=points, regression_curve=curve)


def compare_conditions(table: pd.DataFrame) -> Dict[str, Any]:
    """行 = 受试者，列 = 条件（如模型）。Friedman 总检验 + 两两 Wilcoxon 符号秩 + BH 校正"""
    complete = table.dropna()
    if len(complete) < len(table):
        logger.warning(f"比较时剔除 {len(table) - len(complete)} 个不完整行")
    omnibus = friedman(complete.to_numpy(dtype=np.float64))
    pairs = list(combinations(list(complete.columns), 2))
    raw: List[float] = []
    rows = []
    for a, b in pairs:
        try:
            result = wilcoxon_signed_rank(complete[a].to_numpy(), complete[b].to_numpy())
            raw.append(result.p_value)
            rows.append({"a": str(a), "b": str(b), "statistic": result.statistic, "p": result.p_value})
        except AllZeroDifferences:
            raw.append(1.0)
            rows.append({"a": str(a), "b": str(b), "statistic": 0.0, "p": 1.0})
    for row, adjusted in zip(rows, bh_fdr(raw)):
        row["p_bh"] = float(adjusted)
    return {"friedman": omnibus.to_dict(), "pairwise": rows, "n_subjects": int(len(complete))}
