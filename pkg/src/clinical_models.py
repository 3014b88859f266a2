"""
Clinical Models - 临床决策模型
分诊级联与纵向预后评估

功能特性：
- L2 正则逻辑回归（可插拔学习器接口）与按受试者分组的 K 折交叉验证
- 折外概率堆叠（logistic meta-learner）
- ROC / AUC、指定特异度阈值、Platt 与 isotonic 校准
- 决策曲线净获益、Brier 分数、校准斜率
- Kaplan-Meier、Harrell 与 IPCW 一致性指数、bootstrap 置信区间
- 三阶段分诊级联（Stage A/B/C）与 landmark 结局评估
"""

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from lifelines import KaplanMeierFitter
from lifelines.utils import concordance_index
from scipy import optimize, stats
from scipy.special import expit, logit
from sklearn.exceptions import ConvergenceWarning
from sklearn.isotonic import IsotonicRegression
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import brier_score_loss, roc_curve
from sklearn.preprocessing import StandardScaler

from .agreement_stats import make_rng
from .errors import (
    DataError, DegenerateResamples, EmptyInput, EmptyStageInput, NoComparablePairs, SingleClass,
    TooFewGroups,
)

logger = logging.getLogger(__name__)

DEFAULT_CLINICAL_N_BOOT = 2000
PROB_CLIP = 1e-6
NET_BENEFIT_MARGIN = 0.002
DEFAULT_NB_WEIGHTS = (0.20, 1.00)
DEFAULT_PT_GRID = tuple(np.round(np.arange(0.01, 1.0, 0.01), 2))
IN_SAMPLE_NOTE = (
    "Stage B learners are refit on the full cohort and scored on Stage A positives; "
    "its metrics are in-sample and optimistic."
)
NET_BENEFIT_FORMULA = "NB(pt) = TP/n - w * (FP/n) * pt / (1 - pt)"


# ---------------------------------------------------------------------------
# 数据集
# ---------------------------------------------------------------------------

@dataclass
class RiskDataset:
    """每行一个观测（如一侧膝关节）；groups 为分组键（受试者）"""
    ids: List[str]
    groups: List[str]
    feature_names: List[str]
    X: np.ndarray
    y: Optional[np.ndarray] = None
    time: Optional[np.ndarray] = None
    event: Optional[np.ndarray] = None
    outcomes: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            self.X = self.X.reshape(len(self.ids), -1)
        n = len(self.ids)
        if len(self.groups) != n:
            raise DataError("groups 与 ids 长度不一致")
        if self.X.shape[1] != len(self.feature_names):
            raise DataError(f"特征列数 {self.X.shape[1]} 与名称数 {len(self.feature_names)} 不一致")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.int64)
            if self.y.shape != (n,) or not np.isin(self.y, (0, 1)).all():
                raise DataError("结局必须为长度 n 的 0/1 向量")
        if self.time is not None:
            self.time = np.asarray(self.time, dtype=np.float64)
            if np.any(self.time < 0):
                raise DataError("随访时间不能为负")
        if self.event is not None:
            self.event = np.asarray(self.event, dtype=np.int64)
        self.outcomes = {k: np.asarray(v) for k, v in self.outcomes.items()}

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def labels(self) -> np.ndarray:
        if self.y is None:
            raise DataError("数据集未设置结局")
        return self.y

    def with_outcome(self, name: str) -> "RiskDataset":
        if name not in self.outcomes:
            raise DataError(f"未知结局列: {name}")
        values = self.outcomes[name]
        keep = ~pd.isna(values)
        subset = self.subset(np.flatnonzero(keep))
        subset.y = np.asarray(values[keep], dtype=np.int64)
        return subset

    def select_features(self, names: Optional[Sequence[str]]) -> "RiskDataset":
        if names is None:
            return self
        missing = [n for n in names if n not in self.feature_names]
        if missing:
            raise DataError(f"缺少特征列: {missing}")
        idx = [self.feature_names.index(n) for n in names]
        return RiskDataset(self.ids, self.groups, list(names), self.X[:, idx], self.y, self.time, self.event, self.outcomes)

    def subset(self, rows: Union[np.ndarray, Sequence[int]]) -> "RiskDataset":
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        pick = lambda arr: None if arr is None else arr[rows]  # noqa: E731
        return RiskDataset(
            [self.ids[i] for i in rows], [self.groups[i] for i in rows], list(self.feature_names),
            self.X[rows], pick(self.y), pick(self.time), pick(self.event),
            {k: v[rows] for k, v in self.outcomes.items()},
        )

    @classmethod
    def from_frame(
        cls,
        frame: pd.DataFrame,
        features: Sequence[str],
        id_column: str = "id",
        group_column: Optional[str] = "subject_id",
        outcome: Optional[str] = None,
        outcomes: Sequence[str] = (),
        time_column: Optional[str] = None,
        event_column: Optional[str] = None,
    ) -> "RiskDataset":
        needed = [id_column, *features, *outcomes]
        needed += [c for c in (group_column, outcome, time_column, event_column) if c]
        missing = [c for c in needed if c not in frame.columns]
        if missing:
            raise DataError(f"输入表缺少列: {missing}")
        if frame[list(features)].isna().any().any():
            raise DataError("特征列存在缺失值")
        ids = frame[id_column].astype(str).tolist()
        groups = frame[group_column].astype(str).tolist() if group_column else list(ids)
        return cls(
            ids=ids, groups=groups, feature_names=list(features),
            X=frame[list(features)].to_numpy(dtype=np.float64),
            y=None if outcome is None else frame[outcome].to_numpy(dtype=np.int64),
            time=None if time_column is None else frame[time_column].to_numpy(dtype=np.float64),
            event=None if event_column is None else frame[event_column].to_numpy(dtype=np.int64),
            outcomes={name: frame[name].to_numpy(dtype=np.float64) for name in outcomes},
        )


def _require_both_classes(labels: np.ndarray, what: str = "结局") -> Tuple[int, int]:
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise SingleClass(f"{what}只有一个类别 (阳性 {n_pos}, 阴性 {n_neg})")
    return n_pos, n_neg


# ---------------------------------------------------------------------------
# 逻辑回归
# ---------------------------------------------------------------------------

@dataclass
class LogisticModel:
    feature_names: List[str]
    weights: np.ndarray
    intercept: float
    l2_lambda: float
    converged: bool = True
    n_iter: int = 0
    scaler_mean: Optional[np.ndarray] = None
    scaler_scale: Optional[np.ndarray] = None

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            X = X.reshape(-1, len(self.feature_names))
        if self.scaler_mean is not None:
            X = (X - self.scaler_mean) / self.scaler_scale
        return X @ self.weights + self.intercept

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return expit(self.decision_function(X))

    def to_dict(self) -> Dict:
        return {
            "features": list(self.feature_names),
            "weights": dict(zip(self.feature_names, map(float, self.weights))),
            "intercept": float(self.intercept), "l2_lambda": self.l2_lambda,
            "converged": self.converged, "n_iter": self.n_iter,
        }


def logistic_fit(
    data: RiskDataset,
    l2_lambda: float = 1.0,
    max_iter: int = 1000,
    tol: float = 1e-8,
    standardize: bool = False,
) -> LogisticModel:
    """最小化 平均对数损失 + λ‖w‖²/2（截距不惩罚）。

    无特征时截距取 logit(患病率) 的闭式解；未收敛时记录警告并返回最后一次迭代结果。
    """
    y = data.labels
    n_pos, _ = _require_both_classes(y)
    if l2_lambda < 0:
        raise DataError(f"l2_lambda 不能为负: {l2_lambda}")
    n, p = data.X.shape
    if p == 0:
        prevalence = n_pos / n
        return LogisticModel([], np.zeros(0), float(logit(prevalence)), l2_lambda)

    X = data.X
    mean = scale = None
    if standardize:
        scaler = StandardScaler().fit(X)
        mean = scaler.mean_
        scale = np.where(scaler.scale_ > 0, scaler.scale_, 1.0)
        X = (X - mean) / scale

    if l2_lambda == 0:
        estimator = LogisticRegression(penalty=None, max_iter=max_iter, tol=tol, solver="lbfgs")
    else:
        estimator = LogisticRegression(C=1.0 / (n * l2_lambda), max_iter=max_iter, tol=tol, solver="lbfgs")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        estimator.fit(X, y)
    converged = not any(issubclass(w.category, ConvergenceWarning) for w in caught)
    if not converged:
        logger.warning(f"NonConvergence: 逻辑回归在 {max_iter} 次迭代内未收敛")
    return LogisticModel(
        feature_names=list(data.feature_names), weights=estimator.coef_[0].astype(np.float64),
        intercept=float(estimator.intercept_[0]), l2_lambda=l2_lambda, converged=converged,
        n_iter=int(np.max(estimator.n_iter_)), scaler_mean=mean, scaler_scale=scale,
    )


@dataclass
class LogisticLearner:
    """可插拔学习器：在给定特征子集上拟合逻辑回归"""
    name: str
    features: Optional[List[str]] = None
    l2_lambda: float = 1.0
    standardize: bool = True

    def fit(self, data: RiskDataset) -> LogisticModel:
        return logistic_fit(data.select_features(self.features), self.l2_lambda, standardize=self.standardize)

    def predict_proba(self, model: LogisticModel, data: RiskDataset) -> np.ndarray:
        return model.predict_proba(data.select_features(self.features).X)

    @classmethod
    def from_dict(cls, data: Mapping) -> "LogisticLearner":
        return cls(
            name=str(data.get("name", "logistic")),
            features=None if data.get("features") is None else list(data["features"]),
            l2_lambda=float(data.get("l2_lambda", 1.0)),
            standardize=bool(data.get("standardize", True)),
        )


def grouped_kfold(groups: Sequence[str], k: int = 5, seed: Optional[int] = 0) -> np.ndarray:
    """按分组打乱后轮流分配到 k 折；同组样本必然同折"""
    unique = sorted(set(groups))
    if k < 2 or k > len(unique):
        raise TooFewGroups(f"分组数 {len(unique)} 不足以做 {k} 折交叉验证")
    order = np.random.default_rng(seed).permutation(len(unique))
    fold_of = {unique[g]: pos % k for pos, g in enumerate(order)}
    return np.array([fold_of[g] for g in groups], dtype=np.int64)


def oof_predict(learner: LogisticLearner, data: RiskDataset, folds: np.ndarray) -> np.ndarray:
    """折外预测概率"""
    oof = np.empty(len(data))
    for fold in np.unique(folds):
        test = folds == fold
        model = learner.fit(data.subset(~test))
        oof[test] = learner.predict_proba(model, data.subset(test))
    return oof


@dataclass
class StackedModel:
    learners: List[LogisticLearner]
    base_models: List[LogisticModel]
    meta_model: LogisticModel
    meta_columns: List[int]
    oof_base: np.ndarray
    oof_proba: np.ndarray
    folds: np.ndarray

    def base_matrix(self, data: RiskDataset) -> np.ndarray:
        return np.column_stack([
            learner.predict_proba(model, data) for learner, model in zip(self.learners, self.base_models)
        ])

    def predict_proba(self, data: RiskDataset) -> np.ndarray:
        meta_X = self.base_matrix(data)[:, self.meta_columns]
        return self.meta_model.predict_proba(meta_X)


def stack_oof(
    learners: Sequence[LogisticLearner],
    data: RiskDataset,
    k: int = 5,
    seed: Optional[int] = 0,
    meta_lambda: float = 1.0,
) -> StackedModel:
    """折外基模型概率作为元特征，元模型为逻辑回归；基模型随后在全量数据上重新拟合"""
    if not learners:
        raise DataError("至少需要一个基学习器")
    _require_both_classes(data.labels)
    folds = grouped_kfold(data.groups, k, seed)
    oof = np.column_stack([oof_predict(learner, data, folds) for learner in learners])

    columns = [j for j in range(oof.shape[1]) if np.ptp(oof[:, j]) > 0]
    names = [f"p_{learners[j].name}" for j in columns]
    meta_data = RiskDataset(data.ids, data.groups, names, oof[:, columns], data.y)
    meta = logistic_fit(meta_data, meta_lambda, standardize=False)
    base_models = [learner.fit(data) for learner in learners]
    return StackedModel(
        learners=list(learners), base_models=base_models, meta_model=meta, meta_columns=columns,
        oof_base=oof, oof_proba=meta.predict_proba(oof[:, columns]), folds=folds,
    )


# ---------------------------------------------------------------------------
# ROC 与阈值
# ---------------------------------------------------------------------------

@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"threshold": self.thresholds, "fpr": self.fpr, "tpr": self.tpr})


def auc_mann_whitney(scores: Sequence[float], labels: Sequence[int]) -> float:
    """AUC = U / (n1·n0)，并列计 1/2"""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos, n_neg = _require_both_classes(labels)
    ranks = stats.rankdata(scores)
    u = float(ranks[labels == 1].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    auc = auc_mann_whitney(scores, labels)
    fpr, tpr, thresholds = roc_curve(labels, scores, drop_intermediate=False)
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds, auc=auc)


def threshold_at_specificity(scores: Sequence[float], labels: Sequence[int], target: float) -> float:
    """使阴性样本中 score < t 的比例 >= target 的最小阈值 t；判定规则为 score >= t"""
    if not 0.0 <= target <= 1.0:
        raise DataError(f"特异度目标必须位于 [0, 1]: {target}")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    negatives = np.sort(scores[labels == 0])
    if negatives.size == 0:
        raise SingleClass("没有阴性样本, 无法确定特异度阈值")
    m = int(math.ceil(target * negatives.size - 1e-9))
    if m == 0:
        return -math.inf
    return float(np.nextafter(negatives[m - 1], np.inf))


def sensitivity_at(scores: Sequence[float], labels: Sequence[int], threshold: float) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    positives = scores[labels == 1]
    if positives.size == 0:
        raise SingleClass("没有阳性样本")
    return float(np.mean(positives >= threshold))


def sensitivity_at_specificity(scores: Sequence[float], labels: Sequence[int], target: float) -> float:
    return sensitivity_at(scores, labels, threshold_at_specificity(scores, labels, target))


# ---------------------------------------------------------------------------
# 校准
# ---------------------------------------------------------------------------

@dataclass
class CalibrationMap:
    method: str
    params: Dict[str, Any]
    _isotonic: Optional[IsotonicRegression] = field(default=None, repr=False)

    def apply(self, scores: Sequence[float]) -> np.ndarray:
        scores = np.asarray(scores, dtype=np.float64)
        if self.method == "platt":
            return expit(self.params["a"] * scores + self.params["b"])
        return np.clip(self._isotonic.predict(scores), 0.0, 1.0)

    def to_dict(self) -> Dict:
        return {"method": self.method, **{k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.params.items()}}


def platt_scale(scores: Sequence[float], labels: Sequence[int]) -> CalibrationMap:
    """Platt 缩放：对平滑后的目标 ((n+ +1)/(n+ +2), 1/(n- +2)) 拟合 p = expit(a·s + b)"""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n_pos, n_neg = _require_both_classes(y)
    targets = np.where(y == 1, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))

    def objective(params):
        a, b = params
        z = a * s + b
        # log(1+exp(z)) - t·z 的数值稳定形式
        loss = np.logaddexp(0.0, z) - targets * z
        residual = expit(z) - targets
        return float(np.sum(loss)), np.array([np.sum(residual * s), np.sum(residual)])

    start = np.array([0.0, math.log((n_pos + 1.0) / (n_neg + 1.0))])
    result = optimize.minimize(objective, start, jac=True, method="L-BFGS-B", options={"maxiter": 1000, "gtol": 1e-10})
    if not result.success:
        logger.warning(f"NonConvergence: Platt 缩放未收敛 ({result.message})")
    a, b = (float(v) for v in result.x)
    return CalibrationMap("platt", {"a": a, "b": b})


def isotonic_calibrate(scores: Sequence[float], labels: Sequence[int]) -> CalibrationMap:
    """保序回归（PAV）校准"""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    _require_both_classes(y)
    iso = IsotonicRegression(y_min=0.0, y_max=1.0, increasing=True, out_of_bounds="clip").fit(s, y)
    return CalibrationMap(
        "isotonic",
        {"breakpoints": np.asarray(iso.X_thresholds_), "levels": np.asarray(iso.y_thresholds_)},
        _isotonic=iso,
    )


# ---------------------------------------------------------------------------
# 决策曲线与概率评分
# ---------------------------------------------------------------------------

@dataclass
class DecisionPoint:
    threshold_pt: float
    net_benefit: float
    weight_w: float
    nb_treat_all: float
    nb_treat_none: float = 0.0


def net_benefit(probs: Sequence[float], outcomes: Sequence[int], pt: float, w: float = 1.0) -> DecisionPoint:
    """NB(pt) = TP/n - w·(FP/n)·pt/(1-pt)，概率 >= pt 判为阳性"""
    if not 0.0 < pt < 1.0:
        raise DataError(f"阈值概率必须位于 (0, 1): {pt}")
    if w <= 0:
        raise DataError(f"权重必须为正: {w}")
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(outcomes)
    n = y.size
    if n == 0:
        raise EmptyInput("没有样本")
    odds = pt / (1.0 - pt)
    treat = p >= pt
    tp = int(np.sum(treat & (y == 1)))
    fp = int(np.sum(treat & (y == 0)))
    n_pos = int(np.sum(y == 1))
    nb_model = tp / n - w * (fp / n) * odds
    nb_all = n_pos / n - w * ((n - n_pos) / n) * odds
    return DecisionPoint(pt, nb_model, w, nb_all, 0.0)


def decision_curve(
    probs: Sequence[float],
    outcomes: Sequence[int],
    pts: Sequence[float] = DEFAULT_PT_GRID,
    w: float = 1.0,
) -> pd.DataFrame:
    rows = [net_benefit(probs, outcomes, float(pt), w) for pt in pts]
    return pd.DataFrame({
        "pt": [r.threshold_pt for r in rows],
        "nb_model": [r.net_benefit for r in rows],
        "nb_treat_all": [r.nb_treat_all for r in rows],
        "nb_treat_none": [r.nb_treat_none for r in rows],
        "w": [w] * len(rows),
    })


def net_benefit_window(curve: pd.DataFrame, margin: float = NET_BENEFIT_MARGIN) -> Optional[Tuple[float, float]]:
    """模型净获益同时超过 treat-all 与 treat-none 至少 margin 的阈值范围"""
    best_reference = np.maximum(curve["nb_treat_all"].to_numpy(), curve["nb_treat_none"].to_numpy())
    beats = curve["nb_model"].to_numpy() >= best_reference + margin
    if not beats.any():
        return None
    pts = curve["pt"].to_numpy()[beats]
    return float(pts.min()), float(pts.max())


def brier(probs: Sequence[float], outcomes: Sequence[int]) -> float:
    return float(brier_score_loss(np.asarray(outcomes), np.asarray(probs, dtype=np.float64)))


def calibration_slope(probs: Sequence[float], outcomes: Sequence[int]) -> float:
    """logit(p) 在单变量逻辑回归中的系数；0/1 概率截断到 [1e-6, 1-1e-6]"""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(outcomes, dtype=np.int64)
    _require_both_classes(y)
    clipped = np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)
    if np.any(clipped != p):
        logger.warning(f"DegenerateProbs: {int(np.sum(clipped != p))} 个概率被截断到 [{PROB_CLIP}, {1 - PROB_CLIP}]")
    z = logit(clipped).reshape(-1, 1)
    model = LogisticRegression(penalty=None, max_iter=1000, tol=1e-10).fit(z, y)
    return float(model.coef_[0, 0])


# ---------------------------------------------------------------------------
# 生存分析
# ---------------------------------------------------------------------------

@dataclass
class SurvivalCurve:
    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    label: str = ""

    def at(self, t: Union[float, np.ndarray]) -> np.ndarray:
        """右连续阶梯函数取值"""
        idx = np.searchsorted(self.times, np.asarray(t, dtype=np.float64), side="right") - 1
        return np.where(idx >= 0, self.survival[np.clip(idx, 0, None)], 1.0)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"stratum": self.label, "time": self.times, "survival": self.survival, "at_risk": self.at_risk})


def kaplan_meier(times: Sequence[float], events: Sequence[int], label: str = "") -> SurvivalCurve:
    """乘积极限估计；同一时刻事件先于删失处理"""
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events, dtype=np.int64)
    if t.size == 0:
        raise EmptyInput("生存数据为空")
    if np.any(t < 0):
        raise DataError("生存时间不能为负")
    kmf = KaplanMeierFitter().fit(t, event_observed=e)
    timeline = kmf.survival_function_.index.to_numpy(dtype=np.float64)
    survival = kmf.survival_function_.iloc[:, 0].to_numpy(dtype=np.float64)
    at_risk = kmf.event_table["at_risk"].reindex(timeline).fillna(0).to_numpy(dtype=np.int64)
    return SurvivalCurve(times=timeline, survival=survival, at_risk=at_risk, label=label)


def _ipcw_concordance(t: np.ndarray, e: np.ndarray, risk: np.ndarray, tau: Optional[float]) -> float:
    if tau is None:
        tau = float(np.percentile(t, 90))
    censoring = kaplan_meier(t, 1 - e)
    g_left = censoring.at(np.nextafter(t, -np.inf))
    anchor = (e == 1) & (t < tau) & (g_left > 0)
    if not anchor.any():
        raise NoComparablePairs("截断时间内没有可比较的事件")
    weights = np.zeros_like(t)
    weights[anchor] = 1.0 / g_left[anchor] ** 2

    comparable = (t[:, None] < t[None, :]) & anchor[:, None]
    if not comparable.any():
        raise NoComparablePairs("没有可比较的样本对")
    concordant = (risk[:, None] > risk[None, :]).astype(np.float64) + 0.5 * (risk[:, None] == risk[None, :])
    w = comparable * weights[:, None]
    return float(np.sum(w * concordant) / np.sum(w))


def concordance(
    times: Sequence[float],
    events: Sequence[int],
    risk_scores: Sequence[float],
    mode: str = "harrell",
    tau: Optional[float] = None,
) -> float:
    """风险越高越早发生事件视为一致；并列风险计 1/2"""
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events, dtype=np.int64)
    r = np.asarray(risk_scores, dtype=np.float64)
    if not (t.size == e.size == r.size):
        raise DataError("times/events/risk 长度不一致")
    if mode == "harrell":
        try:
            return float(concordance_index(t, -r, e))
        except ZeroDivisionError as exc:
            raise NoComparablePairs("没有可比较的样本对") from exc
    if mode == "ipcw":
        return _ipcw_concordance(t, e, r, tau)
    raise DataError(f"未知一致性指数模式: {mode}")


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------

@dataclass
class BootstrapInterval:
    lo: float
    hi: float
    estimates: np.ndarray = field(repr=False)
    redraws: int = 0


def bootstrap_ci(
    metric_fn: Callable[..., float],
    data: Sequence[np.ndarray],
    n_boot: int = DEFAULT_CLINICAL_N_BOOT,
    seed: Optional[int] = 0,
    labels: Optional[np.ndarray] = None,
    max_redraw_factor: int = 10,
) -> BootstrapInterval:
    """逐行重采样的百分位 95% 区间。给出 labels 时，缺少任一类别的重采样会被重抽，
    重抽总次数超过 max_redraw_factor·n_boot 时报错。"""
    arrays = [np.asarray(a) for a in data]
    n = arrays[0].shape[0]
    if n == 0:
        raise EmptyInput("bootstrap 输入为空")
    if any(a.shape[0] != n for a in arrays):
        raise DataError("bootstrap 输入长度不一致")
    rng = make_rng(seed)
    estimates = np.empty(n_boot)
    redraws = 0
    budget = max_redraw_factor * n_boot
    for b in range(n_boot):
        while True:
            idx = rng.integers(0, n, size=n)
            if labels is None:
                break
            picked = np.asarray(labels)[idx]
            if (picked == 1).any() and (picked == 0).any():
                break
            redraws += 1
            if redraws > budget:
                raise DegenerateResamples(f"重抽 {redraws} 次后仍无法得到含两类的重采样")
        estimates[b] = metric_fn(*(a[idx] for a in arrays))
    lo, hi = np.percentile(estimates, [2.5, 97.5])
    return BootstrapInterval(float(lo), float(hi), estimates, redraws)


# ---------------------------------------------------------------------------
# 分诊级联
# ---------------------------------------------------------------------------

@dataclass
class StageRow:
    stage: str
    operating_point: str
    auc: Optional[float]
    auc_lo: Optional[float]
    auc_hi: Optional[float]
    sensitivity: Optional[float]
    sens_lo: Optional[float]
    sens_hi: Optional[float]
    spec_target: Optional[float]
    threshold: Optional[float]
    n_in: int
    n_forwarded: Optional[int]
    n_discarded: Optional[int]

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class TriageConfig:
    stage_a_outcome: str = "abnormal"
    stage_b_outcome: str = "cartilage_bone"
    learners: List[LogisticLearner] = field(default_factory=lambda: [LogisticLearner("logistic")])
    stage_a_specificity: float = 0.90
    stage_b_operating_points: Tuple[float, ...] = (0.85, 0.90)
    stage_b_routing: float = 0.85
    stage_c_specificity: float = 0.85
    joints: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    c1_lambdas: Tuple[float, ...] = (0.1, 1.0)
    k: int = 5
    n_boot: int = DEFAULT_CLINICAL_N_BOOT
    seed: int = 0

    @classmethod
    def from_dict(cls, data: Mapping) -> "TriageConfig":
        stage_a = data.get("stage_a", {}) or {}
        stage_b = data.get("stage_b", {}) or {}
        stage_c = data.get("stage_c", {}) or {}
        learners = [LogisticLearner.from_dict(d) for d in (data.get("learners") or [{"name": "logistic"}])]
        return cls(
            stage_a_outcome=stage_a.get("outcome", "abnormal"),
            stage_b_outcome=stage_b.get("outcome", "cartilage_bone"),
            learners=learners,
            stage_a_specificity=float(stage_a.get("target_specificity", 0.90)),
            stage_b_operating_points=tuple(float(v) for v in stage_b.get("operating_points", (0.85, 0.90))),
            stage_b_routing=float(stage_b.get("routing_specificity", 0.85)),
            stage_c_specificity=float(stage_c.get("target_specificity", 0.85)),
            joints=dict(stage_c.get("joints", {}) or {}),
            c1_lambdas=tuple(float(v) for v in stage_c.get("l2_lambdas", (0.1, 1.0))),
            k=int(data.get("folds", 5)),
            n_boot=int(data.get("n_boot", DEFAULT_CLINICAL_N_BOOT)),
            seed=int(data.get("seed", 0)),
        )


@dataclass
class TriageReport:
    rows: List[StageRow]
    routing: pd.DataFrame
    notes: List[str]
    roc_curves: Dict[str, RocCurve] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {"stages": [r.to_dict() for r in self.rows], "notes": list(self.notes)}


class TriageCascade:
    """三阶段分诊：A 正常膝筛除 -> B 软骨+骨病变富集 -> C 关节/组织定位"""

    def __init__(self, config: TriageConfig):
        self.config = config
        self.logger = logging.getLogger(__name__)
        self.notes: List[str] = []

    def _note(self, message: str) -> None:
        self.logger.warning(message)
        self.notes.append(message)

    def _metrics(self, scores: np.ndarray, labels: np.ndarray, target: float) -> Dict[str, float]:
        auc = auc_mann_whitney(scores, labels)
        sens = sensitivity_at_specificity(scores, labels, target)
        seed = self.config.seed
        auc_ci = bootstrap_ci(auc_mann_whitney, (scores, labels), self.config.n_boot, seed, labels)
        sens_ci = bootstrap_ci(
            lambda s, y: sensitivity_at_specificity(s, y, target), (scores, labels), self.config.n_boot, seed, labels,
        )
        return {"auc": auc, "auc_lo": auc_ci.lo, "auc_hi": auc_ci.hi,
                "sensitivity": sens, "sens_lo": sens_ci.lo, "sens_hi": sens_ci.hi}

    def _folds_for(self, data: RiskDataset) -> int:
        return min(self.config.k, len(set(data.groups)))

    def run(self, cohort: RiskDataset) -> TriageReport:
        cfg = self.config
        self.notes = []
        rows: List[StageRow] = []
        rocs: Dict[str, RocCurve] = {}
        routing = pd.DataFrame({"id": cohort.ids, "subject_id": cohort.groups})

        # Stage A
        data_a = cohort.with_outcome(cfg.stage_a_outcome)
        if len(data_a) < len(cohort):
            self._note(f"Stage A: {len(cohort) - len(data_a)} 行缺少结局, 不参与路由")
        stacked = stack_oof(cfg.learners, data_a, cfg.k, cfg.seed)
        scores_a = stacked.oof_proba
        thr_a = threshold_at_specificity(scores_a, data_a.labels, cfg.stage_a_specificity)
        pass_a = scores_a >= thr_a
        metrics = self._metrics(scores_a, data_a.labels, cfg.stage_a_specificity)
        rocs["stage_a"] = roc_auc(scores_a, data_a.labels)
        rows.append(StageRow("A", "all", **metrics, spec_target=cfg.stage_a_specificity, threshold=thr_a,
                             n_in=len(data_a), n_forwarded=int(pass_a.sum()), n_discarded=int((~pass_a).sum())))
        routing = routing.merge(pd.DataFrame({"id": data_a.ids, "stage_a_score": scores_a, "stage_a_pass": pass_a}),
                                on="id", how="left")
        if not pass_a.any():
            self._note("EmptyStageInput: Stage A 无阳性, 跳过 Stage B/C")
            return TriageReport(rows, routing, self.notes, rocs)

        # Stage B：在全队列上重新拟合，作用于 Stage A 阳性
        positives_a = data_a.subset(pass_a)
        try:
            full_b = cohort.with_outcome(cfg.stage_b_outcome)
            keep = np.isin(full_b.ids, positives_a.ids)
            dropped = len(positives_a) - int(keep.sum())
            if dropped:
                self._note(f"Stage B: dropped_missing_outcome={dropped} (Stage A 阳性但缺少 {cfg.stage_b_outcome})")
            if not keep.any():
                raise EmptyStageInput("Stage A 阳性均缺少 Stage B 结局")
            model_b = stack_oof(cfg.learners, full_b, cfg.k, cfg.seed)
            subset_b = full_b.subset(keep)
            scores_b = model_b.predict_proba(subset_b)
            labels_b = subset_b.labels
            _require_both_classes(labels_b, "Stage B 输入")
        except DataError as e:
            self._note(f"EmptyStageInput: Stage B 无法评估 ({e}), 跳过下游阶段")
            return TriageReport(rows, routing, self.notes, rocs)
        self.notes.append(IN_SAMPLE_NOTE)
        rocs["stage_b"] = roc_auc(scores_b, labels_b)

        pass_b = None
        for target in cfg.stage_b_operating_points:
            thr = threshold_at_specificity(scores_b, labels_b, target)
            forwarded = scores_b >= thr
            metrics = self._metrics(scores_b, labels_b, target)
            rows.append(StageRow("B", f"B{int(round(target * 100))}", **metrics, spec_target=target, threshold=thr,
                                 n_in=len(subset_b), n_forwarded=int(forwarded.sum()),
                                 n_discarded=int((~forwarded).sum())))
            if math.isclose(target, cfg.stage_b_routing):
                pass_b = forwarded
        if pass_b is None:
            pass_b = scores_b >= threshold_at_specificity(scores_b, labels_b, cfg.stage_b_routing)
        routing = routing.merge(pd.DataFrame({"id": subset_b.ids, "stage_b_score": scores_b, "stage_b_pass": pass_b}),
                                on="id", how="left")
        if not pass_b.any():
            self._note("EmptyStageInput: Stage B 无阳性, 跳过 Stage C")
            return TriageReport(rows, routing, self.notes, rocs)

        positive_ids = set(np.asarray(subset_b.ids)[pass_b])
        stage_c = cohort.subset([i for i, row_id in enumerate(cohort.ids) if row_id in positive_ids])
        for joint, spec in sorted(cfg.joints.items()):
            rows.extend(self._stage_c_joint(stage_c, joint, spec, routing, rocs))
        return TriageReport(rows, routing, self.notes, rocs)

    def _stage_c_joint(self, data: RiskDataset, joint: str, spec: Mapping, routing: pd.DataFrame,
                       rocs: Dict[str, RocCurve]) -> List[StageRow]:
        cfg = self.config
        rows: List[StageRow] = []
        features = spec.get("features")
        try:
            subset = data.with_outcome(spec["outcome"])
            _require_both_classes(subset.labels, f"Stage C1 {joint}")
            k = self._folds_for(subset)
            folds = grouped_kfold(subset.groups, k, cfg.seed)
            variants = [LogisticLearner(f"{joint}_l2_{lam:g}", features, lam) for lam in cfg.c1_lambdas]
            averaged = np.mean([oof_predict(v, subset, folds) for v in variants], axis=0)
            platt = platt_scale(logit(np.clip(averaged, PROB_CLIP, 1 - PROB_CLIP)), subset.labels)
            scores = platt.apply(logit(np.clip(averaged, PROB_CLIP, 1 - PROB_CLIP)))
            metrics = self._metrics(scores, subset.labels, cfg.stage_c_specificity)
            rocs[f"stage_c1_{joint}"] = roc_auc(scores, subset.labels)
            rows.append(StageRow(f"C1:{joint}", "B85", **metrics, spec_target=cfg.stage_c_specificity,
                                 threshold=None, n_in=len(subset), n_forwarded=None, n_discarded=None))
            routing[f"stage_c1_{joint}_score"] = routing["id"].map(dict(zip(subset.ids, scores)))
        except (SingleClass, TooFewGroups, KeyError, DataError) as e:
            self._note(f"EmptyStageInput: Stage C1 {joint} 跳过 ({e})")

        for tissue, tissue_spec in sorted((spec.get("tissues") or {}).items()):
            try:
                subset = data.with_outcome(tissue_spec["outcome"])
                _require_both_classes(subset.labels, f"Stage C2 {joint}/{tissue}")
                folds = grouped_kfold(subset.groups, self._folds_for(subset), cfg.seed)
                learner = LogisticLearner(f"{joint}_{tissue}", tissue_spec.get("features"), cfg.c1_lambdas[-1])
                scores = oof_predict(learner, subset, folds)
                metrics = self._metrics(scores, subset.labels, cfg.stage_c_specificity)
                rocs[f"stage_c2_{joint}_{tissue}"] = roc_auc(scores, subset.labels)
                rows.append(StageRow(f"C2:{joint}:{tissue}", "B85", **metrics, spec_target=cfg.stage_c_specificity,
                                     threshold=None, n_in=len(subset), n_forwarded=None, n_discarded=None))
            except (SingleClass, TooFewGroups, KeyError, DataError) as e:
                self._note(f"EmptyStageInput: Stage C2 {joint}/{tissue} 跳过 ({e})")
        return rows


def triage_cascade(cohort: RiskDataset, config: Union[TriageConfig, Mapping, None] = None) -> TriageReport:
    if config is None:
        config = TriageConfig()
    elif isinstance(config, Mapping):
        config = TriageConfig.from_dict(config)
    return TriageCascade(config).run(cohort)


# ---------------------------------------------------------------------------
# Landmark 结局评估
# ---------------------------------------------------------------------------

@dataclass
class LandmarkResult:
    report: Dict[str, Any]
    decision_curves: pd.DataFrame
    km_curves: pd.DataFrame
    roc: pd.DataFrame


def _fold_concordance(data: RiskDataset, risk: np.ndarray, folds: np.ndarray) -> Dict[str, Optional[float]]:
    values = []
    for fold in np.unique(folds):
        rows = folds == fold
        try:
            values.append(concordance(data.time[rows], data.event[rows], risk[rows], "harrell"))
        except NoComparablePairs:
            continue
    if len(values) < 2:
        return {"mean": float(values[0]) if values else None, "lo": None, "hi": None, "n_folds": len(values)}
    mean = float(np.mean(values))
    se = float(np.std(values, ddof=1) / math.sqrt(len(values)))
    return {"mean": mean, "lo": mean - 1.96 * se, "hi": mean + 1.96 * se, "n_folds": len(values)}


def landmark_evaluation(
    data: RiskDataset,
    l2_lambda: float = 1.0,
    k: int = 5,
    seed: int = 0,
    n_boot: int = DEFAULT_CLINICAL_N_BOOT,
    weights: Sequence[float] = DEFAULT_NB_WEIGHTS,
    pts: Sequence[float] = DEFAULT_PT_GRID,
    tau: Optional[float] = None,
) -> LandmarkResult:
    """分组 K 折折外逻辑回归 + 交叉拟合 isotonic 校准，汇总判别、校准、决策曲线与生存指标"""
    labels = data.labels
    _require_both_classes(labels)
    folds = grouped_kfold(data.groups, k, seed)
    learner = LogisticLearner("logistic", None, l2_lambda)
    raw = oof_predict(learner, data, folds)

    calibrated = np.empty_like(raw)
    for fold in np.unique(folds):
        test = folds == fold
        try:
            mapping = isotonic_calibrate(raw[~test], labels[~test])
            calibrated[test] = mapping.apply(raw[test])
        except SingleClass:
            calibrated[test] = raw[test]

    auc_ci = bootstrap_ci(auc_mann_whitney, (raw, labels), n_boot, seed, labels)
    report: Dict[str, Any] = {
        "n": len(data), "n_events": int(labels.sum()),
        "auc": auc_mann_whitney(raw, labels), "auc_lo": auc_ci.lo, "auc_hi": auc_ci.hi,
        "brier_raw": brier(raw, labels), "brier_calibrated": brier(calibrated, labels),
        "calibration_slope": calibration_slope(raw, labels),
        "net_benefit_formula": NET_BENEFIT_FORMULA,
        "net_benefit_windows": {},
    }
    curves = []
    for w in weights:
        curve = decision_curve(calibrated, labels, pts, w)
        window = net_benefit_window(curve)
        report["net_benefit_windows"][f"{w:.2f}"] = None if window is None else list(window)
        curves.append(curve)

    km_frames = []
    if data.time is not None and data.event is not None:
        median = float(np.median(raw))
        high = raw > median
        for name, rows in (("low_risk", ~high), ("high_risk", high)):
            if rows.any():
                km_frames.append(kaplan_meier(data.time[rows], data.event[rows], name).to_frame())
        for mode in ("harrell", "ipcw"):
            try:
                report[f"c_index_{mode}"] = concordance(data.time, data.event, raw, mode, tau)
            except NoComparablePairs as e:
                report[f"c_index_{mode}"] = None
                logger.warning(f"{mode} 一致性指数不可用: {e}")
        report["c_index_folds"] = _fold_concordance(data, raw, folds)

    return LandmarkResult(
        report=report,
        decision_curves=pd.concat(curves, ignore_index=True),
        km_curves=pd.concat(km_frames, ignore_index=True) if km_frames else pd.DataFrame(
            columns=["stratum", "time", "survival", "at_risk"]),
        roc=roc_auc(raw, labels).to_frame(),
    )
