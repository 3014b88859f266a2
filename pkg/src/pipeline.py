"""
Pipeline - 命令编排

synth / biomarkers / agree / metrics / triage / survival 六个命令：
读取配置 -> 按受试者并行处理 -> 排序 -> 原子写出 CSV/JSON。
"""

import logging
import sys
import zlib
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, TypeVar

import numpy as np
import pandas as pd
from tqdm import tqdm

from .agreement_stats import AgreementConfig, PairedSample, compare_conditions, gated_battery
from .biomarkers import BiomarkerConfig, BiomarkerExtractor, BiomarkerRecord, record_sort_key, zscore_to_reference
from .clinical_models import RiskDataset, TriageConfig, landmark_evaluation, triage_cascade
from .config_manager import RunConfigManager
from .errors import DataError, MskQuantError, NoAtRiskSubjects, NoOverlappingKeys
from .exporters import BIOMARKER_COLUMNS, OVERLAP_COLUMNS, TRIAGE_COLUMNS, ReportExporter, print_summary
from .morphology import PostprocessRule, clean_volume_labels, postprocess_prediction
from .overlap_metrics import aggregate, bbox_from_mask, score_volume_pair
from .performance_optimizer import PerformanceMonitor
from .phantoms import PhantomSpec, rasterize
from .volume_core import LabeledVolume, ScalarVolume, SubjectRecord, load_volume, save_volume, split_subjects

logger = logging.getLogger(__name__)

T = TypeVar("T")
MAX_WORKERS = 32
BIOMARKER_KEY = ["structure", "metric"]


@dataclass
class RunResult:
    command: str
    outputs: List[Path] = field(default_factory=list)
    failures: Dict[str, str] = field(default_factory=dict)
    summary: List[Tuple[str, Any]] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return 4 if self.failures else 0


class Pipeline:
    """一次命令运行的上下文：配置、输出目录、并行度与性能监控"""

    def __init__(self, manager: RunConfigManager, out_dir: Optional[str] = None, show_progress: Optional[bool] = None):
        self.manager = manager
        self.config = manager.config
        self.out_dir = Path(out_dir or self.config["out"])
        self.jobs = min(int(self.config["jobs"]), MAX_WORKERS)
        self.seed = int(self.config["seed"])
        self.base_dir = manager.config_path.parent if manager.config_path else Path.cwd()
        self.show_progress = sys.stderr.isatty() if show_progress is None else show_progress
        self.monitor = PerformanceMonitor()
        self.logger = logging.getLogger(__name__)
        self.commands: Dict[str, Callable[[ReportExporter], RunResult]] = {
            "synth": self.cmd_synth,
            "biomarkers": self.cmd_biomarkers,
            "agree": self.cmd_agree,
            "metrics": self.cmd_metrics,
            "triage": self.cmd_triage,
            "survival": self.cmd_survival,
        }

    def run(self, command: str) -> RunResult:
        if command not in self.commands:
            raise DataError(f"未知命令: {command}")
        exporter = ReportExporter(self.out_dir, self.manager.config_hash(command), command)
        self.logger.info(f"开始执行 {command}, 输出目录 {self.out_dir}")
        with self.monitor.stage(command):
            result = self.commands[command](exporter)
        result.outputs = list(exporter.written)
        self.monitor.log_summary()
        if result.failures:
            self.logger.error(f"{command}: {len(result.failures)} 个受试者处理失败")
        print_summary(f"{command} 运行结果", result.summary + [("输出文件", len(result.outputs)), ("失败", len(result.failures))])
        return result

    # ------------------------------------------------------------------
    # 工具方法
    # ------------------------------------------------------------------

    def _resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def _read_csv(self, path: Optional[str], what: str, **kwargs) -> pd.DataFrame:
        if not path:
            raise DataError(f"未配置 {what}")
        resolved = self._resolve(path)
        if not resolved.exists():
            raise DataError(f"{what} 不存在: {resolved}")
        return pd.read_csv(resolved, **kwargs)

    def _fan_out(self, items: Mapping[str, Any], fn: Callable[[str, Any], T], desc: str) -> Tuple[Dict[str, T], Dict[str, str]]:
        """按受试者并行执行；失败记录后继续，结果按 subject_id 排序"""
        results: Dict[str, T] = {}
        failures: Dict[str, str] = {}
        if not items:
            return results, failures
        with ThreadPoolExecutor(max_workers=max(1, min(self.jobs, len(items)))) as executor:
            futures = {executor.submit(fn, key, item): key for key, item in items.items()}
            for future in tqdm(as_completed(futures), total=len(futures), desc=desc, disable=not self.show_progress):
                key = futures[future]
                try:
                    results[key] = future.result()
                except (MskQuantError, OSError) as e:
                    self.logger.error(f"{desc} 失败 {key}: {type(e).__name__}: {e}")
                    failures[key] = f"{type(e).__name__}: {e}"
        return dict(sorted(results.items())), dict(sorted(failures.items()))

    def _label_map(self, section: Mapping) -> Optional[Dict[int, str]]:
        raw = section.get("label_map")
        return None if raw is None else {int(k): str(v) for k, v in raw.items()}

    # ------------------------------------------------------------------
    # synth
    # ------------------------------------------------------------------

    def cmd_synth(self, exporter: ReportExporter) -> RunResult:
        section = self.config["synth"]
        suffix = ".nii" if section["format"] == "nifti" else ".mvol"
        phantoms = [rasterize(PhantomSpec.from_dict(entry)) for entry in section["phantoms"]]
        index = []
        for phantom in phantoms:
            name = phantom.spec.name
            files = {"labels": f"{name}_labels{suffix}"}
            save_volume(phantom.labels, self._target(exporter, files["labels"]))
            for metric, scalar in sorted(phantom.maps.items()):
                files[metric] = f"{name}_{metric}{suffix}"
                save_volume(scalar, self._target(exporter, files[metric]))
            truth = dict(phantom.truth, files=files)
            exporter.write_json(f"{name}.truth.json", truth)
            index.append(truth)
        exporter.write_json("ground_truth.json", {"phantoms": index})
        return RunResult("synth", summary=[("体模数量", len(phantoms))])

    def _target(self, exporter: ReportExporter, name: str) -> Path:
        path = exporter.out_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        exporter.written.append(path)
        return path

    # ------------------------------------------------------------------
    # biomarkers
    # ------------------------------------------------------------------

    def cmd_biomarkers(self, exporter: ReportExporter) -> RunResult:
        section = self.config["biomarkers"]
        subjects = {s["subject_id"]: s for s in section["subjects"]}
        if not subjects:
            raise DataError("biomarkers.subjects 为空")
        extractor = BiomarkerExtractor(BiomarkerConfig.from_dict(section["extract"]))
        label_map = self._label_map(section)
        clean = section["clean_labels"]

        def process(subject_id: str, entry: Mapping) -> List[BiomarkerRecord]:
            labels = load_volume(self._resolve(entry["labels"]), label_map)
            if not isinstance(labels, LabeledVolume):
                raise DataError(f"{subject_id}: 标签文件不是整数标签体")
            if clean["enabled"]:
                labels = clean_volume_labels(labels, min_size=clean["min_size"])
            maps: Dict[str, ScalarVolume] = {}
            for metric, path in sorted((entry.get("maps") or {}).items()):
                scalar = load_volume(self._resolve(path))
                if not isinstance(scalar, ScalarVolume):
                    raise DataError(f"{subject_id}: {metric} 不是标量图")
                maps[metric] = scalar
            return extractor.extract(subject_id, labels, maps)

        with self.monitor.stage("biomarkers.extract"):
            results, failures = self._fan_out(subjects, process, "biomarkers")
        records = sorted((r for recs in results.values() for r in recs), key=record_sort_key)
        exporter.write_records("biomarkers.csv", [r.to_row() for r in records], BIOMARKER_COLUMNS)

        if section["reference_csv"]:
            reference = self._read_csv(section["reference_csv"], "参考表")
            lookup = {(row.structure, row.metric): (float(row.mean), float(row.sd)) for row in reference.itertuples()}
            subject_level = [r for r in records if r.slice_index is None]
            zrows = zscore_to_reference(subject_level, lookup)
            exporter.write_records("biomarkers_zscores.csv", zrows, BIOMARKER_COLUMNS + ["zscore"])

        if section["split"]["enabled"]:
            cohort = [SubjectRecord(sid, s.get("anatomy", ""), s.get("sex"), [s["labels"]]) for sid, s in subjects.items()]
            split = split_subjects(cohort, section["split"]["ratios"], section["split"]["strata"], self.seed)
            rows = [{"subject_id": s.subject_id, "partition": part}
                    for part, members in zip(("train", "val", "test"), split) for s in members]
            rows.sort(key=lambda r: r["subject_id"])
            exporter.write_records("splits.csv", rows, ["subject_id", "partition"])

        exporter.write_json("biomarkers_run.json", {
            "n_subjects": len(subjects), "n_records": len(records), "failures": failures,
        })
        return RunResult("biomarkers", failures=failures,
                         summary=[("受试者", len(subjects)), ("记录数", len(records))])

    # ------------------------------------------------------------------
    # agree
    # ------------------------------------------------------------------

    def _subject_level(self, frame: pd.DataFrame, what: str) -> pd.DataFrame:
        missing = [c for c in ("subject_id", "structure", "metric", "value") if c not in frame.columns]
        if missing:
            raise DataError(f"{what} 缺少列: {missing}")
        if "slice_index" in frame.columns:
            frame = frame[frame["slice_index"].isna()]
        frame = frame.astype({"subject_id": str, "structure": str, "metric": str})
        duplicated = frame.duplicated(["subject_id", *BIOMARKER_KEY])
        if duplicated.any():
            raise DataError(f"{what} 中存在重复的 (subject, structure, metric) 行")
        return frame[["subject_id", *BIOMARKER_KEY, "value"]]

    def cmd_agree(self, exporter: ReportExporter) -> RunResult:
        section = self.config["agree"]
        manual = self._subject_level(self._read_csv(section["manual_csv"], "manual_csv"), "manual_csv")
        auto = self._subject_level(self._read_csv(section["auto_csv"], "auto_csv"), "auto_csv")
        merged = manual.merge(auto, on=["subject_id", *BIOMARKER_KEY], how="outer",
                              suffixes=("_manual", "_auto"), indicator=True)
        matched = merged[merged["_merge"] == "both"]
        if matched.empty:
            raise NoOverlappingKeys("manual 与 auto 表没有共同的 (subject, structure, metric) 键")
        unmatched = {
            "manual_only": int((merged["_merge"] == "left_only").sum()),
            "auto_only": int((merged["_merge"] == "right_only").sum()),
        }
        if unmatched["manual_only"] or unmatched["auto_only"]:
            self.logger.warning(f"未匹配的行: {unmatched}")

        config = AgreementConfig(
            alpha=section["alpha"], n_boot=section["n_boot"], seed=self.seed,
            path_override=section["path_override"], gpr_curve_points=section["gpr_curve_points"],
        )
        reports: Dict[str, Any] = {}
        failures: Dict[str, str] = {}
        points, curves = [], []
        for (structure, metric), group in matched.groupby(BIOMARKER_KEY, sort=True):
            key = f"{structure}/{metric}"
            group = group.sort_values("subject_id")
            pairs = [PairedSample(r.subject_id, float(r.value_manual), float(r.value_auto)) for r in group.itertuples()]
            try:
                with self.monitor.stage(f"agree.{key}"):
                    outcome = gated_battery(pairs, config)
            except DataError as e:
                self.logger.error(f"{key}: {type(e).__name__}: {e}")
                failures[key] = f"{type(e).__name__}: {e}"
                continue
            reports[key] = outcome.report
            points.append(outcome.bland_altman_points.assign(structure=structure, metric=metric))
            curves.append(outcome.regression_curve.assign(structure=structure, metric=metric))

        payload: Dict[str, Any] = {"keys": reports, "unmatched": unmatched, "failures": failures}
        if section["conditions_csv"]:
            table = self._read_csv(section["conditions_csv"], "conditions_csv", dtype={"subject_id": str})
            payload["conditions"] = compare_conditions(table.set_index("subject_id").sort_index())

        exporter.write_json("agreement.json", payload)
        point_columns = ["structure", "metric", "subject_id", "mean", "difference"]
        curve_columns = ["structure", "metric", "x", "y_pred", "y_lo", "y_hi"]
        exporter.write_csv("bland_altman_points.csv",
                           pd.concat(points, ignore_index=True) if points else pd.DataFrame(columns=point_columns),
                           point_columns)
        exporter.write_csv("regression_curves.csv",
                           pd.concat(curves, ignore_index=True) if curves else pd.DataFrame(columns=curve_columns),
                           curve_columns)
        paths = [r["path"] for r in reports.values()]
        return RunResult("agree", failures=failures, summary=[
            ("键数量", len(reports)), ("参数路径", paths.count("parametric")),
            ("非参数路径", paths.count("nonparametric")),
        ])

    # ------------------------------------------------------------------
    # metrics
    # ------------------------------------------------------------------

    def _postprocess_rules(self, section: Mapping, names: Sequence[str]) -> Dict[str, PostprocessRule]:
        post = section["postprocess"]
        default = {k: post[k] for k in ("min_size", "kernel", "sigma")}
        rules = {}
        for name in names:
            rules[name] = PostprocessRule.from_dict({**default, **(post["rules"].get(name) or {})})
        return rules

    def _prediction_from_logits(self, entry: Mapping, truth: LabeledVolume, rules: Mapping[str, PostprocessRule]) -> LabeledVolume:
        labels = np.zeros(truth.dims, dtype=np.int16)
        for code in sorted(truth.label_map):
            name = truth.label_map[code]
            path = (entry.get("logits") or {}).get(name)
            if path is None:
                continue
            logits = load_volume(self._resolve(path))
            if not isinstance(logits, ScalarVolume) or logits.dims != truth.dims:
                raise DataError(f"{name} 的 logits 必须是与真值同尺寸的标量体")
            for k in range(truth.n_slices):
                mask = postprocess_prediction(logits.slice(k), name, rules, truth.geometry.in_plane)
                labels[:, :, k][mask.bits] = code
        return LabeledVolume(labels, truth.geometry, truth.label_map)

    def cmd_metrics(self, exporter: ReportExporter) -> RunResult:
        section = self.config["metrics"]
        pairs = {p["subject_id"]: p for p in section["pairs"]}
        if not pairs:
            raise DataError("metrics.pairs 为空")
        label_map = self._label_map(section)
        prompts = section["prompts"]

        def process(subject_id: str, entry: Mapping):
            truth = load_volume(self._resolve(entry["truth"]), label_map)
            if not isinstance(truth, LabeledVolume):
                raise DataError(f"{subject_id}: 真值不是标签体")
            if entry.get("prediction"):
                prediction = load_volume(self._resolve(entry["prediction"]), label_map)
            elif entry.get("logits"):
                rules = self._postprocess_rules(section, list(truth.label_map.values()))
                prediction = self._prediction_from_logits(entry, truth, rules)
            else:
                raise DataError(f"{subject_id}: 需要 prediction 或 logits")
            scores = score_volume_pair(prediction, truth, subject_id, section["labels"])
            boxes = []
            if prompts["enabled"]:
                rng = np.random.default_rng([self.seed, zlib.crc32(subject_id.encode("utf-8"))])
                for code in sorted(truth.label_map):
                    for k in np.flatnonzero(truth.binary(code).any(axis=(0, 1))):
                        box = bbox_from_mask(truth.slice_mask(code, int(k)), prompts["shift"], rng)
                        boxes.append({"subject_id": subject_id, "label": truth.label_map[code],
                                      "slice_index": int(k), **dict(zip(("x_min", "y_min", "x_max", "y_max"), box.as_tuple()))})
            return scores, boxes

        results, failures = self._fan_out(pairs, process, "metrics")
        scores = [s for scores, _ in results.values() for s in scores]
        records = aggregate(scores, section["measures"], section["pooling"], section["include_slices"])
        exporter.write_records("overlap_metrics.csv", [r.to_row() for r in records], OVERLAP_COLUMNS)
        if prompts["enabled"]:
            boxes = [b for _, bs in results.values() for b in bs]
            exporter.write_records("prompts.csv", boxes,
                                   ["subject_id", "label", "slice_index", "x_min", "y_min", "x_max", "y_max"])
        dataset = {f"{r.metric}/{r.label}": r.value for r in records if r.level == "dataset"}
        exporter.write_json("overlap_summary.json", {
            "dataset": dataset, "pooling": section["pooling"], "n_subjects": len(results), "failures": failures,
        })
        return RunResult("metrics", failures=failures, summary=sorted(dataset.items()))

    # ------------------------------------------------------------------
    # triage
    # ------------------------------------------------------------------

    def cmd_triage(self, exporter: ReportExporter) -> RunResult:
        section = self.config["triage"]
        id_col, group_col = section["id_column"], section["group_column"]
        frame = self._read_csv(section["features_csv"], "features_csv", dtype={id_col: str, group_col: str})
        config = TriageConfig.from_dict({**section, "seed": self.seed})

        outcomes = [config.stage_a_outcome, config.stage_b_outcome]
        feature_sets = [l.features for l in config.learners]
        for joint in config.joints.values():
            outcomes.append(joint["outcome"])
            feature_sets.append(joint.get("features"))
            for tissue in (joint.get("tissues") or {}).values():
                outcomes.append(tissue["outcome"])
                feature_sets.append(tissue.get("features"))
        outcomes = list(dict.fromkeys(outcomes))
        reserved = {id_col, group_col, *outcomes}
        if any(f is None for f in feature_sets):
            features = [c for c in frame.columns if c not in reserved and pd.api.types.is_numeric_dtype(frame[c])]
        else:
            features = sorted({f for fs in feature_sets for f in fs})
        frame = frame.sort_values(id_col).reset_index(drop=True)
        cohort = RiskDataset.from_frame(frame, features, id_col, group_col, outcomes=outcomes)

        with self.monitor.stage("triage.cascade"):
            report = triage_cascade(cohort, config)
        exporter.write_json("triage_report.json", {**report.to_dict(), "features": features, "n": len(cohort)})
        exporter.write_records("triage_stages.csv", [r.to_dict() for r in report.rows], TRIAGE_COLUMNS)
        exporter.write_csv("routing.csv", report.routing.sort_values("id"))
        roc = [curve.to_frame().assign(curve=name) for name, curve in sorted(report.roc_curves.items())]
        exporter.write_csv("roc_curves.csv", pd.concat(roc, ignore_index=True), ["curve", "threshold", "fpr", "tpr"])
        return RunResult("triage", summary=[
            (f"{r.stage} {r.operating_point} AUC", r.auc) for r in report.rows
        ] + [("备注", len(report.notes))])

    # ------------------------------------------------------------------
    # survival
    # ------------------------------------------------------------------

    def cmd_survival(self, exporter: ReportExporter) -> RunResult:
        section = self.config["survival"]
        subject_col = section["subject_column"]
        frame = self._read_csv(section["longitudinal_csv"], "longitudinal_csv", dtype={subject_col: str})
        features = list(section["features"])
        if not features:
            raise DataError("survival.features 为空")
        if section["reference_csv"]:
            reference = self._read_csv(section["reference_csv"], "参考表")
            frame = zscore_features(frame, features, reference)

        horizons: Dict[str, Any] = {}
        curves, km, rocs = [], [], []
        for horizon in section["horizons"]:
            data, counts = build_landmark_dataset(
                frame, features, section["landmark_months"], horizon, subject_col, section["visit_column"],
                section["event_column"], section["followup_column"], section["missing_policy"],
            )
            with self.monitor.stage(f"survival.h{horizon:g}"):
                result = landmark_evaluation(
                    data, section["l2_lambda"], section["folds"], self.seed, section["n_boot"],
                    section["nb_weights"], tau=section["tau"],
                )
            tag = f"{horizon:g}"
            horizons[tag] = {"counts": counts, **result.report}
            curves.append(result.decision_curves.assign(horizon=tag))
            km.append(result.km_curves.assign(horizon=tag))
            rocs.append(result.roc.assign(horizon=tag))

        exporter.write_json("survival_report.json", {
            "landmark_months": section["landmark_months"], "missing_policy": section["missing_policy"],
            "features": features, "horizons": horizons,
        })
        exporter.write_csv("decision_curves.csv", pd.concat(curves, ignore_index=True),
                           ["horizon", "w", "pt", "nb_model", "nb_treat_all", "nb_treat_none"])
        exporter.write_csv("km_curves.csv", pd.concat(km, ignore_index=True),
                           ["horizon", "stratum", "time", "survival", "at_risk"])
        exporter.write_csv("roc_curves.csv", pd.concat(rocs, ignore_index=True), ["horizon", "threshold", "fpr", "tpr"])
        return RunResult("survival", summary=[(f"AUC @{h}", r["auc"]) for h, r in horizons.items()])


def zscore_features(frame: pd.DataFrame, features: Sequence[str], reference: pd.DataFrame) -> pd.DataFrame:
    """按参考表 (feature, mean, sd) 标准化特征列；参考表未覆盖的列保持原值"""
    missing = [c for c in ("feature", "mean", "sd") if c not in reference.columns]
    if missing:
        raise DataError(f"参考表缺少列: {missing}")
    frame = frame.copy()
    for row in reference.itertuples():
        if row.feature not in features:
            continue
        if not float(row.sd) > 0:
            raise DataError(f"参考标准差必须为正: {row.feature}")
        frame[row.feature] = (frame[row.feature] - float(row.mean)) / float(row.sd)
    return frame


def build_landmark_dataset(
    frame: pd.DataFrame,
    features: Sequence[str],
    landmark: float,
    horizon: float,
    subject_col: str = "subject_id",
    visit_col: str = "month",
    event_col: str = "event_month",
    followup_col: str = "followup_month",
    policy: str = "forward_fill",
) -> Tuple[RiskDataset, Dict[str, int]]:
    """构建 landmark 数据集。

    在 landmark 时仍处于风险中的受试者入组；特征取 landmark 随访（forward_fill：缺失值用此前随访向前填充，
    缺少 landmark 随访的受试者剔除；mean_impute：缺失值用队列在 landmark 随访的均值填补）；
    结局 = horizon 内是否发生事件，horizon 前删失者剔除。时间从 landmark 起算。
    """
    needed = [subject_col, visit_col, event_col, *features]
    absent = [c for c in needed if c not in frame.columns]
    if absent:
        raise DataError(f"纵向数据缺少列: {absent}")
    if policy not in ("forward_fill", "mean_impute"):
        raise DataError(f"未知缺失处理策略: {policy}")

    counts = {"subjects": 0, "not_at_risk": 0, "missing_landmark_visit": 0, "incomplete_features": 0,
              "censored_before_horizon": 0, "included": 0, "imputed_values": 0}
    rows = []
    for subject_id, visits in frame.groupby(subject_col, sort=True):
        counts["subjects"] += 1
        visits = visits.sort_values(visit_col)
        events = visits[event_col].dropna()
        event_time = float(events.min()) if not events.empty else None
        if followup_col in visits.columns and visits[followup_col].notna().any():
            followup = float(visits[followup_col].max())
        else:
            followup = float(visits[visit_col].max())
        if event_time is not None and event_time <= landmark:
            counts["not_at_risk"] += 1
            continue
        if event_time is None and followup < landmark:
            counts["not_at_risk"] += 1
            continue

        upto = visits[visits[visit_col] <= landmark]
        at_landmark = upto[upto[visit_col] == landmark]
        if policy == "forward_fill":
            if at_landmark.empty:
                counts["missing_landmark_visit"] += 1
                continue
            values = upto[list(features)].ffill().iloc[-1]
            if values.isna().any():
                counts["incomplete_features"] += 1
                continue
        else:
            if at_landmark.empty:
                counts["missing_landmark_visit"] += 1
                values = pd.Series(np.nan, index=list(features))
            else:
                values = at_landmark[list(features)].iloc[-1]

        if event_time is not None and event_time <= horizon:
            outcome = 1
        elif followup >= horizon:
            outcome = 0
        else:
            counts["censored_before_horizon"] += 1
            continue
        end = event_time if event_time is not None else followup
        rows.append({"subject_id": str(subject_id), **values.to_dict(), "outcome": outcome,
                     "time": end - landmark, "event": int(event_time is not None)})

    if not rows:
        raise NoAtRiskSubjects(f"landmark {landmark} 时没有可用的风险受试者")
    table = pd.DataFrame(rows)
    if policy == "mean_impute":
        means = table[list(features)].mean()
        if means.isna().any():
            raise DataError(f"以下特征在 landmark 随访全部缺失: {list(means[means.isna()].index)}")
        counts["imputed_values"] = int(table[list(features)].isna().sum().sum())
        table[list(features)] = table[list(features)].fillna(means)
    counts["included"] = len(table)
    logger.info(f"landmark {landmark} / horizon {horizon}: {counts}")
    data = RiskDataset(
        ids=table["subject_id"].tolist(), groups=table["subject_id"].tolist(), feature_names=list(features),
        X=table[list(features)].to_numpy(dtype=np.float64), y=table["outcome"].to_numpy(),
        time=table["time"].to_numpy(dtype=np.float64), event=table["event"].to_numpy(),
    )
    return data, counts
