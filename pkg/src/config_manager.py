"""
Run Configuration System
运行配置系统

特点：
1. JSON / YAML 配置文件
2. 按命令的默认值与深度合并
3. 环境变量覆盖（MSKQ_SEED / MSKQ_JOBS）
4. JSON Schema 校验 + 语义校验（错误汇总后统一抛出）
5. 配置哈希（嵌入每份报告）
"""

import copy
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import jsonschema
import yaml

from .errors import ConfigError

COMMANDS = ("synth", "biomarkers", "agree", "metrics", "triage", "survival")
ENV_PREFIX = "MSKQ_"

# 各命令的默认配置；过程常数与研究方案保持一致
DEFAULT_CONFIG: Dict[str, Any] = {
    "seed": 0,
    "jobs": 4,
    "out": "output",
    "synth": {
        "format": "mvol",
        "phantoms": [
            {"name": "annulus", "kind": "annulus", "dims": [64, 64, 3], "spacing": [0.5, 0.5, 1.0],
             "r_in": 20, "r_out": 28},
            {"name": "sphere", "kind": "sphere", "dims": [48, 48, 48], "spacing": [0.5, 0.5, 0.5],
             "radius_mm": 10.0},
            {"name": "disc_0", "kind": "rect_disc", "dims": [96, 96, 1], "spacing": [0.5, 0.5, 1.0],
             "width_px": 40, "height_px": 12},
            {"name": "disc_15", "kind": "rotated_disc", "dims": [96, 96, 1], "spacing": [0.5, 0.5, 1.0],
             "width_px": 40, "height_px": 12, "angle_deg": 15.0},
            {"name": "disc_30", "kind": "rotated_disc", "dims": [96, 96, 1], "spacing": [0.5, 0.5, 1.0],
             "width_px": 40, "height_px": 12, "angle_deg": 30.0},
            {"name": "disc_45", "kind": "rotated_disc", "dims": [96, 96, 1], "spacing": [0.5, 0.5, 1.0],
             "width_px": 40, "height_px": 12, "angle_deg": 45.0},
            {"name": "uniform_t2", "kind": "uniform_map", "dims": [32, 32, 2], "spacing": [0.5, 0.5, 2.0],
             "value_ms": 40.0},
        ],
    },
    "biomarkers": {
        "subjects": [],
        "label_map": None,
        "extract": {
            "thickness": [],
            "disc_height": [],
            "volume": "all",
            "relaxation": [],
            "full_width": False,
            "ridge_snap": False,
            "relaxation_clip_ms": [0.0, 100.0],
        },
        "clean_labels": {"enabled": False, "min_size": 1000},
        "reference_csv": None,
        "split": {"enabled": False, "ratios": [0.70, 0.15, 0.15], "strata": ["anatomy", "sex"]},
    },
    "agree": {
        "manual_csv": None,
        "auto_csv": None,
        "alpha": 0.05,
        "n_boot": 10000,
        "path_override": None,
        "gpr_curve_points": 100,
        "conditions_csv": None,
    },
    "metrics": {
        "pairs": [],
        "label_map": None,
        "labels": None,
        "measures": ["dice", "jaccard"],
        "pooling": "per_label_then_mean",
        "include_slices": True,
        "postprocess": {"min_size": 100, "kernel": 7, "sigma": None, "rules": {}},
        "prompts": {"enabled": False, "shift": 20},
    },
    "triage": {
        "features_csv": None,
        "id_column": "id",
        "group_column": "subject_id",
        "learners": [{"name": "logistic", "features": None, "l2_lambda": 1.0, "standardize": True}],
        "stage_a": {"outcome": "abnormal", "target_specificity": 0.90},
        "stage_b": {"outcome": "cartilage_bone", "operating_points": [0.85, 0.90], "routing_specificity": 0.85},
        "stage_c": {"target_specificity": 0.85, "l2_lambdas": [0.1, 1.0], "joints": {}},
        "folds": 5,
        "n_boot": 2000,
    },
    "survival": {
        "longitudinal_csv": None,
        "subject_column": "subject_id",
        "visit_column": "month",
        "event_column": "event_month",
        "followup_column": "followup_month",
        "features": [],
        "landmark_months": 48,
        "horizons": [96, 120],
        "missing_policy": "forward_fill",
        "l2_lambda": 1.0,
        "folds": 5,
        "n_boot": 2000,
        "nb_weights": [0.20, 1.00],
        "tau": None,
        "reference_csv": None,
    },
}

_NUM = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}
_STR_LIST = {"type": "array", "items": {"type": "string"}}
_OPT_STR = {"type": ["string", "null"]}
_PROB = {"type": "number", "minimum": 0, "maximum": 1}
_LABEL_MAP = {"type": ["object", "null"], "additionalProperties": {"type": "string"}}
_VEC3 = {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3}


def _section(properties: Dict, required: Optional[List[str]] = None) -> Dict:
    schema = {"type": "object", "properties": properties, "additionalProperties": False}
    if required:
        schema["required"] = required
    return schema


CONFIG_SCHEMA: Dict[str, Any] = _section({
    "seed": {"type": "integer", "minimum": 0},
    "jobs": _POS_INT,
    "out": {"type": "string"},
    "synth": _section({
        "format": {"enum": ["mvol", "nifti"]},
        "phantoms": {"type": "array", "items": _section({
            "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
            "kind": {"enum": ["annulus", "sphere", "rect_disc", "rotated_disc", "uniform_map"]},
            "dims": {"type": "array", "items": _POS_INT, "minItems": 3, "maxItems": 3},
            "spacing": _VEC3,
            "r_in": _NUM, "r_out": _NUM, "radius_mm": _NUM,
            "width_px": _NUM, "height_px": _NUM, "angle_deg": _NUM,
            "value_ms": _NUM, "region_px": _NUM,
            "label": {"type": "string"},
        }, ["name", "kind", "dims", "spacing"])},
    }),
    "biomarkers": _section({
        "subjects": {"type": "array", "items": _section({
            "subject_id": {"type": "string"},
            "labels": {"type": "string"},
            "maps": {"type": "object", "additionalProperties": {"type": "string"}},
            "anatomy": {"type": "string"},
            "sex": {"enum": ["F", "M", None]},
        }, ["subject_id", "labels"])},
        "label_map": _LABEL_MAP,
        "extract": _section({
            "thickness": _STR_LIST, "disc_height": _STR_LIST,
            "volume": {"anyOf": [{"const": "all"}, _STR_LIST]},
            "relaxation": _STR_LIST,
            "full_width": {"type": "boolean"}, "ridge_snap": {"type": "boolean"},
            "relaxation_clip_ms": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
        }),
        "clean_labels": _section({"enabled": {"type": "boolean"}, "min_size": _POS_INT}),
        "reference_csv": _OPT_STR,
        "split": _section({
            "enabled": {"type": "boolean"},
            "ratios": {"type": "array", "items": _PROB, "minItems": 3, "maxItems": 3},
            "strata": _STR_LIST,
        }),
    }),
    "agree": _section({
        "manual_csv": _OPT_STR, "auto_csv": _OPT_STR,
        "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "n_boot": _POS_INT,
        "path_override": {"enum": ["parametric", "nonparametric", None]},
        "gpr_curve_points": {"type": "integer", "minimum": 2},
        "conditions_csv": _OPT_STR,
    }),
    "metrics": _section({
        "pairs": {"type": "array", "items": _section({
            "subject_id": {"type": "string"},
            "prediction": {"type": "string"},
            "truth": {"type": "string"},
            "logits": {"type": "object", "additionalProperties": {"type": "string"}},
        }, ["subject_id", "truth"])},
        "label_map": _LABEL_MAP,
        "labels": {"type": ["array", "null"], "items": {"type": "integer"}},
        "measures": {"type": "array", "items": {"enum": ["dice", "jaccard"]}, "minItems": 1},
        "pooling": {"enum": ["per_label_then_mean", "pooled_then_mean"]},
        "include_slices": {"type": "boolean"},
        "postprocess": _section({
            "min_size": _POS_INT, "kernel": _POS_INT, "sigma": {"type": ["number", "null"]},
            "rules": {"type": "object", "additionalProperties": _section({
                "min_size": _POS_INT, "kernel": _POS_INT, "sigma": {"type": ["number", "null"]},
            })},
        }),
        "prompts": _section({"enabled": {"type": "boolean"}, "shift": {"type": "integer", "minimum": 0}}),
    }),
    "triage": _section({
        "features_csv": _OPT_STR,
        "id_column": {"type": "string"},
        "group_column": {"type": "string"},
        "learners": {"type": "array", "minItems": 1, "items": _section({
            "name": {"type": "string"},
            "features": {"type": ["array", "null"], "items": {"type": "string"}},
            "l2_lambda": {"type": "number", "minimum": 0},
            "standardize": {"type": "boolean"},
        }, ["name"])},
        "stage_a": _section({"outcome": {"type": "string"}, "target_specificity": _PROB}),
        "stage_b": _section({
            "outcome": {"type": "string"},
            "operating_points": {"type": "array", "items": _PROB, "minItems": 1},
            "routing_specificity": _PROB,
        }),
        "stage_c": _section({
            "target_specificity": _PROB,
            "l2_lambdas": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
            "joints": {"type": "object", "additionalProperties": _section({
                "outcome": {"type": "string"},
                "features": {"type": ["array", "null"], "items": {"type": "string"}},
                "tissues": {"type": "object", "additionalProperties": _section({
                    "outcome": {"type": "string"},
                    "features": {"type": ["array", "null"], "items": {"type": "string"}},
                }, ["outcome"])},
            }, ["outcome"])},
        }),
        "folds": {"type": "integer", "minimum": 2},
        "n_boot": _POS_INT,
    }),
    "survival": _section({
        "longitudinal_csv": _OPT_STR,
        "subject_column": {"type": "string"},
        "visit_column": {"type": "string"},
        "event_column": {"type": "string"},
        "followup_column": {"type": "string"},
        "features": _STR_LIST,
        "landmark_months": {"type": "number", "minimum": 0},
        "horizons": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
        "missing_policy": {"enum": ["forward_fill", "mean_impute"]},
        "l2_lambda": {"type": "number", "minimum": 0},
        "folds": {"type": "integer", "minimum": 2},
        "n_boot": _POS_INT,
        "nb_weights": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
        "tau": {"type": ["number", "null"]},
        "reference_csv": _OPT_STR,
    }),
})


def deep_merge(base: Dict, override: Mapping) -> Dict:
    """递归合并；列表与标量整体替换"""
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


class ConfigValidator:
    """配置验证器"""

    def __init__(self, schema: Optional[Dict] = None):
        self.schema = schema or CONFIG_SCHEMA
        self._validator = jsonschema.Draft7Validator(self.schema)

    def validate(self, config: Dict) -> List[str]:
        """验证配置，返回错误列表"""
        errors = []
        for error in sorted(self._validator.iter_errors(config), key=lambda e: list(map(str, e.absolute_path))):
            location = ".".join(str(p) for p in error.absolute_path) or "<root>"
            errors.append(f"配置格式错误: {error.message} at {location}")
        if errors:
            return errors
        errors.extend(self._custom_validation(config))
        return errors

    def _custom_validation(self, config: Dict) -> List[str]:
        """自定义验证规则"""
        errors = []

        ratios = config["biomarkers"]["split"]["ratios"]
        if abs(sum(ratios) - 1.0) > 1e-9:
            errors.append(f"划分比例之和必须为 1: {ratios}")

        clip = config["biomarkers"]["extract"]["relaxation_clip_ms"]
        if clip[0] >= clip[1]:
            errors.append(f"弛豫截断区间无效: {clip}")

        post = config["metrics"]["postprocess"]
        for name, rule in [("default", post), *post.get("rules", {}).items()]:
            kernel = rule.get("kernel", 7)
            if kernel % 2 == 0:
                errors.append(f"后处理规则 '{name}' 的结构元尺寸必须为奇数: {kernel}")
            if rule.get("sigma") is not None and rule["sigma"] <= 0:
                errors.append(f"后处理规则 '{name}' 的 sigma 必须为正")

        triage = config["triage"]
        targets = [triage["stage_a"]["target_specificity"], triage["stage_b"]["routing_specificity"],
                   triage["stage_c"]["target_specificity"], *triage["stage_b"]["operating_points"]]
        for target in targets:
            if not 0.0 < target < 1.0:
                errors.append(f"特异度目标必须位于 (0, 1): {target}")

        survival = config["survival"]
        for horizon in survival["horizons"]:
            if horizon <= survival["landmark_months"]:
                errors.append(f"预测时间窗 {horizon} 必须晚于 landmark {survival['landmark_months']}")

        for i, phantom in enumerate(config["synth"]["phantoms"]):
            if any(s <= 0 for s in phantom["spacing"]):
                errors.append(f"体模 {phantom['name']} 的像素间距必须为正")
            names = [p["name"] for p in config["synth"]["phantoms"][:i]]
            if phantom["name"] in names:
                errors.append(f"体模名称重复: {phantom['name']}")

        subject_ids = [s["subject_id"] for s in config["biomarkers"]["subjects"]]
        if len(subject_ids) != len(set(subject_ids)):
            errors.append("biomarkers.subjects 中存在重复的 subject_id")

        return errors


class RunConfigManager:
    """加载、合并、覆盖、校验一次运行的配置"""

    def __init__(self, config_path: Optional[Union[str, Path]] = None, env_prefix: str = ENV_PREFIX):
        self.config_path = Path(config_path) if config_path else None
        self.env_prefix = env_prefix
        self.validator = ConfigValidator()
        self.logger = logging.getLogger(__name__)
        self.config: Dict[str, Any] = {}
        self.overrides: List[str] = []

    def load(self, cli_overrides: Optional[Mapping[str, Any]] = None) -> Dict[str, Any]:
        """默认值 <- 配置文件 <- 环境变量 <- 命令行参数，然后校验"""
        user = self._load_config_file(self.config_path) if self.config_path else {}
        config = deep_merge(DEFAULT_CONFIG, user)
        config = self._apply_env_overrides(config)
        for key, value in (cli_overrides or {}).items():
            if value is not None:
                config[key] = value
                self.overrides.append(f"cli:{key}")

        errors = self.validator.validate(config)
        if errors:
            for error in errors:
                self.logger.error(error)
            raise ConfigError("配置验证失败: " + "; ".join(errors))
        self.config = config
        self.logger.info(f"配置加载完成, hash={self.config_hash()[:12]}")
        return copy.deepcopy(config)

    def _load_config_file(self, file_path: Path) -> Dict:
        """加载配置文件"""
        if not file_path.exists():
            raise ConfigError(f"配置文件不存在: {file_path}")
        suffix = file_path.suffix.lower()
        try:
            with open(file_path, "r", encoding="utf-8") as f:
                if suffix == ".json":
                    data = json.load(f)
                elif suffix in (".yml", ".yaml"):
                    data = yaml.safe_load(f)
                else:
                    raise ConfigError(f"不支持的配置文件格式: {suffix}")
        except (json.JSONDecodeError, yaml.YAMLError) as e:
            raise ConfigError(f"配置文件解析失败: {file_path}: {e}") from e
        if data is None:
            return {}
        if not isinstance(data, dict):
            raise ConfigError(f"配置文件顶层必须是映射: {file_path}")
        return data

    def _apply_env_overrides(self, config: Dict) -> Dict:
        """应用环境变量覆盖"""
        config = copy.deepcopy(config)
        env_mappings = {
            f"{self.env_prefix}SEED": ("seed", int),
            f"{self.env_prefix}JOBS": ("jobs", int),
        }
        for env_var, (key, type_func) in env_mappings.items():
            value = os.getenv(env_var)
            if value is None:
                continue
            try:
                config[key] = type_func(value)
            except ValueError as e:
                raise ConfigError(f"环境变量 {env_var} 值无效: {value}") from e
            self.overrides.append(f"env:{env_var}")
            self.logger.info(f"环境变量覆盖: {env_var} = {config[key]}")
        return config

    def section(self, command: str) -> Dict[str, Any]:
        if command not in COMMANDS:
            raise ConfigError(f"未知命令: {command}")
        section = copy.deepcopy(self.config[command])
        section.setdefault("seed", self.config["seed"])
        return section

    def config_hash(self, command: Optional[str] = None) -> str:
        """规范化 JSON（键排序）的 SHA-256"""
        payload = self.config if command is None else {
            "command": command, "seed": self.config["seed"], command: self.config[command],
        }
        return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()

    def export_config(self, file_path: Union[str, Path]) -> None:
        """导出解析后的配置"""
        file_path = Path(file_path)
        file_path.parent.mkdir(parents=True, exist_ok=True)
        with open(file_path, "w", encoding="utf-8") as f:
            if file_path.suffix.lower() in (".yml", ".yaml"):
                yaml.safe_dump(self.config, f, default_flow_style=False, allow_unicode=True, sort_keys=True)
            else:
                json.dump(self.config, f, ensure_ascii=False, indent=2, sort_keys=True)
        self.logger.info(f"配置已导出到: {file_path}")
