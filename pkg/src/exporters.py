"""
Report Exporters - 报告导出

- CSV：固定列顺序、CRLF 行尾、浮点数 %.10g（RFC 4180）
- JSON：键排序、缩进 2，附带 schema_version 与 config_hash；NaN -> null，±inf -> "inf"/"-inf"
- 所有文件经临时文件 + os.replace 原子写入
- 控制台摘要使用 rich 表格，未安装时退化为纯文本
"""

import io
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .volume_core import atomic_write_bytes

try:
    from rich.console import Console
    from rich.table import Table
    RICH_AVAILABLE = True
except ImportError:
    RICH_AVAILABLE = False

SCHEMA_VERSION = "1.0"
FLOAT_FORMAT = "%.10g"

BIOMARKER_COLUMNS = ["subject_id", "structure", "metric", "value", "unit", "slice_index"]
OVERLAP_COLUMNS = ["subject_id", "level", "label", "metric", "value", "n"]
TRIAGE_COLUMNS = [
    "stage", "operating_point", "auc", "auc_lo", "auc_hi", "sensitivity", "sens_lo", "sens_hi",
    "spec_target", "threshold", "n_in", "n_forwarded", "n_discarded",
]

logger = logging.getLogger(__name__)


def json_safe(value: Any) -> Any:
    """递归转换为可序列化的纯 Python 对象"""
    if isinstance(value, Mapping):
        return {str(k): json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    if isinstance(value, np.ndarray):
        return [json_safe(v) for v in value.tolist()]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return None
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(value, Path):
        return str(value)
    return value


class ReportExporter:
    """写出一次运行的全部产物到输出目录"""

    def __init__(self, out_dir: Union[str, Path], config_hash: str, command: str):
        self.out_dir = Path(out_dir)
        self.config_hash = config_hash
        self.command = command
        self.logger = logging.getLogger(__name__)
        self.written: List[Path] = []

    def _target(self, name: str) -> Path:
        path = self.out_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def write_csv(self, name: str, frame: pd.DataFrame, columns: Optional[Sequence[str]] = None) -> Path:
        if columns is not None:
            missing = [c for c in columns if c not in frame.columns]
            for column in missing:
                frame = frame.assign(**{column: ""})
            frame = frame.loc[:, list(columns)]
        buffer = io.StringIO()
        frame.to_csv(buffer, index=False, lineterminator="\r\n", float_format=FLOAT_FORMAT, na_rep="")
        return self._write_bytes(name, buffer.getvalue().encode("utf-8"))

    def write_records(self, name: str, rows: Sequence[Mapping], columns: Sequence[str]) -> Path:
        return self.write_csv(name, pd.DataFrame(list(rows), columns=list(columns)), columns)

    def write_json(self, name: str, payload: Mapping[str, Any]) -> Path:
        document = {"schema_version": SCHEMA_VERSION, "config_hash": self.config_hash, "command": self.command}
        document.update(json_safe(payload))
        text = json.dumps(document, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False)
        return self._write_bytes(name, (text + "\n").encode("utf-8"))

    def _write_bytes(self, name: str, payload: bytes) -> Path:
        path = self._target(name)
        atomic_write_bytes(path, payload)
        self.written.append(path)
        self.logger.info(f"已写出: {path}")
        return path


def print_summary(title: str, rows: Sequence[Tuple[str, Any]]) -> None:
    """在控制台打印两列摘要表"""
    if RICH_AVAILABLE:
        table = Table(title=title, border_style="green")
        table.add_column("指标", style="cyan")
        table.add_column("值", style="yellow")
        for name, value in rows:
            table.add_row(str(name), _fmt(value))
        Console().print(table)
    else:
        print(f"\n{title}:")
        for name, value in rows:
            print(f"  {name}: {_fmt(value)}")


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.4g}"
    return str(value)
