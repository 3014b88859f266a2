"""
Performance Monitoring Module
性能监控模块

按流水线阶段记录耗时与内存变化；结果只写日志，不进入输出文件
"""

import logging
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, Iterator, List, Optional

import psutil


@dataclass
class StageMetrics:
    """单个阶段的性能指标"""
    stage: str
    execution_time: float
    memory_delta_mb: float
    rss_mb: float
    timestamp: datetime = field(default_factory=datetime.now)


class PerformanceMonitor:
    """性能监控器"""

    def __init__(self):
        self.records: List[StageMetrics] = []
        self.process = psutil.Process()
        self.logger = logging.getLogger(__name__)

    def rss_mb(self) -> float:
        return self.process.memory_info().rss / (1024 ** 2)

    def record(self, metrics: StageMetrics) -> None:
        self.records.append(metrics)
        self.logger.info(
            f"阶段 {metrics.stage}: {metrics.execution_time:.3f}s, "
            f"内存变化 {metrics.memory_delta_mb:+.1f} MB (RSS {metrics.rss_mb:.1f} MB)"
        )

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        """阶段计时上下文管理器"""
        start = time.perf_counter()
        before = self.rss_mb()
        try:
            yield
        finally:
            after = self.rss_mb()
            self.record(StageMetrics(name, time.perf_counter() - start, after - before, after))

    def get_performance_summary(self) -> Dict[str, Dict[str, float]]:
        """按阶段汇总"""
        grouped: Dict[str, List[StageMetrics]] = defaultdict(list)
        for metrics in self.records:
            grouped[metrics.stage].append(metrics)
        return {
            name: {
                "calls": len(items),
                "total_time": sum(m.execution_time for m in items),
                "max_memory_delta_mb": max(m.memory_delta_mb for m in items),
            }
            for name, items in grouped.items()
        }

    def log_summary(self) -> None:
        """按阶段输出汇总日志"""
        for name, item in sorted(self.get_performance_summary().items()):
            self.logger.info(
                f"阶段汇总 {name}: {item['calls']} 次, 共 {item['total_time']:.3f}s, "
                f"最大内存变化 {item['max_memory_delta_mb']:+.1f} MB"
            )
        peak: Optional[float] = max((m.rss_mb for m in self.records), default=None)
        if peak is not None:
            self.logger.info(f"共 {len(self.records)} 条阶段记录, 峰值 RSS {peak:.1f} MB")
