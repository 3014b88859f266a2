"""
Health Checker - 系统健康检查

检查 Python 版本、运行时依赖与各模块可导入性
"""

import importlib
import logging
import sys
from typing import List, Tuple

MIN_PYTHON = (3, 10)

REQUIRED_PACKAGES: List[Tuple[str, str]] = [
    ("numpy", "numpy"), ("scipy", "scipy"), ("scikit-learn", "sklearn"),
    ("scikit-image", "skimage"), ("nibabel", "nibabel"), ("lifelines", "lifelines"),
    ("pandas", "pandas"), ("pyyaml", "yaml"), ("jsonschema", "jsonschema"),
    ("rich", "rich"), ("tqdm", "tqdm"), ("psutil", "psutil"),
]

PROJECT_MODULES = [
    "src.errors", "src.volume_core", "src.morphology", "src.overlap_metrics", "src.biomarkers",
    "src.agreement_stats", "src.clinical_models", "src.config_manager", "src.exporters",
    "src.performance_optimizer", "src.phantoms", "src.pipeline",
]


def run_health_check() -> int:
    """运行系统健康检查，返回退出码（0 正常 / 1 存在问题）"""
    logger = logging.getLogger(__name__)

    print("mskquant - 健康检查")
    print("=" * 50)

    issues = []

    version = sys.version_info
    if version < MIN_PYTHON:
        issues.append(f"[ERROR] Python版本过低: {version.major}.{version.minor}, 需要 >= 3.10")
    else:
        print(f"[OK] Python版本: {version.major}.{version.minor}.{version.micro}")

    missing = []
    for package_name, import_name in REQUIRED_PACKAGES:
        try:
            importlib.import_module(import_name)
            print(f"[OK] 依赖包: {package_name}")
        except ImportError:
            missing.append(package_name)
            issues.append(f"[ERROR] 缺少依赖包: {package_name}")
    if missing:
        print("\n安装缺少的依赖包:")
        print(f"pip install {' '.join(missing)}")

    for module in PROJECT_MODULES:
        try:
            importlib.import_module(module)
            print(f"[OK] 模块: {module}")
        except Exception as e:  # noqa: BLE001
            issues.append(f"[ERROR] 模块导入失败: {module}: {e}")

    print("\n" + "=" * 50)
    if issues:
        for issue in issues:
            print(issue)
        logger.error(f"健康检查发现 {len(issues)} 个问题")
        return 1
    print("[OK] 全部检查通过")
    return 0
