"""
mskquant - Main Entry Point
肌骨影像定量分析 - 主入口

分割体 -> 生物标志物 -> 一致性统计 -> 分诊与预后模型
"""

import argparse
import logging
import os
import sys
from pathlib import Path

# 添加项目路径
PROJECT_ROOT = Path(__file__).parent
sys.path.insert(0, str(PROJECT_ROOT))

from src.config_manager import COMMANDS, RunConfigManager  # noqa: E402
from src.errors import ConfigError, DataError, MskQuantError  # noqa: E402


def setup_logging(log_level: str = "INFO"):
    """设置日志"""
    os.makedirs("logs", exist_ok=True)

    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler("logs/mskquant.log", encoding='utf-8'),
            logging.StreamHandler()
        ],
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mskquant",
        description="肌骨影像定量分析流水线",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
示例用法:
  %(prog)s synth --out phantoms                    # 生成解析体模
  %(prog)s biomarkers --config configs/knee.yaml   # 批量提取生物标志物
  %(prog)s agree --config configs/agree.yaml       # 人工/自动一致性分析
  %(prog)s triage --config configs/triage.yaml --seed 7
  %(prog)s --health-check                          # 运行健康检查
        """
    )
    parser.add_argument('command', nargs='?', choices=COMMANDS, help='要执行的命令')
    parser.add_argument('-c', '--config', help='配置文件路径 (YAML / JSON)')
    parser.add_argument('--seed', type=int, help='随机种子（覆盖配置与 MSKQ_SEED）')
    parser.add_argument('-o', '--out', help='输出目录')
    parser.add_argument('--jobs', type=int, help='并行线程数')
    parser.add_argument('--health-check', action='store_true', help='运行健康检查')
    parser.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    return parser


def main(argv=None) -> int:
    """主函数；返回进程退出码"""
    parser = build_parser()
    args = parser.parse_args(argv)

    setup_logging(args.log_level)
    logger = logging.getLogger(__name__)

    try:
        if args.health_check:
            from src.health_checker import run_health_check
            return run_health_check()
        if not args.command:
            parser.print_help()
            return 0

        manager = RunConfigManager(args.config)
        manager.load({"seed": args.seed, "out": args.out, "jobs": args.jobs})

        from src.pipeline import Pipeline
        result = Pipeline(manager).run(args.command)
        logger.info(f"{args.command} 完成: {len(result.outputs)} 个输出文件, 退出码 {result.exit_code}")
        return result.exit_code

    except KeyboardInterrupt:
        logger.info("程序被用户中断")
        return 1
    except (ConfigError, DataError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        if args.log_level == 'DEBUG':
            raise
        return e.exit_code
    except MskQuantError as e:
        logger.error(f"程序执行失败: {e}")
        return e.exit_code
    except Exception as e:
        logger.error(f"程序执行失败: {e}")
        if args.log_level == 'DEBUG':
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
