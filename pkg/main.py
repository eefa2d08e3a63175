"""
跨形态模仿流水线
命令行入口
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from tqdm import tqdm

from config import settings
from errors import ConfigError, MorphAdaptError, StageError
from pipeline.ablation import ABLATIONS, run_ablation
from pipeline.engine import run_pipeline
from pipeline.settings import STAGES, load_experiment_config
from progress_manager import progress_manager
from trajopt.presets import PRESET_ALIASES, PresetScale

logger = logging.getLogger(__name__)

# 子命令 -> 目标阶段
COMMANDS = {
    "gen-teacher": "gen-teacher",
    "gen-random": "gen-random",
    "train-dynamics": "train-dynamics",
    "build-student": "build-student",
    "train-lfd": "train-lfd",
    "eval": "evaluate",
    "pipeline": STAGES[-1],
}

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging() -> None:
    """配置日志：控制台 + 可选日志文件"""
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if settings.log_file:
        Path(settings.log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(settings.log_file, encoding="utf-8"))
    logging.basicConfig(
        level=getattr(logging, settings.log_level.upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
    )


class TqdmProgress:
    """把进度管理器的更新渲染成 tqdm 进度条，每个阶段一个"""

    def __init__(self):
        self.bars: Dict[str, tqdm] = {}

    def __call__(self, progress: dict) -> None:
        stage = progress["stage"]
        total = progress["total"]
        bar = self.bars.get(stage)
        if bar is None or bar.total != total or progress["completed"] < bar.n:
            if bar is not None:
                bar.close()
            bar = self.bars[stage] = tqdm(total=total, desc=stage, leave=False, dynamic_ncols=True)
        bar.n = progress["completed"]
        metrics = {k: v for k, v in progress.items() if k not in ("stage", "completed", "total", "percentage")}
        if metrics:
            bar.set_postfix({k: f"{v:.3g}" if isinstance(v, float) else v for k, v in metrics.items()}, refresh=False)
        bar.refresh()
        if bar.n >= total:
            bar.close()
            del self.bars[stage]

    def close(self) -> None:
        for bar in self.bars.values():
            bar.close()
        self.bars.clear()


def _parse_assignments(values: Optional[List[str]]) -> Dict[str, str]:
    assignments = {}
    for item in values or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {item!r}")
        assignments[key.strip()] = value.strip()
    return assignments


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value 配置文件（点号命名空间，例如 optimizer.method=cem）")
    common.add_argument("--seed", type=int, help="全局随机种子")
    common.add_argument("--preset", choices=[s.value for s in PresetScale] + list(PRESET_ALIASES), help="规模预设")
    common.add_argument("--out", help="输出目录（MORPHADAPT_OUT 优先）")
    common.add_argument("--workers", type=int, help="阶段内并行线程数")
    common.add_argument("--task", help="ThreeBoxes、ClothFold 或 DryCloth")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="覆盖单个配置项，可重复")
    common.add_argument("--force", action="store_true", help="忽略已有产物重新执行")
    common.add_argument("--no-progress", action="store_true", help="不显示进度条")

    parser = argparse.ArgumentParser(prog="morphadapt", description="跨形态模仿：教师演示 → 学生数据集 → 示教学习")
    commands = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        commands.add_parser(name, parents=[common], help=f"执行到 {COMMANDS[name]} 阶段")
    ablate = commands.add_parser("ablate", parents=[common], help="运行消融实验")
    ablate.add_argument("ablation_id", choices=list(ABLATIONS) + [a.lower() for a in ABLATIONS])
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    """
    执行命令

    Returns:
        退出码：0 成功，1 阶段失败，2 配置错误
    """
    args = build_parser().parse_args(argv)
    setup_logging()
    listener = None
    if not args.no_progress:
        listener = TqdmProgress()
        progress_manager.add_listener(listener)
    try:
        overrides = _parse_assignments(args.set)
        overrides.update({"seed": args.seed, "out": args.out, "workers": args.workers, "task": args.task})
        config = load_experiment_config(args.preset, args.config, overrides)

        if args.command == "ablate":
            report = run_ablation(args.ablation_id, config)
            print(Path(report.table_path).read_text(encoding="utf-8"))
            return 0

        report = run_pipeline(config, target=COMMANDS[args.command], force=args.force)
        for stage, status in report.statuses.items():
            logger.info(f"{stage}: {status} ({report.artifacts.get(stage, '-')})")
        if report.table_path and Path(report.table_path).is_file():
            print(Path(report.table_path).read_text(encoding="utf-8"))
        return 0
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return 2
    except StageError as e:
        logger.error(f"Pipeline aborted in stage {e.stage}: {e.cause}")
        return 1
    except MorphAdaptError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 1
    finally:
        if listener is not None:
            progress_manager.remove_listener(listener)
            listener.close()


def main():
    """主函数"""
    sys.exit(run())


if __name__ == "__main__":
    main()
