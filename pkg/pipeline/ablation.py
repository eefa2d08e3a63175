"""
消融实验
ABL1 优化方法、ABL2 动力学结构、ABL3 数据集性能、ABL4 演示组成、ABL5 RSI-IR
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List

from dynamics.evaluate import evaluate_dynamics
from dynamics.trainer import train_dynamics
from errors import ConfigError
from lfd.evaluate import policy_scores
from lfd.settings import LfdConfig
from lfd.trainer import default_eval_seeds, train_lfd
from pipeline import storage
from pipeline.engine import ARTIFACTS, run_pipeline
from pipeline.reports import ReportRow, write_report
from pipeline.settings import ExperimentConfig
from tasks.teacher import Trajectory, record_scripted_dataset, scripted_policy_for
from trajopt.presets import QuickOptimizer
from trajopt.transfer import StudentDataset, build_student_dataset
from utils.stats import summary_stats

logger = logging.getLogger(__name__)

ABLATIONS = ("ABL1", "ABL2", "ABL3", "ABL4", "ABL5")


@dataclass
class AblationReport:
    ablation_id: str
    title: str
    rows: List[ReportRow] = field(default_factory=list)
    csv_path: str = ""
    table_path: str = ""


def _load(config: ExperimentConfig, stage: str) -> storage.DatasetContainer:
    return storage.load_dataset(Path(config.out) / ARTIFACTS[stage])


def _stats(scores: List[float]) -> Dict[str, float]:
    return summary_stats(scores, allow_empty=True)


def _require_optimization(config: ExperimentConfig, ablation_id: str) -> None:
    if config.teacher_pickers <= config.student_pickers:
        raise ConfigError(
            f"{ablation_id} compares optimized datasets and needs more teacher pickers than student pickers, "
            f"got n={config.teacher_pickers}, m={config.student_pickers}"
        )


def _require_one_picker(config: ExperimentConfig, ablation_id: str) -> None:
    if config.student_pickers != 1:
        raise ConfigError(f"{ablation_id} uses scripted one-picker demos and needs student_morphology=1")


def _one_picker_demos(config: ExperimentConfig, count: int) -> List[Trajectory]:
    policy = scripted_policy_for(config.task, "one_picker", config.sim)
    return record_scripted_dataset(config.task, policy, count, config.seed, 1, config.sim, stage="ablation-d1p")


def _train_and_score(config: ExperimentConfig, dataset: StudentDataset, lfd_config: LfdConfig) -> List[float]:
    """对每个种子训练策略，汇总最终评估回合的得分"""
    scores: List[float] = []
    for seed in config.ablation.seeds:
        run_config = lfd_config.model_copy(update={"seed": seed})
        result = train_lfd(dataset, run_config, config.sim)
        scores += policy_scores(result.params, config.task, config.eval_rollouts, default_eval_seeds(seed),
                                config.sim, workers=config.workers)
    return scores


# ============ 各项消融 ============

def _optimizer_ablation(config: ExperimentConfig) -> List[ReportRow]:
    """ABL1：同一预算下 random / CMA-ES / MPPI / CEM 得到的学生数据集性能"""
    _require_optimization(config, "ABL1")
    run_pipeline(config, target="gen-teacher")
    run_pipeline(config, target="train-dynamics")
    demos = storage.teacher_demos(_load(config, "gen-teacher"))[:config.ablation.variants]
    params = storage.dynamics_params(_load(config, "train-dynamics"))
    rows = []
    for name, optimizer in QuickOptimizer.variants(config.optimizer_for_run()).items():
        logger.info(f"ABL1: building student dataset with {name}")
        dataset = build_student_dataset(demos, params, config.sim, optimizer, config.lfd.reward_mode,
                                        num_pickers=config.student_pickers, task_id=config.task)
        rows.append(ReportRow(name, _stats(dataset.attempted_scores), {"dropped": dataset.dropped}))
    return rows


def _architecture_ablation(config: ExperimentConfig) -> List[ReportRow]:
    """ABL2：不同动力学结构得到的学生数据集性能"""
    _require_optimization(config, "ABL2")
    run_pipeline(config, target="gen-random")
    run_pipeline(config, target="gen-teacher")
    random_data = storage.random_dataset(_load(config, "gen-random"))
    demos = storage.teacher_demos(_load(config, "gen-teacher"))[:config.ablation.variants]
    rows = []
    for variant in config.ablation.architectures:
        arch = config.arch.model_copy(update={"variant": variant})
        logger.info(f"ABL2: training {variant.value} dynamics")
        params, report = train_dynamics(random_data, arch, config.dynamics, config.seed)
        heldout = [random_data.episodes[i] for i in report.heldout_episodes]
        metrics = evaluate_dynamics(params, heldout, config.sim, measure_speed=False)
        dataset = build_student_dataset(demos, params, config.sim, config.optimizer_for_run(),
                                        config.lfd.reward_mode, num_pickers=config.student_pickers,
                                        task_id=config.task)
        rows.append(ReportRow(variant.value, _stats(dataset.attempted_scores), {
            "heldout_mse": metrics["mse"],
            "chamfer_ratio": metrics["chamfer_ratio"]["mean"],
        }))
    return rows


def _dataset_ablation(config: ExperimentConfig) -> List[ReportRow]:
    """ABL3：随机数据、单执行器脚本演示、教师演示、优化后学生数据集的性能"""
    _require_one_picker(config, "ABL3")
    run_pipeline(config, target="build-student")
    random_data = storage.trajectories(_load(config, "gen-random"))
    teacher = storage.teacher_demos(_load(config, "gen-teacher"))
    student = storage.student_dataset(_load(config, "build-student"))
    one_picker = _one_picker_demos(config, config.k_t)
    student_scores = student.attempted_scores or student.performances
    return [
        ReportRow("D_Random", _stats([t.normalized_performance for t in random_data])),
        ReportRow("D_1p", _stats([t.normalized_performance for t in one_picker])),
        ReportRow(f"D_{config.teacher_pickers}p", _stats([d.normalized_performance for d in teacher])),
        ReportRow(f"D_opt,{config.student_pickers}p", _stats(student_scores)),
    ]


def mix_datasets(config: ExperimentConfig, optimized: List[Trajectory], scripted: List[Trajectory],
                 fraction: float) -> StudentDataset:
    """按比例混合优化轨迹与脚本演示，总数取两者较小者"""
    total = min(len(optimized), len(scripted))
    take = int(round(fraction * total))
    trajectories = list(optimized[:take]) + list(scripted[:total - take])
    return StudentDataset.from_trajectories(config.task, config.student_pickers, trajectories, config.sim,
                                            config.lfd.reward_mode, config.with_images)


def _modality_ablation(config: ExperimentConfig) -> List[ReportRow]:
    """ABL4：学生数据集中优化轨迹的比例"""
    _require_one_picker(config, "ABL4")
    run_pipeline(config, target="build-student")
    optimized = storage.student_dataset(_load(config, "build-student")).trajectories
    scripted = _one_picker_demos(config, len(optimized))
    rows = []
    for fraction in config.ablation.mix_fractions:
        dataset = mix_datasets(config, optimized, scripted, fraction)
        logger.info(f"ABL4: training on {fraction:.0%} optimized trajectories ({len(dataset)} total)")
        scores = _train_and_score(config, dataset, config.lfd_for_run())
        rows.append(ReportRow(f"{fraction:.0%} optimized", _stats(scores), {
            "dataset_mean": dataset.performance_stats()["mean"],
        }))
    return rows


def _rsi_ablation(config: ExperimentConfig) -> List[ReportRow]:
    """ABL5：关闭与开启 RSI-IR"""
    run_pipeline(config, target="build-student")
    dataset = storage.student_dataset(_load(config, "build-student"))
    rows = []
    for probability in (0.0, config.ablation.rsi_probability):
        lfd_config = config.lfd_for_run().model_copy(update={"rsi_ir_probability": probability})
        logger.info(f"ABL5: training with RSI-IR probability {probability}")
        scores = _train_and_score(config, dataset, lfd_config)
        rows.append(ReportRow(f"RSI-IR p={probability:g}", _stats(scores)))
    return rows


_RUNNERS: Dict[str, Callable[[ExperimentConfig], List[ReportRow]]] = {
    "ABL1": _optimizer_ablation,
    "ABL2": _architecture_ablation,
    "ABL3": _dataset_ablation,
    "ABL4": _modality_ablation,
    "ABL5": _rsi_ablation,
}

_TITLES = {
    "ABL1": "Optimizer used to create student demonstrations",
    "ABL2": "Dynamics network architecture",
    "ABL3": "Dataset performance",
    "ABL4": "Composition of the student dataset",
    "ABL5": "Reference state initialization with imitation reward",
}


def run_ablation(ablation_id: str, config: ExperimentConfig) -> AblationReport:
    """
    运行消融实验，缺少的上游产物会先由流水线生成

    Args:
        ablation_id: ABL1..ABL5
        config: 实验配置

    Returns:
        AblationReport（四分位统计表）
    """
    key = str(ablation_id).upper()
    if key not in _RUNNERS:
        raise ConfigError(f"Unknown ablation id {ablation_id!r}, expected one of {', '.join(ABLATIONS)}")
    title = f"{key} {_TITLES[key]} ({config.task.value})"
    rows = _RUNNERS[key](config)
    csv_path, table_path = write_report(title, rows, Path(config.out) / "ablations", key.lower())
    return AblationReport(key, title, rows, str(csv_path), str(table_path))
