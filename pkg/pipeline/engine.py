"""
流水线引擎
gen-teacher → gen-random → train-dynamics → build-student → train-lfd → evaluate
每个阶段的产物落盘；产物存在且阶段指纹一致时跳过（断点续跑）
"""
import json
import logging
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

from sqlalchemy.sql import func

from database import get_session_factory, init_db
from dynamics.dataset import generate_random_dataset
from dynamics.evaluate import evaluate_dynamics
from dynamics.trainer import train_dynamics
from errors import ConfigError, StageError
from lfd.evaluate import evaluate_policy
from lfd.trainer import default_eval_seeds, train_lfd
from models.stage_runs import StageRun, StageStatus
from pipeline import storage
from pipeline.reports import ReportRow, write_records, write_report
from pipeline.settings import STAGES, ExperimentConfig
from sim.settings import SimConfig
from tasks.spaces import get_task_space
from tasks.teacher import TeacherDemo, record_scripted_dataset, record_teacher_dataset
from trajopt.transfer import build_student_dataset, scripted_teacher_action

logger = logging.getLogger(__name__)

# 阶段 -> 产物目录名
ARTIFACTS = {
    "gen-teacher": "teacher",
    "gen-random": "random",
    "train-dynamics": "dynamics",
    "build-student": "student",
    "train-lfd": "policy",
    "evaluate": "evaluation",
}

# 阶段依赖
DEPENDENCIES = {
    "gen-teacher": (),
    "gen-random": (),
    "train-dynamics": ("gen-random",),
    "build-student": ("gen-teacher", "train-dynamics"),
    "train-lfd": ("build-student",),
    "evaluate": ("train-lfd",),
}

KIND_EVALUATION = "evaluation"


def required_stages(target: str) -> List[str]:
    """目标阶段及其全部上游，按流水线顺序"""
    if target not in DEPENDENCIES:
        raise ConfigError(f"Unknown stage: {target}")
    needed = set()
    pending = [target]
    while pending:
        stage = pending.pop()
        if stage not in needed:
            needed.add(stage)
            pending.extend(DEPENDENCIES[stage])
    return [stage for stage in STAGES if stage in needed]


def record_teacher_demos(task_id, num_pickers: int, k_t: int, seed: int,
                         sim_config: Optional[SimConfig] = None) -> List[TeacherDemo]:
    """
    录制教师演示；执行器数量不是任务默认教师形态时改用对应的脚本策略

    Returns:
        TeacherDemo 列表（动作被丢弃）
    """
    space = get_task_space(task_id)
    if num_pickers == space.teacher_morphology:
        return record_teacher_dataset(space.task_id, k_t, seed, sim_config)
    config = sim_config or SimConfig()

    def policy(state, t, variant):
        return scripted_teacher_action(space.task_id, state, t, variant, num_pickers, config)

    trajectories = record_scripted_dataset(space.task_id, policy, k_t, seed, num_pickers, config,
                                           stage="gen-teacher")
    logger.info(f"Recorded {len(trajectories)} {space.task_id.value} demos with a {num_pickers}-picker teacher")
    return [
        TeacherDemo(t.variant, t.states, num_pickers, t.seed, t.normalized_performance)
        for t in trajectories
    ]


class StageLedger:
    """阶段执行记录（输出目录下的 sqlite）"""

    def __init__(self, out_dir: str):
        init_db(out_dir)
        self.db_session = get_session_factory(out_dir)()

    def start(self, stage: str, config_hash: str, seed: int) -> StageRun:
        entry = StageRun(stage=stage, status=StageStatus.RUNNING, config_hash=config_hash, seed=seed)
        self.db_session.add(entry)
        self.db_session.commit()
        self.db_session.refresh(entry)
        return entry

    def _finish(self, entry: StageRun, status: StageStatus, started: float, **fields) -> None:
        try:
            entry.status = status
            entry.end_time = func.now()
            entry.duration_seconds = time.perf_counter() - started
            for key, value in fields.items():
                setattr(entry, key, value)
            self.db_session.commit()
        except Exception as e:
            logger.error(f"Failed to update stage ledger for {entry.stage}: {e}")
            self.db_session.rollback()

    def mark_success(self, entry: StageRun, started: float, artifact_path: str, details: dict) -> None:
        self._finish(entry, StageStatus.SUCCESS, started, artifact_path=artifact_path,
                     details=json.dumps(details, default=str))

    def mark_failure(self, entry: StageRun, started: float, error_message: str, error_traceback: str) -> None:
        self._finish(entry, StageStatus.FAILED, started, error_message=error_message,
                     error_traceback=error_traceback)

    def mark_skipped(self, stage: str, config_hash: str, seed: int, artifact_path: str) -> None:
        entry = self.start(stage, config_hash, seed)
        self._finish(entry, StageStatus.SKIPPED, time.perf_counter(), artifact_path=artifact_path,
                     details=json.dumps({"resumed": True}))

    def runs(self, stage: Optional[str] = None) -> List[StageRun]:
        query = self.db_session.query(StageRun)
        if stage:
            query = query.filter(StageRun.stage == stage)
        return query.order_by(StageRun.id).all()

    def close(self) -> None:
        self.db_session.close()


@dataclass
class PipelineReport:
    out: str
    artifacts: Dict[str, str] = field(default_factory=dict)
    statuses: Dict[str, str] = field(default_factory=dict)
    teacher_stats: Dict[str, float] = field(default_factory=dict)
    student_stats: Dict[str, float] = field(default_factory=dict)
    final_stats: Dict[str, float] = field(default_factory=dict)
    table_path: Optional[str] = None
    csv_path: Optional[str] = None


class PipelineRunner:
    """按阶段执行并持久化；每个阶段的下游只读取磁盘上的产物"""

    def __init__(self, config: ExperimentConfig, force: bool = False):
        self.config = config
        self.out = Path(config.out)
        self.force = force
        self.out.mkdir(parents=True, exist_ok=True)
        self.ledger = StageLedger(str(self.out))
        self.report = PipelineReport(out=str(self.out))
        self.space = get_task_space(config.task)
        self._builders: Dict[str, Callable[[], storage.DatasetContainer]] = {
            "gen-teacher": self._gen_teacher,
            "gen-random": self._gen_random,
            "train-dynamics": self._train_dynamics,
            "build-student": self._build_student,
            "train-lfd": self._train_lfd,
            "evaluate": self._evaluate,
        }

    def artifact_path(self, stage: str) -> Path:
        return self.out / ARTIFACTS[stage]

    def load(self, stage: str) -> storage.DatasetContainer:
        return storage.load_dataset(self.artifact_path(stage))

    def is_fresh(self, stage: str) -> bool:
        """
        产物存在且阶段指纹一致

        Raises:
            ContainerError: 产物损坏或版本不一致（需要 --force 重建）
        """
        path = self.artifact_path(stage)
        if not storage.container_exists(path):
            return False
        container = storage.load_dataset(path)
        if container.manifest.get("stage_hash") != self.config.stage_hash(stage):
            logger.warning(f"Artifact for {stage} was built with a different config, rebuilding")
            return False
        return True

    # ------------------------------------------------------------------
    # 阶段执行
    # ------------------------------------------------------------------
    def run_stage(self, stage: str) -> storage.DatasetContainer:
        path = self.artifact_path(stage)
        stage_hash = self.config.stage_hash(stage)
        try:
            fresh = not self.force and self.is_fresh(stage)
        except Exception as e:
            logger.error(f"Artifact for {stage} at {path} cannot be resumed: {e}")
            raise StageError(stage, e) from e
        if fresh:
            logger.info(f"Stage {stage} resumed from {path}")
            self.ledger.mark_skipped(stage, stage_hash, self.config.seed, str(path))
            self.report.statuses[stage] = StageStatus.SKIPPED.value
            self.report.artifacts[stage] = str(path)
            return self.load(stage)

        logger.info(f"Stage {stage} started")
        entry = self.ledger.start(stage, stage_hash, self.config.seed)
        started = time.perf_counter()
        try:
            container = self._builders[stage]()
            container.manifest["stage_hash"] = stage_hash
            container.manifest["seed"] = self.config.seed
            storage.save_dataset(container, path)
        except Exception as e:
            logger.error(f"Stage {stage} failed: {e}")
            self.ledger.mark_failure(entry, started, str(e), traceback.format_exc())
            self.report.statuses[stage] = StageStatus.FAILED.value
            raise StageError(stage, e) from e

        details = {k: v for k, v in container.manifest.items() if k in ("count", "transitions", "performance_stats")}
        self.ledger.mark_success(entry, started, str(path), details)
        self.report.statuses[stage] = StageStatus.SUCCESS.value
        self.report.artifacts[stage] = str(path)
        logger.info(f"Stage {stage} finished in {time.perf_counter() - started:.1f}s")
        return self.load(stage)

    def run(self, target: str = STAGES[-1]) -> PipelineReport:
        try:
            for stage in required_stages(target):
                self.run_stage(stage)
        finally:
            self.ledger.close()
        return self.report

    # ------------------------------------------------------------------
    # 各阶段
    # ------------------------------------------------------------------
    def _gen_teacher(self) -> storage.DatasetContainer:
        cfg = self.config
        demos = record_teacher_demos(cfg.task, cfg.teacher_pickers, cfg.k_t, cfg.seed, cfg.sim)
        return storage.teacher_container(cfg.task, demos)

    def _gen_random(self) -> storage.DatasetContainer:
        cfg = self.config
        dataset = generate_random_dataset(
            cfg.task, cfg.dynamics.k_r, cfg.seed, cfg.sim, cfg.student_pickers, cfg.dynamics.random_place_radius
        )
        return storage.random_container(dataset)

    def _train_dynamics(self) -> storage.DatasetContainer:
        cfg = self.config
        dataset = storage.random_dataset(self.load("gen-random"))
        params, report = train_dynamics(dataset, cfg.arch, cfg.dynamics, cfg.seed)
        heldout = [dataset.episodes[i] for i in report.heldout_episodes]
        metrics = evaluate_dynamics(params, heldout, cfg.sim)
        return storage.dynamics_container(params, {"train": report.to_dict(), "evaluation": metrics})

    def _build_student(self) -> storage.DatasetContainer:
        cfg = self.config
        demos = storage.teacher_demos(self.load("gen-teacher"))
        params = storage.dynamics_params(self.load("train-dynamics"))
        dataset = build_student_dataset(
            demos, params, cfg.sim, cfg.optimizer_for_run(), cfg.lfd.reward_mode, cfg.with_images,
            num_pickers=cfg.student_pickers, task_id=cfg.task,
        )
        return storage.student_container(dataset)

    def _train_lfd(self) -> storage.DatasetContainer:
        cfg = self.config
        dataset = storage.student_dataset(self.load("build-student"))
        result = train_lfd(dataset, cfg.lfd_for_run(), cfg.sim)
        write_records(result.curve_rows(), self.out / "reports" / "lfd_curve.csv")
        report = {
            "final_stats": result.final_stats,
            "episodes": result.episodes,
            "dropped_episodes": result.dropped_episodes,
            "buffer_size": result.buffer_size,
            "duration_seconds": result.duration_seconds,
        }
        return storage.policy_container(result.params, report)

    def _evaluate(self) -> storage.DatasetContainer:
        cfg = self.config
        params = storage.policy_params(self.load("train-lfd"))
        stats = evaluate_policy(
            params, cfg.task, cfg.eval_rollouts, default_eval_seeds(cfg.seed), cfg.sim, workers=cfg.workers
        )
        teacher = self.load("gen-teacher").manifest["performance_stats"]
        student = self.load("build-student").manifest["performance_stats"]
        rows = [
            ReportRow(f"teacher ({cfg.teacher_pickers}p)", _stats(teacher)),
            ReportRow(f"student dataset ({cfg.student_pickers}p)", _stats(student)),
            ReportRow(f"final policy ({cfg.student_pickers}p)", stats),
        ]
        csv_path, table_path = write_report(
            f"{cfg.task.value} {cfg.teacher_pickers}→{cfg.student_pickers}", rows, self.out / "reports", "pipeline"
        )
        self.report.teacher_stats = rows[0].stats
        self.report.student_stats = rows[1].stats
        self.report.final_stats = stats
        self.report.csv_path, self.report.table_path = str(csv_path), str(table_path)
        manifest = {
            "task_id": cfg.task.value,
            "final_stats": stats,
            "teacher_stats": rows[0].stats,
            "student_stats": rows[1].stats,
        }
        return storage.DatasetContainer(KIND_EVALUATION, manifest, {})


def _stats(stored: dict) -> Dict[str, float]:
    """manifest 中的统计（NaN 存成 null）"""
    return {key: float("nan") if value is None else value for key, value in stored.items()}


def run_pipeline(config: ExperimentConfig, target: str = STAGES[-1], force: bool = False) -> PipelineReport:
    """
    执行流水线

    Args:
        config: 实验配置
        target: 目标阶段，只执行它及其上游
        force: 忽略已有产物重新执行

    Returns:
        PipelineReport

    Raises:
        StageError: 某个阶段失败（已完成阶段的产物保留在磁盘上）
    """
    report = PipelineRunner(config, force).run(target)
    if target == STAGES[-1] and not report.final_stats and "evaluate" in report.artifacts:
        evaluation = storage.load_dataset(report.artifacts["evaluate"]).manifest
        report.final_stats = _stats(evaluation["final_stats"])
        report.teacher_stats = _stats(evaluation["teacher_stats"])
        report.student_stats = _stats(evaluation["student_stats"])
        reports_dir = Path(config.out) / "reports"
        report.csv_path = str(reports_dir / "pipeline.csv")
        report.table_path = str(reports_dir / "pipeline.txt")
    return report
