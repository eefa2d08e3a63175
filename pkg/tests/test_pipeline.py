"""
配置、报告与流水线测试
"""
import csv
import math

import pytest

import config as app_config
import main
from errors import ConfigError, StageError
from models.stage_runs import StageStatus
from pipeline.ablation import run_ablation
from pipeline.engine import StageLedger, required_stages, run_pipeline
from pipeline.reports import ReportRow, render_table, write_report
from pipeline.settings import STAGES, load_experiment_config
from pipeline.storage import MANIFEST_NAME
from tasks.spaces import TaskId
from trajopt.optimizers import OptimizerMethod
from trajopt.presets import PresetScale


def tiny_overrides(out_dir, **extra):
    values = {
        "task": "ThreeBoxes",
        "teacher_morphology": "1",
        "k_t": "2",
        "eval_rollouts": "2",
        "out": str(out_dir),
        "dynamics.k_r": "6",
        "dynamics.epochs": "1",
        "dynamics.batch_size": "2",
        "arch.conv_layers": "2",
        "arch.channels": "8",
        "arch.recurrent_hidden": "8",
        "arch.head_hidden": "8",
        "optimizer.env_interactions": "180",
        "lfd.hidden_width": "16",
        "lfd.batch_size": "4",
        "lfd.buffer_capacity": "1000",
        "lfd.training_steps": "2",
        "lfd.rollout_interval": "1",
        "lfd.eval_interval": "1",
        "lfd.eval_rollouts": "1",
        "ablation.seeds": "[0]",
    }
    values.update(extra)
    return values


# ============ 配置 ============

def test_preset_file_cli_precedence(tmp_path, out_dir):
    config_file = tmp_path / "experiment.cfg"
    config_file.write_text("k_t=7\noptimizer.method=mppi\nlfd.gamma=0.5\n", encoding="utf-8")

    desk = load_experiment_config("desk")
    assert desk.k_t == 20
    assert desk.preset is PresetScale.DESK
    assert desk.optimizer.env_interactions == 2100

    from_file = load_experiment_config("desk", str(config_file))
    assert from_file.k_t == 7
    assert from_file.optimizer.method is OptimizerMethod.MPPI
    assert from_file.lfd.gamma == 0.5
    # 未覆盖的嵌套键保留预设值
    assert from_file.lfd.training_steps == 3000

    from_cli = load_experiment_config("desk", str(config_file), {"k_t": "9", "seed": None})
    assert from_cli.k_t == 9
    assert from_cli.seed == 0


def test_full_preset_uses_task_default_row(out_dir):
    config = load_experiment_config(None, None, {"task": "DryCloth"})
    assert config.preset is PresetScale.FULL
    assert config.task is TaskId.DRY_CLOTH
    assert config.optimizer.planning_horizon == 2
    assert config.optimizer.env_interactions == 21000
    assert config.teacher_pickers == 2 and config.student_pickers == 1


def test_environment_output_wins(out_dir, monkeypatch):
    monkeypatch.setattr(app_config.settings, "out", str(out_dir / "env"))
    config = load_experiment_config("desk", None, {"out": "elsewhere"})
    assert config.out == str(out_dir / "env")


@pytest.mark.parametrize("overrides", [
    {"k_t": "0"},
    {"optimizer.population": "5"},
    {"student_morphology": "4"},
    {"task": "Laundry"},
    {"lfd.observation_mode": "image"},
    {"optimizer.planning_horizon": "9"},
])
def test_invalid_config_raises(overrides, out_dir):
    with pytest.raises(ConfigError):
        load_experiment_config("desk", None, overrides)


def test_invalid_key_is_named(out_dir):
    with pytest.raises(ConfigError, match="optimizer"):
        load_experiment_config("desk", None, {"optimizer.population": "5"})
    with pytest.raises(ConfigError):
        load_experiment_config("laptop")
    with pytest.raises(ConfigError):
        load_experiment_config("desk", "/nonexistent/experiment.cfg")


def test_list_values_are_parsed(out_dir):
    config = load_experiment_config("desk", None, {"ablation.seeds": "[3, 4]", "ablation.mix_fractions": "0.25"})
    assert config.ablation.seeds == [3, 4]
    assert config.ablation.mix_fractions == [0.25]


def test_stage_hash_scopes(out_dir):
    base = load_experiment_config("desk", None, tiny_overrides(out_dir))
    changed = load_experiment_config("desk", None, tiny_overrides(out_dir, **{"lfd.training_steps": "5"}))
    assert base.stage_hash("gen-teacher") == changed.stage_hash("gen-teacher")
    assert base.stage_hash("build-student") == changed.stage_hash("build-student")
    assert base.stage_hash("train-lfd") != changed.stage_hash("train-lfd")
    more_workers = load_experiment_config("desk", None, tiny_overrides(out_dir, workers="4"))
    assert base.config_hash() == more_workers.config_hash()
    with pytest.raises(ConfigError):
        base.stage_hash("deploy")


# ============ 报告 ============

def test_render_table_columns():
    rows = [
        ReportRow("cem", {"q25": 0.5, "mean": 0.75, "std": 0.1, "median": 0.8, "q75": 0.9, "n": 20}),
        ReportRow("random", {"q25": float("nan"), "mean": float("nan"), "std": float("nan"),
                             "median": float("nan"), "q75": float("nan"), "n": 0}),
    ]
    lines = render_table("ABL1 test", rows).splitlines()
    assert lines[0] == "ABL1 test"
    assert lines[1] == "condition | 25th %  | mean ± std      | median  | 75th %  | n"
    assert lines[3].split("|")[2].strip() == "0.750 ± 0.100"
    assert "n/a" in lines[4]


def test_write_report_csv(tmp_path):
    rows = [ReportRow("cem", {"q25": 0.5, "mean": 0.75, "std": 0.1, "median": 0.8, "q75": 0.9, "n": 20},
                      {"dropped": 2})]
    csv_path, table_path = write_report("t", rows, tmp_path, "abl")
    with csv_path.open(encoding="utf-8") as handle:
        records = list(csv.DictReader(handle))
    assert list(records[0]) == ["name", "q25", "mean", "std", "median", "q75", "n", "dropped"]
    assert records[0]["dropped"] == "2"
    assert table_path.read_text(encoding="utf-8").startswith("t\n")


# ============ 流水线 ============

def test_required_stages():
    assert required_stages("build-student") == ["gen-teacher", "gen-random", "train-dynamics", "build-student"]
    assert required_stages("evaluate") == list(STAGES)
    assert required_stages("gen-random") == ["gen-random"]
    with pytest.raises(ConfigError):
        required_stages("deploy")


def test_tiny_pipeline_resumes(out_dir):
    config = load_experiment_config("desk", None, tiny_overrides(out_dir))
    first = run_pipeline(config)
    assert set(first.statuses.values()) == {StageStatus.SUCCESS.value}
    assert first.final_stats["n"] == 2
    assert 0.0 <= first.student_stats["mean"] <= 1.0 + 1e-6
    assert (out_dir / "reports" / "pipeline.txt").is_file()
    assert (out_dir / "reports" / "lfd_curve.csv").is_file()

    second = run_pipeline(config)
    assert set(second.statuses.values()) == {StageStatus.SKIPPED.value}
    assert second.final_stats["mean"] == pytest.approx(first.final_stats["mean"])

    retrained = load_experiment_config("desk", None, tiny_overrides(out_dir, **{"lfd.training_steps": "3"}))
    third = run_pipeline(retrained)
    assert third.statuses["build-student"] == StageStatus.SKIPPED.value
    assert third.statuses["train-lfd"] == StageStatus.SUCCESS.value
    assert third.statuses["evaluate"] == StageStatus.SUCCESS.value

    ledger = StageLedger(str(out_dir))
    try:
        statuses = [run.status for run in ledger.runs("gen-teacher")]
    finally:
        ledger.close()
    assert statuses == [StageStatus.SUCCESS, StageStatus.SKIPPED, StageStatus.SKIPPED]


def test_corrupted_artifact_needs_force(out_dir):
    config = load_experiment_config("desk", None, tiny_overrides(out_dir))
    run_pipeline(config, target="gen-teacher")
    (out_dir / "teacher" / MANIFEST_NAME).write_text("{", encoding="utf-8")
    with pytest.raises(StageError) as info:
        run_pipeline(config, target="gen-teacher")
    assert info.value.stage == "gen-teacher"
    report = run_pipeline(config, target="gen-teacher", force=True)
    assert report.statuses["gen-teacher"] == StageStatus.SUCCESS.value


# ============ 消融 ============

def test_unknown_ablation(out_dir):
    config = load_experiment_config("desk", None, tiny_overrides(out_dir))
    with pytest.raises(ConfigError):
        run_ablation("ABL9", config)


def test_ablation_prerequisites(out_dir):
    same_morphology = load_experiment_config("desk", None, tiny_overrides(out_dir))
    with pytest.raises(ConfigError):
        run_ablation("ABL1", same_morphology)
    two_pickers = load_experiment_config(
        "desk", None, tiny_overrides(out_dir, teacher_morphology="3", student_morphology="2")
    )
    with pytest.raises(ConfigError):
        run_ablation("abl3", two_pickers)


def test_dataset_ablation_table(out_dir):
    config = load_experiment_config("desk", None, tiny_overrides(out_dir))
    report = run_ablation("abl3", config)
    assert report.ablation_id == "ABL3"
    assert [row.name for row in report.rows] == ["D_Random", "D_1p", "D_1p", "D_opt,1p"]
    assert report.rows[1].stats["mean"] == pytest.approx(1.0, abs=0.1)
    assert (out_dir / "ablations" / "abl3.txt").is_file()


# ============ 命令行 ============

def test_cli_accepts_paper_preset(out_dir):
    args = main.build_parser().parse_args(["pipeline", "--task", "ThreeBoxes", "--preset", "paper"])
    assert args.preset == "paper"
    config = load_experiment_config(args.preset, None, {"task": args.task})
    assert config.preset is PresetScale.FULL
    assert config.optimizer.env_interactions == load_experiment_config("full").optimizer.env_interactions
    assert PresetScale("paper") is PresetScale.FULL
    with pytest.raises(SystemExit):
        main.build_parser().parse_args(["pipeline", "--preset", "laptop"])


def test_cli_config_error_exit_code(out_dir):
    assert main.run(["pipeline", "--preset", "desk", "--out", str(out_dir), "--set", "k_t=0", "--no-progress"]) == 2
    assert main.run(["gen-teacher", "--preset", "desk", "--set", "broken", "--no-progress"]) == 2


def test_cli_stage_failure_exit_code(out_dir):
    args = ["gen-teacher", "--preset", "desk", "--out", str(out_dir), "--no-progress"]
    for key, value in tiny_overrides(out_dir).items():
        args += ["--set", f"{key}={value}"]
    assert main.run(args) == 0
    (out_dir / "teacher" / MANIFEST_NAME).write_text("{", encoding="utf-8")
    assert main.run(args) == 1
    assert main.run(args + ["--force"]) == 0


@pytest.mark.slow
def test_desk_boxes_pipeline(out_dir):
    config = load_experiment_config("desk", None, {"task": "ThreeBoxes", "out": str(out_dir)})
    report = run_pipeline(config)
    assert report.teacher_stats["mean"] >= 0.95
    assert report.student_stats["mean"] >= 0.5
    assert not math.isnan(report.final_stats["mean"])
