"""
数据容器持久化测试
"""
import json

import numpy as np
import pytest

from dynamics.arch import ArchConfig
from dynamics.dataset import generate_random_dataset
from dynamics.model import DynamicsModel
from errors import ChecksumError, ManifestError, SchemaVersionError, TruncatedArrayError
from lfd.networks import Policy
from lfd.settings import LfdConfig
from pipeline.storage import (
    KIND_TEACHER,
    MANIFEST_NAME,
    DatasetContainer,
    container_exists,
    dynamics_container,
    dynamics_params,
    load_dataset,
    policy_container,
    policy_params,
    random_container,
    random_dataset,
    save_dataset,
    student_container,
    student_dataset,
    teacher_container,
    teacher_demos,
)
from tasks.observations import observation_dim
from tasks.spaces import TaskId
from tasks.teacher import record_scripted_dataset, record_teacher_dataset, scripted_policy_for
from trajopt.transfer import StudentDataset


@pytest.fixture
def saved(tmp_path):
    container = DatasetContainer(
        "scripted",
        {"task_id": "ThreeBoxes", "score": float("nan"), "nested": {"k": np.int64(3)}},
        {"values": np.arange(6, dtype=np.float64).reshape(2, 3), "flags": np.array([True, False])},
    )
    return save_dataset(container, tmp_path / "box")


def test_round_trip(saved):
    loaded = load_dataset(saved)
    assert loaded.kind == "scripted"
    assert loaded.manifest == {"task_id": "ThreeBoxes", "score": None, "nested": {"k": 3}}
    assert loaded.arrays["values"].dtype == np.float32
    assert np.array_equal(loaded.arrays["values"], np.arange(6).reshape(2, 3))
    assert loaded.arrays["flags"].tolist() == [1, 0]
    assert container_exists(saved)


def test_overwrite_leaves_no_staging(saved):
    save_dataset(DatasetContainer("scripted", {}, {"values": np.zeros(2)}), saved)
    assert load_dataset(saved).arrays["values"].shape == (2,)
    assert [p.name for p in saved.parent.iterdir()] == [saved.name]


def test_missing_or_broken_manifest(saved, tmp_path):
    with pytest.raises(ManifestError):
        load_dataset(tmp_path / "nothing")
    (saved / MANIFEST_NAME).write_text("{not json", encoding="utf-8")
    with pytest.raises(ManifestError):
        load_dataset(saved)


def _edit_manifest(path, **changes):
    manifest_path = path / MANIFEST_NAME
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    manifest.update(changes)
    manifest_path.write_text(json.dumps(manifest), encoding="utf-8")


def test_edited_manifest_fails_checksum(saved):
    _edit_manifest(saved, task_id="DryCloth")
    with pytest.raises(ChecksumError):
        load_dataset(saved)


def test_schema_version_mismatch(saved):
    _edit_manifest(saved, schema_version=99)
    with pytest.raises(SchemaVersionError):
        load_dataset(saved)


def test_truncated_array(saved):
    data = (saved / "values.bin").read_bytes()
    (saved / "values.bin").write_bytes(data[:-4])
    with pytest.raises(TruncatedArrayError):
        load_dataset(saved)


def test_flipped_byte_fails_checksum(saved):
    data = bytearray((saved / "values.bin").read_bytes())
    data[0] ^= 0xFF
    (saved / "values.bin").write_bytes(bytes(data))
    with pytest.raises(ChecksumError):
        load_dataset(saved)


def test_missing_array_file(saved):
    (saved / "flags.bin").unlink()
    with pytest.raises(TruncatedArrayError):
        load_dataset(saved)


# ============ 领域对象 ============

def test_teacher_container_has_no_actions(tmp_path):
    demos = record_teacher_dataset(TaskId.THREE_BOXES, k_t=2, seed=0)
    path = save_dataset(teacher_container(TaskId.THREE_BOXES, demos), tmp_path / "teacher")
    container = load_dataset(path)
    assert container.kind == KIND_TEACHER
    assert "actions" not in container.arrays
    assert container.manifest["performance_stats"]["n"] == 2

    restored = teacher_demos(container)
    assert len(restored) == 2
    for demo, back in zip(demos, restored):
        assert back.variant == demo.variant
        assert back.morphology == 3
        assert len(back.state_sequence) == len(demo.state_sequence)
        assert np.allclose(back.goal_state.particles, demo.goal_state.particles, atol=1e-6)


def test_random_dataset_round_trip(tmp_path):
    dataset = generate_random_dataset(TaskId.THREE_BOXES, k_r=6, seed=1)
    restored = random_dataset(load_dataset(save_dataset(random_container(dataset), tmp_path / "random")))
    assert restored.seed == 1
    assert len(restored) == len(dataset)
    original, back = dataset.arrays(), restored.arrays()
    for a, b in zip(original, back):
        assert np.allclose(a, b, atol=1e-6)


def test_student_dataset_round_trip(tmp_path):
    policy = scripted_policy_for(TaskId.THREE_BOXES, "one_picker")
    trajectories = record_scripted_dataset(TaskId.THREE_BOXES, policy, 2, seed=0, num_pickers=1)
    dataset = StudentDataset.from_trajectories(TaskId.THREE_BOXES, 1, trajectories, dropped=1,
                                               attempted_scores=[1.0, -0.5, 0.9])
    restored = student_dataset(load_dataset(save_dataset(student_container(dataset), tmp_path / "student")))
    assert restored.dropped == 1
    assert restored.attempted_scores == pytest.approx([1.0, -0.5, 0.9])
    assert len(restored.transitions) == 6
    assert np.allclose(restored.transitions.rewards, dataset.transitions.rewards, atol=1e-6)
    assert np.allclose(restored.transitions.actions, dataset.transitions.actions, atol=1e-6)


def test_dynamics_params_round_trip(tmp_path):
    arch = ArchConfig(conv_layers=2, channels=8, recurrent_hidden=8, head_hidden=8)
    params = DynamicsModel(TaskId.THREE_BOXES, arch, 24, 1, seed=0).to_params()
    path = save_dataset(dynamics_container(params, {"final_fit_loss": 0.1}), tmp_path / "dynamics")
    restored = dynamics_params(load_dataset(path))
    assert restored.arch == arch
    assert restored.num_particles == 24
    assert np.allclose(restored.vector, params.vector, atol=1e-7)
    DynamicsModel.from_params(restored)


def test_policy_params_round_trip(tmp_path):
    config = LfdConfig(hidden_width=16)
    params = Policy(TaskId.THREE_BOXES, 1, observation_dim(TaskId.THREE_BOXES, 1), config).to_params()
    restored = policy_params(load_dataset(save_dataset(policy_container(params), tmp_path / "policy")))
    assert restored.config == config
    assert np.array_equal(restored.actor, params.actor)
    assert np.array_equal(restored.target_critic, params.target_critic)
