"""
测试公共夹具
"""
import pytest

import config
from sim.engine import ParticleSimulator
from sim.settings import SimConfig
from tasks.spaces import TaskId
from tasks.variants import TaskVariant, sample_variant
from utils.seeding import derive_rng


@pytest.fixture
def sim_config():
    """小分辨率布料，测试用"""
    return SimConfig(grid_w=8, grid_h=8, rest_length=0.04, settle_steps=120)


@pytest.fixture
def out_dir(tmp_path, monkeypatch):
    monkeypatch.setattr(config.settings, "out", None)
    return tmp_path / "runs"


@pytest.fixture
def boxes_variant():
    return sample_variant(TaskId.THREE_BOXES, derive_rng(0, 1))


@pytest.fixture
def line_variant():
    """三个箱子等距排列，目标各自右移 0.3"""
    return TaskVariant(
        task_id=TaskId.THREE_BOXES,
        box_starts=((0.0, 0.025, 0.0), (0.4, 0.025, 0.0), (0.8, 0.025, 0.0)),
        box_goals=((0.3, 0.025, 0.0), (0.7, 0.025, 0.0), (1.1, 0.025, 0.0)),
    )


@pytest.fixture
def boxes_sim():
    return ParticleSimulator(TaskId.THREE_BOXES, SimConfig())


@pytest.fixture
def cloth_variant():
    return TaskVariant(task_id=TaskId.DRY_CLOTH, cloth_rotation=0.0, cloth_translation=(0.0, 0.0))
