"""
数据集与模型参数的持久化
每个容器是一个目录：manifest.json + 每个字段一个小端 32 位数组文件
"""
import enum
import hashlib
import json
import logging
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from dynamics.arch import ArchConfig
from dynamics.dataset import RandomDataset
from dynamics.model import DynamicsParams
from errors import ChecksumError, ManifestError, SchemaVersionError, TruncatedArrayError
from lfd.networks import PolicyParams
from lfd.settings import LfdConfig
from sim.state import ParticleState, PickPlaceAction
from tasks.observations import TransitionBatch
from tasks.spaces import parse_task_id
from tasks.teacher import TeacherDemo, Trajectory
from tasks.variants import TaskVariant
from trajopt.transfer import StudentDataset
from utils.stats import summary_stats

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"

# 容器种类
KIND_TEACHER = "teacher"
KIND_RANDOM = "random"
KIND_STUDENT = "student"
KIND_DYNAMICS = "dynamics"
KIND_POLICY = "policy"

_FLOAT = "<f4"
_INT = "<i4"

_TRANSITION_FIELDS = ("observations", "next_observations", "rewards", "dones", "images", "next_images")


@dataclass
class DatasetContainer:
    """manifest（JSON 元数据）+ 命名数组"""

    kind: str
    manifest: Dict = field(default_factory=dict)
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)


# ============ 编码 ============

def _storage_dtype(array: np.ndarray) -> str:
    if np.issubdtype(array.dtype, np.floating):
        return _FLOAT
    if np.issubdtype(array.dtype, np.integer) or array.dtype == np.bool_:
        return _INT
    raise TypeError(f"Unsupported array dtype {array.dtype}")


def _jsonable(value):
    """numpy 标量/数组转成 JSON 类型；NaN 写成 null"""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def _canonical(manifest: dict) -> bytes:
    body = {k: v for k, v in manifest.items() if k != "checksum"}
    return json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_dataset(container: DatasetContainer, path: Union[str, Path]) -> Path:
    """
    保存容器（先写临时目录，再整体替换）

    Args:
        container: 数据容器
        path: 目标目录

    Returns:
        目标目录
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        fields = {}
        for name in sorted(container.arrays):
            array = np.asarray(container.arrays[name])
            dtype = _storage_dtype(array)
            data = np.ascontiguousarray(array.astype(dtype)).tobytes()
            file_name = f"{name}.bin"
            (staging / file_name).write_bytes(data)
            fields[name] = {"dtype": dtype, "shape": list(array.shape), "sha256": _sha256(data), "file": file_name}

        manifest = _jsonable(dict(container.manifest))
        manifest.update({"schema_version": SCHEMA_VERSION, "kind": container.kind, "fields": fields})
        manifest["checksum"] = _sha256(_canonical(manifest))
        (staging / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, indent=2), encoding="utf-8")

        if target.exists():
            shutil.rmtree(target)
        os.replace(staging, target)
    except Exception:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    logger.debug(f"Saved {container.kind} container with {len(container.arrays)} arrays to {target}")
    return target


def load_dataset(path: Union[str, Path]) -> DatasetContainer:
    """
    读取容器并校验

    Raises:
        ManifestError: manifest 缺失或无法解析
        SchemaVersionError: 版本不一致
        ChecksumError: manifest 或数组哈希不一致
        TruncatedArrayError: 数组文件缺失或长度不符
    """
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise ManifestError(f"No manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ManifestError(f"Manifest {manifest_path} is not valid JSON: {e}") from e
    if not isinstance(manifest, dict) or "fields" not in manifest or "kind" not in manifest:
        raise ManifestError(f"Manifest {manifest_path} lacks kind/fields")

    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"{root} has schema version {version}, expected {SCHEMA_VERSION}")
    if manifest.get("checksum") != _sha256(_canonical(manifest)):
        raise ChecksumError(f"Manifest checksum mismatch in {root}")

    arrays = {}
    for name, spec in manifest["fields"].items():
        file_path = root / spec["file"]
        shape = tuple(int(s) for s in spec["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * np.dtype(spec["dtype"]).itemsize
        if not file_path.is_file():
            raise TruncatedArrayError(f"Array file {file_path} is missing")
        data = file_path.read_bytes()
        if len(data) != expected:
            raise TruncatedArrayError(f"Array {name} has {len(data)} bytes, expected {expected}")
        if _sha256(data) != spec["sha256"]:
            raise ChecksumError(f"Array {name} checksum mismatch in {root}")
        arrays[name] = np.frombuffer(data, dtype=spec["dtype"]).reshape(shape).copy()

    body = {k: v for k, v in manifest.items() if k not in ("schema_version", "kind", "fields", "checksum")}
    return DatasetContainer(kind=manifest["kind"], manifest=body, arrays=arrays)


def container_exists(path: Union[str, Path]) -> bool:
    return (Path(path) / MANIFEST_NAME).is_file()


# ============ 状态序列 ============

def _attached_array(states: List[ParticleState]) -> np.ndarray:
    return np.array([[-1 if a is None else a for a in s.attached] for s in states], dtype=np.int32)


def _state_arrays(sequences: List[List[ParticleState]]) -> Dict[str, np.ndarray]:
    flat = [s for seq in sequences for s in seq]
    if not flat:
        return {}
    return {
        "states": np.stack([s.particles for s in flat]).astype(np.float32),
        "pickers": np.stack([s.picker_positions for s in flat]).astype(np.float32),
        "attached": _attached_array(flat),
    }


def _state_sequences(arrays: Dict[str, np.ndarray], lengths: List[int], task_id) -> List[List[ParticleState]]:
    sequences, offset = [], 0
    for length in lengths:
        seq = []
        for t in range(length):
            row = offset + t
            seq.append(ParticleState(
                particles=arrays["states"][row].astype(np.float64),
                picker_positions=arrays["pickers"][row].astype(np.float64),
                attached=tuple(None if a < 0 else int(a) for a in arrays["attached"][row]),
                time_step=t,
                task_id=task_id,
            ))
        sequences.append(seq)
        offset += length
    return sequences


def _stats_manifest(performances: List[float]) -> dict:
    return summary_stats(performances, allow_empty=True)


# ============ 教师演示 ============

def teacher_container(task_id, demos: List[TeacherDemo]) -> DatasetContainer:
    """教师数据集只保存状态，不含动作"""
    task = parse_task_id(task_id)
    arrays = _state_arrays([d.state_sequence for d in demos])
    arrays["lengths"] = np.array([len(d.state_sequence) for d in demos], dtype=np.int32)
    arrays["performance"] = np.array([d.normalized_performance for d in demos], dtype=np.float32)
    manifest = {
        "task_id": task.value,
        "morphology": demos[0].morphology if demos else None,
        "count": len(demos),
        "seeds": [d.seed for d in demos],
        "variants": [d.variant.to_dict() for d in demos],
        "performance_stats": _stats_manifest([d.normalized_performance for d in demos]),
    }
    return DatasetContainer(KIND_TEACHER, manifest, arrays)


def teacher_demos(container: DatasetContainer) -> List[TeacherDemo]:
    task = parse_task_id(container.manifest["task_id"])
    lengths = container.arrays["lengths"].tolist() if "lengths" in container.arrays else []
    sequences = _state_sequences(container.arrays, lengths, task)
    performance = container.arrays.get("performance", np.zeros(0))
    return [
        TeacherDemo(
            variant=TaskVariant.from_dict(variant),
            state_sequence=states,
            morphology=int(container.manifest["morphology"]),
            seed=int(seed),
            normalized_performance=float(score),
        )
        for states, variant, seed, score in zip(
            sequences, container.manifest["variants"], container.manifest["seeds"], performance
        )
    ]


# ============ 带动作的轨迹 ============

def trajectory_container(kind: str, task_id, num_pickers: int, trajectories: List[Trajectory],
                         transitions: Optional[TransitionBatch] = None, extra: Optional[dict] = None) -> DatasetContainer:
    """随机/学生/脚本数据集：状态按回合展平，lengths 记录每条轨迹的动作数"""
    task = parse_task_id(task_id)
    arrays = _state_arrays([t.states for t in trajectories])
    arrays["lengths"] = np.array([len(t.actions) for t in trajectories], dtype=np.int32)
    arrays["performance"] = np.array([t.normalized_performance for t in trajectories], dtype=np.float32)
    actions = [a.to_vector() for t in trajectories for a in t.actions]
    arrays["actions"] = (np.stack(actions) if actions else np.zeros((0, 6 * num_pickers))).astype(np.float32)
    if transitions is not None:
        for name in _TRANSITION_FIELDS:
            value = getattr(transitions, name)
            if value is not None:
                arrays[f"transition_{name}"] = value
    manifest = {
        "task_id": task.value,
        "morphology": num_pickers,
        "count": len(trajectories),
        "transitions": int(arrays["lengths"].sum()),
        "seeds": [t.seed for t in trajectories],
        "variants": [t.variant.to_dict() for t in trajectories],
        "performance_stats": _stats_manifest([t.normalized_performance for t in trajectories]),
    }
    manifest.update(extra or {})
    return DatasetContainer(kind, manifest, arrays)


def trajectories(container: DatasetContainer) -> List[Trajectory]:
    task = parse_task_id(container.manifest["task_id"])
    lengths = container.arrays["lengths"].tolist()
    sequences = _state_sequences(container.arrays, [n + 1 for n in lengths], task)
    actions = container.arrays["actions"]
    result, offset = [], 0
    for states, count, variant, seed, score in zip(
        sequences, lengths, container.manifest["variants"], container.manifest["seeds"],
        container.arrays["performance"],
    ):
        result.append(Trajectory(
            variant=TaskVariant.from_dict(variant),
            states=states,
            actions=[PickPlaceAction.from_vector(a) for a in actions[offset:offset + count]],
            morphology=int(container.manifest["morphology"]),
            seed=int(seed),
            normalized_performance=float(score),
        ))
        offset += count
    return result


def random_container(dataset: RandomDataset) -> DatasetContainer:
    return trajectory_container(KIND_RANDOM, dataset.task_id, dataset.num_pickers, dataset.episodes,
                                extra={"dataset_seed": dataset.seed})


def random_dataset(container: DatasetContainer) -> RandomDataset:
    return RandomDataset(
        task_id=parse_task_id(container.manifest["task_id"]),
        num_pickers=int(container.manifest["morphology"]),
        seed=int(container.manifest.get("dataset_seed", 0)),
        episodes=trajectories(container),
    )


def student_container(dataset: StudentDataset, kind: str = KIND_STUDENT) -> DatasetContainer:
    extra = {"dropped": dataset.dropped, "attempted_scores": dataset.attempted_scores}
    return trajectory_container(kind, dataset.task_id, dataset.num_pickers, dataset.trajectories,
                                dataset.transitions, extra=extra)


def student_dataset(container: DatasetContainer) -> StudentDataset:
    trajs = trajectories(container)
    transitions = None
    if "transition_rewards" in container.arrays:
        flat_states = [
            (t.states[i].particles, t.states[i + 1].particles)
            for t in trajs for i in range(len(t.actions))
        ]
        arrays = container.arrays
        transitions = TransitionBatch(
            states=np.stack([s for s, _ in flat_states]).astype(np.float32),
            next_states=np.stack([s for _, s in flat_states]).astype(np.float32),
            observations=arrays["transition_observations"],
            next_observations=arrays["transition_next_observations"],
            actions=arrays["actions"],
            rewards=arrays["transition_rewards"],
            dones=arrays["transition_dones"],
            images=arrays.get("transition_images"),
            next_images=arrays.get("transition_next_images"),
        )
    return StudentDataset(
        task_id=parse_task_id(container.manifest["task_id"]),
        num_pickers=int(container.manifest["morphology"]),
        trajectories=trajs,
        transitions=transitions,
        dropped=int(container.manifest.get("dropped", 0)),
        attempted_scores=[float(s) if s is not None else float("nan")
                          for s in container.manifest.get("attempted_scores", [])],
    )


# ============ 模型参数 ============

def dynamics_container(params: DynamicsParams, report: Optional[dict] = None) -> DatasetContainer:
    manifest = {"descriptor": params.descriptor(), "metadata": params.metadata, "report": report or {}}
    return DatasetContainer(KIND_DYNAMICS, manifest, {"vector": params.vector})


def dynamics_params(container: DatasetContainer) -> DynamicsParams:
    descriptor = container.manifest["descriptor"]
    return DynamicsParams(
        arch=ArchConfig(**descriptor["arch"]),
        task_id=parse_task_id(descriptor["task_id"]),
        num_particles=int(descriptor["num_particles"]),
        num_pickers=int(descriptor["num_pickers"]),
        vector=container.arrays["vector"],
        metadata=dict(container.manifest.get("metadata") or {}),
    )


def policy_container(params: PolicyParams, report: Optional[dict] = None) -> DatasetContainer:
    manifest = {"descriptor": params.descriptor(), "metadata": params.metadata, "report": report or {}}
    arrays = {"actor": params.actor, "critic": params.critic, "target_critic": params.target_critic}
    return DatasetContainer(KIND_POLICY, manifest, arrays)


def policy_params(container: DatasetContainer) -> PolicyParams:
    descriptor = container.manifest["descriptor"]
    return PolicyParams(
        task_id=parse_task_id(descriptor["task_id"]),
        num_pickers=int(descriptor["num_pickers"]),
        obs_dim=int(descriptor["obs_dim"]),
        config=LfdConfig(**descriptor["lfd"]),
        actor=container.arrays["actor"],
        critic=container.arrays["critic"],
        target_critic=container.arrays["target_critic"],
        metadata=dict(container.manifest.get("metadata") or {}),
    )
