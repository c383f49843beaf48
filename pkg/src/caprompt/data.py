"""Synthetic class-incremental streams of Gaussian clusters."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError

STREAM_VERSION = 1


@dataclass
class TaskData:
    classes: tuple[int, ...]
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


@dataclass
class LabeledSet:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


@dataclass
class StreamSpec:
    tasks: int = 10
    classes_per_task: int = 4
    train_per_class: int = 50
    test_per_class: int = 50
    input_dim: int = 64
    separation: float = 10.0
    subspace_dim: int = 16
    novel_dim: int = 16
    novel_share: float = 0.6
    base_classes: int = 512
    base_per_class: int = 12
    seed: int = 0

    def validate(self) -> None:
        if self.tasks < 1 or self.classes_per_task < 1:
            raise ArgumentError("need at least one task with one class")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ArgumentError("need at least one train and one test sample per class")
        if self.input_dim < 1:
            raise ArgumentError("input_dim must be positive")
        if not 1 <= self.subspace_dim <= self.input_dim:
            raise ArgumentError("subspace_dim must lie in [1, input_dim]")
        if self.novel_dim < 0 or self.subspace_dim + self.novel_dim > self.input_dim:
            raise ArgumentError("subspace_dim + novel_dim must not exceed input_dim")
        if not 0.0 <= self.novel_share <= 1.0 or (self.novel_share > 0 and self.novel_dim == 0):
            raise ArgumentError("novel_share must lie in [0, 1] and needs novel_dim > 0")
        if not self.separation > 0:
            raise ArgumentError("separation must be positive")
        if self.base_classes < 0 or (self.base_classes > 0 and self.base_per_class < 2):
            raise ArgumentError("base set needs at least two samples per class")


@dataclass
class TaskStream:
    tasks: list[TaskData]
    base: LabeledSet
    spec: StreamSpec = field(default_factory=StreamSpec)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)


def _draw(rng, means, labels_per_class, n):
    x = np.concatenate([m + rng.normal(size=(n, means.shape[1])) for m in means])
    y = np.repeat(np.asarray(labels_per_class, dtype=np.int64), n)
    return x, y


def _unit(v):
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def generate_stream(spec: StreamSpec) -> TaskStream:
    """Draw one isotropic unit-variance cluster per class.

    Class means are random directions inside a shared ``subspace_dim``
    dimensional subspace, scaled to length ``separation``; the noise is
    isotropic in the full input space.
    Stream classes are numbered ``0..T*k-1`` in task order; base
    (pre-training) classes take the following indices and never appear in
    the stream.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_stream = spec.tasks * spec.classes_per_task
    n_total = n_stream + spec.base_classes
    basis, _ = np.linalg.qr(rng.normal(size=(spec.input_dim, spec.subspace_dim + spec.novel_dim)))
    shared, novel = basis[:, :spec.subspace_dim], basis[:, spec.subspace_dim:]
    means = _unit(rng.normal(size=(n_total, spec.subspace_dim)) @ shared.T)
    if spec.novel_dim:
        extra = _unit(rng.normal(size=(n_stream, spec.novel_dim)) @ novel.T)
        means[:n_stream] = (np.sqrt(1.0 - spec.novel_share) * means[:n_stream]
                            + np.sqrt(spec.novel_share) * extra)
    means = spec.separation * means
    tasks = []
    for t in range(spec.tasks):
        cls = list(range(t * spec.classes_per_task, (t + 1) * spec.classes_per_task))
        tr_x, tr_y = _draw(rng, means[cls], cls, spec.train_per_class)
        te_x, te_y = _draw(rng, means[cls], cls, spec.test_per_class)
        tasks.append(TaskData(tuple(cls), tr_x, tr_y, te_x, te_y))
    base_cls = list(range(n_stream, n_total))
    if base_cls:
        n_tr = spec.base_per_class - spec.base_per_class // 4
        bx, by = _draw(rng, means[base_cls], base_cls, spec.base_per_class)
        per = spec.base_per_class
        tr = np.concatenate([np.arange(i * per, i * per + n_tr) for i in range(len(base_cls))])
        te = np.setdiff1d(np.arange(len(by)), tr)
        base = LabeledSet(bx[tr], by[tr], bx[te], by[te])
    else:
        empty = np.zeros((0, spec.input_dim))
        base = LabeledSet(empty, np.zeros(0, np.int64), empty, np.zeros(0, np.int64))
    return TaskStream(tasks, base, spec)


def save_stream(path, stream: TaskStream) -> None:
    arrays = {"format_version": np.int64(STREAM_VERSION)}
    for name, value in vars(stream.spec).items():
        arrays[f"spec/{name}"] = np.asarray(value)
    for t, task in enumerate(stream.tasks):
        arrays[f"task{t}/classes"] = np.asarray(task.classes, dtype=np.int64)
        for part in ("train_x", "train_y", "test_x", "test_y"):
            arrays[f"task{t}/{part}"] = getattr(task, part)
    for part in ("train_x", "train_y", "test_x", "test_y"):
        arrays[f"base/{part}"] = getattr(stream.base, part)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_stream(path) -> TaskStream:
    with np.load(Path(path)) as data:
        if int(data["format_version"]) != STREAM_VERSION:
            raise ArgumentError("unsupported stream file version")
        spec = StreamSpec(**{k[5:]: data[k].item() for k in data.files if k.startswith("spec/")})
        tasks = []
        for t in range(spec.tasks):
            tasks.append(TaskData(tuple(int(c) for c in data[f"task{t}/classes"]),
                                  *(data[f"task{t}/{p}"] for p in
                                    ("train_x", "train_y", "test_x", "test_y"))))
        base = LabeledSet(*(data[f"base/{p}"] for p in ("train_x", "train_y", "test_x", "test_y")))
    return TaskStream(tasks, base, spec)
