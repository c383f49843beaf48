"""Class-to-task bookkeeping and the growing classification head."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Node
from .errors import ArgumentError


@dataclass
class ClassMap:
    """Disjoint class-index sets, one per task, covering ``0..l_t-1``."""

    tasks: list[tuple[int, ...]] = field(default_factory=list)

    def __post_init__(self):
        self.tasks = [tuple(int(c) for c in cs) for cs in self.tasks]
        self._validate()

    def _validate(self) -> None:
        seen = [c for cs in self.tasks for c in cs]
        if len(seen) != len(set(seen)):
            raise ArgumentError("class sets of different tasks overlap")
        if sorted(seen) != list(range(len(seen))):
            raise ArgumentError("class indices must cover 0..l_t-1")
        if any(len(cs) == 0 for cs in self.tasks):
            raise ArgumentError("a task must own at least one class")

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def num_classes(self) -> int:
        return sum(len(cs) for cs in self.tasks)

    def add_task(self, classes: Sequence[int]) -> None:
        self.tasks.append(tuple(int(c) for c in classes))
        try:
            self._validate()
        except ArgumentError:
            self.tasks.pop()
            raise

    def indicator(self) -> np.ndarray:
        """``(l_t, t)`` 0/1 matrix; row c marks the task that owns class c."""
        m = np.zeros((self.num_classes, self.num_tasks))
        for i, cs in enumerate(self.tasks):
            m[list(cs), i] = 1.0
        return m

    def task_of(self, labels) -> np.ndarray:
        owner = np.argmax(self.indicator(), axis=1)
        return owner[np.asarray(labels, dtype=np.int64)]

    def permuted(self, order: Sequence[int]) -> "ClassMap":
        return ClassMap([self.tasks[i] for i in order])


@dataclass
class TaskHead:
    """Linear head ``W`` with one row per seen class."""

    W: Node
    class_map: ClassMap

    @classmethod
    def empty(cls, dim: int) -> "TaskHead":
        return cls(ag.parameter(np.zeros((0, dim))), ClassMap())

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    def grow(self, classes: Sequence[int], rng: np.random.Generator, std: float = 0.02) -> None:
        self.class_map.add_task(classes)
        rows = rng.normal(0.0, std, size=(len(classes), self.W.shape[1]))
        self.W = ag.Node(np.vstack([self.W.value, rows]), requires_grad=self.W.requires_grad)

    def logits(self, feature) -> Node:
        feature = ag.as_node(feature)
        if feature.value.ndim == 1:
            return ag.reshape(ag.matmul(ag.reshape(feature, (1, -1)), ag.swapaxes(self.W, -1, -2)),
                              (self.num_classes,))
        return ag.matmul(feature, ag.swapaxes(self.W, -1, -2))
