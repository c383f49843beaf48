"""Task probabilities from class probabilities, and the cyclic refinement loop."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Node
from .backbone import Backbone, encode, encode_prompted
from .errors import ArgumentError
from .head import ClassMap, TaskHead
from .prompts import AggregatedPrompt, PromptSet, aggregate, check_simplex

MODES = ("cyclic", "query", "select")


@dataclass
class WeightVector:
    """Task probabilities, shape ``(t,)`` or ``(B, t)``."""

    probs: np.ndarray
    cycle_index: int = 0

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        check_simplex(self.probs, 1e-9, "task probabilities")

    @property
    def num_tasks(self) -> int:
        return self.probs.shape[-1]


def task_mass(class_probs, class_map: ClassMap):
    """Sum class probabilities within each task's class set (array or Node)."""
    ind = class_map.indicator()
    if isinstance(class_probs, Node):
        return ag.matmul(class_probs, ind)
    return np.asarray(class_probs, dtype=np.float64) @ ind


def task_similarity(class_probs, class_map: ClassMap, cycle_index: int = 0) -> WeightVector:
    probs = class_probs.value if isinstance(class_probs, Node) else np.asarray(class_probs, float)
    if probs.shape[-1] != class_map.num_classes:
        raise ArgumentError("class_probs length does not match the class map")
    check_simplex(probs, 1e-9, "class probabilities")
    if class_map.num_tasks == 1:
        # a lone task owns all the mass; avoid the rounding of the row sum
        return WeightVector(np.ones((*probs.shape[:-1], 1)), cycle_index)
    return WeightVector(task_mass(probs, class_map), cycle_index)


def equal_weights(t: int, batch: int | None = None) -> WeightVector:
    if t < 1:
        raise ArgumentError("need at least one task")
    w = np.full(t, 1.0 / t)
    return WeightVector(w if batch is None else np.tile(w, (batch, 1)), 1)


def one_hot_weights(index, t: int) -> WeightVector:
    return WeightVector(np.eye(t)[np.asarray(index, dtype=np.int64)])


def _prompted_logits(backbone: Backbone, head: TaskHead, prompt_sets: Sequence[PromptSet],
                     x, weights: WeightVector, train_mode: bool = False):
    phi = aggregate(prompt_sets, weights.probs, train_mode)
    return phi, head.logits(encode_prompted(backbone, x, phi))


def query_weights(backbone: Backbone, head: TaskHead, x) -> WeightVector:
    """Task probabilities from the unprompted query feature (no prompts)."""
    probs = ag.softmax(head.logits(encode(backbone, x)), -1).value
    return task_similarity(probs, head.class_map)


def cyclic_refine(backbone: Backbone, head: TaskHead, prompt_sets: Sequence[PromptSet],
                  x, current_weights: WeightVector) -> WeightVector:
    _, logits = _prompted_logits(backbone, head, prompt_sets, x, current_weights)
    probs = ag.softmax(logits, -1).value
    return task_similarity(probs, head.class_map, current_weights.cycle_index + 1)


def cyclic_infer(backbone: Backbone, head: TaskHead, prompt_sets: Sequence[PromptSet],
                 x, num: int = 2):
    """Start from equal weights and alternate aggregate / re-weight ``num`` times.

    Returns the weights after the last refinement, the prompt aggregated in
    the last cycle, and the class logits produced with that prompt.
    """
    if num < 1:
        raise ArgumentError("num must be at least 1")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    w = equal_weights(len(prompt_sets), batch=x.shape[0])
    for _ in range(num):
        phi, logits = _prompted_logits(backbone, head, prompt_sets, x, w)
        w = task_similarity(ag.softmax(logits, -1).value, head.class_map, w.cycle_index + 1)
    return w, phi, logits.value


def stage_weights(backbone: Backbone, head: TaskHead, prompt_sets: Sequence[PromptSet],
                  x, mode: str, num: int = 2) -> WeightVector:
    """Weights used to aggregate the prompt that makes the final prediction.

    ``cyclic`` runs ``num - 1`` refinements from equal weights; ``query``
    uses the unprompted query feature; ``select`` is the one-hot argmax of
    the query weights (single-prompt selection).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = len(prompt_sets)
    if mode == "cyclic":
        w = equal_weights(t, batch=x.shape[0])
        for _ in range(num - 1):
            w = cyclic_refine(backbone, head, prompt_sets, x, w)
        return w
    if mode in ("query", "select"):
        if t == 1:
            return WeightVector(np.ones((x.shape[0], 1)))
        w = query_weights(backbone, head, x)
        return one_hot_weights(np.argmax(w.probs, axis=-1), t) if mode == "select" else w
    raise ArgumentError(f"unknown weighting mode {mode!r}")


def infer(backbone: Backbone, head: TaskHead, prompt_sets: Sequence[PromptSet], x,
          num: int = 2, mode: str = "cyclic") -> tuple[WeightVector, AggregatedPrompt, np.ndarray]:
    """Predictive pass under any weighting mode; returns (weights, prompt, logits)."""
    if mode == "cyclic":
        return cyclic_infer(backbone, head, prompt_sets, x, num)
    w = stage_weights(backbone, head, prompt_sets, x, mode, num)
    phi, logits = _prompted_logits(backbone, head, prompt_sets, np.atleast_2d(x), w)
    return w, phi, logits.value
