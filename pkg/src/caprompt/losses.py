"""Training objectives: cross-entropy, the concavity hinge and the linear-direction term.

Constraint terms return ``None`` when they are structurally undefined
(too few tasks, degenerate weights or directions); ``total_loss`` treats
``None`` as an exact zero contribution.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Node
from .backbone import Backbone, encode_prompted
from .errors import ArgumentError
from .head import TaskHead
from .prompts import PromptSet, aggregate

PRIOR_FLOOR = 1e-9


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 5.0
    beta: float = 0.2

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ArgumentError("loss weights must be non-negative")


def ce_loss(head: TaskHead, feature, label) -> Node:
    return ag.cross_entropy(head.logits(feature), label)


def label_probability(logits, label) -> Node:
    """Softmax probability of ``label``; this is the per-sample ``g``."""
    return ag.exp(ag.take_last(ag.log_softmax(logits, -1), label))


def network_g(backbone: Backbone, head: TaskHead, x, label) -> Callable[[Node], Node]:
    def g(prompt: Node) -> Node:
        return label_probability(head.logits(encode_prompted(backbone, x, prompt)), label)
    return g


def _frozen(ps: PromptSet) -> PromptSet:
    return PromptSet(ps.task_id, ag.stop_gradient(ps.param))


def concave_delta(prompt_sets: Sequence[PromptSet], weights, g: Callable[[Node], Node],
                  full: Node | None = None):
    """Two-point concavity defect per sample, or ``None`` if undefined.

    ``delta = p_t g(phi_t) + (1 - p_t) g(prior mix) - g(sum_i p_i phi_i)``
    where the prior mix renormalises the earlier tasks' weights by
    ``1 - p_t``. Samples with ``1 - p_t <= 1e-9`` get delta 0. ``full``
    may carry an already computed ``g`` of the aggregated prompt.
    """
    t = len(prompt_sets)
    if t < 2:
        return None
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    if w.shape[-1] != t:
        raise ArgumentError("weights do not match the number of prompts")
    p_t = w[:, -1]
    rest = 1.0 - p_t
    live = rest > PRIOR_FLOOR
    if not np.any(live):
        return None
    prior_w = np.where(live[:, None], w[:, :-1] / np.maximum(rest, PRIOR_FLOOR)[:, None],
                       1.0 / (t - 1))
    prior_w = prior_w / prior_w.sum(axis=1, keepdims=True)
    earlier = [_frozen(ps) for ps in prompt_sets[:-1]]
    single = g(prompt_sets[-1].param)
    prior = g(aggregate(earlier, prior_w).tensor)
    if full is None:
        full = g(aggregate(prompt_sets, w, train_mode=True).tensor)
    delta = single * p_t + prior * rest - full
    return delta * live.astype(np.float64)


def concave_loss(backbone: Backbone, head: TaskHead, prompt_sets: Sequence[PromptSet],
                 weights, x, label, g: Callable[[Node], Node] | None = None,
                 full: Node | None = None):
    """Per-sample ``max(delta, 0)``; three prompted passes through the network."""
    if g is None:
        g = network_g(backbone, head, x, label)
    delta = concave_delta(prompt_sets, weights, g, full)
    return None if delta is None else ag.relu(delta)


def linear_loss(prompt_sets: Sequence[PromptSet]):
    """``1 - cos(phi_t - phi_1, phi_{t-1} - phi_1)``; only ``phi_t`` is differentiable."""
    t = len(prompt_sets)
    if t < 3:
        return None
    first = prompt_sets[0].param.value.reshape(-1)
    prev = prompt_sets[-2].param.value.reshape(-1) - first
    cur = ag.reshape(prompt_sets[-1].param, (-1,)) - first
    n_prev = float(np.linalg.norm(prev))
    n_cur = float(np.linalg.norm(cur.value))
    if n_prev == 0.0 or n_cur == 0.0:
        return None
    dot = ag.sum(cur * prev)
    norm = ag.sqrt(ag.sum(cur * cur)) * n_prev
    return 1.0 - dot / norm


def total_loss(ce: Node, con, lin, loss_weights: LossWeights) -> Node:
    loss = ag.mean(ce)
    if con is not None and loss_weights.alpha != 0:
        loss = loss + ag.mean(con) * loss_weights.alpha
    if lin is not None and loss_weights.beta != 0:
        loss = loss + lin * loss_weights.beta
    return loss
