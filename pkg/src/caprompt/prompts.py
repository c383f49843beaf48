"""Per-task prefix prompts and their probability-weighted aggregation."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Node
from .errors import ArgumentError

CHECKPOINT_VERSION = 1


@dataclass
class PromptSet:
    """Key/value prefixes of one task for every prompted layer.

    ``param.value`` has shape ``(2, P, m, d)``: index 0 holds the key
    prefixes, index 1 the value prefixes, ``P`` prompted layers of ``m``
    rows each (``m`` is half the prompt length).
    """

    task_id: int
    param: Node

    @property
    def trainable(self) -> bool:
        return self.param.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.param.requires_grad = bool(flag)
        if not flag:
            self.param.grad = None

    @property
    def keys(self) -> np.ndarray:
        return self.param.value[0]

    @property
    def values(self) -> np.ndarray:
        return self.param.value[1]

    @property
    def shape(self) -> tuple:
        return self.param.shape

    def flat(self) -> np.ndarray:
        # every layer's key prefixes, then every layer's value prefixes
        return self.param.value.reshape(-1)


@dataclass
class AggregatedPrompt:
    tensor: Node
    weights: np.ndarray

    @property
    def shape(self) -> tuple:
        return self.tensor.shape


def init_task_prompt(previous: PromptSet | None, seed: int, *, task_id: int | None = None,
                     n_layers: int | None = None, length: int | None = None,
                     dim: int | None = None, std: float = 0.02) -> PromptSet:
    """New trainable prompt: a copy of ``previous`` or a small Gaussian draw.

    ``length`` is the full prompt length; it is split evenly into key and
    value halves.
    """
    if previous is not None:
        tid = previous.task_id + 1 if task_id is None else task_id
        return PromptSet(tid, ag.parameter(previous.param.value.copy()))
    if None in (n_layers, length, dim):
        raise ArgumentError("n_layers, length and dim are needed without a previous prompt")
    if length % 2:
        raise ArgumentError("prompt length must be even (key half + value half)")
    rng = np.random.default_rng(seed)
    value = rng.normal(0.0, std, size=(2, n_layers, length // 2, dim))
    return PromptSet(0 if task_id is None else task_id, ag.parameter(value))


def check_simplex(weights: np.ndarray, tol: float, what: str = "weights") -> None:
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < -tol) or np.any(np.abs(w.sum(axis=-1) - 1.0) > tol):
        raise ArgumentError(f"{what} are not on the probability simplex")


def aggregate(prompt_sets: Sequence[PromptSet], weights, train_mode: bool = False) -> AggregatedPrompt:
    """Convex combination of task prompts.

    ``weights`` has shape ``(t,)`` or ``(B, t)``; the result has shape
    ``(2, P, m, d)`` or ``(B, 2, P, m, d)``. In train mode every prompt but
    the last is detached, so only the newest task's prompt can receive
    gradient. Weights given as a Node keep their graph; plain arrays are
    constants.
    """
    t = len(prompt_sets)
    w_node = weights if isinstance(weights, Node) else None
    w = np.asarray(weights.value if w_node is not None else weights, dtype=np.float64)
    if t == 0 or w.shape[-1] != t:
        raise ArgumentError(f"{w.shape[-1]} weights for {t} prompts")
    check_simplex(w, 1e-6)
    shape = prompt_sets[0].shape
    if any(ps.shape != shape for ps in prompt_sets):
        raise ArgumentError("prompt sets differ in shape")
    size = int(np.prod(shape))
    parts = []
    for i, ps in enumerate(prompt_sets):
        src = ps.param if (not train_mode or i == t - 1) else ag.stop_gradient(ps.param)
        parts.append(ag.reshape(src, (1, size)))
    stacked = ag.concat(parts, axis=0) if t > 1 else parts[0]
    wmat = w_node if w_node is not None else ag.Node(w)
    batched = w.ndim == 2
    if not batched:
        wmat = ag.reshape(wmat, (1, t))
    out = ag.matmul(wmat, stacked)
    out = ag.reshape(out, (w.shape[0], *shape) if batched else shape)
    return AggregatedPrompt(out, w)


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def collinearity_report(prompt_sets: Sequence[PromptSet]) -> dict:
    """Cosine geometry of task prompts relative to the first task's prompt.

    Returns pairwise cosines of ``(phi_i - phi_1)`` and ``(phi_j - phi_1)``
    for ``2 <= i < j <= t`` (1-based), their min and mean, and 2-D PCA
    coordinates of the flattened prompts. A zero difference vector scores
    cosine 0.
    """
    t = len(prompt_sets)
    if t < 3:
        raise ArgumentError("collinearity needs at least three tasks")
    flat = np.stack([ps.flat() for ps in prompt_sets])
    diffs = flat[1:] - flat[0]
    pairs = [(i + 2, j + 2, _cos(diffs[i], diffs[j]))
             for i, j in combinations(range(t - 1), 2)]
    cosines = np.array([c for *_, c in pairs])
    return {
        "pairs": pairs,
        "min": float(cosines.min()),
        "mean": float(cosines.mean()),
        "pca": pca_2d(flat),
    }


def pca_2d(rows: np.ndarray) -> np.ndarray:
    centered = rows - rows.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    # sign convention: largest-magnitude loading positive
    for k in range(comps.shape[0]):
        if comps[k, np.argmax(np.abs(comps[k]))] < 0:
            comps[k] = -comps[k]
    coords = centered @ comps.T
    if coords.shape[1] < 2:
        coords = np.hstack([coords, np.zeros((len(rows), 2 - coords.shape[1]))])
    return coords


def save_prompt(path, prompt: PromptSet) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, format_version=np.int64(CHECKPOINT_VERSION),
                 task_id=np.int64(prompt.task_id), param=prompt.param.value)


def load_prompt(path) -> PromptSet:
    with np.load(Path(path)) as data:
        if int(data["format_version"]) != CHECKPOINT_VERSION:
            raise ArgumentError("unsupported prompt checkpoint version")
        return PromptSet(int(data["task_id"]), Node(data["param"].copy()))
