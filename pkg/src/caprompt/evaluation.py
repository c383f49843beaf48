"""Continual-learning metrics, the aggregation-vs-mixture error harness and the concavity probe."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import autograd as ag
from .data import TaskData
from .errors import ArgumentError, StateError
from .losses import concave_delta, network_g
from .prompts import aggregate
from .trainer import ExperimentState
from .weighting import infer, stage_weights

CONCAVE_TOL = 1e-6

AF_DEFINITION = ("mean over tasks j<T of max_{i>=j} A[i][j] - A[T][j] "
                 "(max-minus-final forgetting)")


def _exact(value) -> Fraction:
    # floats are read as their shortest decimal form, so 0.9 - 0.8 == 0.1
    if isinstance(value, (Fraction, int)):
        return Fraction(value)
    return Fraction(repr(float(value)))


@dataclass
class AccuracyMatrix:
    """Lower-triangular ``A[i][j]``: accuracy on task j after training task i."""

    rows: list[list[Fraction]] = field(default_factory=list)

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence]) -> "AccuracyMatrix":
        m = cls()
        for r in rows:
            m.add_row(r)
        return m

    def add_row(self, row: Sequence) -> None:
        i = len(self.rows)
        if len(row) != i + 1:
            raise ArgumentError(f"row {i} must hold {i + 1} entries")
        vals = [_exact(v) for v in row]
        if any(v < 0 or v > 1 for v in vals):
            raise ArgumentError("accuracies must lie in [0, 1]")
        self.rows.append(vals)

    @property
    def num_tasks(self) -> int:
        return len(self.rows)

    def to_array(self) -> np.ndarray:
        a = np.full((self.num_tasks, self.num_tasks), np.nan)
        for i, r in enumerate(self.rows):
            a[i, :len(r)] = [float(v) for v in r]
        return a


def compute_metrics(A) -> tuple[float, float | None]:
    """Final average accuracy and average forgetting; AF is ``None`` for one task.

    Arithmetic is exact (rational) and rounded once at the end.
    """
    if not isinstance(A, AccuracyMatrix):
        A = AccuracyMatrix.from_rows(A)
    T = A.num_tasks
    if T == 0:
        raise ArgumentError("empty accuracy matrix")
    last = A.rows[-1]
    acc = sum(last, Fraction(0)) / T
    if T < 2:
        return float(acc), None
    drops = [max(A.rows[i][j] for i in range(j, T)) - last[j] for j in range(T - 1)]
    return float(acc), float(sum(drops, Fraction(0)) / (T - 1))


@dataclass
class Prediction:
    after_task: int
    task: int
    index: int
    label: int
    pred: int


def evaluate_stream(state: ExperimentState, test_sets: Sequence[TaskData], num: int = 2,
                    mode: str = "cyclic", batch_size: int = 256):
    """Accuracy on each given task's test set over all classes seen so far.

    Returns the row of exact accuracies and the raw prediction records.
    """
    if state.tasks_trained == 0:
        raise StateError("nothing trained yet")
    if len(test_sets) > state.tasks_trained:
        raise StateError("cannot evaluate tasks that were not trained")
    after = state.tasks_trained - 1
    row, records = [], []
    with ag.no_grad():
        for j, task in enumerate(test_sets):
            preds = []
            for s in range(0, len(task.test_y), batch_size):
                _, _, logits = infer(state.backbone, state.head, state.prompts,
                                     task.test_x[s:s + batch_size], num, mode)
                preds.append(np.argmax(logits, axis=1))
            preds = np.concatenate(preds)
            row.append(Fraction(int(np.sum(preds == task.test_y)), len(task.test_y)))
            records.extend(Prediction(after, j, k, int(y), int(p))
                           for k, (y, p) in enumerate(zip(task.test_y, preds)))
    return row, records


def metrics_from_predictions(records: Sequence[Prediction]):
    """Rebuild the accuracy matrix from raw prediction records."""
    counts: dict[tuple[int, int], list[int]] = {}
    for r in records:
        c = counts.setdefault((r.after_task, r.task), [0, 0])
        c[0] += int(r.label == r.pred)
        c[1] += 1
    T = 1 + max(i for i, _ in counts)
    A = AccuracyMatrix.from_rows(
        [[Fraction(*counts[(i, j)]) for j in range(i + 1)] for i in range(T)])
    return A, compute_metrics(A)


@dataclass
class JensenReport:
    agg_prob: np.ndarray        # g at the aggregated prompt
    mix_prob: np.ndarray        # weighted mixture of per-task g
    delta: np.ndarray           # two-point concavity defect
    weights: np.ndarray
    mode: str

    @property
    def gap(self) -> np.ndarray:
        return self.agg_prob - self.mix_prob

    @property
    def e1_terms(self) -> np.ndarray:
        return -np.log(self.agg_prob)

    @property
    def e2_terms(self) -> np.ndarray:
        return -np.log(self.mix_prob)

    @property
    def E1(self) -> float:
        return float(np.mean(self.e1_terms))

    @property
    def E2(self) -> float:
        return float(np.mean(self.e2_terms))

    @property
    def nonneg_gap(self) -> np.ndarray:
        return self.gap >= 0

    def implication_holds(self) -> np.ndarray:
        """Per sample: gap >= 0 implies E1-term <= E2-term (True where gap < 0)."""
        return ~self.nonneg_gap | (self.e1_terms <= self.e2_terms)

    def summary(self) -> dict:
        mask = self.nonneg_gap
        sub = lambda a: float(np.mean(a[mask])) if mask.any() else float("nan")  # noqa: E731
        return {
            "mode": self.mode,
            "samples": int(len(self.gap)),
            "E1": self.E1,
            "E2": self.E2,
            "nonneg_gap_fraction": float(np.mean(mask)),
            "E1_nonneg_gap": sub(self.e1_terms),
            "E2_nonneg_gap": sub(self.e2_terms),
            "implication_holds_fraction": float(np.mean(self.implication_holds())),
            "delta_nonpos_fraction": float(np.mean(self.delta <= CONCAVE_TOL)),
        }


def jensen_harness(state: ExperimentState, x, y, mode: str = "query", num: int = 2,
                   batch_size: int = 256) -> JensenReport:
    """Aggregated-prompt probability vs. the weighted per-prompt mixture, per sample."""
    prompts = state.prompts
    t = len(prompts)
    if t < 2:
        raise ArgumentError("the harness needs at least two tasks")
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64)
    agg, mix, delta, weights = [], [], [], []
    bb, head = state.backbone, state.head
    with ag.no_grad():
        for s in range(0, len(y), batch_size):
            xb, yb = x[s:s + batch_size], y[s:s + batch_size]
            w = stage_weights(bb, head, prompts, xb, mode, num).probs
            g = network_g(bb, head, xb, yb)
            g_agg = g(aggregate(prompts, w).tensor)
            per_task = np.stack([g(ps.param).value for ps in prompts], axis=1)
            d = concave_delta(prompts, w, g, full=g_agg)
            agg.append(g_agg.value)
            mix.append(np.sum(w * per_task, axis=1))
            delta.append(np.zeros(len(yb)) if d is None else d.value)
            weights.append(w)
    return JensenReport(np.concatenate(agg), np.concatenate(mix), np.concatenate(delta),
                        np.concatenate(weights), mode)


def concavity_probe(state: ExperimentState, x, y, mode: str = "cyclic", num: int = 2,
                    batch_size: int = 256) -> dict:
    """Concavity defect per sample under the training-time weights, plus summary stats."""
    if len(state.prompts) < 2:
        raise ArgumentError("the probe needs at least two tasks")
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64)
    out = []
    bb, head = state.backbone, state.head
    with ag.no_grad():
        for s in range(0, len(y), batch_size):
            xb, yb = x[s:s + batch_size], y[s:s + batch_size]
            w = stage_weights(bb, head, state.prompts, xb, mode, num).probs
            d = concave_delta(state.prompts, w, network_g(bb, head, xb, yb))
            out.append(np.zeros(len(yb)) if d is None else d.value)
    delta = np.concatenate(out)
    return {
        "delta": delta,
        "mean": float(np.mean(delta)),
        "max": float(np.max(delta)),
        "nonpos_fraction": float(np.mean(delta <= CONCAVE_TOL)),
    }

