from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest

from caprompt import autograd as ag
from caprompt.data import TaskData
from caprompt.errors import ArgumentError, StateError
from caprompt.evaluation import (AccuracyMatrix, Prediction, compute_metrics, concavity_probe,
                                 evaluate_stream, jensen_harness, metrics_from_predictions)
from caprompt.prompts import PromptSet
from caprompt.trainer import ExperimentState, train_task
from caprompt.weighting import infer

from conftest import random_head, random_prompts, small_config, tiny_backbone


def test_metrics_hand_example_exact():
    acc, af = compute_metrics([[0.9], [0.8, 0.7]])
    assert acc == 0.75 and af == 0.1


def test_metrics_monotone_columns_and_constant():
    assert compute_metrics([[0.5], [0.6, 0.7], [0.9, 0.8, 0.4]])[1] == 0.0
    acc, af = compute_metrics([[0.3], [0.3, 0.3], [0.3, 0.3, 0.3]])
    assert acc == 0.3 and af == 0.0


def test_metrics_single_task_and_validation():
    assert compute_metrics([[0.4]]) == (0.4, None)
    with pytest.raises(ArgumentError):
        compute_metrics([])
    with pytest.raises(ArgumentError):
        AccuracyMatrix.from_rows([[0.5, 0.5]])
    with pytest.raises(ArgumentError):
        AccuracyMatrix.from_rows([[1.5]])


def test_metrics_use_max_not_diagonal():
    # task 0 peaks after task 1, so its drop is measured from 0.9, not 0.6
    acc, af = compute_metrics([[Fraction(6, 10)], [Fraction(9, 10), Fraction(1, 2)],
                               [Fraction(3, 10), Fraction(1, 2), Fraction(1)]])
    assert acc == float(Fraction(18, 30))
    assert af == float((Fraction(6, 10) + Fraction(0)) / 2)


def test_matrix_to_array():
    a = AccuracyMatrix.from_rows([[0.5], [0.25, 1]]).to_array()
    assert a[0, 0] == 0.5 and math.isnan(a[0, 1]) and a[1, 0] == 0.25


def test_metrics_from_prediction_records():
    rng = np.random.default_rng(0)
    records, truth = [], []
    for i in range(3):
        row = []
        for j in range(i + 1):
            labels = rng.integers(0, 5, size=40)
            preds = np.where(rng.random(40) < 0.7, labels, (labels + 1) % 5)
            records += [Prediction(i, j, k, int(a), int(b)) for k, (a, b) in enumerate(zip(labels, preds))]
            row.append(Fraction(int(np.sum(labels == preds)), 40))
        truth.append(row)
    A, (acc, af) = metrics_from_predictions(records)
    assert A.rows == truth
    ref_acc, ref_af = compute_metrics(truth)
    assert abs(acc - ref_acc) < 1e-12 and abs(af - ref_af) < 1e-12


def test_evaluate_requires_training():
    state = ExperimentState.fresh(tiny_backbone())
    with pytest.raises(StateError):
        evaluate_stream(state, [])


def test_evaluate_stream_counts_and_determinism(small_run):
    cfg, stream, state = small_run
    state.backbone.reset_counters()
    row, records = evaluate_stream(state, stream.tasks, num=2)
    n = sum(len(t.test_y) for t in stream.tasks)
    assert state.backbone.passes == {"prompted": 2 * n, "unprompted": 0}
    assert len(records) == n
    again, _ = evaluate_stream(state, stream.tasks, num=2, batch_size=13)
    assert row == again
    for j, acc in enumerate(row):
        mine = [r for r in records if r.task == j]
        assert acc == Fraction(sum(r.label == r.pred for r in mine), len(mine))


def test_evaluate_predicts_over_all_seen_classes(small_run):
    cfg, stream, state = small_run
    t0 = stream.tasks[0]
    # a task-0 sample moved onto a task-2 class mean gets a task-2 prediction
    foreign = stream.tasks[2].train_x[stream.tasks[2].train_y == 7].mean(axis=0)
    probe = TaskData(t0.classes, t0.train_x, t0.train_y, foreign[None], np.array([0]))
    _, records = evaluate_stream(state, [probe])
    assert records[0].pred in stream.tasks[2].classes


def test_single_task_separable_accuracy():
    cfg = small_config(tasks=1, separation=12.0)
    from caprompt.data import generate_stream
    from caprompt.experiment import prepare_backbone
    stream = generate_stream(cfg.stream_spec())
    state = ExperimentState.fresh(prepare_backbone(cfg, stream))
    train_task(state, 0, stream.tasks[0], cfg)
    row, _ = evaluate_stream(state, stream.tasks)
    assert row[0] > 0.95


def test_jensen_identical_prompts():
    bb = tiny_backbone()
    one = random_prompts(1)[0]
    state = ExperimentState(bb, random_head([(0, 1), (2, 3)], scale=2.0),
                            [PromptSet(i, ag.Node(one.param.value.copy())) for i in range(2)])
    x = np.random.default_rng(0).normal(size=(6, 8))
    y = np.array([0, 1, 2, 3, 0, 2])
    rep = jensen_harness(state, x, y, "query")
    # the weights sum to one only up to rounding, hence the 1e-15 slack
    assert np.max(np.abs(rep.gap)) <= 1e-15 * np.max(rep.agg_prob)
    assert rep.E1 == pytest.approx(rep.E2, rel=1e-13)
    conc = concavity_probe(state, x, y)
    assert np.max(np.abs(conc["delta"])) <= 1e-15 and conc["nonpos_fraction"] == 1.0


def test_jensen_needs_two_tasks():
    state = ExperimentState(tiny_backbone(), random_head([(0, 1)]), random_prompts(1))
    with pytest.raises(ArgumentError):
        jensen_harness(state, np.zeros((1, 8)), np.zeros(1, np.int64))
    with pytest.raises(ArgumentError):
        concavity_probe(state, np.zeros((1, 8)), np.zeros(1, np.int64))


def test_jensen_report_against_direct_passes(small_run):
    cfg, stream, state = small_run
    x = stream.tasks[1].test_x[:8]
    y = stream.tasks[1].test_y[:8]
    state.backbone.reset_counters()
    rep = jensen_harness(state, x, y, "cyclic")
    # weights: 1 refinement; aggregated: 1 pass; per-task: t passes; delta: 2 more
    assert state.backbone.passes["prompted"] == 8 * (1 + 1 + 3 + 2)
    t = len(state.prompts)
    for b in range(len(y)):
        w = rep.weights[b]
        per = []
        for i in range(t):
            _, _, lo = infer(state.backbone, state.head, [state.prompts[i]], x[b:b + 1], mode="select")
            per.append(ag.softmax(lo, -1).value[0, y[b]])
        assert rep.mix_prob[b] == pytest.approx(float(np.dot(w, per)), abs=1e-12)
    holds = rep.implication_holds()
    assert holds.all()


def test_implication_exhaustive_on_trained_model(small_run):
    cfg, stream, state = small_run
    x = np.concatenate([t.test_x for t in stream.tasks])
    y = np.concatenate([t.test_y for t in stream.tasks])
    for mode in ("query", "cyclic"):
        rep = jensen_harness(state, x, y, mode)
        nonneg = rep.gap >= 0
        assert np.all(rep.e1_terms[nonneg] <= rep.e2_terms[nonneg])
        s = rep.summary()
        assert s["implication_holds_fraction"] == 1.0
        assert s["samples"] == len(y)
        assert s["E1"] >= 0 and s["E2"] >= 0
        if nonneg.any():
            assert s["E1_nonneg_gap"] <= s["E2_nonneg_gap"]


def test_concavity_probe_summary_oracle(small_run):
    cfg, stream, state = small_run
    x = np.concatenate([t.test_x for t in stream.tasks])
    y = np.concatenate([t.test_y for t in stream.tasks])
    rep = concavity_probe(state, x, y, batch_size=17)
    d = rep["delta"]
    assert len(d) == len(y)
    assert abs(rep["mean"] - math.fsum(d.tolist()) / len(d)) < 1e-12
    assert rep["max"] == max(d.tolist())
    assert rep["nonpos_fraction"] == sum(1 for v in d.tolist() if v <= 1e-6) / len(d)
