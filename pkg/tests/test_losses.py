from __future__ import annotations

import math

import numpy as np
import pytest

from caprompt import autograd as ag
from caprompt.backbone import encode_prompted
from caprompt.errors import ArgumentError
from caprompt.head import ClassMap, TaskHead
from caprompt.losses import (LossWeights, ce_loss, concave_delta, concave_loss, label_probability,
                             linear_loss, network_g, total_loss)
from caprompt.prompts import PromptSet, aggregate

from conftest import TINY, random_head, random_prompts

TASKS3 = [(0, 1), (2,), (3, 4, 5)]


def _scalar_prompt(i, v):
    return PromptSet(i, ag.Node(np.full((2, 1, 1, 1), float(v))))


def _surrogate(fn):
    def g(phi):
        flat = ag.reshape(phi, (-1, 2))
        return ag.mean(fn(flat), axis=1)
    return g


def test_loss_weights_validation():
    assert LossWeights() == LossWeights(5.0, 0.2)
    with pytest.raises(ArgumentError):
        LossWeights(alpha=-1.0)
    with pytest.raises(ArgumentError):
        LossWeights(beta=-0.1)


def test_ce_loss_saturates_on_matching_row():
    head = TaskHead(ag.Node(np.eye(4, 8)), ClassMap([(0, 1), (2, 3)]))
    feat = np.eye(8)[2] * 60.0
    assert ce_loss(head, feat, 2).value < 1e-20


def test_ce_loss_zero_feature_is_log_classes():
    head = random_head(TASKS3)
    assert ce_loss(head, np.zeros(8), 4).value == pytest.approx(math.log(6), abs=1e-15)


def test_ce_loss_gradient():
    rng = np.random.default_rng(0)
    head = random_head(TASKS3)
    head.W.requires_grad = True
    feat = ag.parameter(rng.normal(size=(3, 8)))
    labels = np.array([0, 3, 5])
    assert ag.grad_check(lambda: ag.sum(ce_loss(head, feat, labels)), [head.W, feat]) < 1e-4


def test_label_probability():
    logits = np.array([[0.0, np.log(3.0)]])
    assert label_probability(logits, np.array([1])).value[0] == pytest.approx(0.75, abs=1e-15)


def test_surrogate_convex_gives_one():
    prompts = [_scalar_prompt(0, -1.0), _scalar_prompt(1, 1.0)]
    g = _surrogate(lambda v: v * v)
    delta = concave_delta(prompts, [[0.5, 0.5]], g)
    assert delta.value[0] == pytest.approx(1.0, abs=1e-15)
    assert ag.relu(delta).value[0] == pytest.approx(1.0, abs=1e-15)


def test_surrogate_concave_gives_minus_one():
    prompts = [_scalar_prompt(0, -1.0), _scalar_prompt(1, 1.0)]
    g = _surrogate(lambda v: 1.0 - v * v)
    delta = concave_delta(prompts, [[0.5, 0.5]], g)
    assert delta.value[0] == pytest.approx(-1.0, abs=1e-15)
    assert ag.relu(delta).value[0] == 0.0


def test_prior_mix_renormalised():
    # earlier prompts 0 and 4 with weights 0.1, 0.3: prior mix = 0.25*0 + 0.75*4 = 3
    prompts = [_scalar_prompt(0, 0.0), _scalar_prompt(1, 4.0), _scalar_prompt(2, 2.0)]
    g = _surrogate(lambda v: v * v)
    delta = concave_delta(prompts, [[0.1, 0.3, 0.6]], g).value[0]
    full = 0.3 * 4.0 + 0.6 * 2.0
    assert delta == pytest.approx(0.6 * 4.0 + 0.4 * 9.0 - full ** 2, abs=1e-12)


def test_linear_g_has_zero_defect():
    rng = np.random.default_rng(1)
    prompts = [PromptSet(i, ag.Node(rng.normal(size=(2, 1, 1, 1)))) for i in range(4)]
    w = rng.dirichlet(np.ones(4), size=5)
    delta = concave_delta(prompts, w, _surrogate(lambda v: v * 3.0 + 1.0)).value
    assert np.max(np.abs(delta)) < 1e-12


def test_concave_not_applicable_cases():
    g = _surrogate(lambda v: v * v)
    assert concave_delta([_scalar_prompt(0, 1.0)], [[1.0]], g) is None
    prompts = [_scalar_prompt(0, -1.0), _scalar_prompt(1, 1.0)]
    assert concave_delta(prompts, [[0.0, 1.0]], g) is None
    mixed = concave_delta(prompts, [[0.0, 1.0], [0.5, 0.5]], g).value
    assert mixed[0] == 0.0 and mixed[1] == pytest.approx(1.0)
    with pytest.raises(ArgumentError):
        concave_delta(prompts, [[0.2, 0.3, 0.5]], g)


def test_identical_prompts_give_zero(tiny):
    head = random_head(TASKS3, seed=2, scale=2.0)
    one = random_prompts(1, seed=4)[0]
    prompts = [PromptSet(i, ag.Node(one.param.value.copy())) for i in range(3)]
    x = np.random.default_rng(5).normal(size=(4, 8))
    w = np.random.default_rng(6).dirichlet(np.ones(3), size=4)
    delta = concave_delta(prompts, w, network_g(tiny, head, x, np.array([0, 2, 4, 5])))
    # equal up to the rounding of weights that sum to one
    assert np.max(np.abs(delta.value)) <= 1e-15


def test_network_delta_matches_manual(tiny):
    head = random_head(TASKS3, seed=2, scale=2.0)
    prompts = random_prompts(3, seed=7)
    x = np.random.default_rng(8).normal(size=(2, 8))
    y = np.array([1, 3])
    w = np.array([[0.2, 0.3, 0.5], [0.6, 0.1, 0.3]])

    def g(w_row, idx):
        logits = head.logits(encode_prompted(tiny, x[idx:idx + 1], aggregate(prompts, w_row)))
        return label_probability(logits, y[idx:idx + 1]).value[0]

    delta = concave_delta(prompts, w, network_g(tiny, head, x, y)).value
    for b in range(2):
        p_t = w[b, 2]
        prior = np.array([w[b, 0], w[b, 1], 0.0]) / (1 - p_t)
        manual = p_t * g(np.eye(3)[2], b) + (1 - p_t) * g(prior, b) - g(w[b], b)
        assert delta[b] == pytest.approx(manual, abs=1e-12)


def test_concave_loss_three_prompted_passes(tiny):
    head = random_head(TASKS3)
    prompts = random_prompts(3)
    x = np.zeros((5, 8))
    tiny.reset_counters()
    concave_loss(tiny, head, prompts, np.full((5, 3), 1 / 3), x, np.zeros(5, np.int64))
    assert tiny.passes == {"prompted": 15, "unprompted": 0}


@pytest.mark.parametrize("seed", range(3))
def test_concave_gradient_reaches_newest_prompt_only(tiny, seed):
    rng = np.random.default_rng(seed)
    head = random_head(TASKS3, seed=seed, scale=2.0)
    prompts = random_prompts(3, seed=seed, scale=1.0)
    prompts[-1].trainable = True
    x = rng.normal(size=(3, 8))
    y = np.array([0, 2, 5])
    w = rng.dirichlet(np.ones(3), size=3)
    g = network_g(tiny, head, x, y)

    def fn():
        return ag.sum(concave_delta(prompts, w, g))
    params = {"new": prompts[-1].param, "old0": prompts[0].param, "old1": prompts[1].param}
    assert ag.grad_check(fn, params) < 1e-4


def test_linear_loss_examples():
    e = np.eye(8)

    def ps(i, v):
        return PromptSet(i, ag.Node(np.asarray(v, float).reshape(2, 1, 2, 2)))
    zero = np.zeros(8)
    assert linear_loss([ps(0, zero), ps(1, e[0]), ps(2, 2 * e[0])]).value == pytest.approx(0.0, abs=1e-15)
    assert linear_loss([ps(0, zero), ps(1, e[0]), ps(2, e[3])]).value == pytest.approx(1.0, abs=1e-15)
    assert linear_loss([ps(0, zero), ps(1, e[0]), ps(2, -e[0])]).value == pytest.approx(2.0, abs=1e-15)
    assert linear_loss([ps(0, zero), ps(1, e[0])]) is None
    assert linear_loss([ps(0, zero), ps(1, zero), ps(2, e[0])]) is None
    assert linear_loss([ps(0, zero), ps(1, e[0]), ps(2, zero)]) is None


def test_linear_loss_scale_invariant():
    rng = np.random.default_rng(3)
    base, a, b = (rng.normal(size=(2, 1, 2, 2)) for _ in range(3))

    def loss(sa, sb):
        sets = [PromptSet(0, ag.Node(base)), PromptSet(1, ag.Node(base + sa * a)),
                PromptSet(2, ag.Node(base + sb * b))]
        return linear_loss(sets).value
    ref = loss(1.0, 1.0)
    for sa, sb in [(3.0, 1.0), (1.0, 0.2), (7.5, 11.0)]:
        assert loss(sa, sb) == pytest.approx(ref, abs=1e-12)
    assert 0.0 <= ref <= 2.0


@pytest.mark.parametrize("seed", range(3))
def test_linear_loss_gradient_only_newest(seed):
    prompts = random_prompts(4, seed=seed)
    prompts[-1].trainable = True
    params = {"new": prompts[-1].param, "first": prompts[0].param, "prev": prompts[2].param}
    assert ag.grad_check(lambda: linear_loss(prompts), params) < 1e-4


def test_total_loss_components():
    ce = ag.Node(np.array([0.5, 1.5]))
    con = ag.Node(np.array([0.1, 0.3]))
    lin = ag.Node(np.array(0.25))
    w = LossWeights()
    assert total_loss(ce, con, lin, w).value == pytest.approx(1.0 + 5 * 0.2 + 0.2 * 0.25, abs=1e-12)
    assert total_loss(ce, con, lin, LossWeights(0.0, 0.0)).value == 1.0
    assert total_loss(ce, None, None, w).value == 1.0
    assert total_loss(ce, con, None, LossWeights(2.0, 0.2)).value == pytest.approx(1.4, abs=1e-12)


def test_total_loss_gradient_and_stop_gradient(tiny):
    rng = np.random.default_rng(11)
    head = random_head(TASKS3, seed=1, scale=0.5)
    prompts = random_prompts(3, seed=5, scale=1.0)
    prompts[-1].trainable = True
    head.W.requires_grad = True
    x = rng.normal(size=(2, 8))
    y = np.array([1, 4])
    w = rng.dirichlet(np.ones(3), size=2)

    def fn():
        phi = aggregate(prompts, w, train_mode=True)
        logits = head.logits(encode_prompted(tiny, x, phi))
        ce = ag.cross_entropy(logits, y)
        delta = concave_delta(prompts, w, network_g(tiny, head, x, y),
                              full=label_probability(logits, y))
        # keep the hinge away from its kink for finite differences
        con = delta * 1.0 if np.all(delta.value > 1e-6) else delta * delta
        return total_loss(ce, con, linear_loss(prompts), LossWeights())
    params = {"new": prompts[-1].param, "W": head.W,
              "old0": prompts[0].param, "old1": prompts[1].param}
    assert ag.grad_check(fn, params) < 1e-4
    assert prompts[0].param.grad is None or not np.any(prompts[0].param.grad)
