from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from caprompt import autograd as ag
from caprompt.errors import ArgumentError
from caprompt.prompts import (PromptSet, aggregate, collinearity_report, init_task_prompt,
                              load_prompt, pca_2d, save_prompt)

from conftest import random_prompts


def _simplex(rng, t, batch=None):
    shape = (t,) if batch is None else (batch, t)
    return rng.dirichlet(np.ones(t), size=batch) if batch else rng.dirichlet(np.ones(t)).reshape(shape)


def test_init_first_prompt_is_seeded_gaussian():
    a = init_task_prompt(None, 3, n_layers=2, length=10, dim=8, std=0.02)
    b = init_task_prompt(None, 3, n_layers=2, length=10, dim=8, std=0.02)
    assert a.shape == (2, 2, 5, 8)
    assert np.array_equal(a.param.value, b.param.value)
    assert a.trainable
    # a 0.02 Gaussian stays inside +-5 sigma for 160 draws
    assert np.max(np.abs(a.param.value)) < 5 * 0.02


def test_init_copies_previous_without_aliasing():
    prev = init_task_prompt(None, 0, n_layers=1, length=4, dim=8)
    new = init_task_prompt(prev, 99)
    assert new.task_id == prev.task_id + 1
    assert np.array_equal(new.param.value, prev.param.value)
    new.param.value[0, 0, 0, 0] += 1.0
    assert new.param.value[0, 0, 0, 0] != prev.param.value[0, 0, 0, 0]


def test_init_requires_shape_and_even_length():
    with pytest.raises(ArgumentError):
        init_task_prompt(None, 0, n_layers=1, length=4)
    with pytest.raises(ArgumentError):
        init_task_prompt(None, 0, n_layers=1, length=5, dim=8)


def test_key_value_halves():
    ps = random_prompts(1)[0]
    assert np.array_equal(ps.keys, ps.param.value[0])
    assert np.array_equal(ps.values, ps.param.value[1])
    assert ps.flat().shape == (ps.param.value.size,)


def test_aggregate_two_prompt_example():
    p1 = PromptSet(0, ag.Node(np.ones((2, 1, 1, 2))))
    p2 = PromptSet(1, ag.Node(np.full((2, 1, 1, 2), 3.0)))
    out = aggregate([p1, p2], [0.25, 0.75]).tensor.value
    assert np.allclose(out, 2.5, atol=1e-15)


@pytest.mark.parametrize("t", [1, 2, 5])
def test_one_hot_weights_return_prompt_exactly(t):
    prompts = random_prompts(t, seed=t)
    for i in range(t):
        out = aggregate(prompts, np.eye(t)[i]).tensor.value
        assert np.array_equal(out, prompts[i].param.value)


def test_batched_weights_match_per_row():
    rng = np.random.default_rng(0)
    prompts = random_prompts(3, seed=1)
    w = _simplex(rng, 3, batch=4)
    out = aggregate(prompts, w).tensor.value
    assert out.shape == (4, *prompts[0].shape)
    for b in range(4):
        assert np.allclose(out[b], aggregate(prompts, w[b]).tensor.value, atol=1e-15)


def test_weights_checked():
    prompts = random_prompts(2)
    with pytest.raises(ArgumentError):
        aggregate(prompts, [0.5, 0.6])
    with pytest.raises(ArgumentError):
        aggregate(prompts, [1.5, -0.5])
    with pytest.raises(ArgumentError):
        aggregate(prompts, [1.0])
    with pytest.raises(ArgumentError):
        aggregate([], np.zeros(0))
    odd = [prompts[0], PromptSet(1, ag.Node(np.zeros((2, 2, 3, 8))))]
    with pytest.raises(ArgumentError):
        aggregate(odd, [0.5, 0.5])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1), st.floats(0, 1))
def test_linear_in_weights(t, seed, lam):
    rng = np.random.default_rng(seed)
    prompts = random_prompts(t, seed=seed % 1000)
    w1, w2 = _simplex(rng, t), _simplex(rng, t)
    mixed = aggregate(prompts, lam * w1 + (1 - lam) * w2).tensor.value
    parts = lam * aggregate(prompts, w1).tensor.value + (1 - lam) * aggregate(prompts, w2).tensor.value
    assert np.max(np.abs(mixed - parts)) < 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_permutation_equivariant(t, seed):
    rng = np.random.default_rng(seed)
    prompts = random_prompts(t, seed=seed % 1000)
    w = _simplex(rng, t)
    perm = rng.permutation(t)
    a = aggregate(prompts, w).tensor.value
    b = aggregate([prompts[i] for i in perm], w[perm]).tensor.value
    assert np.max(np.abs(a - b)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_aggregate_stays_in_convex_hull(t, seed):
    rng = np.random.default_rng(seed)
    prompts = random_prompts(t, seed=seed % 1000)
    stack = np.stack([p.param.value for p in prompts])
    out = aggregate(prompts, _simplex(rng, t)).tensor.value
    assert np.all(out <= stack.max(axis=0) + 1e-12)
    assert np.all(out >= stack.min(axis=0) - 1e-12)


def test_train_mode_detaches_all_but_newest():
    prompts = random_prompts(3)
    for p in prompts:
        p.trainable = True
    w = np.array([0.2, 0.3, 0.5])
    ag.sum(aggregate(prompts, w, train_mode=True).tensor).backward()
    for p in prompts[:2]:
        assert p.param.grad is None or np.all(p.param.grad == 0)
    assert np.allclose(prompts[2].param.grad, 0.5)


def test_eval_mode_gradient_is_weight():
    prompts = random_prompts(2)
    for p in prompts:
        p.trainable = True
    ag.sum(aggregate(prompts, [0.4, 0.6]).tensor).backward()
    assert np.allclose(prompts[0].param.grad, 0.4)
    assert np.allclose(prompts[1].param.grad, 0.6)


def test_weight_node_receives_gradient():
    prompts = random_prompts(3)
    z = ag.parameter(np.array([[0.2, -0.3, 0.5]]))

    def fn():
        phi = aggregate(prompts, ag.softmax(z, -1)).tensor
        return ag.sum(phi * phi)
    assert ag.grad_check(fn, [z]) < 1e-4


def _prompt_from_flat(i, v):
    return PromptSet(i, ag.Node(np.asarray(v, dtype=np.float64).reshape(2, 1, 2, 2)))


def test_collinearity_report_collinear_and_orthogonal():
    base = np.zeros(8)
    d = np.eye(8)
    line = [_prompt_from_flat(0, base), _prompt_from_flat(1, d[0]), _prompt_from_flat(2, 3 * d[0])]
    rep = collinearity_report(line)
    assert rep["pairs"] == [(2, 3, pytest.approx(1.0, abs=1e-15))]
    assert rep["min"] == pytest.approx(1.0) and rep["mean"] == pytest.approx(1.0)
    ortho = [_prompt_from_flat(0, base), _prompt_from_flat(1, d[0]), _prompt_from_flat(2, d[1]),
             _prompt_from_flat(3, -d[0])]
    rep = collinearity_report(ortho)
    cos = {(i, j): c for i, j, c in rep["pairs"]}
    assert cos[(2, 3)] == pytest.approx(0.0, abs=1e-15)
    assert cos[(2, 4)] == pytest.approx(-1.0)
    assert rep["pca"].shape == (4, 2)


def test_collinearity_needs_three_tasks():
    with pytest.raises(ArgumentError):
        collinearity_report(random_prompts(2))


def test_pca_is_sign_stable_and_centered():
    rng = np.random.default_rng(2)
    rows = rng.normal(size=(5, 6))
    coords = pca_2d(rows)
    assert np.allclose(coords.mean(axis=0), 0.0, atol=1e-12)
    assert np.array_equal(coords, pca_2d(rows.copy()))
    assert pca_2d(rows[:1]).shape == (1, 2)


def test_prompt_checkpoint_round_trip(tmp_path):
    ps = random_prompts(1, seed=9)[0]
    ps.task_id = 4
    save_prompt(tmp_path / "p.npz", ps)
    back = load_prompt(tmp_path / "p.npz")
    assert back.task_id == 4
    assert back.param.value.dtype == np.float64
    assert back.param.value.tobytes() == ps.param.value.tobytes()
    assert not back.trainable
