"""Minimal reverse-mode differentiation over float64 numpy arrays.

Only the operations the prompted transformer and its losses need are
provided. A graph is recorded implicitly while ops run and is discarded
after ``backward``; nothing is reused between forward passes.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ArgumentError

__all__ = [
    "Node", "as_node", "constant", "parameter", "stop_gradient", "backward",
    "add", "sub", "mul", "neg", "div", "matmul", "reshape", "transpose",
    "swapaxes", "concat", "getitem", "broadcast_to", "sum", "mean", "exp",
    "log", "sqrt", "relu", "take_last", "softmax", "log_softmax",
    "cross_entropy", "layer_norm", "gelu", "attention", "attention_prefix",
    "grad_check", "no_grad",
]

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Node:
    """A value in the computation graph.

    Leaves created with ``requires_grad=True`` accumulate gradients in
    ``grad``. Nodes that do not require gradients never record parents and
    never receive gradient.
    """

    __slots__ = ("value", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False, parents: tuple = (),
                 backward_fn: Callable | None = None, op: str = "leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = parents if requires_grad else ()
        self._backward = backward_fn if requires_grad else None
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def grad_or_zeros(self) -> np.ndarray:
        return np.zeros_like(self.value) if self.grad is None else self.grad

    def backward(self, seed=None) -> None:
        backward(self, seed)

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, idx): return getitem(self, idx)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def constant(x) -> Node:
    return Node(x.value if isinstance(x, Node) else x)


def parameter(x) -> Node:
    return Node(np.array(x, dtype=np.float64), requires_grad=True)


def stop_gradient(x) -> Node:
    """Same value, cut from the graph: nothing upstream receives gradient."""
    return Node(x.value if isinstance(x, Node) else x, op="stop")


def _make(value, parents: Sequence[Node], backward_fn, op: str) -> Node:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    return Node(value, needs, tuple(parents), backward_fn, op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(root: Node, seed=None) -> None:
    """Accumulate d(root)/d(leaf) into every leaf that requires gradient."""
    if not root.requires_grad:
        return
    if seed is None:
        if root.value.size != 1:
            raise ArgumentError("backward without a seed needs a scalar root")
        seed = np.ones_like(root.value)
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(root): np.asarray(seed, dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
                 "mul")


def neg(a) -> Node:
    a = as_node(a)
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    out = av / bv
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * out / bv, bv.shape)),
                 "div")


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Node:
    a = as_node(a)
    av = a.value
    return _make(np.log(av), (a,), lambda g: (g / av,), "log")


def sqrt(a) -> Node:
    a = as_node(a)
    out = np.sqrt(a.value)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a) -> Node:
    a = as_node(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def gelu(a) -> Node:
    """tanh approximation of GELU."""
    a = as_node(a)
    x = a.value
    c = math.sqrt(2.0 / math.pi)
    inner = c * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        d_inner = c * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * d_inner),)

    return _make(out, (a,), bw, "gelu")


# -- shape -----------------------------------------------------------------

def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ArgumentError("matmul operands must be at least 2-D")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if b.requires_grad else None
        return ga, gb

    return _make(av @ bv, (a, b), bw, "matmul")


def reshape(a, shape) -> Node:
    a = as_node(a)
    orig = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a, axes) -> Node:
    a = as_node(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.value, axes), (a,),
                 lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, i: int, j: int) -> Node:
    a = as_node(a)
    return _make(np.swapaxes(a.value, i, j), (a,),
                 lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def concat(nodes: Sequence, axis: int) -> Node:
    nodes = [as_node(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([n.value for n in nodes], axis=axis), nodes,
                 lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def getitem(a, idx) -> Node:
    a = as_node(a)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.value[idx], (a,), bw, "getitem")


def broadcast_to(a, shape) -> Node:
    a = as_node(a)
    orig = a.shape
    return _make(np.broadcast_to(a.value, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, orig),), "broadcast")


def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    a = as_node(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.value.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis, keepdims) * (1.0 / n)


def take_last(a, index) -> Node:
    """Select one entry per row along the last axis: ``a[..., index[...]]``."""
    a = as_node(a)
    index = np.asarray(index, dtype=np.int64)
    if a.ndim == 1:
        return getitem(a, int(index))
    rows = np.arange(a.shape[0])
    return getitem(a, (rows, index))


# -- fused -----------------------------------------------------------------

def _check_axis(x: np.ndarray, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ArgumentError(f"axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


def softmax(a, axis: int = -1) -> Node:
    a = as_node(a)
    axis = _check_axis(a.value, axis)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Node:
    a = as_node(a)
    axis = _check_axis(a.value, axis)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    prob = np.exp(out)

    def bw(g):
        return (g - prob * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def cross_entropy(logits, label) -> Node:
    """Negative log softmax probability of ``label``.

    1-D logits with an integer label give a scalar; 2-D logits with a label
    vector give one loss per row.
    """
    logits = as_node(logits)
    label = np.asarray(label, dtype=np.int64)
    n_cls = logits.shape[-1]
    if np.any(label < 0) or np.any(label >= n_cls):
        raise ArgumentError(f"label out of range [0, {n_cls})")
    return neg(take_last(log_softmax(logits, -1), label))


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Node:
    x, gamma, beta = as_node(x), as_node(gamma), as_node(beta)
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.value + beta.value
    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.value
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw, "layer_norm")


# -- attention -------------------------------------------------------------

def _split_heads(x: Node, heads: int) -> Node:
    *lead, n, d = x.shape
    x = reshape(x, (*lead, n, heads, d // heads))
    return swapaxes(x, -2, -3)


def attention_prefix(queries, keys, values, prefix_k=None, prefix_v=None,
                     heads: int = 1) -> Node:
    """Multi-head scaled dot-product attention with key/value prefixes.

    ``prefix_k``/``prefix_v`` (shape ``(..., m, d)``) are prepended to the
    projected keys and values. Leading batch dimensions broadcast. With no
    prefix, or ``m == 0``, this is plain attention.
    """
    q, k, v = as_node(queries), as_node(keys), as_node(values)
    d = q.shape[-1]
    if heads < 1 or d % heads:
        raise ArgumentError(f"dim {d} not divisible by heads {heads}")
    if k.shape != v.shape or k.shape[-1] != d:
        raise ArgumentError("keys/values shape mismatch")
    if (prefix_k is None) != (prefix_v is None):
        raise ArgumentError("prefix_k and prefix_v must be given together")
    if prefix_k is not None:
        pk, pv = as_node(prefix_k), as_node(prefix_v)
        if pk.shape != pv.shape or pk.shape[-1] != d:
            raise ArgumentError("prefix shape mismatch")
        if pk.shape[-2] > 0:
            lead = np.broadcast_shapes(pk.shape[:-2], k.shape[:-2])
            m = pk.shape[-2]
            if pk.shape[:-2] != lead:
                pk = broadcast_to(pk, (*lead, m, d))
                pv = broadcast_to(pv, (*lead, m, d))
            if k.shape[:-2] != lead:
                k = broadcast_to(k, (*lead, *k.shape[-2:]))
                v = broadcast_to(v, (*lead, *v.shape[-2:]))
            k = concat([pk, k], axis=-2)
            v = concat([pv, v], axis=-2)
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    scale = 1.0 / math.sqrt(d // heads)
    scores = matmul(qh, swapaxes(kh, -1, -2)) * scale
    out = matmul(softmax(scores, -1), vh)
    out = swapaxes(out, -2, -3)
    return reshape(out, (*out.shape[:-2], d))


def attention(queries, keys, values, heads: int = 1) -> Node:
    return attention_prefix(queries, keys, values, None, None, heads)


# -- verification ----------------------------------------------------------

def grad_check(scalar_fn: Callable[[], Node], params: Mapping[str, Node] | Iterable[Node],
               epsilon: float = 1e-5, floor: float = 1e-8) -> float:
    """Maximum relative error between reverse-mode and central differences.

    ``scalar_fn`` rebuilds the graph from the current parameter values each
    call. Parameters that do not require gradient are not probed; their
    reverse-mode gradient must be (and is asserted to be) absent.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ArgumentError("epsilon must lie in [1e-6, 1e-3]")
    plist = list(params.values()) if isinstance(params, Mapping) else list(params)
    for p in plist:
        p.zero_grad()
    out = scalar_fn()
    if out.value.size != 1:
        raise ArgumentError("grad_check needs a scalar-valued function")
    backward(out, np.ones_like(out.value))
    worst = 0.0
    for p in plist:
        if not p.requires_grad:
            if p.grad is not None and np.any(p.grad != 0):
                raise AssertionError("stop-gradient parameter received gradient")
            continue
        analytic = p.grad_or_zeros()
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(scalar_fn().value)
            flat[i] = orig - epsilon
            down = float(scalar_fn().value)
            flat[i] = orig
            numeric = (up - down) / (2 * epsilon)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
