"""Reverse-mode automatic differentiation over dense float64 arrays.

Design: eager forward evaluation with a taped backward pass. Every operation
computes its output immediately and registers, per parent, a closure mapping
the output gradient to that parent's gradient contribution. Gradients
accumulate by addition; node ids increase strictly in creation order, so
sorting the reachable set by id gives a valid reverse-topological order.

Broadcasting is deliberately restricted to row-vector bias addition
((batch, n) + (n,)). Every other shape mismatch raises ShapeError early.
All public operations validate that their outputs are finite and raise
InvalidTensor otherwise, so numerical blow-ups surface at the op that
produced them instead of corrupting a whole training run.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidTensor, LabelError, ShapeError

# Tensors are plain C-contiguous float64 ndarrays; `as_tensor` is the one
# place where dtype, layout, and finiteness are enforced.
Tensor = np.ndarray

_ids = itertools.count()


def as_tensor(data) -> Tensor:
    """Coerce `data` to a C-contiguous float64 array, rejecting NaN/Inf."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim > 0:  # ascontiguousarray would promote 0-d to 1-d
        arr = np.ascontiguousarray(arr)
    if not np.all(np.isfinite(arr)):
        raise InvalidTensor("tensor contains non-finite entries")
    return arr


class Node:
    """One vertex of the computation graph.

    `parents` holds (parent, pull) pairs where pull(output_grad) returns the
    gradient contribution for that parent. Leaves have no parents.
    """

    __slots__ = ("value", "grad", "parents", "id")

    def __init__(self, value: Tensor, parents: Sequence[tuple["Node", Callable]] = ()):
        self.value = value
        self.grad = np.zeros_like(value)
        self.parents = tuple(parents)
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Node(id={self.id}, shape={self.value.shape})"


def var(t) -> Node:
    """Create a leaf node from array-like data."""
    return Node(as_tensor(t))


def detach(a: Node) -> Node:
    """Leaf with the same value as `a`; blocks gradient flow (stop-gradient)."""
    return Node(a.value)


def _out(value: np.ndarray, parents) -> Node:
    if not np.all(np.isfinite(value)):
        raise InvalidTensor("operation produced non-finite values")
    return Node(value, parents)


def _require(cond: bool, fmt: str, *shapes) -> None:
    if not cond:
        raise ShapeError(fmt % tuple(str(s) for s in shapes))


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops
# ---------------------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    _require(a.value.ndim == 2 and b.value.ndim == 2 and a.value.shape[1] == b.value.shape[0],
             "matmul shapes incompatible: %s @ %s", a.value.shape, b.value.shape)
    av, bv = a.value, b.value
    return _out(av @ bv, [(a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)])


def add(a: Node, b: Node) -> Node:
    if a.value.shape == b.value.shape:
        return _out(a.value + b.value, [(a, lambda g: g), (b, lambda g: g)])
    # row-vector bias: (batch, n) + (n,)
    if a.value.ndim == 2 and b.value.shape == (a.value.shape[1],):
        return _out(a.value + b.value,
                    [(a, lambda g: g), (b, lambda g: g.sum(axis=0))])
    raise ShapeError("add shapes incompatible: %s + %s" % (a.value.shape, b.value.shape))


def mul_elem(a: Node, b: Node) -> Node:
    _require(a.value.shape == b.value.shape,
             "mul_elem shapes differ: %s vs %s", a.value.shape, b.value.shape)
    av, bv = a.value, b.value
    return _out(av * bv, [(a, lambda g: g * bv), (b, lambda g: g * av)])


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _out(a.value * c, [(a, lambda g: g * c)])


def relu(a: Node) -> Node:
    mask = a.value > 0
    return _out(np.where(mask, a.value, 0.0), [(a, lambda g: g * mask)])


def tanh(a: Node) -> Node:
    t = np.tanh(a.value)
    return _out(t, [(a, lambda g: g * (1.0 - t * t))])


def exp(a: Node) -> Node:
    with np.errstate(over="ignore"):
        e = np.exp(a.value)
    if not np.all(np.isfinite(e)):
        raise InvalidTensor("exp overflow")
    return _out(e, [(a, lambda g: g * e)])


def clip(a: Node, lo: float, hi: float) -> Node:
    """Clamp to [lo, hi]; gradient passes through only where unclamped."""
    inside = (a.value >= lo) & (a.value <= hi)
    return _out(np.clip(a.value, lo, hi), [(a, lambda g: g * inside)])


def concat(nodes: Sequence[Node], axis: int) -> Node:
    if not nodes:
        raise ShapeError("concat of zero nodes")
    ref = nodes[0].value.shape
    for n in nodes[1:]:
        s = n.value.shape
        _require(len(s) == len(ref) and all(s[i] == ref[i] for i in range(len(s)) if i != axis),
                 "concat shapes incompatible off axis: %s vs %s", ref, s)
    value = np.concatenate([n.value for n in nodes], axis=axis)
    parents = []
    start = 0
    for n in nodes:
        width = n.value.shape[axis]
        sl = [np.s_[:]] * value.ndim
        sl[axis] = np.s_[start:start + width]
        sl = tuple(sl)
        parents.append((n, lambda g, sl=sl: g[sl]))
        start += width
    return _out(value, parents)


def slice_(a: Node, axis: int, start: int, stop: int) -> Node:
    """Contiguous slice [start, stop) along `axis`."""
    _require(0 <= axis < a.value.ndim, "slice axis %s out of range for %s", axis, a.value.shape)
    sl = [np.s_[:]] * a.value.ndim
    sl[axis] = np.s_[start:stop]
    sl = tuple(sl)

    def pull(g, sl=sl, shape=a.value.shape):
        full = np.zeros(shape)
        full[sl] = g
        return full

    return _out(a.value[sl].copy(), [(a, pull)])


def sum(a: Node) -> Node:  # noqa: A001 - mirrors the public op name
    shape = a.value.shape
    return _out(np.asarray(a.value.sum()), [(a, lambda g: np.broadcast_to(g, shape).copy())])


def mean(a: Node, axis: int | None = None) -> Node:
    if axis is None:
        n = a.value.size
        shape = a.value.shape
        return _out(np.asarray(a.value.mean()),
                    [(a, lambda g: np.broadcast_to(g / n, shape).copy())])
    _require(0 <= axis < a.value.ndim, "mean axis %s out of range for %s", axis, a.value.shape)
    n = a.value.shape[axis]

    def pull(g, axis=axis, n=n):
        return np.repeat(np.expand_dims(g / n, axis), n, axis=axis)

    return _out(a.value.mean(axis=axis), [(a, pull)])


# ---------------------------------------------------------------------------
# fused loss ops
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: Node, labels, row_weights: np.ndarray | None = None) -> Node:
    """Mean negative log-likelihood of integer `labels` under softmax(logits).

    Numerically stable via per-row max subtraction. With `row_weights`
    (a constant vector summing to whatever normalization the caller wants),
    the per-row losses are combined as weights @ losses instead of the mean.
    """
    _require(logits.value.ndim == 2, "logits must be 2-d, got %s", logits.value.shape)
    labels = np.asarray(labels)
    batch, n_classes = logits.value.shape
    if labels.shape != (batch,):
        raise ShapeError("labels shape %s does not match batch %d" % (labels.shape, batch))
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_classes:
        raise LabelError(f"labels must lie in [0, {n_classes})")
    labels = labels.astype(np.int64)

    if row_weights is None:
        w = np.full(batch, 1.0 / batch)
    else:
        w = np.asarray(row_weights, dtype=np.float64)
        if w.shape != (batch,):
            raise ShapeError("row_weights shape %s does not match batch %d" % (w.shape, batch))

    shifted = logits.value - logits.value.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    nll = -log_probs[np.arange(batch), labels]
    value = np.asarray(nll @ w)

    softmax = np.exp(log_probs)

    def pull(g):
        grad = softmax.copy()
        grad[np.arange(batch), labels] -= 1.0
        return grad * (g * w)[:, None]

    return _out(value, [(logits, pull)])


def gaussian_kl(mu: Node, log_var: Node, row_weights: np.ndarray | None = None) -> Node:
    """KL(N(mu, diag(exp(log_var))) || N(0, I)), averaged over the batch.

    Per row: 0.5 * sum_d(mu^2 + exp(log_var) - log_var - 1). `row_weights`
    replaces the uniform 1/batch average, which lets callers restrict the
    average to a masked subset of rows.
    """
    _require(mu.value.shape == log_var.value.shape,
             "gaussian_kl shapes differ: %s vs %s", mu.value.shape, log_var.value.shape)
    muv, lvv = mu.value, log_var.value
    batch = muv.shape[0] if muv.ndim > 0 else 1
    if row_weights is None:
        w = np.full(batch, 1.0 / batch)
    else:
        w = np.asarray(row_weights, dtype=np.float64)
        if w.shape != (batch,):
            raise ShapeError("row_weights shape %s does not match batch %d" % (w.shape, batch))

    var_ = np.exp(lvv)
    row_kl = 0.5 * (muv * muv + var_ - lvv - 1.0).sum(axis=tuple(range(1, muv.ndim)))
    value = np.asarray(row_kl @ w)

    extra = tuple(range(1, muv.ndim))

    def expand(v):
        return v.reshape(v.shape + (1,) * len(extra))

    return _out(value, [
        (mu, lambda g: expand(g * w) * muv),
        (log_var, lambda g: expand(g * w) * 0.5 * (var_ - 1.0)),
    ])


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle
# ---------------------------------------------------------------------------

def _reachable(root: Node) -> list[Node]:
    seen: dict[int, Node] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen[node.id] = node
        stack.extend(p for p, _ in node.parents)
    return sorted(seen.values(), key=lambda n: n.id, reverse=True)


def backward(root: Node) -> dict[int, Tensor]:
    """Accumulate d(root)/d(node) into .grad for every node reachable from root.

    Returns {leaf id: gradient} for reachable leaves. The root must be scalar.
    Traversal order is id-descending, a valid reverse-topological order because
    every op's parents predate it.
    """
    if root.value.shape != ():
        raise ShapeError("backward root must be scalar, got shape %s" % (root.value.shape,))
    order = _reachable(root)
    root.grad = root.grad + 1.0
    for node in order:
        g = node.grad
        for parent, pull in node.parents:
            parent.grad = parent.grad + pull(g)
    return {n.id: n.grad for n in order if not n.parents}


def zero_grad(root: Node) -> None:
    """Reset .grad to zeros for every node reachable from `root`."""
    for node in _reachable(root):
        node.grad = np.zeros_like(node.value)


def finite_diff_check(f: Callable[[Node], Node], x, h: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    `f` maps a leaf Node to a scalar Node. Relative error per coordinate uses
    the denominator max(|analytic|, |numeric|, 1e-8).
    """
    x = as_tensor(x)
    leaf = var(x)
    backward(f(leaf))
    analytic = leaf.grad.ravel()

    flat = x.ravel()
    worst = 0.0
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += h
        fp = float(f(var(bumped.reshape(x.shape))).value)
        bumped[i] -= 2 * h
        fm = float(f(var(bumped.reshape(x.shape))).value)
        numeric = (fp - fm) / (2.0 * h)
        denom = max(abs(analytic[i]), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
