"""Dense/sparse numeric kernel with a minimal reverse-mode tape.

All model math runs on float64 numpy arrays (float32 is tolerated for
throughput but every test runs in 64-bit).  Gradients come from a small
reverse-mode graph (`Var`) rather than a framework; `grad_check` is the
contract every loss has to satisfy.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

Array = np.ndarray


class NonFiniteLossError(ValueError):
    """Loss evaluated to NaN or infinity."""


# ---------------------------------------------------------------------------
# sparse bipartite adjacency
# ---------------------------------------------------------------------------

def normalized_adjacency(n_users: int, n_items: int,
                         edges: Sequence[tuple[int, int]],
                         dtype=np.float64) -> sp.csr_matrix:
    """Symmetric-normalized adjacency on the stacked user+item node space.

    Entry for edge (u, i) is 1/sqrt(deg(u) * deg(i)), with degrees counted
    on `edges` itself.  Isolated nodes simply have empty rows.
    """
    n = n_users + n_items
    if not len(edges):
        return sp.csr_matrix((n, n), dtype=dtype)
    e = np.asarray(edges, dtype=np.int64)
    u, i = e[:, 0], e[:, 1]
    deg_u = np.bincount(u, minlength=n_users)
    deg_i = np.bincount(i, minlength=n_items)
    vals = 1.0 / np.sqrt(deg_u[u] * deg_i[i])
    rows = np.concatenate([u, i + n_users])
    cols = np.concatenate([i + n_users, u])
    data = np.concatenate([vals, vals]).astype(dtype)
    return sp.csr_matrix((data, (rows, cols)), shape=(n, n))


def spmm(adj: sp.spmatrix, h: Array) -> Array:
    """Exact sparse-dense product adj @ h."""
    if adj.shape[1] != h.shape[0]:
        raise ValueError(
            f"dimension mismatch: adjacency is {adj.shape}, dense rows {h.shape[0]}")
    return adj @ h


# ---------------------------------------------------------------------------
# reverse-mode tape
# ---------------------------------------------------------------------------

class Var:
    """Node in the computation graph.

    `parents` holds (parent, vjp) pairs; vjp maps the incoming gradient to
    the parent's gradient contribution.  Constants carry no parents.
    """

    __slots__ = ("value", "parents", "requires_grad")

    def __init__(self, value, parents=(), requires_grad=False):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(
            value, dtype=np.float64)
        self.parents = parents
        self.requires_grad = requires_grad or any(
            p.requires_grad for p, _ in parents)

    # small amount of operator sugar; everything else is a module function
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def shape(self):
        return self.value.shape


def leaf(value: Array) -> Var:
    """Parameter leaf: gradient is tracked."""
    return Var(value, requires_grad=True)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _make(value, pairs) -> Var:
    tracked = tuple((p, fn) for p, fn in pairs if p.requires_grad)
    return Var(value, tracked)


def _unbroadcast(g: Array, shape) -> Array:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _make(a.value + b.value,
                 [(a, lambda g: _unbroadcast(g, a.value.shape)),
                  (b, lambda g: _unbroadcast(g, b.value.shape))])


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _make(a.value - b.value,
                 [(a, lambda g: _unbroadcast(g, a.value.shape)),
                  (b, lambda g: _unbroadcast(-g, b.value.shape))])


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _make(a.value * b.value,
                 [(a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
                  (b, lambda g: _unbroadcast(g * a.value, b.value.shape))])


def scale(a, c: float) -> Var:
    a = as_var(a)
    return _make(a.value * c, [(a, lambda g: g * c)])


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _make(a.value @ b.value,
                 [(a, lambda g: g @ b.value.T),
                  (b, lambda g: a.value.T @ g)])


def spmm_var(adj: sp.spmatrix, h: Var) -> Var:
    h = as_var(h)
    if adj.shape[1] != h.value.shape[0]:
        raise ValueError(
            f"dimension mismatch: adjacency is {adj.shape}, dense rows {h.value.shape[0]}")
    return _make(adj @ h.value, [(h, lambda g: adj.T @ g)])


def transpose(a) -> Var:
    a = as_var(a)
    return _make(a.value.T, [(a, lambda g: g.T)])


def gather_rows(a, idx) -> Var:
    a = as_var(a)
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return out

    return _make(a.value[idx], [(a, vjp)])


def concat_rows(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    na = a.value.shape[0]
    return _make(np.concatenate([a.value, b.value], axis=0),
                 [(a, lambda g: g[:na]), (b, lambda g: g[na:])])


def row_sum(a) -> Var:
    """Sum over axis 1, returning a vector."""
    a = as_var(a)
    shape = a.value.shape
    return _make(a.value.sum(axis=1),
                 [(a, lambda g: np.broadcast_to(g[:, None], shape).copy())])


def sum_all(a) -> Var:
    a = as_var(a)
    return _make(a.value.sum(),
                 [(a, lambda g: np.broadcast_to(g, a.value.shape).copy())])


def mean_all(a) -> Var:
    a = as_var(a)
    n = a.value.size
    return _make(a.value.mean(),
                 [(a, lambda g: np.broadcast_to(g / n, a.value.shape).copy())])


def square_sum(a) -> Var:
    a = as_var(a)
    return _make((a.value ** 2).sum(), [(a, lambda g: 2.0 * g * a.value)])


def relu(a) -> Var:
    a = as_var(a)
    return _make(np.maximum(a.value, 0.0),
                 [(a, lambda g: g * (a.value > 0))])


def softplus(a) -> Var:
    """log(1 + exp(a)), computed stably; -log sigmoid(x) == softplus(-x)."""
    a = as_var(a)
    return _make(np.logaddexp(0.0, a.value),
                 [(a, lambda g: g * expit(a.value))])


def diag_part(a) -> Var:
    a = as_var(a)
    n = a.value.shape[0]

    def vjp(g):
        out = np.zeros_like(a.value)
        out[np.arange(n), np.arange(n)] = g
        return out

    return _make(np.diagonal(a.value).copy(), [(a, vjp)])


def logsumexp_rows(a, mask: Array) -> Var:
    """Row-wise log-sum-exp restricted to entries where `mask` is True.

    Every row must have at least one True entry.
    """
    a = as_var(a)
    neg = np.where(mask, a.value, -np.inf)
    m = neg.max(axis=1)
    z = np.where(mask, np.exp(a.value - m[:, None]), 0.0)
    s = z.sum(axis=1)
    out = m + np.log(s)

    def vjp(g):
        return g[:, None] * (z / s[:, None])

    return _make(out, [(a, vjp)])


def backward(loss: Var, wrt: Sequence[Var]) -> list[Array]:
    """Gradients of a scalar `loss` with respect to each Var in `wrt`."""
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            pg = vjp(g)
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    return [grads.get(id(v), np.zeros_like(v.value)) for v in wrt]


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

def grad_check(fn: Callable[[list[Array]], tuple[float, list[Array]]],
               params: Sequence[Array],
               eps: float = 1e-5,
               rng: np.random.Generator | None = None,
               sample_size: int = 64) -> float:
    """Max relative error between analytic gradients and central differences.

    `fn(params)` returns (loss, grads).  At least `sample_size` coordinates
    are checked (all of them when the parameter count is smaller); the
    relative-error denominator is max(|analytic|, |numeric|, 1e-8).
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-6, 1e-4], got {eps}")
    params = [np.array(p, dtype=np.float64) for p in params]
    value, grads = fn(params)
    if not np.isfinite(value):
        raise NonFiniteLossError(f"loss is not finite: {value}")

    coords = [(ti, fi) for ti, p in enumerate(params) for fi in range(p.size)]
    if len(coords) > sample_size:
        rng = rng or np.random.default_rng(0)
        chosen = rng.choice(len(coords), size=sample_size, replace=False)
        coords = [coords[c] for c in chosen]

    worst = 0.0
    for ti, fi in coords:
        orig = params[ti].flat[fi]
        params[ti].flat[fi] = orig + eps
        up, _ = fn(params)
        params[ti].flat[fi] = orig - eps
        dn, _ = fn(params)
        params[ti].flat[fi] = orig
        if not (np.isfinite(up) and np.isfinite(dn)):
            raise NonFiniteLossError("loss not finite at perturbed point")
        numeric = (up - dn) / (2.0 * eps)
        analytic = grads[ti].flat[fi]
        err = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8)
        worst = max(worst, err)
    return worst
