"""Minimal reverse-mode differentiation over 2-D float64 arrays.

Expressions are built eagerly: every primitive returns a :class:`Tensor`
holding its value plus a backward rule, so the graph is the DAG of
``parents`` links reachable from the root.  :func:`gradient` walks that DAG
in reverse topological order.

Only the primitives the verifier needs are provided.  All values are 2-D
(row vectors are ``1 x k``); there is no general broadcasting beyond the
row-wise bias add in :func:`add`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

PARAMETER = "parameter"
INPUT = "input"
CONSTANT = "constant"

LEAKY_SLOPE = 0.2


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """A node in the expression DAG."""

    __slots__ = ("value", "parents", "backward", "op", "kind", "name")

    def __init__(self, value, parents=(), backward=None, op="leaf", kind=CONSTANT, name=None,
                 finite=False):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 1:
            value = value.reshape(1, -1)
        elif value.ndim == 0:
            value = value.reshape(1, 1)
        if value.ndim != 2:
            raise ShapeError(f"{op}: tensors are 2-D, got shape {value.shape}")
        # ``finite`` marks ops that cannot leave the finite range given finite inputs.
        # A finite sum implies finite entries; overflow falls through to the full check.
        if not finite and not np.isfinite(np.add.reduce(value, axis=None)) and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"{op}: non-finite value produced")
        self.value = value
        self.parents: tuple[Tensor, ...] = tuple(parents)
        # backward(grad_out) -> tuple of grads aligned with parents (None = no grad)
        self.backward = backward
        self.op = op
        self.kind = kind
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __mul__(self, scalar):
        return scale(self, scalar)

    __rmul__ = __mul__


def param(value, name=None) -> Tensor:
    return Tensor(value, kind=PARAMETER, name=name)


def inp(value, name=None) -> Tensor:
    return Tensor(value, kind=INPUT, name=name)


def const(value, name=None) -> Tensor:
    return Tensor(value, kind=CONSTANT, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else const(x)


def _check(cond, op, msg):
    if not cond:
        raise ShapeError(f"{op}: {msg}")


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape[1] == b.shape[0], "matmul", f"inner dims {a.shape} x {b.shape}")
    av, bv = a.value, b.value
    return Tensor(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), op="matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a ``1 x k`` row broadcast over ``a``'s rows."""
    if a.shape == b.shape:
        return Tensor(a.value + b.value, (a, b), lambda g: (g, g), op="add")
    _check(b.shape[0] == 1 and b.shape[1] == a.shape[1], "add", f"shapes {a.shape} and {b.shape}")
    return Tensor(
        a.value + b.value, (a, b), lambda g: (g, g.sum(axis=0, keepdims=True)), op="add"
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor(a.value * c, (a,), lambda g: (g * c,), op="scale")


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return Tensor(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), op="relu", finite=True)


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    mask = a.value > 0
    factor = np.where(mask, 1.0, slope)
    return Tensor(a.value * factor, (a,), lambda g: (g * factor,), op="leaky_relu", finite=True)


def transpose(a: Tensor) -> Tensor:
    return Tensor(a.value.T, (a,), lambda g: (g.T,), op="transpose", finite=True)


def softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax.  Entries where ``mask`` is False get probability exactly 0."""
    x = a.value
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        _check(mask.shape == x.shape, "softmax_rows", f"mask {mask.shape} vs {x.shape}")
        _check(mask.any(axis=1).all(), "softmax_rows", "a row has no unmasked entry")
        x = np.where(mask, x, -np.inf)
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return Tensor(p, (a,), back, op="softmax_rows")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    _check(len(parts) > 0, "concat_cols", "nothing to concatenate")
    rows = parts[0].shape[0]
    _check(all(p.shape[0] == rows for p in parts), "concat_cols", "row counts differ")
    widths = [p.shape[1] for p in parts]
    cuts = np.cumsum([0] + widths)

    def back(g):
        return tuple(g[:, cuts[i]:cuts[i + 1]] for i in range(len(parts)))

    return Tensor(np.concatenate([p.value for p in parts], axis=1), parts, back, op="concat_cols",
                  finite=True)


def gather_rows(a: Tensor, index: Sequence[int]) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    _check(idx.size == 0 or (idx.min() >= 0 and idx.max() < a.shape[0]),
           "gather_rows", "index out of range")
    n = a.shape[0]

    def back(g):
        out = np.zeros((n, g.shape[1]))
        np.add.at(out, idx, g)
        return (out,)

    return Tensor(a.value[idx], (a,), back, op="gather_rows", finite=True)


def mean_rows_over_index_sets(a: Tensor, index_sets: Sequence[Sequence[int]]) -> Tensor:
    """Output row r is the mean of ``a``'s rows listed in ``index_sets[r]``."""
    n = a.shape[0]
    sets = [np.asarray(s, dtype=np.int64) for s in index_sets]
    for s in sets:
        _check(s.size > 0, "mean_rows_over_index_sets", "empty index set")
        _check(s.min() >= 0 and s.max() < n, "mean_rows_over_index_sets", "index out of range")
    sizes = np.array([s.size for s in sets])
    w = np.zeros((len(sets), n))
    np.add.at(w, (np.repeat(np.arange(len(sets)), sizes), np.concatenate(sets)), np.repeat(1.0 / sizes, sizes))
    # as a dense product the summation order is fixed by column, so permuting a set is bit-neutral
    out = w @ a.value
    return Tensor(out, (a,), lambda g: (w.T @ g,), op="mean_rows_over_index_sets")


def cross_entropy_with_logits(logits: Tensor, target: int) -> Tensor:
    """Scalar ``-log softmax(logits)[target]`` for a ``1 x C`` logit row."""
    _check(logits.shape[0] == 1, "cross_entropy_with_logits", "expects a single row")
    _check(0 <= target < logits.shape[1], "cross_entropy_with_logits", "target out of range")
    z = logits.value[0]
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())
    p = np.exp(z - lse)
    onehot = np.zeros_like(z)
    onehot[target] = 1.0
    return Tensor(
        [[lse - z[target]]], (logits,), lambda g: (g * (p - onehot)[None, :],),
        op="cross_entropy_with_logits",
    )


def sample_edge_mask(n_edges: int, p_drop: float, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli keep-mask over edges (True = kept)."""
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError(f"drop probability {p_drop} outside [0, 1]")
    if n_edges == 0 or p_drop == 0.0:
        return np.ones(n_edges, dtype=bool)
    return rng.random(n_edges) >= p_drop


def apply_edge_mask(edges: Sequence[tuple[int, int]], mask: np.ndarray) -> list[tuple[int, int]]:
    if len(mask) != len(edges):
        raise ShapeError(f"edge mask length {len(mask)} vs {len(edges)} edges")
    return [e for e, keep in zip(edges, mask) if keep]


# --------------------------------------------------------------------------
# evaluation and gradients
# --------------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backprop(root: Tensor) -> dict[int, np.ndarray]:
    """Gradients of scalar ``root`` keyed by ``id(node)`` for every reachable node."""
    if root.shape != (1, 1):
        raise ShapeError(f"gradient: root must be scalar, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones((1, 1))}
    for node in reversed(_toposort(root)):
        g = grads.get(id(node))
        if g is None or node.backward is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return grads


def leaf_gradients(root: Tensor, leaves: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    grads = backprop(root)
    return {k: grads.get(id(t), np.zeros_like(t.value)) for k, t in leaves.items()}


def _bind(bindings: Mapping[str, object], kinds: Mapping[str, str] | None) -> dict[str, Tensor]:
    kinds = kinds or {}
    return {k: Tensor(v, kind=kinds.get(k, PARAMETER), name=k) for k, v in bindings.items()}


def evaluate(expr: Callable[[Mapping[str, Tensor]], Tensor], bindings: Mapping[str, object]) -> np.ndarray:
    """Value of ``expr`` applied to fresh leaves built from ``bindings``."""
    return expr(_bind(bindings, None)).value


def gradient(
    expr: Callable[[Mapping[str, Tensor]], Tensor],
    bindings: Mapping[str, object],
    kinds: Mapping[str, str] | None = None,
) -> dict[str, np.ndarray]:
    """Exact gradient of a scalar-valued ``expr`` w.r.t. every non-constant leaf."""
    leaves = _bind(bindings, kinds)
    root = expr(leaves)
    wanted = {k: t for k, t in leaves.items() if t.kind != CONSTANT}
    return leaf_gradients(root, wanted)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update.  Returns new arrays; ``state`` is updated in place."""
    if set(params) != set(grads):
        raise ShapeError("adam_step: parameter and gradient names differ")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: {name} grad {g.shape} vs param {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out, state
