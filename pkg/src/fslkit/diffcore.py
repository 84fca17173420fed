"""Reverse-mode differentiation over a fixed operator set, plus Adam.

The tape records each primitive in execution order; reverse iteration over
that order is a valid topological order, so `backward` is a single pass.
Everything is float64 internally so the finite-difference checks have
headroom; float32 storage is upcast at the boundary.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class NonScalarOutput(ValueError):
    """backward() was asked to differentiate a non-scalar node."""


class ShapeMismatch(ValueError):
    """Gradient and parameter shapes disagree."""


COSINE_EPS = 1e-12
PROB_FLOOR = 1e-12


class Node:
    """One value on a tape. Holds the forward result; gradients live in backward()."""

    __slots__ = ("tape", "value")

    def __init__(self, tape: "Tape", value: np.ndarray):
        self.tape = tape
        self.value = value

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Ordered record of primitive ops; single-writer, one training run each."""

    def __init__(self):
        # entries: (node, parent nodes, vjp) with vjp(grad_out) -> per-parent grads
        self._entries: list[tuple[Node, tuple[Node, ...], Callable | None]] = []
        self.params: list[Node] = []

    def _push(self, value, parents=(), vjp=None) -> Node:
        node = Node(self, np.asarray(value, dtype=np.float64))
        self._entries.append((node, tuple(parents), vjp))
        return node

    def param(self, value) -> Node:
        """A trainable leaf; backward() returns its gradient."""
        node = self._push(value)
        self.params.append(node)
        return node

    def const(self, value) -> Node:
        """A non-trainable leaf; receives no gradient."""
        return self._push(value)


def backward(tape: Tape, output: Node) -> dict[Node, np.ndarray]:
    """Accumulate chain-rule gradients of a scalar output for all parameters."""
    if output.value.size != 1:
        raise NonScalarOutput(f"output has shape {output.value.shape}, expected scalar")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.value)}
    for node, parents, vjp in reversed(tape._entries):
        g = grads.get(id(node))
        if g is None or vjp is None:
            continue
        for parent, pg in zip(parents, vjp(g)):
            if pg is None:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    return {p: grads.get(id(p), np.zeros_like(p.value)) for p in tape.params}


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _as_node(tape: Tape, x) -> Node:
    return x if isinstance(x, Node) else tape.const(x)


# ---------------------------------------------------------------------------
# primitive operators


def matmul(a: Node, b: Node) -> Node:
    b = _as_node(a.tape, b)
    val = a.value @ b.value
    av, bv = a.value, b.value

    def vjp(g):
        return g @ bv.T, av.T @ g

    return a.tape._push(val, (a, b), vjp)


def add(a: Node, b) -> Node:
    b = _as_node(a.tape, b)
    ash, bsh = a.value.shape, b.value.shape

    def vjp(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return a.tape._push(a.value + b.value, (a, b), vjp)


def scale(a: Node, c: float) -> Node:
    def vjp(g):
        return (c * g,)

    return a.tape._push(c * a.value, (a,), vjp)


def relu(a: Node) -> Node:
    mask = a.value > 0

    def vjp(g):
        return (g * mask,)

    return a.tape._push(np.where(mask, a.value, 0.0), (a,), vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Node) -> Node:
    s = _sigmoid(a.value)

    def vjp(g):
        return (g * s * (1.0 - s),)

    return a.tape._push(s, (a,), vjp)


def mean(a: Node) -> Node:
    n = a.value.size
    shape = a.value.shape

    def vjp(g):
        return (np.full(shape, float(g) / n),)

    return a.tape._push(np.mean(a.value), (a,), vjp)


def reshape(a: Node, shape: tuple[int, ...]) -> Node:
    old = a.value.shape

    def vjp(g):
        return (g.reshape(old),)

    return a.tape._push(a.value.reshape(shape), (a,), vjp)


def stable_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtraction stabilized softmax (plain numpy, shared with inference)."""
    shifted = x - np.max(x, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=axis, keepdims=True)


def softmax_rows(a: Node) -> Node:
    s = stable_softmax(a.value, axis=1)

    def vjp(g):
        inner = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - inner),)

    return a.tape._push(s, (a,), vjp)


def softmax_nll(logits: Node, targets: np.ndarray) -> Node:
    """Fused softmax + negative log-likelihood, one loss value per row."""
    t = np.asarray(targets, dtype=np.int64)
    x = logits.value
    m = np.max(x, axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    loss = lse - x[np.arange(len(t)), t]
    probs = stable_softmax(x, axis=1)

    def vjp(g):
        d = probs * g[:, None]
        d[np.arange(len(t)), t] -= g
        return (d,)

    return logits.tape._push(loss, (logits,), vjp)


def nll_from_probs(probs: Node, targets: np.ndarray, floor: float = PROB_FLOOR) -> Node:
    """Per-row -log(p_true) with the probability floored at `floor` inside the log."""
    t = np.asarray(targets, dtype=np.int64)
    rows = np.arange(len(t))
    p_true = probs.value[rows, t]
    clipped = np.maximum(p_true, floor)
    active = p_true > floor  # floored entries get zero gradient

    def vjp(g):
        d = np.zeros_like(probs.value)
        d[rows, t] = np.where(active, -g / clipped, 0.0)
        return (d,)

    return probs.tape._push(-np.log(clipped), (probs,), vjp)


def pairwise_sqdist(q: Node, p: Node) -> Node:
    """Squared L2 distances, (num_queries, num_prototypes)."""
    diff = q.value[:, None, :] - p.value[None, :, :]
    val = np.einsum("ijk,ijk->ij", diff, diff)

    def vjp(g):
        weighted = 2.0 * g[:, :, None] * diff
        return weighted.sum(axis=1), -weighted.sum(axis=0)

    return q.tape._push(val, (q, p), vjp)


def pairwise_cosine(q: Node, p: Node, eps: float = COSINE_EPS) -> Node:
    """Cosine similarities, (num_queries, num_prototypes), eps-guarded norms."""
    qv, pv = q.value, p.value
    qn = np.linalg.norm(qv, axis=1)
    pn = np.linalg.norm(pv, axis=1)
    qc = np.maximum(qn, eps)
    pc = np.maximum(pn, eps)
    sims = (qv @ pv.T) / (qc[:, None] * pc[None, :])
    q_live = (qn > eps)[:, None]  # guarded norms are constants in the backward pass
    p_live = (pn > eps)[:, None]

    def vjp(g):
        gd = g / (qc[:, None] * pc[None, :])
        dq = gd @ pv - q_live * ((g * sims).sum(axis=1) / qc**2)[:, None] * qv
        dp = gd.T @ qv - p_live * ((g * sims).sum(axis=0) / pc**2)[:, None] * pv
        return dq, dp

    return q.tape._push(sims, (q, p), vjp)


def concat_pairs(protos: Node, queries: Node) -> Node:
    """Rows [prototype_c, query_i] for every (query, class) pair, query-major."""
    pv, qv = protos.value, queries.value
    m, d = pv.shape
    n = qv.shape[0]
    out = np.empty((n * m, d + qv.shape[1]))
    out[:, :d] = np.tile(pv, (n, 1))
    out[:, d:] = np.repeat(qv, m, axis=0)

    def vjp(g):
        g3 = g.reshape(n, m, -1)
        return g3[:, :, :d].sum(axis=0), g3[:, :, d:].sum(axis=1)

    return protos.tape._push(out, (protos, queries), vjp)


def mse_loss(scores: Node, targets: np.ndarray) -> Node:
    """Mean squared error of scores against a fixed target array (scalar)."""
    t = np.asarray(targets, dtype=np.float64)
    diff = scores.value - t
    n = diff.size

    def vjp(g):
        return (2.0 * float(g) * diff / n,)

    return scores.tape._push(np.mean(diff * diff), (scores,), vjp)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second-moment accumulators plus step counter for Adam."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new params, mutates state."""
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    new: dict[str, np.ndarray] = {}
    for key, p in params.items():
        g = np.asarray(grads[key], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatch(f"{key}: grad shape {g.shape} != param shape {p.shape}")
        m = state.m.get(key)
        v = state.v.get(key)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[key] = m
        state.v[key] = v
        new[key] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return new


# ---------------------------------------------------------------------------
# gradient checking


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: float
    errors: tuple[np.ndarray, ...]  # per-parameter componentwise relative errors
    excluded: tuple[tuple[int, int], ...]  # (param index, flat index) of kinks

    @property
    def ok(self) -> bool:
        return self.max_rel_error < 1e-4


def grad_check(
    build: Callable[..., Node],
    params: Sequence[np.ndarray],
    h: float = 1e-5,
) -> GradCheckResult:
    """Compare backward() against central finite differences.

    `build(tape, *param_nodes)` must construct a scalar loss. Coordinates
    where the one-sided differences disagree (a kink, e.g. ReLU at exactly
    zero) are flagged as excluded rather than scored.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = [np.asarray(p, dtype=np.float64) for p in params]
    tape = Tape()
    nodes = [tape.param(p) for p in params]
    out = build(tape, *nodes)
    analytic = backward(tape, out)

    def feval(values):
        t = Tape()
        ns = [t.param(v) for v in values]
        return float(build(t, *ns).value)

    f_zero = feval(params)
    errors: list[np.ndarray] = []
    excluded: list[tuple[int, int]] = []
    max_err = 0.0
    for i, p in enumerate(params):
        err = np.zeros(p.size)
        ana = analytic[nodes[i]].reshape(-1)
        for j in range(p.size):
            bumped = [q.copy() for q in params]
            flat = bumped[i].reshape(-1)
            base = flat[j]
            flat[j] = base + h
            f_plus = feval(bumped)
            flat[j] = base - h
            f_minus = feval(bumped)
            flat[j] = base
            d_fwd = (f_plus - f_zero) / h
            d_bwd = (f_zero - f_minus) / h
            if abs(d_fwd - d_bwd) > 0.1 * max(1.0, abs(d_fwd) + abs(d_bwd)):
                excluded.append((i, j))
                continue
            numeric = (f_plus - f_minus) / (2.0 * h)
            rel = abs(numeric - ana[j]) / max(1e-8, abs(numeric) + abs(ana[j]))
            err[j] = rel
            max_err = max(max_err, rel)
        errors.append(err.reshape(p.shape))
    return GradCheckResult(max_err, tuple(errors), tuple(excluded))
