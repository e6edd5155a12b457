"""Reverse-mode automatic differentiation on a per-thread tape.

Ops execute eagerly on float64 numpy arrays. When a ``Tape`` is active
(entered as a context manager) every op whose inputs require gradients
records a backward closure; ``tape.backward(loss)`` then walks the
recorded nodes in reverse creation order, which is a valid topological
order, accumulating into ``.grad`` of every reachable variable. With no
active tape the same functions run as plain array math, which is the
fast path used while acting.

Tapes are confined to one thread: each worker owns its tape, and
nothing here shares mutable state across threads. Forward values are
checked for NaN/inf after every op (disable with
``set_finite_checks(False)`` for throughput experiments).
"""

from __future__ import annotations

import logging
import threading
from typing import Optional, Sequence

import numpy as np

_log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12

_tls = threading.local()
_finite_checks = True


def set_finite_checks(enabled: bool) -> None:
    global _finite_checks
    _finite_checks = enabled


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_tls, "stack", None)
    return stack[-1] if stack else None


class Var:
    """A value node. ``grad`` accumulates during ``Tape.backward``."""

    __slots__ = ("value", "grad", "requires_grad", "_backward")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


def parameter(value) -> Var:
    return Var(value, requires_grad=True)


def constant(value) -> Var:
    return Var(value, requires_grad=False)


class Tape:
    """Records op order for one reverse sweep. Not reusable across threads."""

    def __init__(self):
        self._nodes: list[Var] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_tls, "stack", None)
        if stack is None:
            stack = _tls.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tls.stack.pop()
        return False

    def backward(self, root: Var, seed: Optional[np.ndarray] = None) -> None:
        if seed is None:
            if root.value.size != 1:
                raise ValueError("backward() without a seed needs a scalar root")
            seed = np.ones_like(root.value)
        root.grad = np.asarray(seed, dtype=np.float64)
        for node in reversed(self._nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)

    def __len__(self):
        return len(self._nodes)


def _make(value: np.ndarray, op: str, inputs: Sequence[Var], backward) -> Var:
    """Wrap an op result, with finite checking and optional recording."""
    if _finite_checks and not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite values out of op {op!r}")
    tape = _active_tape()
    req = tape is not None and any(v.requires_grad for v in inputs)
    out = Var(value, requires_grad=req)
    if req:
        out._backward = backward
        tape._nodes.append(out)
    return out


def _acc(var: Var, arr: np.ndarray, fresh: bool) -> None:
    """Accumulate into var.grad. ``fresh`` means arr is ours to keep."""
    if not var.requires_grad:
        return
    if var.grad is None:
        var.grad = arr if fresh else arr.copy()
    else:
        var.grad += arr


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def matmul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    if bv.ndim != 2 or av.ndim not in (1, 2) or av.shape[-1] != bv.shape[0]:
        raise ValueError(f"matmul shapes {av.shape} @ {bv.shape}")
    out = av @ bv

    def backward(g):
        if av.ndim == 1:
            _acc(a, bv @ g, fresh=True)
            _acc(b, np.outer(av, g), fresh=True)
        else:
            _acc(a, g @ bv.T, fresh=True)
            _acc(b, av.T @ g, fresh=True)

    return _make(out, "matmul", (a, b), backward)


def bias_add(x: Var, b: Var) -> Var:
    xv, bv = x.value, b.value
    if bv.ndim != 1 or xv.shape[-1] != bv.shape[0]:
        raise ValueError(f"bias_add shapes {xv.shape} + {bv.shape}")
    out = xv + bv

    def backward(g):
        _acc(x, g, fresh=False)
        if g.ndim == 1:
            _acc(b, g, fresh=False)
        else:
            _acc(b, g.sum(axis=tuple(range(g.ndim - 1))), fresh=True)

    return _make(out, "bias_add", (x, b), backward)


_conv_index_cache: dict = {}


def _conv_indices(shape, kh, kw, stride):
    key = (shape, kh, kw, stride)
    idx = _conv_index_cache.get(key)
    if idx is None:
        base = np.arange(int(np.prod(shape)), dtype=np.int64).reshape(shape)
        view = np.lib.stride_tricks.sliding_window_view(base, (kh, kw, shape[2]))
        view = view[::stride, ::stride, 0]
        oh, ow = view.shape[0], view.shape[1]
        idx = view.reshape(oh * ow, kh * kw * shape[2]).copy()
        _conv_index_cache[key] = idx
    return idx


def conv2d(x: Var, w: Var, stride: int) -> Var:
    """Valid-mode channels-last convolution: (H,W,C) * (kh,kw,C,F)."""
    xv, wv = x.value, w.value
    if xv.ndim != 3 or wv.ndim != 4 or xv.shape[2] != wv.shape[2]:
        raise ValueError(f"conv2d shapes {xv.shape} * {wv.shape}")
    kh, kw, cin, cout = wv.shape
    if kh > xv.shape[0] or kw > xv.shape[1]:
        raise ValueError("kernel larger than input")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    oh = (xv.shape[0] - kh) // stride + 1
    ow = (xv.shape[1] - kw) // stride + 1
    idx = _conv_indices(xv.shape, kh, kw, stride)
    cols = xv.reshape(-1)[idx]  # (oh*ow, kh*kw*cin)
    wflat = wv.reshape(kh * kw * cin, cout)
    out = (cols @ wflat).reshape(oh, ow, cout)

    def backward(g):
        gflat = g.reshape(oh * ow, cout)
        _acc(w, (cols.T @ gflat).reshape(wv.shape), fresh=True)
        if x.requires_grad:
            gcols = gflat @ wflat.T
            gx = np.bincount(idx.reshape(-1), weights=gcols.reshape(-1),
                             minlength=xv.size)
            _acc(x, gx.reshape(xv.shape), fresh=True)

    return _make(out, "conv2d", (x, w), backward)


def relu(x: Var) -> Var:
    xv = x.value
    out = np.maximum(xv, 0.0)

    def backward(g):
        _acc(x, g * (xv > 0.0), fresh=True)

    return _make(out, "relu", (x,), backward)


def tanh(x: Var) -> Var:
    out = np.tanh(x.value)

    def backward(g):
        _acc(x, g * (1.0 - out * out), fresh=True)

    return _make(out, "tanh", (x,), backward)


def sigmoid(x: Var) -> Var:
    xv = x.value
    out = np.empty_like(xv)
    pos = xv >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ex = np.exp(xv[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        _acc(x, g * out * (1.0 - out), fresh=True)

    return _make(out, "sigmoid", (x,), backward)


def softmax(x: Var) -> Var:
    """Softmax over the last axis."""
    xv = x.value
    e = np.exp(xv - xv.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        _acc(x, out * (g - inner), fresh=True)

    return _make(out, "softmax", (x,), backward)


def log(x: Var) -> Var:
    xv = x.value
    out = np.log(xv)

    def backward(g):
        _acc(x, g / xv, fresh=True)

    return _make(out, "log", (x,), backward)


def clamp_min(x: Var, floor: float) -> Var:
    xv = x.value
    out = np.maximum(xv, floor)

    def backward(g):
        _acc(x, g * (xv > floor), fresh=True)

    return _make(out, "clamp_min", (x,), backward)


def _wrap_other(other) -> tuple[np.ndarray, bool]:
    if isinstance(other, Var):
        return other.value, True
    return np.asarray(other, dtype=np.float64), False


def add(a: Var, b) -> Var:
    bv, b_is_var = _wrap_other(b)
    av = a.value
    if av.shape != bv.shape and av.size != 1 and bv.size != 1:
        raise ValueError(f"add shapes {av.shape} + {bv.shape}")
    out = av + bv
    inputs = (a, b) if b_is_var else (a,)

    def backward(g):
        _acc(a, g if av.shape == g.shape else np.asarray(g.sum()).reshape(av.shape),
             fresh=av.shape != g.shape)
        if b_is_var:
            _acc(b, g if bv.shape == g.shape else np.asarray(g.sum()).reshape(bv.shape),
                 fresh=bv.shape != g.shape)

    return _make(out, "add", inputs, backward)


def mul(a: Var, b) -> Var:
    bv, b_is_var = _wrap_other(b)
    av = a.value
    if av.shape != bv.shape and av.size != 1 and bv.size != 1:
        raise ValueError(f"mul shapes {av.shape} * {bv.shape}")
    out = av * bv
    inputs = (a, b) if b_is_var else (a,)

    def backward(g):
        ga = g * bv
        _acc(a, ga if ga.shape == av.shape else np.asarray(ga.sum()).reshape(av.shape),
             fresh=True)
        if b_is_var:
            gb = g * av
            _acc(b, gb if gb.shape == bv.shape else np.asarray(gb.sum()).reshape(bv.shape),
                 fresh=True)

    return _make(out, "mul", inputs, backward)


def concat(parts: Sequence[Var], axis: int = 0) -> Var:
    values = [p.value for p in parts]
    out = np.concatenate(values, axis=axis)
    sizes = [v.shape[axis] for v in values]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _acc(p, g[tuple(sl)], fresh=False)

    return _make(out, "concat", tuple(parts), backward)


def slice_(x: Var, key) -> Var:
    """Basic (non-fancy) indexing; each input element used at most once."""
    xv = x.value
    out = xv[key]

    def backward(g):
        if x.requires_grad:
            buf = np.zeros_like(xv)
            buf[key] = g
            _acc(x, buf, fresh=True)

    return _make(out, "slice", (x,), backward)


def reshape(x: Var, shape) -> Var:
    xv = x.value
    out = xv.reshape(shape)

    def backward(g):
        _acc(x, g.reshape(xv.shape), fresh=False)

    return _make(out, "reshape", (x,), backward)


def sum_(x: Var) -> Var:
    xv = x.value
    out = np.asarray(xv.sum())

    def backward(g):
        _acc(x, np.full_like(xv, float(g)), fresh=True)

    return _make(out, "sum", (x,), backward)


def mean_(x: Var) -> Var:
    xv = x.value
    out = np.asarray(xv.mean())
    n = xv.size

    def backward(g):
        _acc(x, np.full_like(xv, float(g) / n), fresh=True)

    return _make(out, "mean", (x,), backward)


# ---------------------------------------------------------------------------
# LSTM cell
# ---------------------------------------------------------------------------


def lstm_cell(x: Var, h_prev: Var, c_prev: Var, w: Var, b: Var) -> tuple[Var, Var]:
    """One LSTM step from primitives.

    ``w`` has shape (in+hidden, 4*hidden) and ``b`` (4*hidden,), gates
    ordered [input, forget, candidate, output]. With zero weights and
    zero state the output is exactly zero (tanh(0) kills the half-open
    sigmoid gates).
    """
    hsize = h_prev.value.shape[0]
    xh = concat([x, h_prev])
    z = bias_add(matmul(xh, w), b)
    i = sigmoid(slice_(z, slice(0, hsize)))
    f = sigmoid(slice_(z, slice(hsize, 2 * hsize)))
    g = tanh(slice_(z, slice(2 * hsize, 3 * hsize)))
    o = sigmoid(slice_(z, slice(3 * hsize, 4 * hsize)))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------


def policy_gradient_term(
    policies: Sequence[Var], actions: Sequence[int], advantages: Sequence[float]
) -> Var:
    """-sum_t ln pi_t(a_t) * A_t, advantages held constant.

    Advantages enter as plain floats, so no gradient flows into the
    value path through this term. Chosen probabilities below the log
    floor are clamped (gradient zeroed there) and logged once per call.
    """
    total: Optional[Var] = None
    clamped = 0
    for pol, action, adv in zip(policies, actions, advantages):
        if pol.value[action] < LOG_FLOOR:
            clamped += 1
        p_a = slice_(pol, slice(int(action), int(action) + 1))
        term = mul(log(clamp_min(p_a, LOG_FLOOR)), -float(adv))
        total = term if total is None else add(total, term)
    if clamped:
        log_warn_rate_limited(
            "policy_gradient_term clamped %d chosen-action probabilities below %.0e",
            clamped, LOG_FLOOR,
        )
    assert total is not None, "empty rollout"
    return sum_(total)


def value_mse(values: Sequence[Var], returns: Sequence[float]) -> Var:
    """sum_t (R_t - V_t)^2."""
    total: Optional[Var] = None
    for v, r in zip(values, returns):
        d = add(v, -float(r))
        sq = mul(d, d)
        total = sq if total is None else add(total, sq)
    assert total is not None, "empty rollout"
    return sum_(total)


def entropy_bonus(policies: Sequence[Var]) -> Var:
    """sum_t H(pi_t), positive; callers subtract it (scaled) from the loss."""
    total: Optional[Var] = None
    for pol in policies:
        plogp = mul(pol, log(clamp_min(pol, LOG_FLOOR)))
        total = plogp if total is None else add(total, plogp)
    assert total is not None, "empty rollout"
    return mul(sum_(total), -1.0)


def depth_ce(depth_logits: Sequence[Var], targets: Sequence[np.ndarray]) -> Var:
    """Cross-entropy of bucketed-depth predictions, averaged over column
    groups and summed over steps. Each logits entry is (groups, buckets),
    each target a (groups,) int vector."""
    total: Optional[Var] = None
    for logits, tgt in zip(depth_logits, targets):
        groups, buckets = logits.value.shape
        onehot = np.zeros((groups, buckets))
        onehot[np.arange(groups), np.asarray(tgt, dtype=np.int64)] = 1.0
        picked = mul(log(clamp_min(softmax(logits), LOG_FLOOR)), onehot)
        step = mul(sum_(picked), -1.0 / groups)
        total = step if total is None else add(total, step)
    assert total is not None, "empty rollout"
    return total


def loop_ce(loop_logits: Sequence[Var], labels: Sequence[int]) -> Var:
    """Binary cross-entropy on the loop-closure logit, summed over steps."""
    total: Optional[Var] = None
    for logit, y in zip(loop_logits, labels):
        s = sigmoid(logit)
        pos = log(clamp_min(s, LOG_FLOOR))
        neg = log(clamp_min(add(mul(s, -1.0), 1.0), LOG_FLOOR))
        step = mul(add(mul(pos, -float(y)), mul(neg, -(1.0 - float(y)))), 1.0)
        total = step if total is None else add(total, step)
    assert total is not None, "empty rollout"
    return sum_(total)


_warned = threading.local()


def log_warn_rate_limited(msg: str, *args) -> None:
    """At most one warning per thread per message template."""
    seen = getattr(_warned, "seen", None)
    if seen is None:
        seen = _warned.seen = set()
    if msg not in seen:
        seen.add(msg)
        _log.warning(msg, *args)


# ---------------------------------------------------------------------------
# Finite differences (used by the built-in selftest; the test suite
# carries its own independent implementation)
# ---------------------------------------------------------------------------


def finite_difference(f, params: dict, h: float = 1e-5) -> dict:
    """Central-difference grads of scalar f({name: ndarray})."""
    out = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = f(params)
            flat[j] = orig - h
            fm = f(params)
            flat[j] = orig
            gflat[j] = (fp - fm) / (2.0 * h)
        out[name] = g
    return out
