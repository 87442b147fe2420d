"""Reverse-mode differentiation on a tape of numpy primitives.

A ``Tape`` is an append-only, topologically ordered record of primitive
operations (adds, elementwise products, matrix products, SiLU, sigmoid,
group normalization, concatenation, slicing, gathers) together with the
intermediates each one needs for its backward rule.  ``Var`` is a handle to
one tape entry.  Every op below accepts any mix of ``Var`` and plain
array/scalar arguments: with no ``Var`` among them it just computes the numpy
result, so the same model code runs both as a differentiable forward pass and
as a plain evaluation, with an identical operation order in both modes.

``backward`` walks the record once in reverse, accumulating adjoints per
entry; gradients for a ``ParameterStore`` come out keyed by parameter name.
Everything is float64 and single-threaded, so same inputs give bitwise equal
gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GN_EPS = 1e-5


class Tape:
    """Ordered record of primitive ops applied to leaf values."""

    __slots__ = ("nodes", "_counter")

    def __init__(self):
        self.nodes = []  # (op name, out id, input ids (None = constant), saved)
        self._counter = 0

    def _new_var(self, value: np.ndarray) -> "Var":
        vid = self._counter
        self._counter += 1
        return Var(self, vid, value)

    def leaf(self, value) -> "Var":
        """Register a differentiable input (parameter or seed distribution)."""
        return self._new_var(np.asarray(value, dtype=np.float64))

    def _record(self, op: str, out_value, inputs: tuple, saved: tuple) -> "Var":
        out = self._new_var(out_value)
        self.nodes.append((op, out.vid, inputs, saved))
        return out


class Var:
    """Handle to one tape entry; holds the forward value."""

    __slots__ = ("tape", "vid", "value")

    def __init__(self, tape: Tape, vid: int, value: np.ndarray):
        self.tape = tape
        self.vid = vid
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    # Operator sugar so environment formulas read like the numpy they shadow.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _val(a):
    if isinstance(a, Var):
        return a.value
    return np.asarray(a, dtype=np.float64)


def _vid(a):
    return a.vid if isinstance(a, Var) else None


def _tape_of(*args):
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("cannot mix vars from different tapes")
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce an adjoint back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    t = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = av + bv
    if t is None:
        return out
    return t._record("add", out, (_vid(a), _vid(b)), (np.shape(av), np.shape(bv)))


def sub(a, b):
    t = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = av - bv
    if t is None:
        return out
    return t._record("sub", out, (_vid(a), _vid(b)), (np.shape(av), np.shape(bv)))


def neg(a):
    t = _tape_of(a)
    out = -_val(a)
    if t is None:
        return out
    return t._record("neg", out, (_vid(a),), ())


def mul(a, b):
    t = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = av * bv
    if t is None:
        return out
    return t._record("mul", out, (_vid(a), _vid(b)), (av, bv))


def matmul(a, b):
    """2-d matrix product; either side may be constant."""
    t = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = av @ bv
    if t is None:
        return out
    return t._record("matmul", out, (_vid(a), _vid(b)), (av, bv))


def bmm(v, q):
    """Batched vector-matrix product: (b,n) x (b,n,n) -> (b,n)."""
    t = _tape_of(v, q)
    vv, qv = _val(v), _val(q)
    out = np.einsum("bi,bij->bj", vv, qv)
    if t is None:
        return out
    return t._record("bmm", out, (_vid(v), _vid(q)), (vv, qv))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    t = _tape_of(a)
    s = _sigmoid(np.asarray(_val(a), dtype=np.float64))
    if t is None:
        return s
    return t._record("sigmoid", s, (_vid(a),), (s,))


def silu(a):
    t = _tape_of(a)
    av = np.asarray(_val(a), dtype=np.float64)
    s = _sigmoid(av)
    out = av * s
    if t is None:
        return out
    return t._record("silu", out, (_vid(a),), (av, s))


def groupnorm(x, n_groups: int, eps: float = GN_EPS):
    """Per-column group normalization of a (channels, batch) matrix.

    Channels split into equal groups; each group of each column is shifted to
    mean zero and scaled to unit variance (plus eps, so an all-zero column
    maps to exactly zero).  Affine gain/bias are separate ops.
    """
    t = _tape_of(x)
    xv = _val(x)
    d, b = xv.shape
    if d % n_groups != 0:
        raise ValueError(f"channels {d} not divisible into {n_groups} groups")
    xg = xv.reshape(n_groups, d // n_groups, b)
    mean = xg.mean(axis=1, keepdims=True)
    diff = xg - mean
    var = (diff * diff).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = diff * inv
    out = xhat.reshape(d, b)
    if t is None:
        return out
    return t._record("groupnorm", out, (_vid(x),), (xhat, inv, n_groups))


def vcat(a, b):
    """Concatenate two matrices along rows."""
    t = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = np.concatenate([av, bv], axis=0)
    if t is None:
        return out
    return t._record("vcat", out, (_vid(a), _vid(b)), (av.shape[0],))


def hcat(a, b):
    """Concatenate two matrices along columns."""
    t = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = np.concatenate([av, bv], axis=1)
    if t is None:
        return out
    return t._record("hcat", out, (_vid(a), _vid(b)), (av.shape[1],))


def slice_cols(a, lo: int, hi: int):
    t = _tape_of(a)
    av = _val(a)
    out = av[:, lo:hi].copy()
    if t is None:
        return out
    return t._record("slice_cols", out, (_vid(a),), (lo, hi, av.shape))


def gather_rows_t(table, idx):
    """Select rows of a table by index and transpose: (n,d)[idx].T -> (d,len)."""
    t = _tape_of(table)
    tv = _val(table)
    idx = np.asarray(idx, dtype=np.intp)
    out = tv[idx].T.copy()
    if t is None:
        return out
    return t._record("gather_rows_t", out, (_vid(table),), (idx, tv.shape))


def repeat_cols_t(a, r: int):
    """Repeat each row r times and transpose: (b,d) -> (d, b*r)."""
    t = _tape_of(a)
    av = _val(a)
    out = np.repeat(av, r, axis=0).T.copy()
    if t is None:
        return out
    return t._record("repeat_cols_t", out, (_vid(a),), (av.shape, r))


def transpose(a):
    t = _tape_of(a)
    out = _val(a).T.copy()
    if t is None:
        return out
    return t._record("transpose", out, (_vid(a),), ())


def reshape(a, shape: tuple):
    t = _tape_of(a)
    av = _val(a)
    out = av.reshape(shape).copy()
    if t is None:
        return out
    return t._record("reshape", out, (_vid(a),), (av.shape,))


def sum_all(a):
    t = _tape_of(a)
    av = _val(a)
    out = np.asarray(av.sum())
    if t is None:
        return out
    return t._record("sum_all", out, (_vid(a),), (av.shape,))


def sum_axis1(a):
    t = _tape_of(a)
    av = _val(a)
    out = av.sum(axis=1)
    if t is None:
        return out
    return t._record("sum_axis1", out, (_vid(a),), (av.shape,))


def tile_cols(v, k: int):
    """(b,) -> (b,k), every column a copy."""
    t = _tape_of(v)
    vv = _val(v)
    out = np.repeat(vv[:, None], k, axis=1)
    if t is None:
        return out
    return t._record("tile_cols", out, (_vid(v),), ())


def tile_mid(v, k: int):
    """(b,n) -> (b,k,n), repeated along the new middle axis."""
    t = _tape_of(v)
    vv = _val(v)
    out = np.repeat(vv[:, None, :], k, axis=1)
    if t is None:
        return out
    return t._record("tile_mid", out, (_vid(v),), ())


def tile_last(v, k: int):
    """(b,n) -> (b,n,k), each entry repeated along a new trailing axis."""
    t = _tape_of(v)
    vv = _val(v)
    out = np.repeat(vv[:, :, None], k, axis=2)
    if t is None:
        return out
    return t._record("tile_last", out, (_vid(v),), ())


def diag_embed(v):
    """(b,n) -> (b,n,n) with v on each diagonal."""
    t = _tape_of(v)
    vv = _val(v)
    b, n = vv.shape
    out = np.zeros((b, n, n))
    ii = np.arange(n)
    out[:, ii, ii] = vv
    if t is None:
        return out
    return t._record("diag_embed", out, (_vid(v),), ())


# ---------------------------------------------------------------------------
# backward rules


def _vjp_add(g, ins, saved):
    sa, sb = saved
    return ((ins[0], _unbroadcast(g, sa)), (ins[1], _unbroadcast(g, sb)))


def _vjp_sub(g, ins, saved):
    sa, sb = saved
    return ((ins[0], _unbroadcast(g, sa)), (ins[1], _unbroadcast(-g, sb)))


def _vjp_neg(g, ins, saved):
    return ((ins[0], -g),)


def _vjp_mul(g, ins, saved):
    av, bv = saved
    return (
        (ins[0], _unbroadcast(g * bv, np.shape(av))),
        (ins[1], _unbroadcast(g * av, np.shape(bv))),
    )


def _vjp_matmul(g, ins, saved):
    av, bv = saved
    return ((ins[0], g @ bv.T), (ins[1], av.T @ g))


def _vjp_bmm(g, ins, saved):
    vv, qv = saved
    return (
        (ins[0], np.einsum("bj,bij->bi", g, qv)),
        (ins[1], np.einsum("bi,bj->bij", vv, g)),
    )


def _vjp_sigmoid(g, ins, saved):
    (s,) = saved
    return ((ins[0], g * s * (1.0 - s)),)


def _vjp_silu(g, ins, saved):
    av, s = saved
    return ((ins[0], g * s * (1.0 + av * (1.0 - s))),)


def _vjp_groupnorm(g, ins, saved):
    xhat, inv, n_groups = saved
    d, b = g.shape
    gg = g.reshape(n_groups, d // n_groups, b)
    gm = gg.mean(axis=1, keepdims=True)
    gxm = (gg * xhat).mean(axis=1, keepdims=True)
    dx = inv * (gg - gm - xhat * gxm)
    return ((ins[0], dx.reshape(d, b)),)


def _vjp_vcat(g, ins, saved):
    (split,) = saved
    return ((ins[0], g[:split]), (ins[1], g[split:]))


def _vjp_hcat(g, ins, saved):
    (split,) = saved
    return ((ins[0], g[:, :split]), (ins[1], g[:, split:]))


def _vjp_slice_cols(g, ins, saved):
    lo, hi, shape = saved
    full = np.zeros(shape)
    full[:, lo:hi] = g
    return ((ins[0], full),)


def _vjp_gather_rows_t(g, ins, saved):
    idx, shape = saved
    dt = np.zeros(shape)
    np.add.at(dt, idx, g.T)
    return ((ins[0], dt),)


def _vjp_repeat_cols_t(g, ins, saved):
    (b, d), r = saved
    return ((ins[0], g.T.reshape(b, r, d).sum(axis=1)),)


def _vjp_transpose(g, ins, saved):
    return ((ins[0], g.T),)


def _vjp_reshape(g, ins, saved):
    (shape,) = saved
    return ((ins[0], g.reshape(shape)),)


def _vjp_sum_all(g, ins, saved):
    (shape,) = saved
    return ((ins[0], np.broadcast_to(g, shape).copy()),)


def _vjp_sum_axis1(g, ins, saved):
    (shape,) = saved
    return ((ins[0], np.broadcast_to(g[:, None], shape).copy()),)


def _vjp_tile_cols(g, ins, saved):
    return ((ins[0], g.sum(axis=1)),)


def _vjp_tile_mid(g, ins, saved):
    return ((ins[0], g.sum(axis=1)),)


def _vjp_tile_last(g, ins, saved):
    return ((ins[0], g.sum(axis=2)),)


def _vjp_diag_embed(g, ins, saved):
    n = g.shape[1]
    ii = np.arange(n)
    return ((ins[0], g[:, ii, ii].copy()),)


_VJPS = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "neg": _vjp_neg,
    "mul": _vjp_mul,
    "matmul": _vjp_matmul,
    "bmm": _vjp_bmm,
    "sigmoid": _vjp_sigmoid,
    "silu": _vjp_silu,
    "groupnorm": _vjp_groupnorm,
    "vcat": _vjp_vcat,
    "hcat": _vjp_hcat,
    "slice_cols": _vjp_slice_cols,
    "gather_rows_t": _vjp_gather_rows_t,
    "repeat_cols_t": _vjp_repeat_cols_t,
    "transpose": _vjp_transpose,
    "reshape": _vjp_reshape,
    "sum_all": _vjp_sum_all,
    "sum_axis1": _vjp_sum_axis1,
    "tile_cols": _vjp_tile_cols,
    "tile_mid": _vjp_tile_mid,
    "tile_last": _vjp_tile_last,
    "diag_embed": _vjp_diag_embed,
}


def backward(out: Var, seed=1.0) -> dict:
    """Adjoints of every tape entry reachable from ``out``; keys are var ids.

    ``seed`` is the adjoint of ``out`` itself (1.0 for a scalar loss).  One
    reverse sweep over the record; each node's rule fires only if its output
    accumulated a nonzero path to the seed.
    """
    if not isinstance(out, Var):
        raise TypeError("backward needs a tape variable")
    adj = {out.vid: np.broadcast_to(np.asarray(seed, dtype=np.float64), out.value.shape).copy()}
    for op, out_id, ins, saved in reversed(out.tape.nodes):
        g = adj.pop(out_id, None)
        if g is None:
            continue
        for vid, part in _VJPS[op](g, ins, saved):
            if vid is None:
                continue
            acc = adj.get(vid)
            adj[vid] = part if acc is None else acc + part
    return adj


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParameterStore:
    """Named float64 arrays with insertion-ordered iteration."""

    def __init__(self, params: dict | None = None):
        self._params: dict[str, np.ndarray] = {}
        if params:
            for name, value in params.items():
                self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        self._params[name] = np.array(value, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __setitem__(self, name: str, value) -> None:
        if name not in self._params:
            raise KeyError(name)
        self._params[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name):
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def n_params(self) -> int:
        return sum(v.size for v in self._params.values())

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: v.copy() for k, v in self._params.items()})

    def as_dict(self) -> dict:
        return dict(self._params)

    def inject(self, tape: Tape) -> dict:
        """Register every parameter as a tape leaf; returns name -> Var."""
        return {name: tape.leaf(value) for name, value in self._params.items()}


def collect_grads(store: ParameterStore, leaves: dict, adjoints: dict) -> dict:
    """Gradients per parameter name; zeros where no path reached the loss."""
    out = {}
    for name in store.names():
        var = leaves[name]
        g = adjoints.get(var.vid)
        out[name] = np.zeros_like(store[name]) if g is None else g
    return out


@dataclass
class AdamWState:
    """First/second moment accumulators plus the shared step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(
    store: ParameterStore,
    grads: dict,
    state: AdamWState,
    lr: float = 1e-4,
    betas: tuple = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> None:
    """One AdamW update in place; weight decay is decoupled from the moments."""
    b1, b2 = betas
    state.t += 1
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in store.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * weight_decay * p
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def grad_check(f, store: ParameterStore, n_probes: int = 5, step: float = 1e-5, rng=None) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` maps a ParameterStore to ``(loss, grads-by-name)`` and must be
    deterministic (freeze any sampling before calling).  Probes are random
    parameter coordinates; the error is |analytic - fd| / max(|analytic|, 1e-8).
    """
    gen = np.random.default_rng(0) if rng is None else rng.gen
    _, grads = f(store)
    names = store.names()
    sizes = np.array([store[n].size for n in names])
    total = int(sizes.sum())
    worst = 0.0
    for flat in gen.choice(total, size=min(n_probes, total), replace=False):
        k = 0
        while flat >= sizes[k]:
            flat -= sizes[k]
            k += 1
        name = names[k]
        plus = store.copy()
        plus[name].flat[flat] += step
        minus = store.copy()
        minus[name].flat[flat] -= step
        fd = (f(plus)[0] - f(minus)[0]) / (2.0 * step)
        g = grads[name].flat[flat]
        rel = abs(fd - g) / max(abs(g), 1e-8)
        worst = max(worst, rel)
    return float(worst)
