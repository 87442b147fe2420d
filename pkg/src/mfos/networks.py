"""Stopping policies as small residual networks over the tape primitives.

A policy network reads the extended distribution (both blocks, flat) plus, in
the per-state ("async") mode, a learned embedding of the own state, and in the
time-conditioned variant a sinusoidal embedding of the step fed through two
SiLU layers.  The spatial input runs through an input projection and ``k``
residual blocks of four SiLU linear layers at width ``width``; the time path
is added on top, the sum is group-normalized with a learned affine, a
three-layer SiLU head reduces to one logit, and a logistic squash lands the
output in (0, 1).  With every parameter zeroed the output is exactly 0.5.

The forward pass is written once against the autodiff ops, so it evaluates as
plain numpy when given plain arrays and records on a tape when given Vars.
All columns of a call share one time step, which keeps the time path a single
column broadcast across the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from mfos import autodiff as ad
from mfos.autodiff import AdamWState, ParameterStore
from mfos.core import ExtendedDistribution, Rng

CHECKPOINT_FORMAT = "mfos-checkpoint-v1"


@dataclass(frozen=True)
class NetConfig:
    """Architecture of one policy network."""

    mode: str  # "async": one probability per state; "sync": one shared scalar
    n_states: int
    time_conditioned: bool = True
    k: int = 3  # residual blocks
    width: int = 128
    demb: int = 32  # state embedding width (async mode)
    sin_dim: int = 32  # sinusoidal time embedding width
    groups: int = 8

    def __post_init__(self):
        if self.mode not in ("async", "sync"):
            raise ValueError(f"mode must be 'async' or 'sync', got {self.mode!r}")
        if self.width % self.groups != 0:
            raise ValueError(f"width {self.width} not divisible by {self.groups} groups")
        if self.sin_dim % 2 != 0:
            raise ValueError("sinusoidal embedding width must be even")
        if min(self.n_states, self.k, self.width, self.demb) < 1:
            raise ValueError("network dimensions must be positive")

    @property
    def in_dim(self) -> int:
        base = 2 * self.n_states
        return base + self.demb if self.mode == "async" else base


def expected_param_count(cfg: NetConfig) -> int:
    """Closed-form parameter count; asserted against the store in tests.

    emb: X*demb (async only)
    input projection: width*in_dim + width
    blocks: k * 4 * (width^2 + width)
    time path: width*sin_dim + width + width^2 + width (when time-conditioned)
    group-norm affine: 2*width
    head: 2*(width^2 + width) + width + 1
    """
    d, x = cfg.width, cfg.n_states
    total = d * cfg.in_dim + d
    total += cfg.k * 4 * (d * d + d)
    total += 2 * d
    total += 2 * (d * d + d) + d + 1
    if cfg.mode == "async":
        total += x * cfg.demb
    if cfg.time_conditioned:
        total += d * cfg.sin_dim + d + d * d + d
    return total


def _uniform(rng: Rng, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.gen.uniform(-bound, bound, size=shape)


def init_params(cfg: NetConfig, rng: Rng) -> ParameterStore:
    """Fan-in uniform weights, zero biases, unit norm gains."""
    d = cfg.width
    store = ParameterStore()
    if cfg.mode == "async":
        store.add("emb", _uniform(rng, (cfg.n_states, cfg.demb), cfg.demb))
    store.add("in.w", _uniform(rng, (d, cfg.in_dim), cfg.in_dim))
    store.add("in.b", np.zeros(d))
    for i in range(cfg.k):
        for j in range(4):
            store.add(f"block{i}.l{j}.w", _uniform(rng, (d, d), d))
            store.add(f"block{i}.l{j}.b", np.zeros(d))
    if cfg.time_conditioned:
        store.add("time.l0.w", _uniform(rng, (d, cfg.sin_dim), cfg.sin_dim))
        store.add("time.l0.b", np.zeros(d))
        store.add("time.l1.w", _uniform(rng, (d, d), d))
        store.add("time.l1.b", np.zeros(d))
    store.add("gn.gain", np.ones(d))
    store.add("gn.bias", np.zeros(d))
    store.add("out.l0.w", _uniform(rng, (d, d), d))
    store.add("out.l0.b", np.zeros(d))
    store.add("out.l1.w", _uniform(rng, (d, d), d))
    store.add("out.l1.b", np.zeros(d))
    store.add("out.l2.w", _uniform(rng, (1, d), d))
    store.add("out.l2.b", np.zeros(1))
    return store


def sin_embed(n: int, dim: int) -> np.ndarray:
    """Sinusoidal position code with a geometric frequency ladder, as (dim, 1)."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = float(n) * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)]).reshape(dim, 1)


def _linear(params, name: str, x):
    w, b = params[f"{name}.w"], params[f"{name}.b"]
    bias = ad.reshape(b, (np.shape(ad._val(b))[0], 1))
    return ad.add(ad.matmul(w, x), bias)


def forward_batch(params, cfg: NetConfig, n: int, nus):
    """Stopping probabilities for a batch of extended distributions.

    ``nus`` is (batch, 2X), plain or Var; returns (batch, X) in async mode and
    (batch,) in sync mode.  Column order in async mode is state-major within
    each element, which the final reshape undoes.
    """
    x = cfg.n_states
    b = ad._val(nus).shape[0]
    if cfg.mode == "async":
        idx = np.tile(np.arange(x), b)
        cols = ad.vcat(ad.gather_rows_t(params["emb"], idx), ad.repeat_cols_t(nus, x))
    else:
        cols = ad.transpose(nus)
    y = ad.silu(_linear(params, "in", cols))
    for i in range(cfg.k):
        h = y
        for j in range(4):
            h = ad.silu(_linear(params, f"block{i}.l{j}", h))
        y = ad.add(y, h)
    if cfg.time_conditioned:
        t = ad.silu(_linear(params, "time.l0", sin_embed(n, cfg.sin_dim)))
        t = ad.silu(_linear(params, "time.l1", t))
        y = ad.add(y, t)
    z = ad.groupnorm(y, cfg.groups)
    d = cfg.width
    z = ad.add(ad.mul(z, ad.reshape(params["gn.gain"], (d, 1))), ad.reshape(params["gn.bias"], (d, 1)))
    o = ad.silu(_linear(params, "out.l0", z))
    o = ad.silu(_linear(params, "out.l1", o))
    p = ad.sigmoid(_linear(params, "out.l2", o))
    return ad.reshape(p, (b, x) if cfg.mode == "async" else (b,))


@dataclass
class PolicyNetwork:
    """Config plus parameters; callable as a rollout policy via ``as_policy``."""

    cfg: NetConfig
    params: ParameterStore

    @classmethod
    def init(cls, cfg: NetConfig, rng: Rng) -> "PolicyNetwork":
        return cls(cfg, init_params(cfg, rng))

    def as_policy(self):
        def policy(n, nu):
            return forward_rule(self, n, nu)

        return policy


def forward_rule(net: PolicyNetwork, n: int, nu):
    """Evaluate one network on one extended distribution, plain numpy.

    Returns the per-state probability vector (async) or the scalar shared
    probability (sync).
    """
    vec = nu.vec if isinstance(nu, ExtendedDistribution) else np.asarray(nu, dtype=np.float64)
    if vec.shape != (2 * net.cfg.n_states,):
        raise ValueError(f"expected extended distribution of length {2 * net.cfg.n_states}")
    out = forward_batch(net.params.as_dict(), net.cfg, n, vec[None, :])
    return out[0] if net.cfg.mode == "async" else float(out[0])


def dp_policy(nets: list) -> callable:
    """Rollout policy backed by one network per step (terminal stop is forced)."""

    def policy(n, nu):
        return forward_rule(nets[n], n, nu)

    return policy


def coerce_policy(policy, horizon: int) -> callable:
    """Normalize a network, per-step network list, or callable to a policy.

    Per-step lists must cover exactly the steps 0..horizon-1 (the forced
    terminal stop needs no network).
    """
    if isinstance(policy, PolicyNetwork):
        return policy.as_policy()
    if isinstance(policy, (list, tuple)):
        if len(policy) != horizon:
            raise ValueError(f"policy list has {len(policy)} stages, horizon needs {horizon}")
        return dp_policy(list(policy))
    if not callable(policy):
        raise ValueError("policy must be a PolicyNetwork, a list of them, or a callable")
    return policy


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, net: PolicyNetwork, opt_state: AdamWState | None = None) -> None:
    """Write params (+ optimizer state) losslessly; round-trips bitwise."""
    payload = {
        "format": np.array(CHECKPOINT_FORMAT),
        "cfg/mode": np.array(net.cfg.mode),
        "cfg/n_states": np.array(net.cfg.n_states),
        "cfg/time_conditioned": np.array(net.cfg.time_conditioned),
        "cfg/k": np.array(net.cfg.k),
        "cfg/width": np.array(net.cfg.width),
        "cfg/demb": np.array(net.cfg.demb),
        "cfg/sin_dim": np.array(net.cfg.sin_dim),
        "cfg/groups": np.array(net.cfg.groups),
    }
    for name, value in net.params.items():
        payload[f"p/{name}"] = value
    if opt_state is not None:
        payload["opt/t"] = np.array(opt_state.t)
        for name, value in opt_state.m.items():
            payload[f"opt/m/{name}"] = value
        for name, value in opt_state.v.items():
            payload[f"opt/v/{name}"] = value
    np.savez(path, **payload)


def load_checkpoint(path) -> tuple:
    """Read a checkpoint; returns (PolicyNetwork, AdamWState or None)."""
    with np.load(path, allow_pickle=False) as data:
        fmt = str(data["format"])
        if fmt != CHECKPOINT_FORMAT:
            raise ValueError(f"unknown checkpoint format {fmt!r}")
        cfg = NetConfig(
            mode=str(data["cfg/mode"]),
            n_states=int(data["cfg/n_states"]),
            time_conditioned=bool(data["cfg/time_conditioned"]),
            k=int(data["cfg/k"]),
            width=int(data["cfg/width"]),
            demb=int(data["cfg/demb"]),
            sin_dim=int(data["cfg/sin_dim"]),
            groups=int(data["cfg/groups"]),
        )
        params = ParameterStore({k[2:]: data[k] for k in data.files if k.startswith("p/")})
        net = PolicyNetwork(cfg, params)
        state = None
        if "opt/t" in data.files:
            state = AdamWState(
                m={k[6:]: data[k] for k in data.files if k.startswith("opt/m/")},
                v={k[6:]: data[k] for k in data.files if k.startswith("opt/v/")},
                t=int(data["opt/t"]),
            )
        return net, state
