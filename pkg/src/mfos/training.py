"""Training stopping policies by differentiating through the distribution flow.

Two algorithms share one differentiable rollout:

* the direct approach ("da") trains a single time-conditioned network on the
  total cost of full trajectories, with fresh initial distributions sampled
  from the state simplex every iteration (all mass alive at time 0);
* the dynamic-programming approach ("dp") trains one network per time step,
  backwards from the horizon, each stage minimizing its cost-to-go while the
  already-trained later stages stay frozen; stage distributions are sampled
  from the full extended simplex, stopped block included.

Both propagate the exact population dynamics, so the only randomness is in
the sampled batch (and the common-noise paths where the environment has any),
and gradients flow through the kernel even when it depends on the crowd.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from mfos import autodiff as ad
from mfos.autodiff import AdamWState, ParameterStore, Tape, adamw_step, collect_grads
from mfos.core import ExtendedDistribution, Rng, initial_extend
from mfos.environments import Environment
from mfos.meanfield import social_cost
from mfos.networks import NetConfig, PolicyNetwork, coerce_policy, forward_batch


class DivergenceError(RuntimeError):
    """Raised when a training loss or gradient stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    """Knobs shared by both trainers; per-environment defaults below."""

    env: str = "ex1"
    algorithm: str = "da"
    stopping_class: str = "async"
    n_iter: int = 2000
    batch_size: int = 128
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    mc_paths: int = 1
    eval_every: int = 100
    resample: bool = True  # False freezes the first sampled batch (debug/property tests)
    eval_mu0: tuple | None = None  # test distribution; None = environment default
    threads: int = 1
    k: int = 3
    width: int = 128
    demb: int = 32
    sin_dim: int = 32
    groups: int = 8

    def __post_init__(self):
        if self.algorithm not in ("da", "dp"):
            raise ValueError(f"algorithm must be 'da' or 'dp', got {self.algorithm!r}")
        if self.stopping_class not in ("async", "sync"):
            raise ValueError(f"stopping_class must be 'async' or 'sync', got {self.stopping_class!r}")
        if min(self.n_iter, self.batch_size, self.mc_paths, self.eval_every, self.threads) < 1:
            raise ValueError("n_iter, batch_size, mc_paths, eval_every, threads must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


# Tuned per-environment defaults.  The 1-d problems train at the sizes used
# for the headline experiments (k=3, width=128, batch 128, lr 1e-4); the 10x10
# drone problem is cut down to something a single desktop core finishes in
# minutes, trading polish for tractability.
_ENV_DEFAULTS: dict = {
    "ex1": {"da": dict(n_iter=600), "dp": dict(n_iter=500, lr=1e-3)},
    # dp stage nets for the die are deliberately slim: at width 128 the stage-0
    # net falls into a never-stop local optimum (its rule should stop face 1
    # only, and the wide trunk drags that logit down with the other five).
    "ex2": {
        "da": dict(n_iter=800, lr=3e-4),
        "dp": dict(n_iter=600, lr=3e-3, k=1, width=16, demb=8, batch_size=32),
    },
    "ex3": {"da": dict(n_iter=2000), "dp": dict(n_iter=600, lr=1e-3)},
    "ex4": {"da": dict(n_iter=800), "dp": dict(n_iter=400, lr=1e-3)},
    "ex5": {
        "da": dict(n_iter=300, k=5, width=256, batch_size=16),
        "dp": dict(n_iter=120, k=5, width=256, batch_size=16, lr=1e-3),
    },
    "ex6": {
        "da": dict(n_iter=300, k=2, width=32, demb=16, batch_size=4, lr=1e-3, mc_paths=8),
        "dp": dict(n_iter=120, k=2, width=32, demb=16, batch_size=4, lr=3e-3, mc_paths=8),
    },
    "randomized-better": {
        "da": dict(n_iter=400, k=2, width=32, demb=8, batch_size=64, lr=1e-3),
        "dp": dict(n_iter=400, k=2, width=32, demb=8, batch_size=64, lr=1e-3),
    },
}


def default_config(env_name: str, algorithm: str = "da", stopping_class: str = "async", **overrides) -> TrainConfig:
    """Per-environment tuned TrainConfig; keyword overrides win."""
    key = "ex6" if env_name.startswith("ex6") else env_name
    tuned = _ENV_DEFAULTS.get(key, {}).get(algorithm, {})
    merged = dict(env=env_name, algorithm=algorithm, stopping_class=stopping_class)
    merged.update(tuned)
    merged.update(overrides)
    return TrainConfig(**merged)


@dataclass
class TrainReport:
    """Loss traces of one training run (one per stage for dp)."""

    env: str
    algorithm: str
    stopping_class: str
    seed: int
    stage: int | None
    train_losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)  # (iteration, test cost)
    wall_time: float = 0.0
    final_test: float = float("nan")
    final_params: ParameterStore | None = None


def _net_config(env: Environment, config: TrainConfig, time_conditioned: bool) -> NetConfig:
    return NetConfig(
        mode=config.stopping_class,
        n_states=env.space.n,
        time_conditioned=time_conditioned,
        k=config.k,
        width=config.width,
        demb=config.demb,
        sin_dim=config.sin_dim,
        groups=config.groups,
    )


def _flow_cost(env: Environment, provider, stopped, alive, noise_paths, start: int = 0):
    """Total cost of the batched distribution flow from step ``start``.

    ``provider(m)`` returns (params, net config) for the network acting at
    step m < horizon; the terminal rule is the constant one.  ``stopped`` and
    ``alive`` are (batch, n) blocks, arrays or Vars; the result is the (batch,)
    vector of per-element total costs, differentiable when anything upstream
    is a Var.
    """
    n_states = env.space.n
    total = None
    for m in range(start, env.horizon + 1):
        mu = ad.add(stopped, alive)
        phi = env.phi(mu)
        if m == env.horizon:
            ell = ad.sum_axis1(ad.mul(alive, phi))
        else:
            params, cfg = provider(m)
            probs = forward_batch(params, cfg, m, ad.hcat(stopped, alive))
            h = probs if cfg.mode == "async" else ad.tile_cols(probs, n_states)
            ell = ad.sum_axis1(ad.mul(ad.mul(alive, phi), h))
            noise = None if noise_paths is None else noise_paths[:, m]
            q = env.kernel(m, alive, noise)
            keep = ad.mul(alive, ad.sub(1.0, h))
            stopped = ad.add(stopped, ad.mul(alive, h))
            qv = q.value if isinstance(q, ad.Var) else np.asarray(q)
            alive = ad.matmul(keep, q) if qv.ndim == 2 else ad.bmm(keep, q)
        total = ell if total is None else ad.add(total, ell)
    if env.terminal_cost is not None:
        total = ad.add(total, env.terminal_cost(ad.add(stopped, alive)))
    return total


def _sample_state_simplex(rng: Rng, batch: int, dim: int) -> np.ndarray:
    """Batch of flat-Dirichlet draws (exponential spacings, normalized rows)."""
    g = rng.gen.exponential(1.0, (batch, dim))
    return g / g.sum(axis=1, keepdims=True)


def da_loss_and_grads(env: Environment, net: PolicyNetwork, mus0: np.ndarray, noise_paths) -> tuple:
    """Mean total cost of the batch plus gradients for every network parameter."""
    batch = mus0.shape[0]
    tape = Tape()
    leaves = net.params.inject(tape)
    stopped = np.zeros_like(mus0)
    total = _flow_cost(env, lambda m: (leaves, net.cfg), stopped, mus0, noise_paths)
    loss = ad.mul(ad.sum_all(total), 1.0 / batch)
    grads = collect_grads(net.params, leaves, ad.backward(loss))
    return float(loss.value), grads


def make_da_loss(env: Environment, config: TrainConfig, seed: int = 0):
    """Deterministic DA loss closure over a frozen batch, for gradient checks.

    Returns ``f`` with ``f(store) -> (loss, grads)`` plus the network config
    the store must match.
    """
    batch_rng, noise_rng = Rng(seed).split(2)
    mus0 = _sample_state_simplex(batch_rng, config.batch_size, env.space.n)
    noise_paths = None
    if env.noise is not None:
        noise_paths = noise_rng.gen.choice(
            env.noise.n_values, size=(config.batch_size, env.horizon + 1), p=env.noise.probs
        )
    cfg = _net_config(env, config, time_conditioned=True)

    def f(store: ParameterStore):
        return da_loss_and_grads(env, PolicyNetwork(cfg, store), mus0, noise_paths)

    return f, cfg


def evaluate(env: Environment, policy, mu0=None, mc_paths: int = 1, seed: int = 0, threads: int = 1) -> float:
    """Exact (or Monte Carlo, under common noise) cost of a trained policy.

    ``policy`` may be a callable (step, distribution) -> rule, a single
    PolicyNetwork, or the per-step network list a dp run returns.  ``mu0`` is
    a plain state distribution (everything starts alive); omitted means the
    environment default.  A fixed evaluation seed keeps Monte Carlo costs
    comparable across calls.
    """
    policy = coerce_policy(policy, env.horizon)
    nu0 = initial_extend(env.default_initial if mu0 is None else np.asarray(mu0, dtype=float), env.space)
    rng = Rng(seed) if env.noise is not None else None
    paths = mc_paths if env.noise is not None else 1
    return social_cost(env, policy, nu0, rng=rng, mc_paths=paths, threads=threads)


def train_da(env: Environment, config: TrainConfig) -> tuple:
    """Direct approach: one time-conditioned network over full trajectories."""
    if config.algorithm != "da":
        raise ValueError("config.algorithm must be 'da'")
    init_rng, batch_rng, noise_rng = Rng(config.seed).split(3)
    net = PolicyNetwork.init(_net_config(env, config, time_conditioned=True), init_rng)
    opt = AdamWState()
    report = TrainReport(env.name, "da", config.stopping_class, config.seed, None)
    frozen = None
    t0 = time.perf_counter()
    for it in range(1, config.n_iter + 1):
        if config.resample or frozen is None:
            mus0 = _sample_state_simplex(batch_rng, config.batch_size, env.space.n)
            noise_paths = None
            if env.noise is not None:
                noise_paths = noise_rng.gen.choice(
                    env.noise.n_values, size=(config.batch_size, env.horizon + 1), p=env.noise.probs
                )
            frozen = (mus0, noise_paths)
        loss, grads = da_loss_and_grads(env, net, *frozen)
        if not np.isfinite(loss):
            raise DivergenceError(f"train loss became {loss} at iteration {it}")
        try:
            adamw_step(net.params, grads, opt, config.lr, (config.beta1, config.beta2), config.eps, config.weight_decay)
        except FloatingPointError as err:
            raise DivergenceError(str(err)) from err
        report.train_losses.append(loss)
        if it % config.eval_every == 0 or it == config.n_iter:
            test = evaluate(env, net, mu0=config.eval_mu0, mc_paths=config.mc_paths, threads=config.threads)
            report.evals.append((it, test))
    report.wall_time = time.perf_counter() - t0
    report.final_test = report.evals[-1][1]
    report.final_params = net.params
    return net, report


def dp_stage_value(env: Environment, nets: list, stage: int, mc_paths: int = 1, seed: int = 0) -> float:
    """Cost-to-go of the trained stages from the default start, taken at ``stage``.

    The evaluation pretends the population enters step ``stage`` fresh (default
    initial distribution, nothing stopped yet) and follows nets[stage..T-1]
    plus the forced terminal stop.  Under common noise this averages a batch
    of independently drawn paths in one vectorized flow.
    """
    nu0 = initial_extend(env.default_initial, env.space)
    provider = lambda m: (nets[m].params.as_dict(), nets[m].cfg)
    if env.noise is None:
        stopped, alive = nu0.stopped[None, :], nu0.alive[None, :]
        return float(_flow_cost(env, provider, stopped, alive, None, start=stage)[0])
    rng = Rng(seed)
    paths = np.stack([env.noise.sample_path(s, env.horizon) for s in rng.split(mc_paths)])
    stopped = np.repeat(nu0.stopped[None, :], mc_paths, axis=0)
    alive = np.repeat(nu0.alive[None, :], mc_paths, axis=0)
    return float(_flow_cost(env, provider, stopped, alive, paths, start=stage).mean())


def train_dp(env: Environment, config: TrainConfig) -> tuple:
    """Dynamic programming: per-step networks trained backwards from the horizon.

    Stage n minimizes the mean cost of steps n..T over extended distributions
    drawn uniformly from the full 2|X| simplex, with stages after n frozen
    (their parameters are never touched; gradients still flow through their
    outputs into the stage-n decision).  Returns (nets[0..T-1], reports per
    stage in stage order).
    """
    if config.algorithm != "dp":
        raise ValueError("config.algorithm must be 'dp'")
    horizon, n_states = env.horizon, env.space.n
    nets: list = [None] * horizon
    reports: list = [None] * horizon
    stage_rngs = Rng(config.seed).split(max(horizon, 1))
    for stage in reversed(range(horizon)):
        init_rng, batch_rng, noise_rng = stage_rngs[stage].split(3)
        net = PolicyNetwork.init(_net_config(env, config, time_conditioned=False), init_rng)
        opt = AdamWState()
        report = TrainReport(env.name, "dp", config.stopping_class, config.seed, stage)
        nets[stage] = net
        t0 = time.perf_counter()
        for it in range(1, config.n_iter + 1):
            nus0 = _sample_state_simplex(batch_rng, config.batch_size, 2 * n_states)
            noise_paths = None
            if env.noise is not None:
                noise_paths = noise_rng.gen.choice(
                    env.noise.n_values, size=(config.batch_size, horizon + 1), p=env.noise.probs
                )
            tape = Tape()
            leaves = net.params.inject(tape)

            def provider(m):
                if m == stage:
                    return leaves, net.cfg
                return nets[m].params.as_dict(), nets[m].cfg

            total = _flow_cost(env, provider, nus0[:, :n_states], nus0[:, n_states:], noise_paths, start=stage)
            loss_var = ad.mul(ad.sum_all(total), 1.0 / config.batch_size)
            loss = float(loss_var.value)
            if not np.isfinite(loss):
                raise DivergenceError(f"stage {stage} loss became {loss} at iteration {it}")
            grads = collect_grads(net.params, leaves, ad.backward(loss_var))
            try:
                adamw_step(net.params, grads, opt, config.lr, (config.beta1, config.beta2), config.eps, config.weight_decay)
            except FloatingPointError as err:
                raise DivergenceError(str(err)) from err
            report.train_losses.append(loss)
            if it % config.eval_every == 0 or it == config.n_iter:
                report.evals.append((it, dp_stage_value(env, nets, stage, config.mc_paths)))
        report.wall_time = time.perf_counter() - t0
        report.final_test = report.evals[-1][1]
        report.final_params = net.params
        reports[stage] = report
    return nets, reports


def lr_sweep(env: Environment, algorithm: str, lrs, config: TrainConfig) -> dict:
    """Runs of the chosen trainer over a grid of learning rates, shared seed.

    Returns {lr: TrainReport} for da, {lr: [TrainReport per stage]} for dp.
    """
    lrs = list(lrs)
    if not lrs:
        raise ValueError("lrs must be non-empty")
    out = {}
    for lr in lrs:
        cfg = replace(config, lr=lr, algorithm=algorithm)
        if algorithm == "da":
            _, report = train_da(env, cfg)
        else:
            _, report = train_dp(env, cfg)
        out[lr] = report
    return out
