"""Exact evolution of the population distribution under a stopping policy.

One step does two things to the extended distribution: alive mass at x moves
to the stopped block with probability h(x), and the surviving mass transitions
through the kernel of the still-going process.  Stopping at time n charges the
alive mass that stops by the running cost evaluated at the current full
marginal; the final forced stop (h at the horizon is always one) may be
followed by a terminal cost on the final marginal.  All of this is
deterministic given the common-noise path, so the social cost of a policy on a
noise-free environment is a single exact number.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from mfos.core import ExtendedDistribution, Rng, marginal
from mfos.environments import Environment

CLAMP_TOL = 1e-6


@dataclass
class Trajectory:
    """One deterministic flow: distributions nu_0..nu_T seen before each stop."""

    distributions: list
    rules: list
    step_costs: list
    terminal_value: float
    noise_path: np.ndarray | None = None
    clamp_events: int = 0

    @property
    def total_cost(self) -> float:
        return float(sum(self.step_costs)) + self.terminal_value


def mf_step(nu: ExtendedDistribution, h, q: np.ndarray) -> ExtendedDistribution:
    """Apply one stop-then-move step to the extended distribution.

    ``h`` is a per-state stopping probability vector or a synchronous scalar;
    ``q`` must be row-stochastic.  Mass is conserved by construction: stopped
    mass only grows, surviving mass is redistributed by the kernel rows.
    """
    n = nu.space.n
    hvec = np.broadcast_to(np.asarray(h, dtype=np.float64), (n,))
    if hvec.min() < 0.0 or hvec.max() > 1.0:
        raise ValueError(f"stopping rule outside [0,1]: [{hvec.min()}, {hvec.max()}]")
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (n, n):
        raise ValueError(f"kernel shape {q.shape}, expected {(n, n)}")
    rows = q.sum(axis=1)
    if np.abs(rows - 1.0).max() > 1e-9 or q.min() < -1e-15:
        raise ValueError("kernel is not row-stochastic")
    stopped = nu.stopped + nu.alive * hvec
    alive = (nu.alive * (1.0 - hvec)) @ q
    return ExtendedDistribution(np.concatenate([stopped, alive]), nu.space)


def one_step_cost(nu: ExtendedDistribution, h, phi, mu: np.ndarray) -> float:
    """Cost charged at one step: alive mass that stops, priced at phi(mu)."""
    n = nu.space.n
    hvec = np.broadcast_to(np.asarray(h, dtype=np.float64), (n,))
    return float(np.sum(nu.alive * np.asarray(phi(mu), dtype=np.float64) * hvec))


def _clamp_rule(h, n: int):
    hvec = np.array(np.broadcast_to(np.asarray(h, dtype=np.float64), (n,)))
    if hvec.min() < -CLAMP_TOL or hvec.max() > 1.0 + CLAMP_TOL:
        raise ValueError(f"policy output outside [{-CLAMP_TOL}, {1 + CLAMP_TOL}]: [{hvec.min()}, {hvec.max()}]")
    clamped = np.clip(hvec, 0.0, 1.0)
    return clamped, int(np.count_nonzero(clamped != hvec))


def rollout(
    env: Environment,
    policy,
    nu0: ExtendedDistribution,
    rng: Rng | None = None,
    noise_path: np.ndarray | None = None,
) -> Trajectory:
    """Deterministic distribution flow of ``policy`` from ``nu0``.

    ``policy`` maps (step, extended distribution) to a stopping rule; the rule
    at the horizon is forced to one regardless of the policy.  Environments
    with common noise need either an explicit ``noise_path`` (one value per
    step 0..T) or an ``rng`` to draw one.
    """
    if env.noise is not None:
        if noise_path is None:
            if rng is None:
                raise ValueError("common-noise environment needs an rng or a noise path")
            noise_path = env.noise.sample_path(rng, env.horizon)
        noise_path = np.asarray(noise_path, dtype=np.intp)
        if noise_path.shape[0] < env.horizon + 1:
            raise ValueError("noise path shorter than the horizon")
    else:
        noise_path = None

    nu = nu0
    distributions, rules, costs = [], [], []
    clamps = 0
    for n in range(env.horizon + 1):
        if n == env.horizon:
            hvec = np.ones(env.space.n)
        else:
            hvec, c = _clamp_rule(policy(n, nu), env.space.n)
            clamps += c
        mu = marginal(nu)
        distributions.append(nu)
        rules.append(hvec)
        costs.append(one_step_cost(nu, hvec, env.phi, mu))
        noise = None if noise_path is None else noise_path[n]
        nu = mf_step(nu, hvec, env.kernel(n, nu.alive, noise))
    terminal = float(env.terminal_cost(marginal(nu))) if env.terminal_cost is not None else 0.0
    return Trajectory(distributions, rules, costs, terminal, noise_path, clamps)


def social_cost(
    env: Environment,
    policy,
    nu0: ExtendedDistribution,
    rng: Rng | None = None,
    mc_paths: int = 1,
    threads: int = 1,
) -> float:
    """Expected total cost of a policy from nu0.

    Noise-free environments are exact and require ``mc_paths == 1``; with
    common noise the cost is a Monte Carlo mean over independent noise paths,
    each on its own split of ``rng``.  Paths may run on a thread pool but are
    always reduced in path order, so the result is seed-deterministic.
    """
    if env.noise is None:
        if mc_paths != 1:
            raise ValueError("noise-free environment: mc_paths must be 1")
        return rollout(env, policy, nu0).total_cost
    if mc_paths < 1:
        raise ValueError("mc_paths must be >= 1")
    if rng is None:
        raise ValueError("common-noise environment needs an rng")
    streams = rng.split(mc_paths)

    def one(stream):
        return rollout(env, policy, nu0, rng=stream).total_cost

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            totals = list(pool.map(one, streams))
    else:
        totals = [one(s) for s in streams]
    return float(sum(totals) / mc_paths)
