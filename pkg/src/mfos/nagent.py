"""Finite-population simulator and the convergence study against the exact flow.

N agents share one stopping policy.  Each step freezes the empirical extended
distribution, feeds it to the policy (the agents react to what the crowd
actually looks like, not to the infinite-population prediction), then every
alive agent flips its own stopping coin and the survivors move by sampling
their kernel row.  Under common noise the shock is drawn once per step and
shared.  As N grows the empirical flow approaches the deterministic one at
the usual 1/sqrt(N) Monte Carlo rate, which `convergence_study` measures.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from mfos.core import ExtendedDistribution, Rng, initial_extend, tv_distance
from mfos.environments import Environment
from mfos.meanfield import rollout, social_cost
from mfos.networks import coerce_policy

RULE_TOL = 1e-6


@dataclass(frozen=True)
class SimulationResult:
    """One finite-population run.

    ``empirical_extended[n]`` is the frozen start-of-step distribution the
    policy saw at step n (alive block counts agents with stopping time >= n).
    ``realized_cost`` averages each agent's stopping cost evaluated on the
    empirical marginal at its stopping time, plus the terminal cost of the
    final empirical marginal when the environment defines one.
    """

    empirical_extended: np.ndarray  # (T+1, 2|X|)
    realized_cost: float
    stopping_times: np.ndarray  # (N,) int
    states: np.ndarray  # (T+1, N) int, frozen after stopping


def _allocate_quota(mu0: np.ndarray, n_agents: int) -> np.ndarray:
    """Largest-remainder exact-proportional initial states (deterministic)."""
    raw = mu0 * n_agents
    counts = np.floor(raw).astype(np.int64)
    short = n_agents - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return np.repeat(np.arange(mu0.size), counts)


def _clean_rule(h, n_states: int) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 0:
        h = np.full(n_states, float(h))
    if h.shape != (n_states,):
        raise ValueError(f"rule shape {h.shape} does not match {n_states} states")
    if h.min() < -RULE_TOL or h.max() > 1.0 + RULE_TOL:
        raise ValueError("stopping rule left [0, 1] beyond tolerance")
    return np.clip(h, 0.0, 1.0)


def simulate(env: Environment, policy, n_agents: int, rng: Rng, initial_allocation: str = "sample") -> SimulationResult:
    """Run N interacting agents under a shared stopping policy.

    ``initial_allocation``: "sample" draws the initial states independently
    from the default initial distribution (the regime the sampling-error
    bounds describe); "quota" allocates them exactly proportionally, useful
    when the empirical flow should match the deterministic one exactly.
    """
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    if initial_allocation not in ("sample", "quota"):
        raise ValueError("initial_allocation must be 'sample' or 'quota'")
    policy = coerce_policy(policy, env.horizon)
    n = env.space.n
    horizon = env.horizon
    mu0 = env.default_initial
    if initial_allocation == "sample":
        x = np.searchsorted(np.cumsum(mu0), rng.gen.uniform(size=n_agents), side="right")
        x = np.minimum(x, n - 1).astype(np.int64)
    else:
        x = _allocate_quota(mu0, n_agents)
    alive = np.ones(n_agents, dtype=bool)
    tau = np.full(n_agents, horizon, dtype=np.int64)
    states = np.empty((horizon + 1, n_agents), dtype=np.int64)
    states[0] = x
    empirical = np.empty((horizon + 1, 2 * n))
    cost_sum = 0.0
    for m in range(horizon + 1):
        stopped_counts = np.bincount(x[~alive], minlength=n)
        alive_counts = np.bincount(x[alive], minlength=n)
        nu_vec = np.concatenate([stopped_counts, alive_counts]) / n_agents
        empirical[m] = nu_vec
        mu = nu_vec[:n] + nu_vec[n:]
        phi = np.asarray(env.phi(mu), dtype=np.float64)
        if m == horizon:
            cost_sum += phi[x[alive]].sum()
            tau[alive] = m
            break
        nu = ExtendedDistribution(nu_vec, env.space)
        h = _clean_rule(policy(m, nu), n)
        noise = env.noise.sample(rng) if env.noise is not None else None
        q = np.asarray(env.kernel(m, nu.alive, noise), dtype=np.float64)
        idx_alive = np.flatnonzero(alive)
        stops = rng.gen.uniform(size=idx_alive.size) < h[x[idx_alive]]
        stoppers = idx_alive[stops]
        cost_sum += phi[x[stoppers]].sum()
        tau[stoppers] = m
        alive[stoppers] = False
        movers = idx_alive[~stops]
        if movers.size:
            u = rng.gen.uniform(size=movers.size)
            cum = np.cumsum(q[x[movers]], axis=1)
            x[movers] = np.minimum((cum < u[:, None]).sum(axis=1), n - 1)
        states[m + 1] = x
    realized = cost_sum / n_agents
    if env.terminal_cost is not None:
        realized += float(env.terminal_cost(empirical[horizon, :n] + empirical[horizon, n:]))
    return SimulationResult(empirical, realized, tau, states)


@dataclass(frozen=True)
class StudyResult:
    """Convergence of the empirical flow and cost to the mean-field limit."""

    ns: tuple
    mean_l2: np.ndarray  # (len(ns), T+1) distance to the exact flow, mean over reps
    mean_tv: np.ndarray  # (len(ns), T+1)
    mean_cost_gap: np.ndarray  # (len(ns),) mean |realized - J|
    slope: float  # least-squares slope of log10(overall mean L2) vs log10(N)
    exact_cost: float

    def rows(self) -> list:
        out = []
        for i, n in enumerate(self.ns):
            for t in range(self.mean_l2.shape[1]):
                out.append({"n_agents": n, "time": t, "mean_l2": self.mean_l2[i, t],
                            "mean_tv": self.mean_tv[i, t], "mean_cost_gap": self.mean_cost_gap[i]})
        return out


def convergence_study(env: Environment, policy, ns, reps: int = 10, rng: Rng | None = None, threads: int = 1) -> StudyResult:
    """Measure how fast N-agent simulations approach the exact flow.

    For each population size: ``reps`` independent simulations, per-time L2
    and total-variation distance between the empirical extended distribution
    and the exact one, and the cost gap |realized - J|, all averaged over
    replications.  The headline number is the least-squares slope of
    log mean L2 (averaged over times) against log N; independent sampling
    puts it near -1/2.
    """
    ns = tuple(int(v) for v in ns)
    if not ns:
        raise ValueError("ns must be non-empty")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if env.noise is not None:
        raise ValueError("convergence_study compares against the deterministic flow; common noise not supported")
    if rng is None:
        rng = Rng(0)
    policy = coerce_policy(policy, env.horizon)
    nu0 = initial_extend(env.default_initial, env.space)
    exact = rollout(env, policy, nu0)
    exact_mat = np.stack([d.vec for d in exact.distributions])
    exact_cost = social_cost(env, policy, nu0)
    mean_l2 = np.empty((len(ns), env.horizon + 1))
    mean_tv = np.empty_like(mean_l2)
    mean_gap = np.empty(len(ns))
    for i, n_agents in enumerate(ns):
        streams = rng.split(reps)

        def one_rep(stream, n_agents=n_agents):
            sim = simulate(env, policy, n_agents, stream)
            diff = sim.empirical_extended - exact_mat
            l2 = np.linalg.norm(diff, axis=1)
            tv = np.array([tv_distance(sim.empirical_extended[t], exact_mat[t]) for t in range(exact_mat.shape[0])])
            return l2, tv, abs(sim.realized_cost - exact_cost)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(one_rep, streams))
        else:
            results = [one_rep(s) for s in streams]
        mean_l2[i] = np.mean([r[0] for r in results], axis=0)
        mean_tv[i] = np.mean([r[1] for r in results], axis=0)
        mean_gap[i] = np.mean([r[2] for r in results])
    overall = mean_l2.mean(axis=1)
    pos = overall > 0  # exactly-zero distances (deterministic flows) carry no rate information
    if pos.sum() > 1:
        slope = float(np.polyfit(np.log10(np.asarray(ns, dtype=float)[pos]), np.log10(overall[pos]), 1)[0])
    else:
        slope = float("nan")
    return StudyResult(ns, mean_l2, mean_tv, mean_gap, slope, exact_cost)
