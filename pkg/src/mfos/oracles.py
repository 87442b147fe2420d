"""Ground-truth solvers used to validate trained policies.

Everything here is deliberately independent of the autodiff engine and of the
reference rollout in :mod:`mfos.meanfield`: the grid search carries its own
vectorized flow, and the backward induction works state by state.  Agreement
between these oracles and the trained/evaluated numbers is then meaningful
evidence rather than the same code talking to itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mfos.core import ExtendedDistribution, initial_extend
from mfos.environments import Environment

GRID_POINT_CAP = 10_000_000
_CHUNK = 1 << 16


def closed_form_ex1(horizon: int) -> float:
    """Optimal value of the drift-to-crowd line problem started at state 0.

    The optimal policy spreads the unit mass so that a fraction 1/(T+1-n+1)
    of the surviving mass stops each step, which telescopes to the closed
    form (T+2)/(2(T+1)).
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    return (horizon + 2) / (2.0 * (horizon + 1))


@dataclass(frozen=True)
class DppResult:
    """Backward-induction output for decoupled (crowd-free) problems."""

    value: float
    table: np.ndarray  # (T+1, |X|) state values V_n(x)
    rules: list        # T+1 binary stopping rules, rules[T] all ones


def single_agent_dpp(env: Environment) -> DppResult:
    """Exact backward induction when costs and kernel ignore the crowd.

    V_T(x) = Phi(x); V_n(x) = min(Phi(x), sum_z q_xz V_{n+1}(z)).  Stops on
    ties so the extracted 0/1 rule is deterministic.  The returned value is
    the average of V_0 under the environment default initial distribution.
    """
    if not env.mean_field_free:
        raise ValueError(f"{env.name} couples agents through the crowd; the single-agent DPP does not apply")
    if env.noise is not None:
        raise ValueError("single-agent DPP assumes a noise-free kernel")
    n = env.space.n
    placeholder = np.full(n, 1.0 / n)
    phi = np.asarray(env.phi(placeholder), dtype=float)
    if phi.shape != (n,):
        raise ValueError("cost vector must be one value per state")
    table = np.empty((env.horizon + 1, n))
    rules = [None] * (env.horizon + 1)
    table[env.horizon] = phi
    rules[env.horizon] = np.ones(n)
    for m in range(env.horizon - 1, -1, -1):
        q = np.asarray(env.kernel(m, placeholder, None), dtype=float)
        cont = q @ table[m + 1]
        stop = phi <= cont
        table[m] = np.where(stop, phi, cont)
        rules[m] = stop.astype(float)
    value = float(env.default_initial @ table[0])
    return DppResult(value, table, rules)


def _flow_costs(env: Environment, nu0: ExtendedDistribution, rules: np.ndarray, noise_path) -> np.ndarray:
    """Total cost for a chunk of candidate policies, plain vectorized flow."""
    chunk = rules.shape[0]
    stopped = np.repeat(nu0.stopped[None, :], chunk, axis=0)
    alive = np.repeat(nu0.alive[None, :], chunk, axis=0)
    total = np.zeros(chunk)
    for m in range(env.horizon + 1):
        mu = stopped + alive
        phi = np.asarray(env.phi(mu), dtype=float)
        if m == env.horizon:
            total += (alive * phi).sum(axis=1)
            stopped = stopped + alive
            alive = np.zeros_like(alive)
        else:
            h = rules[:, m, :]
            total += (alive * phi * h).sum(axis=1)
            noise = None if noise_path is None else noise_path[m]
            q = np.asarray(env.kernel(m, alive, noise), dtype=float)
            keep = alive * (1.0 - h)
            stopped = stopped + alive * h
            alive = keep @ q if q.ndim == 2 else np.einsum("bi,bij->bj", keep, q)
    if env.terminal_cost is not None:
        total += np.asarray(env.terminal_cost(stopped + alive), dtype=float)
    return total


def _minimize_over_grid(env, nu0, candidates, stopping_class, noise_path):
    """Exhaustive minimum of the flow cost over a per-dimension candidate grid.

    candidates: list of 1-d arrays, one per searched dimension.  Enumeration
    is chunked so the full product never materializes.  Ties break to the
    lowest enumeration index (first hit wins via strict improvement).
    """
    n = env.space.n
    horizon = env.horizon
    shape = tuple(len(c) for c in candidates)
    total_points = int(np.prod([len(c) for c in candidates], dtype=np.int64))
    best_val = np.inf
    best_point = None
    for start in range(0, total_points, _CHUNK):
        flat = np.arange(start, min(start + _CHUNK, total_points))
        multi = np.unravel_index(flat, shape)
        cols = [candidates[d][multi[d]] for d in range(len(candidates))]
        pts = np.stack(cols, axis=1)  # (chunk, dims)
        if stopping_class == "async":
            rules = pts.reshape(len(flat), horizon, n)
        else:
            rules = np.repeat(pts[:, :, None], n, axis=2)  # same scalar for every state
        costs = _flow_costs(env, nu0, rules, noise_path)
        i = int(np.argmin(costs))
        if costs[i] < best_val:
            best_val = float(costs[i])
            best_point = pts[i].copy()
    return best_val, best_point


def grid_search_policy(env: Environment, nu0: ExtendedDistribution | None = None, resolution: int = 10,
                       stopping_class: str = "async", noise_path=None):
    """Brute-force policy search on a uniform grid with one refinement pass.

    Searches [0,1]^dims where dims = T (synchronous, one scalar per step) or
    T*|X| (asynchronous); the terminal rule is always the forced stop.  After
    the uniform pass the grid is re-centered on the best point at 1/M scale
    and searched once more; the reported minimum is over both passes, so it
    never gets worse with refinement.  Returns (best value, best rule array)
    with shape (T, |X|) asynchronous or (T,) synchronous.

    This is an upper-bound oracle: the value is >= the true infimum, with
    equality when an optimum sits on the grid (0/1 policies at M=1, say).
    """
    if stopping_class not in ("async", "sync"):
        raise ValueError("stopping_class must be 'async' or 'sync'")
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    if env.noise is not None and noise_path is None:
        raise ValueError("common-noise environment needs a fixed noise_path")
    if nu0 is None:
        nu0 = initial_extend(env.default_initial, env.space)
    dims = env.horizon * (env.space.n if stopping_class == "async" else 1)
    if dims == 0:
        return float(_flow_costs(env, nu0, np.zeros((1, 0, env.space.n)), noise_path)[0]), np.zeros((0,))
    n_points = (resolution + 1) ** dims
    if n_points > GRID_POINT_CAP:
        raise ValueError(f"search space {resolution + 1}^{dims} exceeds {GRID_POINT_CAP:.0e} points")
    base = np.linspace(0.0, 1.0, resolution + 1)
    val1, pt1 = _minimize_over_grid(env, nu0, [base] * dims, stopping_class, noise_path)
    refined = [np.clip(np.linspace(c - 1.0 / resolution, c + 1.0 / resolution, resolution + 1), 0.0, 1.0)
               for c in pt1]
    val2, pt2 = _minimize_over_grid(env, nu0, refined, stopping_class, noise_path)
    val, pt = (val2, pt2) if val2 < val1 else (val1, pt1)
    if stopping_class == "async":
        return val, pt.reshape(env.horizon, env.space.n)
    return val, pt


@dataclass(frozen=True)
class BoundParams:
    """Inputs of the finite-population approximation bound."""

    l_psi: float
    l_p: float
    l_fbar: float
    horizon: int
    s_card: int
    n_agents: int

    def __post_init__(self):
        if min(self.l_psi, self.l_p, self.l_fbar) < 0:
            raise ValueError("Lipschitz constants must be non-negative")
        if self.horizon < 0 or self.s_card < 1 or self.n_agents < 1:
            raise ValueError("need horizon >= 0, s_card >= 1, n_agents >= 1")

    @property
    def k(self) -> float:
        return self.l_fbar * (1.0 + self.l_p)


def finite_population_gap_bound(params: BoundParams) -> float:
    """Worst-case gap between the N-agent cost and its mean-field limit.

    2 T L_psi (1+L_p) [ |S|/(4 sqrt N) * (1-K^T)/(1-K) + K^T sqrt(|S|-1)/(2 sqrt N) ]
    with K = L_fbar (1+L_p); the geometric factor degenerates to T when K = 1.
    Scales exactly as 1/sqrt(N).
    """
    t = params.horizon
    if t == 0:
        return 0.0
    k = params.k
    geo = float(t) if k == 1.0 else (1.0 - k ** t) / (1.0 - k)
    root_n = np.sqrt(params.n_agents)
    inner = params.s_card / (4.0 * root_n) * geo + k ** t * np.sqrt(params.s_card - 1.0) / (2.0 * root_n)
    return 2.0 * t * params.l_psi * (1.0 + params.l_p) * inner


def t0_sampling_bound(s_card: int, n_agents: int) -> float:
    """Expected time-0 sampling error of an N-agent empirical distribution."""
    if s_card < 1 or n_agents < 1:
        raise ValueError("need s_card >= 1 and n_agents >= 1")
    return np.sqrt(s_card - 1.0) / (2.0 * np.sqrt(n_agents))


def estimate_lipschitz(env: Environment, policy, n_probes: int = 10_000, rng=None) -> dict:
    """Numerical Lipschitz estimates for the bound inputs, by random probing.

    Takes the max ratio over ``n_probes`` random pairs of extended
    distributions (both far pairs and small perturbations, L2 norms
    throughout): ``l_p`` for the policy map, ``l_fbar`` for the one-step flow
    jointly in (nu, h), ``l_psi`` for the one-step cost jointly in (nu, h).
    These are estimates, not certified constants; they are meant for validity
    checks of the bound, used conservatively.
    """
    from mfos.core import Rng
    from mfos.meanfield import mf_step

    if rng is None:
        rng = Rng(0)
    n = env.space.n
    gen = rng.gen
    l_p = l_fbar = l_psi = 0.0

    def one_step(nu_vec, h, step):
        nu = ExtendedDistribution(nu_vec, env.space)
        noise = env.noise.sample(Rng(int(gen.integers(1 << 30)))) if env.noise is not None else None
        nxt = mf_step(nu, h, np.asarray(env.kernel(step, nu.alive, noise), dtype=float))
        mu = nu.stopped + nu.alive
        cost = float((nu.alive * np.asarray(env.phi(mu), dtype=float) * h).sum())
        return nxt.vec, cost

    for _ in range(n_probes):
        g = gen.exponential(1.0, (2, 2 * n))
        nu_a, nu_b = g / g.sum(axis=1, keepdims=True)
        if gen.uniform() < 0.5:  # local probe: nudge a toward b
            nu_b = nu_a + 1e-4 * (nu_b - nu_a)
            nu_b = np.maximum(nu_b, 0.0)
            nu_b /= nu_b.sum()
        step = int(gen.integers(env.horizon)) if env.horizon > 0 else 0
        rule_a = np.asarray(policy(step, ExtendedDistribution(nu_a, env.space)), dtype=float)
        rule_b = np.asarray(policy(step, ExtendedDistribution(nu_b, env.space)), dtype=float)
        if rule_a.ndim == 0:
            rule_a = np.full(n, float(rule_a))
            rule_b = np.full(n, float(rule_b))
        d_nu = np.linalg.norm(nu_a - nu_b)
        d_h = np.linalg.norm(rule_a - rule_b)
        if d_nu > 1e-12:
            l_p = max(l_p, d_h / d_nu)
        next_a, cost_a = one_step(nu_a, rule_a, step)
        next_b, cost_b = one_step(nu_b, rule_b, step)
        denom = d_nu + d_h
        if denom > 1e-12:
            l_fbar = max(l_fbar, np.linalg.norm(next_a - next_b) / denom)
            l_psi = max(l_psi, abs(cost_a - cost_b) / denom)
    return {"l_psi": l_psi, "l_p": l_p, "l_fbar": l_fbar}
