"""Catalogue of stopping environments.

An environment bundles the state space, the horizon, the transition kernel of
the still-going process, the running cost of stopping, an optional terminal
cost on the final distribution, an optional common-noise model, and a default
initial distribution.  Kernels receive the alive block of the extended
distribution (so crowding effects see only agents still in play) and must
return a row-stochastic matrix; costs receive the full first marginal.

Kernel and cost callables accept plain arrays (single or batched along axis 0)
as well as tape variables, so the same formulas serve the exact engine, the
vectorized brute-force searches, and differentiable training rollouts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mfos import autodiff as ad
from mfos.core import StateSpace

_LETTER_DIR = Path(__file__).parent / "assets" / "letters"


@dataclass(frozen=True)
class NoiseModel:
    """Common noise shared by the whole population: one categorical draw per step."""

    n_values: int
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.shape != (self.n_values,) or abs(p.sum() - 1.0) > 1e-12 or p.min() < 0:
            raise ValueError("noise probabilities must form a distribution")
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)

    def sample(self, rng) -> int:
        return int(rng.gen.choice(self.n_values, p=self.probs))

    def sample_path(self, rng, horizon: int) -> np.ndarray:
        return rng.gen.choice(self.n_values, size=horizon + 1, p=self.probs)


@dataclass(frozen=True)
class Environment:
    """A stopping problem instance; see the module docstring for conventions."""

    name: str
    space: StateSpace
    horizon: int
    kernel: object  # (n, alive marginal, noise value or None) -> row-stochastic matrix
    phi: object  # full first marginal -> per-state stopping cost, same leading shape
    default_initial: np.ndarray
    terminal_cost: object = None  # full first marginal at the horizon -> scalar
    noise: NoiseModel | None = None
    synchronous_only: bool = False
    mean_field_free: bool = False  # True when phi and kernel both ignore the crowd

    def __post_init__(self):
        if self.horizon < 0:
            raise ValueError("horizon must be non-negative")
        mu0 = np.asarray(self.default_initial, dtype=np.float64)
        if mu0.shape != (self.space.n,) or abs(mu0.sum() - 1.0) > 1e-9 or mu0.min() < -1e-9:
            raise ValueError("default initial distribution is not a distribution on the space")
        mu0.flags.writeable = False
        object.__setattr__(self, "default_initial", mu0)

    def running_cost(self, x: int, mu: np.ndarray) -> float:
        """Scalar cost of stopping at state index x under crowd distribution mu."""
        return float(self.phi(np.asarray(mu, dtype=np.float64))[x])


def _is_batched(mu) -> bool:
    return (mu.value if isinstance(mu, ad.Var) else np.asarray(mu)).ndim == 2


def _constant_kernel(q: np.ndarray):
    q = np.asarray(q, dtype=np.float64)
    q.flags.writeable = False

    def kernel(n, mu, noise):
        return q

    return kernel


def _constant_phi(costs: np.ndarray):
    costs = np.asarray(costs, dtype=np.float64)
    costs.flags.writeable = False

    def phi(mu):
        return costs

    return phi


# ---------------------------------------------------------------------------
# one-dimensional catalogue


def env_towards_uniform_1d(horizon: int = 4, n_states: int = 5) -> Environment:
    """Deterministic drift right on a line; stopping where the crowd sits is dear.

    States 0..n-1, everyone starts at 0, the still-going process moves one step
    right (absorbing at the right edge), and stopping costs the current mass of
    the own state.  Spreading the crowd evenly over states is optimal.
    """
    q = np.zeros((n_states, n_states))
    q[np.arange(n_states - 1), np.arange(1, n_states)] = 1.0
    q[n_states - 1, n_states - 1] = 1.0
    return Environment(
        name="ex1",
        space=StateSpace(tuple(range(n_states))),
        horizon=horizon,
        kernel=_constant_kernel(q),
        phi=lambda mu: mu,
        default_initial=np.eye(n_states)[0],
    )


def env_roll_die(horizon: int = 5) -> Environment:
    """Keep or reroll a fair die; stopping on face x costs x."""
    q = np.full((6, 6), 1.0 / 6.0)
    mu0 = np.array([0.25, 0.25, 0.0, 0.0, 0.5, 0.0])
    return Environment(
        name="ex2",
        space=StateSpace((1, 2, 3, 4, 5, 6)),
        horizon=horizon,
        kernel=_constant_kernel(q),
        phi=_constant_phi(np.arange(1, 7, dtype=np.float64)),
        default_initial=mu0,
        mean_field_free=True,
    )


def env_congestion(horizon: int = 4, crowding: float = 0.8) -> Environment:
    """Reroll die where leaving a crowded face is hard.

    Moving away from x is slowed by the crowd at x: the reroll row of state x
    has all five off-diagonal entries equal to (1/6)(1 - (crowding/5) mu(x))
    and diagonal (1/6)(1 + crowding mu(x)).  The five moving entries and the
    sticky diagonal share the same mu(x), so every row sums to one identically,
    for any sub-probability mu and crowding <= 1.
    """
    if not 0.0 <= crowding <= 1.0:
        raise ValueError("crowding must lie in [0, 1]")
    n = 6

    def kernel(step, mu, noise):
        off = (1.0 / 6.0) * (1.0 - (crowding / 5.0) * mu)
        diag = (1.0 / 6.0) * (1.0 + crowding * mu)
        if isinstance(mu, ad.Var):
            return ad.add(ad.tile_last(off, n), ad.diag_embed(ad.sub(diag, off)))
        if np.asarray(mu).ndim == 2:
            q = np.repeat(off[:, :, None], n, axis=2)
            ii = np.arange(n)
            q[:, ii, ii] = diag
            return q
        q = np.repeat(off[:, None], n, axis=1)
        np.fill_diagonal(q, diag)
        return q

    mu0 = np.array([0.25, 0.25, 0.0, 0.0, 0.5, 0.0])
    return Environment(
        name="ex3",
        space=StateSpace((1, 2, 3, 4, 5, 6)),
        horizon=horizon,
        kernel=kernel,
        phi=_constant_phi(np.arange(1, 7, dtype=np.float64)),
        default_initial=mu0,
    )


def env_match_target(horizon: int = 3) -> Environment:
    """Random walk on a short line; cost is the crowd's squared gap to a target.

    States 1..7, walk stays with chance 1/2 and moves one step either way with
    chance 1/4 each; moves off an end fold into staying.  The stopping cost,
    identical across states, is the squared distance between the current full
    marginal and a fixed target profile centered on state 4.
    """
    n = 7
    target = np.array([0.0, 0.0, 0.25, 0.5, 0.25, 0.0, 0.0])
    q = np.zeros((n, n))
    for z in range(n):
        q[z, z] += 0.5
        for dz in (-1, 1):
            x = z + dz
            if 0 <= x < n:
                q[z, x] += 0.25
            else:
                q[z, z] += 0.25

    def phi(mu):
        if isinstance(mu, ad.Var):
            d = ad.sub(mu, target)
            return ad.tile_cols(ad.sum_axis1(ad.mul(d, d)), n)
        mu = np.asarray(mu)
        if mu.ndim == 2:
            gap = ((mu - target) ** 2).sum(axis=1)
            return np.repeat(gap[:, None], n, axis=1)
        return np.full(n, ((mu - target) ** 2).sum())

    return Environment(
        name="ex4",
        space=StateSpace((1, 2, 3, 4, 5, 6, 7)),
        horizon=horizon,
        kernel=_constant_kernel(q),
        phi=phi,
        default_initial=np.eye(n)[3],
    )


# ---------------------------------------------------------------------------
# two-dimensional catalogue


def env_towards_uniform_2d(horizon: int = 4, width: int = 5, height: int = 5) -> Environment:
    """Grid version of the drift-right crowd-spreading problem.

    Cells indexed row-major; the still-going process shifts one row down
    (absorbing on the last row), everyone starts in the corner cell (0, 0),
    and stopping costs the own cell's current mass.
    """
    n = width * height
    q = np.zeros((n, n))
    for i in range(height):
        for j in range(width):
            z = i * width + j
            q[z, z + width if i < height - 1 else z] = 1.0
    labels = tuple((i, j) for i in range(height) for j in range(width))
    return Environment(
        name="ex5",
        space=StateSpace(labels, ("2d-grid", width, height)),
        horizon=horizon,
        kernel=_constant_kernel(q),
        phi=lambda mu: mu,
        default_initial=np.eye(n)[0],
    )


def load_letter_bitmap(letter: str) -> np.ndarray:
    """10x10 0/1 grid for one of the shipped letters (M, F, O, S)."""
    path = _LETTER_DIR / f"{letter}.txt"
    if not path.exists():
        raise ValueError(f"no bitmap for letter {letter!r}")
    rows = [line.strip() for line in path.read_text().splitlines() if line.strip()]
    grid = np.array([[int(c) for c in row] for row in rows], dtype=np.float64)
    if grid.shape != (10, 10) or not np.isin(grid, (0.0, 1.0)).all() or grid.sum() == 0:
        raise ValueError(f"bitmap {path} is not a nonempty 10x10 0/1 grid")
    return grid


def env_drones(letter: str = "M", horizon: int = 50) -> Environment:
    """Drone swarm painting a letter on a 10x10 grid under a roaming obstacle.

    Still-going drones pick one of their in-grid axis neighbors uniformly
    (two at a corner, three on an edge, four inside).  A neighbor currently
    occupied by the obstacle (the common noise, resampled uniformly every
    step) bounces the drone back to where it was.  Running cost is zero; at
    the horizon the squared gap between the final distribution and the
    letter's normalized bitmap is charged.
    """
    width = height = 10
    n = width * height
    target = load_letter_bitmap(letter).reshape(n)
    target = target / target.sum()

    kernels = np.zeros((n, n, n))  # obstacle index -> row-stochastic matrix
    for o in range(n):
        for i in range(height):
            for j in range(width):
                z = i * width + j
                nbrs = [
                    (i + di) * width + (j + dj)
                    for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1))
                    if 0 <= i + di < height and 0 <= j + dj < width
                ]
                share = 1.0 / len(nbrs)
                for x in nbrs:
                    kernels[o, z, x if x != o else z] += share
    kernels.flags.writeable = False

    def kernel(step, mu, noise):
        if noise is None:
            raise ValueError("drones kernel needs the obstacle draw")
        return kernels[np.asarray(noise, dtype=np.intp)]

    def terminal_cost(mu):
        if isinstance(mu, ad.Var):
            d = ad.sub(mu, target)
            return ad.sum_axis1(ad.mul(d, d)) if mu.value.ndim == 2 else ad.sum_all(ad.mul(d, d))
        mu = np.asarray(mu)
        return ((mu - target) ** 2).sum(axis=-1)

    labels = tuple((i, j) for i in range(height) for j in range(width))
    return Environment(
        name=f"ex6-{letter}",
        space=StateSpace(labels, ("2d-grid", width, height)),
        horizon=horizon,
        kernel=kernel,
        phi=_constant_phi(np.zeros(n)),
        default_initial=np.full(n, 1.0 / n),
        terminal_cost=terminal_cost,
        noise=NoiseModel(n, np.full(n, 1.0 / n)),
    )


# ---------------------------------------------------------------------------
# two-state swap problem where randomized stopping beats every 0/1 rule


def env_randomized_better(horizon: int = 1) -> Environment:
    """Two states that swap every step; stopping in a crowded state costs 5.

    Stopping costs 1 where the full marginal of the own state is at most 1/2
    and 5 where it exceeds 1/2.  From the default start (3/4, 1/4) the best
    plan stops exactly a third of the first state's crowd at time 0, which no
    deterministic rule can do.
    """
    q = np.array([[0.0, 1.0], [1.0, 0.0]])

    def phi(mu):
        mu = mu.value if isinstance(mu, ad.Var) else np.asarray(mu)
        # Threshold cost: flat almost everywhere, so its contribution to any
        # gradient is zero and the values pass through as constants.
        return np.where(mu > 0.5, 5.0, 1.0)

    return Environment(
        name="randomized-better",
        space=StateSpace(("a", "b")),
        horizon=horizon,
        kernel=_constant_kernel(q),
        phi=phi,
        default_initial=np.array([0.75, 0.25]),
    )


ENVIRONMENTS = {
    "ex1": env_towards_uniform_1d,
    "ex2": env_roll_die,
    "ex3": env_congestion,
    "ex4": env_match_target,
    "ex5": env_towards_uniform_2d,
    "ex6-M": lambda: env_drones("M"),
    "ex6-F": lambda: env_drones("F"),
    "ex6-O": lambda: env_drones("O"),
    "ex6-S": lambda: env_drones("S"),
    "randomized-better": env_randomized_better,
}


def make_env(name: str) -> Environment:
    try:
        return ENVIRONMENTS[name]()
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; known: {sorted(ENVIRONMENTS)}") from None
