"""Shared value types: state spaces, extended distributions, rng, distances.

The extended state of an agent is a pair (x, a) with x a point of the finite
state space and a in {0, 1} a liveness flag (0 = already stopped, 1 = still
going).  A population configuration is a probability vector on the extended
space, stored flat as [stopped block | alive block], each block of length |X|.
The first marginal recovers the plain distribution over states by summing the
two blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Construction tolerances for extended distributions: entries this far below
# zero are treated as roundoff and clamped, anything worse is rejected, and the
# total mass must sit within MASS_TOL of one.
NEG_TOL = 1e-15
MASS_TOL = 1e-12


@dataclass(frozen=True)
class StateSpace:
    """Finite state space with integer indexing and a geometry tag.

    ``labels`` are display names (die faces, grid cells, ...).  ``geometry``
    is either the string ``"1d-line"`` or a tuple ``("2d-grid", width,
    height)``; 2d grids index cells row-major.
    """

    labels: tuple
    geometry: object = "1d-line"

    def __post_init__(self):
        if len(self.labels) < 1:
            raise ValueError("state space needs at least one state")
        if isinstance(self.geometry, tuple):
            kind, w, h = self.geometry
            if kind != "2d-grid" or w * h != len(self.labels):
                raise ValueError(f"bad geometry {self.geometry!r} for {len(self.labels)} states")
        elif self.geometry != "1d-line":
            raise ValueError(f"unknown geometry {self.geometry!r}")

    @property
    def n(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class ExtendedDistribution:
    """Probability vector on (state, liveness), flat layout [stopped | alive]."""

    vec: np.ndarray
    space: StateSpace

    def __post_init__(self):
        v = np.asarray(self.vec, dtype=np.float64)
        if v.shape != (2 * self.space.n,):
            raise ValueError(f"expected length {2 * self.space.n}, got shape {v.shape}")
        if v.min() < -NEG_TOL:
            raise ValueError(f"negative mass {v.min():.3e} beyond tolerance")
        v = np.maximum(v, 0.0)
        total = v.sum()
        if abs(total - 1.0) > MASS_TOL:
            raise ValueError(f"total mass {total!r} not within {MASS_TOL} of 1")
        v.flags.writeable = False
        object.__setattr__(self, "vec", v)

    @property
    def stopped(self) -> np.ndarray:
        return self.vec[: self.space.n]

    @property
    def alive(self) -> np.ndarray:
        return self.vec[self.space.n :]


def initial_extend(mu0: np.ndarray, space: StateSpace) -> ExtendedDistribution:
    """Extend a distribution over states to the extended space, all mass alive.

    Rejects negative entries or mass off 1 beyond 1e-9 (inputs here are user
    supplied, so the gate is looser than the construction clamp).
    """
    mu0 = np.asarray(mu0, dtype=np.float64)
    if mu0.shape != (space.n,):
        raise ValueError(f"expected {space.n} entries, got shape {mu0.shape}")
    if mu0.min() < -1e-9:
        raise ValueError(f"negative entry {mu0.min():.3e} in initial distribution")
    if abs(mu0.sum() - 1.0) > 1e-9:
        raise ValueError(f"initial distribution sums to {mu0.sum()!r}, not 1")
    mu0 = np.maximum(mu0, 0.0)
    mu0 = mu0 / mu0.sum()
    return ExtendedDistribution(np.concatenate([np.zeros(space.n), mu0]), space)


def marginal(nu: ExtendedDistribution) -> np.ndarray:
    """First marginal over states: stopped and alive mass summed per state."""
    return nu.stopped + nu.alive


@dataclass
class Rng:
    """Seedable random stream with deterministic splitting.

    Same seed, same call sequence, same draws, bitwise.  ``split`` derives
    independent child streams so parallel work can consume randomness without
    any draw-order coupling between workers.
    """

    seed: object = 0
    _seq: np.random.SeedSequence = field(init=False, repr=False)
    gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        seq = self.seed if isinstance(self.seed, np.random.SeedSequence) else np.random.SeedSequence(self.seed)
        self._seq = seq
        self.gen = np.random.Generator(np.random.PCG64(seq))

    def split(self, k: int) -> list["Rng"]:
        return [Rng(child) for child in self._seq.spawn(k)]


def sample_simplex(rng: Rng, dim: int) -> np.ndarray:
    """Uniform sample from the probability simplex of the given dimension.

    Normalized unit-rate exponential spacings, which is the flat Dirichlet.
    ``dim == 1`` returns the single point [1.0].
    """
    if dim < 1:
        raise ValueError("simplex dimension must be >= 1")
    g = rng.gen.exponential(1.0, dim)
    return g / g.sum()


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Total-variation distance, half the l1 difference."""
    p, q = np.asarray(p), np.asarray(q)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


def l2_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Euclidean distance between two vectors."""
    p, q = np.asarray(p), np.asarray(q)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    return float(np.linalg.norm(p - q))
