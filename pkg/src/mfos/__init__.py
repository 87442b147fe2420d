"""Mean-field optimal stopping on finite state spaces.

A crowd of identical agents evolves on a finite state space; each agent picks a
stopping time, the running cost of stopping depends on the crowd's distribution,
and the planner minimizes the population-average cost.  The package provides the
exact distribution flow on the extended space (state, stopped-flag), stopping
policies parameterized by small residual networks trained with a built-in
reverse-mode tape, brute-force and closed-form oracles, and a finite-agent
simulator for measuring how fast empirical systems approach the mean-field limit.
"""

from mfos.core import (
    ExtendedDistribution,
    Rng,
    StateSpace,
    initial_extend,
    l2_distance,
    marginal,
    sample_simplex,
    tv_distance,
)

__all__ = [
    "ExtendedDistribution",
    "Rng",
    "StateSpace",
    "initial_extend",
    "l2_distance",
    "marginal",
    "sample_simplex",
    "tv_distance",
]

__version__ = "0.1.0"
