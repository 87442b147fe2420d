"""State-space plumbing: extended distributions, seeded sampling, distances."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

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

SPACE2 = StateSpace(("a", "b"))
SPACE5 = StateSpace(tuple(range(5)))
DIE = StateSpace((1, 2, 3, 4, 5, 6))


# ---------------------------------------------------------------- state space


def test_state_space_basic_line():
    assert SPACE5.n == 5
    assert SPACE5.geometry == "1d-line"


def test_state_space_grid_label_count_must_match():
    labels = tuple((i, j) for i in range(2) for j in range(3))
    grid = StateSpace(labels, ("2d-grid", 3, 2))
    assert grid.n == 6
    with pytest.raises(ValueError):
        StateSpace(labels[:5], ("2d-grid", 3, 2))


def test_state_space_rejects_empty_and_unknown_geometry():
    with pytest.raises(ValueError):
        StateSpace(())
    with pytest.raises(ValueError):
        StateSpace((1, 2), "ring")


# ---------------------------------------------------- extended distributions


def test_initial_extend_point_mass_lands_in_alive_block():
    nu = initial_extend(np.eye(5)[0], SPACE5)
    # layout is [stopped block | alive block]
    assert nu.vec[5] == 1.0
    assert np.count_nonzero(nu.vec) == 1
    assert np.array_equal(nu.stopped, np.zeros(5))


def test_initial_extend_die_start():
    eta = np.array([0.25, 0.25, 0.0, 0.0, 0.5, 0.0])
    nu = initial_extend(eta, DIE)
    assert np.array_equal(nu.alive, eta)
    assert nu.vec.sum() == 1.0


def test_initial_extend_uniform():
    nu = initial_extend(np.full(5, 0.2), SPACE5)
    assert np.allclose(nu.alive, 0.2, atol=0)


@pytest.mark.parametrize(
    "bad",
    [
        np.array([0.5, 0.6]),
        np.array([1.5, -0.5]),
        np.array([0.2, 0.2]),
        np.array([0.5, 0.5, 0.0]),
    ],
)
def test_initial_extend_rejects_non_distributions(bad):
    with pytest.raises(ValueError):
        initial_extend(bad, SPACE2)


def test_initial_extend_renormalizes_tiny_drift():
    mu = np.array([0.5, 0.5 + 3e-10])
    nu = initial_extend(mu, SPACE2)
    assert nu.vec.sum() == pytest.approx(1.0, abs=1e-15)


def test_marginal_adds_the_two_blocks():
    nu = ExtendedDistribution(np.array([0.2, 0.0, 0.3, 0.5]), SPACE2)
    assert np.allclose(marginal(nu), [0.5, 0.5], atol=1e-15)


def test_marginal_of_fresh_extension_is_the_input():
    mu = np.array([0.1, 0.2, 0.3, 0.15, 0.25])
    assert np.allclose(marginal(initial_extend(mu, SPACE5)), mu, atol=1e-15)


def test_vector_is_read_only():
    nu = initial_extend(np.full(5, 0.2), SPACE5)
    with pytest.raises(ValueError):
        nu.vec[0] = 1.0


def test_tiny_negative_entries_clamp_to_zero():
    v = np.array([-1e-16, 1e-16 + 0.5, 0.5, 0.0])
    nu = ExtendedDistribution(v, SPACE2)
    assert nu.vec[0] == 0.0


def test_negative_entries_beyond_tolerance_rejected():
    with pytest.raises(ValueError):
        ExtendedDistribution(np.array([-1e-13, 0.5, 0.5, 1e-13]), SPACE2)


def test_mass_defect_beyond_tolerance_rejected():
    with pytest.raises(ValueError):
        ExtendedDistribution(np.array([0.0, 0.5, 0.5, 1e-11]), SPACE2)


def test_wrong_vector_length_rejected():
    with pytest.raises(ValueError):
        ExtendedDistribution(np.array([0.5, 0.5]), SPACE2)


# ------------------------------------------------------------------- sampling


def test_sample_simplex_dim_one_is_degenerate():
    assert sample_simplex(Rng(0), 1).tolist() == [1.0]


def test_sample_simplex_rejects_dim_zero():
    with pytest.raises(ValueError):
        sample_simplex(Rng(0), 0)


def test_sample_simplex_draws_are_distributions():
    rng = Rng(11)
    draws = np.array([sample_simplex(rng, 7) for _ in range(500)])
    assert draws.min() >= 0.0
    assert np.allclose(draws.sum(axis=1), 1.0, atol=1e-12)


def test_sample_simplex_coordinate_means():
    # flat Dirichlet in dimension 3: each coordinate has mean 1/3
    rng = Rng(123)
    draws = np.array([sample_simplex(rng, 3) for _ in range(100_000)])
    assert np.abs(draws.mean(axis=0) - 1.0 / 3.0).max() < 0.01


def test_sample_simplex_first_coordinate_uniform_in_dim_two():
    rng = Rng(7)
    u = np.sort([sample_simplex(rng, 2)[0] for _ in range(100_000)])
    hi = np.arange(1, u.size + 1) / u.size
    ks = max(np.abs(hi - u).max(), np.abs(u - (hi - 1.0 / u.size)).max())
    assert ks < 0.01


def test_sample_simplex_is_seed_reproducible():
    assert np.array_equal(sample_simplex(Rng(42), 6), sample_simplex(Rng(42), 6))


def test_rng_split_streams_are_stable_and_distinct():
    kids = Rng(5).split(3)
    again = Rng(5).split(3)
    draws = [k.gen.uniform(size=4) for k in kids]
    for d, k in zip(draws, again):
        assert np.array_equal(d, k.gen.uniform(size=4))
    assert not np.array_equal(draws[0], draws[1])


# ------------------------------------------------------------------ distances


def test_tv_distance_half_mass_example():
    assert tv_distance(np.array([0.5, 0.5]), np.array([1.0, 0.0])) == pytest.approx(
        0.5, abs=1e-15
    )


def test_tv_distance_disjoint_point_masses():
    p = np.eye(4)[0]
    q = np.eye(4)[3]
    assert tv_distance(p, q) == pytest.approx(1.0, abs=1e-15)


def test_l2_distance_example():
    d = l2_distance(np.array([0.5, 0.5]), np.array([1.0, 0.0]))
    assert d == pytest.approx(np.sqrt(0.5), rel=1e-15)


def test_distance_zero_on_equal_inputs():
    p = np.full(6, 1.0 / 6.0)
    assert tv_distance(p, p) == 0.0
    assert l2_distance(p, p) == 0.0


@pytest.mark.parametrize("fn", [tv_distance, l2_distance])
def test_distance_shape_mismatch_rejected(fn):
    with pytest.raises(ValueError):
        fn(np.ones(3) / 3, np.ones(4) / 4)


def test_triangle_inequality_bulk():
    gen = np.random.default_rng(0)
    pts = gen.dirichlet(np.ones(6), size=(10_000, 3))
    a, b, c = pts[:, 0], pts[:, 1], pts[:, 2]
    tv = lambda p, q: 0.5 * np.abs(p - q).sum(axis=1)
    l2 = lambda p, q: np.sqrt(((p - q) ** 2).sum(axis=1))
    assert np.all(tv(a, c) <= tv(a, b) + tv(b, c) + 1e-12)
    assert np.all(l2(a, c) <= l2(a, b) + l2(b, c) + 1e-12)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_distance_axioms_on_random_triples(seed):
    gen = np.random.default_rng(seed)
    p, q, r = gen.dirichlet(np.ones(8), size=3)
    for dist in (tv_distance, l2_distance):
        assert dist(p, q) == pytest.approx(dist(q, p), rel=1e-12)
        assert dist(p, r) <= dist(p, q) + dist(q, r) + 1e-12
        assert dist(p, q) >= 0.0
