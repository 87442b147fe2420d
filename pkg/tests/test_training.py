"""Both trainers, the shared differentiable flow, and gradient quality."""

import numpy as np
import pytest

from mfos import training
from mfos.autodiff import grad_check
from mfos.core import Rng, StateSpace
from mfos.environments import Environment, env_roll_die, env_towards_uniform_1d, make_env
from mfos.networks import NetConfig, PolicyNetwork, init_params
from mfos.training import (
    DivergenceError,
    TrainConfig,
    default_config,
    dp_stage_value,
    evaluate,
    lr_sweep,
    make_da_loss,
    train_da,
    train_dp,
)

from conftest import TINY_NET


def _tiny_cfg(env_name, algorithm, **over):
    kw = dict(batch_size=4, n_iter=6, eval_every=3, **TINY_NET)
    kw.update(over)
    return default_config(env_name, algorithm, **kw)


# ---------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(algorithm="sgd")
    with pytest.raises(ValueError):
        TrainConfig(stopping_class="mixed")
    with pytest.raises(ValueError):
        TrainConfig(n_iter=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)


def test_default_config_applies_tuned_settings():
    assert default_config("ex1", "da").n_iter == 600
    assert default_config("ex6-M", "dp").lr == pytest.approx(3e-3)
    assert default_config("ex6-O", "da").mc_paths == 8
    assert default_config("ex1", "da", n_iter=7).n_iter == 7
    # unknown env names still produce a usable config
    assert default_config("custom", "da").algorithm == "da"


# ------------------------------------------------------------- gradients


def test_line_gradients_match_finite_differences_at_the_pinned_step():
    env = make_env("ex1")
    cfg = default_config("ex1", "da", batch_size=8, k=2, width=32, demb=16)
    f, ncfg = make_da_loss(env, cfg, seed=3)
    store = init_params(ncfg, Rng(7))
    worst = max(
        grad_check(f, store, n_probes=5, step=1e-5, rng=Rng(probe_seed))
        for probe_seed in range(4)
    )
    assert worst < 1e-5


def test_congestion_gradients_flow_through_the_crowded_kernel():
    env = make_env("ex3")
    cfg = default_config("ex3", "da", batch_size=8)
    f, ncfg = make_da_loss(env, cfg, seed=0)
    assert grad_check(f, init_params(ncfg, Rng(1)), n_probes=12, step=1e-4, rng=Rng(5)) < 1e-5


def test_drone_gradients_on_frozen_noise_paths():
    env = make_env("ex6-M")
    cfg = default_config("ex6-M", "da", batch_size=8)
    f, ncfg = make_da_loss(env, cfg, seed=0)
    assert grad_check(f, init_params(ncfg, Rng(1)), n_probes=12, step=1e-4, rng=Rng(5)) < 1e-5


def test_da_loss_closure_is_deterministic():
    env = make_env("ex1")
    cfg = _tiny_cfg("ex1", "da")
    f, ncfg = make_da_loss(env, cfg, seed=1)
    store = init_params(ncfg, Rng(2))
    l1, g1 = f(store)
    l2, g2 = f(store)
    assert l1 == l2
    assert all(np.array_equal(g1[name], g2[name]) for name in g1)


# ------------------------------------------------------------- evaluation


def test_evaluate_untrained_line_network_is_a_valid_cost():
    env = make_env("ex1")
    net = PolicyNetwork.init(NetConfig("async", 5), Rng(0))
    val = evaluate(env, net)
    assert 0.0 <= val <= 1.0


def test_evaluate_hand_coded_die_rules_hits_the_optimum():
    env = make_env("ex2")
    rules = np.zeros((6, 6))
    rules[0, 0] = 1.0
    rules[1:4, :2] = 1.0
    rules[4, :3] = 1.0
    rules[5, :] = 1.0
    val = evaluate(env, lambda n, nu: rules[n])
    assert val == pytest.approx(119.0 / 72.0, abs=1e-12)


def test_evaluate_accepts_an_initial_distribution_override():
    env = make_env("ex2")
    stop_now = lambda n, nu: np.ones(6)
    assert evaluate(env, stop_now, mu0=np.eye(6)[2]) == pytest.approx(3.0, abs=1e-13)
    assert evaluate(env, stop_now) == pytest.approx(3.25, abs=1e-13)


# ------------------------------------------------------------ direct approach


def test_train_da_requires_a_da_config():
    with pytest.raises(ValueError):
        train_da(make_env("ex1"), _tiny_cfg("ex1", "dp"))


def test_train_da_is_bitwise_reproducible():
    env = make_env("ex1")
    cfg = _tiny_cfg("ex1", "da", seed=9)
    net1, rep1 = train_da(env, cfg)
    net2, rep2 = train_da(env, cfg)
    assert rep1.train_losses == rep2.train_losses
    assert rep1.evals == rep2.evals
    for name, value in net1.params.items():
        assert np.array_equal(value, net2.params[name])


def test_train_da_seeds_differ():
    env = make_env("ex1")
    _, rep1 = train_da(env, _tiny_cfg("ex1", "da", seed=0))
    _, rep2 = train_da(env, _tiny_cfg("ex1", "da", seed=1))
    assert rep1.train_losses != rep2.train_losses


def test_train_da_report_shape():
    env = make_env("ex1")
    cfg = _tiny_cfg("ex1", "da", n_iter=7, eval_every=3)
    net, rep = train_da(env, cfg)
    assert len(rep.train_losses) == 7
    assert [it for it, _ in rep.evals] == [3, 6, 7]
    assert rep.final_test == rep.evals[-1][1]
    assert rep.final_test == evaluate(env, net)
    assert rep.stage is None and rep.algorithm == "da"


def test_final_test_respects_the_evaluation_start_override():
    env = make_env("ex1")
    mu0 = (0.2, 0.2, 0.2, 0.2, 0.2)
    cfg = _tiny_cfg("ex1", "da", eval_mu0=mu0)
    net, rep = train_da(env, cfg)
    assert rep.final_test == evaluate(env, net, mu0=np.array(mu0))


def test_frozen_batch_descent_is_mostly_monotone():
    env = make_env("ex1")
    cfg = default_config(
        "ex1", "da", n_iter=200, batch_size=8, resample=False, eval_every=200,
        lr=1e-3, k=1, width=16, demb=8, sin_dim=8, groups=4,
    )
    _, rep = train_da(env, cfg)
    losses = np.array(rep.train_losses)
    drops = losses[50:] <= losses[:-50]
    assert drops.mean() >= 0.9


def test_train_da_flags_divergence(monkeypatch):
    env = make_env("ex1")
    cfg = _tiny_cfg("ex1", "da")

    def exploding(env_, net, mus0, noise_paths):
        grads = {name: np.zeros_like(v) for name, v in net.params.items()}
        return float("nan"), grads

    monkeypatch.setattr(training, "da_loss_and_grads", exploding)
    with pytest.raises(DivergenceError):
        train_da(env, cfg)


def test_train_da_wraps_optimizer_blowups(monkeypatch):
    env = make_env("ex1")
    cfg = _tiny_cfg("ex1", "da")

    def poisoned(env_, net, mus0, noise_paths):
        grads = {name: np.full_like(v, np.inf) for name, v in net.params.items()}
        return 1.0, grads

    monkeypatch.setattr(training, "da_loss_and_grads", poisoned)
    with pytest.raises(DivergenceError):
        train_da(env, cfg)


# --------------------------------------------------------- dynamic programming


def test_train_dp_requires_a_dp_config():
    with pytest.raises(ValueError):
        train_dp(make_env("ex1"), _tiny_cfg("ex1", "da"))


def test_train_dp_returns_one_untimed_network_per_stage():
    env = env_towards_uniform_1d(horizon=3, n_states=4)
    nets, reports = train_dp(env, _tiny_cfg("ex1", "dp", n_iter=4))
    assert len(nets) == 3 and len(reports) == 3
    assert all(not net.cfg.time_conditioned for net in nets)
    assert [rep.stage for rep in reports] == [0, 1, 2]


def test_dp_stage_zero_value_matches_the_rollout_evaluation():
    env = env_towards_uniform_1d(horizon=3, n_states=4)
    nets, _ = train_dp(env, _tiny_cfg("ex1", "dp", n_iter=4, seed=2))
    assert dp_stage_value(env, nets, 0) == pytest.approx(evaluate(env, nets), abs=1e-12)


def test_train_dp_is_bitwise_reproducible():
    env = env_towards_uniform_1d(horizon=2, n_states=3)
    cfg = _tiny_cfg("ex1", "dp", n_iter=4, seed=5)
    nets1, reps1 = train_dp(env, cfg)
    nets2, reps2 = train_dp(env, cfg)
    for a, b in zip(nets1, nets2):
        assert all(np.array_equal(v, b.params[name]) for name, v in a.params.items())
    assert [r.train_losses for r in reps1] == [r.train_losses for r in reps2]


def test_dp_trains_backwards_and_never_touches_finished_stages(monkeypatch):
    env = env_towards_uniform_1d(horizon=3, n_states=4)
    cfg = _tiny_cfg("ex1", "dp", n_iter=4)
    real = training.adamw_step
    touched = []
    snapshots = []
    current = [None]

    def spy(store, grads, state, *args, **kwargs):
        if current[0] is not None and current[0] is not store:
            snapshots.append((current[0], {n: v.copy() for n, v in current[0].items()}))
        current[0] = store
        touched.append(store)
        return real(store, grads, state, *args, **kwargs)

    monkeypatch.setattr(training, "adamw_step", spy)
    nets, _ = train_dp(env, cfg)

    expected = []
    for stage in reversed(range(3)):
        expected.extend([nets[stage].params] * cfg.n_iter)
    assert [id(s) for s in touched] == [id(s) for s in expected]
    # a stage finished earlier is bitwise frozen for the rest of the run
    assert len(snapshots) == 2
    for store, saved in snapshots:
        for name, value in saved.items():
            assert np.array_equal(store[name], value)


def test_dp_zero_cost_stages_have_zero_loss_and_only_decay_drift():
    n = 3
    space = StateSpace((0, 1, 2))
    env = Environment(
        "flat", space, 2, lambda m, mu, z: np.eye(n), lambda mu: np.zeros(n),
        np.array([1.0, 0.0, 0.0]),
    )
    cfg = _tiny_cfg("ex1", "dp", n_iter=5, seed=3)
    nets, reports = train_dp(env, cfg)
    assert all(loss == 0.0 for rep in reports for loss in rep.train_losses)

    shrink = cfg.lr * cfg.weight_decay
    stage_rngs = Rng(cfg.seed).split(env.horizon)
    for stage, net in enumerate(nets):
        init_rng = stage_rngs[stage].split(3)[0]
        expect = init_params(net.cfg, init_rng)
        for _ in range(cfg.n_iter):
            for name in expect.names():
                expect[name] = expect[name] - shrink * expect[name]
        for name in expect.names():
            assert np.array_equal(net.params[name], expect[name])


# ----------------------------------------------------------------- lr sweep


def test_lr_sweep_singleton_matches_a_plain_run():
    env = make_env("ex1")
    cfg = _tiny_cfg("ex1", "da", seed=4)
    sweep = lr_sweep(env, "da", [cfg.lr], cfg)
    _, plain = train_da(env, cfg)
    report = sweep[cfg.lr]
    assert report.train_losses == plain.train_losses
    assert report.final_test == plain.final_test


def test_lr_sweep_rejects_an_empty_grid():
    with pytest.raises(ValueError):
        lr_sweep(make_env("ex1"), "da", [], _tiny_cfg("ex1", "da"))


def test_lr_sweep_covers_dp():
    env = env_towards_uniform_1d(horizon=2, n_states=3)
    out = lr_sweep(env, "dp", [1e-3, 1e-2], _tiny_cfg("ex1", "dp", n_iter=3))
    assert set(out) == {1e-3, 1e-2}
    assert all(len(reports) == 2 for reports in out.values())
