"""Residual stopping-policy networks and their checkpoints."""

import numpy as np
import pytest

from mfos import autodiff as ad
from mfos.core import Rng, initial_extend
from mfos.environments import env_roll_die
from mfos.networks import (
    CHECKPOINT_FORMAT,
    NetConfig,
    PolicyNetwork,
    coerce_policy,
    expected_param_count,
    forward_batch,
    forward_rule,
    init_params,
    load_checkpoint,
    save_checkpoint,
    sin_embed,
)
from mfos.autodiff import AdamWState, adamw_step

from conftest import TINY_NET

TINY = NetConfig("async", 5, **TINY_NET)


def _tiny(mode="async", n_states=5, **over):
    kw = dict(TINY_NET)
    kw.update(over)
    return NetConfig(mode, n_states, **kw)


# -------------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ValueError):
        NetConfig("both", 5)
    with pytest.raises(ValueError):
        NetConfig("async", 5, width=10, groups=4)
    with pytest.raises(ValueError):
        NetConfig("async", 5, sin_dim=7)
    with pytest.raises(ValueError):
        NetConfig("async", 0)


def test_input_width_includes_the_state_embedding_only_in_async_mode():
    assert _tiny("async").in_dim == 10 + TINY_NET["demb"]
    assert _tiny("sync").in_dim == 10


@pytest.mark.parametrize(
    "cfg",
    [
        _tiny("async"),
        _tiny("sync"),
        _tiny("async", time_conditioned=False),
        _tiny("sync", n_states=12, k=2, width=16, groups=4),
        NetConfig("async", 6),  # the full-size default
    ],
    ids=["async", "sync", "untimed", "wide", "default"],
)
def test_parameter_count_formula_matches_the_store(cfg):
    store = init_params(cfg, Rng(0))
    assert store.n_params() == expected_param_count(cfg)


def test_init_is_seed_reproducible():
    a = init_params(TINY, Rng(4))
    b = init_params(TINY, Rng(4))
    assert all(np.array_equal(v, b[name]) for name, v in a.items())
    c = init_params(TINY, Rng(5))
    assert any(not np.array_equal(v, c[name]) for name, v in a.items())


def test_biases_start_at_zero_and_gains_at_one():
    store = init_params(TINY, Rng(0))
    assert np.array_equal(store["in.b"], np.zeros(TINY.width))
    assert np.array_equal(store["gn.gain"], np.ones(TINY.width))


# ------------------------------------------------------------------- forward


def test_all_zero_parameters_emit_one_half_everywhere():
    net = PolicyNetwork.init(TINY, Rng(0))
    for name, value in net.params.items():
        net.params[name] = np.zeros_like(value)
    out = forward_rule(net, 2, np.concatenate([np.zeros(5), np.eye(5)[0]]))
    assert np.array_equal(out, np.full(5, 0.5))


def test_outputs_stay_inside_the_unit_interval():
    cfg = _tiny("async", n_states=4, width=16, groups=4, demb=8)
    net = PolicyNetwork.init(cfg, Rng(3))
    nus = np.random.default_rng(0).dirichlet(np.ones(8), size=10_000)
    probs = forward_batch(net.params.as_dict(), cfg, 3, nus)
    assert probs.shape == (10_000, 4)
    assert probs.min() > 0.0 and probs.max() < 1.0


def test_sync_mode_emits_one_shared_probability():
    cfg = _tiny("sync")
    net = PolicyNetwork.init(cfg, Rng(1))
    nus = np.random.default_rng(1).dirichlet(np.ones(10), size=7)
    out = forward_batch(net.params.as_dict(), cfg, 0, nus)
    assert out.shape == (7,)
    rule = forward_rule(net, 0, nus[0])
    assert isinstance(rule, float)
    assert rule == out[0]


def test_time_conditioning_changes_the_output():
    net = PolicyNetwork.init(TINY, Rng(2))
    nu = np.concatenate([np.zeros(5), np.full(5, 0.2)])
    assert not np.array_equal(forward_rule(net, 0, nu), forward_rule(net, 3, nu))


def test_untimed_network_ignores_the_step_index():
    net = PolicyNetwork.init(_tiny("async", time_conditioned=False), Rng(2))
    nu = np.concatenate([np.zeros(5), np.full(5, 0.2)])
    assert np.array_equal(forward_rule(net, 0, nu), forward_rule(net, 3, nu))


def test_forward_rule_checks_the_input_length():
    net = PolicyNetwork.init(TINY, Rng(0))
    with pytest.raises(ValueError):
        forward_rule(net, 0, np.zeros(5))


def test_forward_rule_accepts_extended_distributions():
    env = env_roll_die()
    net = PolicyNetwork.init(_tiny("async", n_states=6), Rng(0))
    nu = initial_extend(env.default_initial, env.space)
    assert np.array_equal(forward_rule(net, 1, nu), forward_rule(net, 1, nu.vec))


def test_forward_batch_rows_match_single_evaluations():
    cfg = _tiny("async")
    net = PolicyNetwork.init(cfg, Rng(6))
    nus = np.random.default_rng(2).dirichlet(np.ones(10), size=5)
    batch = forward_batch(net.params.as_dict(), cfg, 2, nus)
    for i in range(5):
        assert np.allclose(batch[i], forward_rule(net, 2, nus[i]), atol=1e-13)


def test_forward_tape_path_matches_plain_path():
    cfg = _tiny("async")
    net = PolicyNetwork.init(cfg, Rng(7))
    nus = np.random.default_rng(3).dirichlet(np.ones(10), size=6)
    plain = forward_batch(net.params.as_dict(), cfg, 1, nus)
    tape = ad.Tape()
    out = forward_batch(net.params.inject(tape), cfg, 1, tape.leaf(nus))
    assert np.array_equal(out.value, plain)


def test_sin_embed_shape_and_range():
    emb = sin_embed(3, 8)
    assert emb.shape == (8, 1)
    assert np.abs(emb).max() <= 1.0
    assert not np.array_equal(sin_embed(1, 8), sin_embed(2, 8))


# ------------------------------------------------------------------ policies


def test_coerce_accepts_networks_lists_and_callables():
    env = env_roll_die(horizon=3)
    net = PolicyNetwork.init(_tiny("async", n_states=6), Rng(0))
    nu = initial_extend(env.default_initial, env.space)
    as_net = coerce_policy(net, env.horizon)
    assert np.array_equal(as_net(1, nu), forward_rule(net, 1, nu))
    stages = [PolicyNetwork.init(_tiny("async", n_states=6, time_conditioned=False), Rng(i)) for i in range(3)]
    as_list = coerce_policy(stages, env.horizon)
    assert np.array_equal(as_list(2, nu), forward_rule(stages[2], 2, nu))
    fn = lambda n, nu: np.zeros(6)
    assert coerce_policy(fn, env.horizon) is fn


def test_coerce_rejects_wrong_stage_counts_and_non_policies():
    net = PolicyNetwork.init(_tiny("async", n_states=6), Rng(0))
    with pytest.raises(ValueError):
        coerce_policy([net, net], 3)
    with pytest.raises(ValueError):
        coerce_policy("stop", 3)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    net = PolicyNetwork.init(TINY, Rng(11))
    state = AdamWState()
    grads = {name: np.full_like(v, 0.01) for name, v in net.params.items()}
    adamw_step(net.params, grads, state, lr=1e-3)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, net, state)
    loaded, opt = load_checkpoint(path)
    assert loaded.cfg == net.cfg
    for name, value in net.params.items():
        assert np.array_equal(loaded.params[name], value)
    assert opt.t == 1
    for name in state.m:
        assert np.array_equal(opt.m[name], state.m[name])
        assert np.array_equal(opt.v[name], state.v[name])


def test_checkpoint_without_optimizer_state(tmp_path):
    net = PolicyNetwork.init(_tiny("sync"), Rng(0))
    path = tmp_path / "plain.npz"
    save_checkpoint(path, net)
    loaded, opt = load_checkpoint(path)
    assert opt is None
    assert loaded.cfg.mode == "sync"


def test_checkpoint_format_marker_is_checked(tmp_path):
    path = tmp_path / "bad.npz"
    np.savez(path, format=np.array("mfos-checkpoint-v0"))
    with pytest.raises(ValueError, match="format"):
        load_checkpoint(path)
    assert CHECKPOINT_FORMAT.endswith("v1")
