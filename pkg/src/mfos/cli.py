"""Command-line surface: training runs, oracles, evaluation, simulation, studies.

Every command resolves its settings from (in increasing precedence) built-in
per-environment defaults, an optional flat `key = value` config file, and
command-line flags, then writes a manifest echoing the resolved settings into
the output directory.  The manifest is itself a valid config file, so
`mfos <command> --config <out>/manifest.txt` reproduces the run.  Exit codes:
0 success, 1 configuration problem, 2 numeric divergence during training.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from mfos.core import Rng, initial_extend
from mfos.environments import ENVIRONMENTS, make_env
from mfos.meanfield import rollout
from mfos.nagent import convergence_study, simulate
from mfos.networks import coerce_policy, load_checkpoint, save_checkpoint
from mfos.oracles import grid_search_policy, single_agent_dpp
from mfos.reporting import (svg_bar_chart, svg_heatmaps, svg_line_chart, write_csv,
                            write_evolution_csv, write_rules_csv, write_study_csv,
                            write_train_report_csv)
from mfos.training import (DivergenceError, default_config, evaluate, lr_sweep,
                           train_da, train_dp)


class ConfigError(Exception):
    """Bad key, bad value, unknown environment: anything exit-code-1 worthy."""


_BOOLS = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}

# Every key any command understands; config files may only use these.
_KEY_TYPES = {
    "env": str, "algorithm": str, "stopping_class": str, "n_iter": int, "batch": int,
    "lr": float, "seed": int, "mc_paths": int, "eval_every": int, "threads": int,
    "k": int, "width": int, "demb": int, "sin_dim": int, "groups": int,
    "weight_decay": float, "resample": bool, "out": str, "checkpoint": str,
    "n_agents": int, "ns": str, "reps": int, "resolution": int, "method": str,
    "lrs": str, "mu0": str,
}
# config-file key -> TrainConfig field
_TRAIN_FIELDS = {
    "algorithm": "algorithm", "stopping_class": "stopping_class", "n_iter": "n_iter",
    "batch": "batch_size", "lr": "lr", "seed": "seed", "mc_paths": "mc_paths",
    "eval_every": "eval_every", "threads": "threads", "k": "k", "width": "width",
    "demb": "demb", "sin_dim": "sin_dim", "groups": "groups",
    "weight_decay": "weight_decay", "resample": "resample",
}


def _convert(key: str, raw: str):
    typ = _KEY_TYPES[key]
    try:
        if typ is bool:
            return _BOOLS[raw.strip().lower()]
        return typ(raw.strip())
    except (ValueError, KeyError) as err:
        raise ConfigError(f"bad value for '{key}': {raw!r}") from err


def parse_config_file(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in _KEY_TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown key '{key}' (known: {', '.join(sorted(_KEY_TYPES))})")
            out[key] = _convert(key, raw)
    return out


def _resolve(args, keys: list) -> dict:
    """Merge config file and flags for the listed keys (flags win)."""
    settings = parse_config_file(args.config) if getattr(args, "config", None) else {}
    settings = {k: v for k, v in settings.items() if k in keys}
    for key in keys:
        flag = getattr(args, key, None)
        if flag is not None:
            settings[key] = _convert(key, str(flag)) if isinstance(flag, str) else flag
    return settings


def _require_env(settings: dict) -> str:
    name = settings.get("env")
    if name not in ENVIRONMENTS:
        raise ConfigError(f"unknown env {name!r}; valid: {', '.join(sorted(ENVIRONMENTS))}")
    return name


def _threads(settings: dict) -> int:
    if "threads" in settings:
        return settings["threads"]
    env_var = os.environ.get("MFOS_THREADS")
    if env_var:
        try:
            return max(1, int(env_var))
        except ValueError as err:
            raise ConfigError(f"MFOS_THREADS must be an integer, got {env_var!r}") from err
    return os.cpu_count() or 1


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def write_manifest(out_dir: str, command: str, resolved: dict) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "manifest.txt")
    with open(path, "w") as fh:
        fh.write(f"# mfos {command} manifest; pass to --config to reproduce this run\n")
        for key, value in resolved.items():
            fh.write(f"{key} = {_fmt_value(value)}\n")
    return path


def _load_policy(path: str):
    """A checkpoint file holds one network; a directory holds dp stage files."""
    if os.path.isdir(path):
        files = sorted(f for f in os.listdir(path) if f.startswith("stage") and f.endswith(".npz"))
        if not files:
            raise ConfigError(f"no stage*.npz checkpoints in {path}")
        return [load_checkpoint(os.path.join(path, f))[0] for f in files]
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(path)[0]


def _snapshot_times(horizon: int):
    if horizon <= 8:
        return list(range(horizon + 1))
    times = list(range(0, horizon + 1, 5))
    if times[-1] != horizon:
        times.append(horizon)
    return times


def _write_policy_artifacts(out: str, env, policy, seed: int) -> None:
    """Distribution evolution of the trained policy: CSV always, bars or heatmaps."""
    rng = Rng(seed) if env.noise is not None else None
    policy = coerce_policy(policy, env.horizon)
    traj = rollout(env, policy, initial_extend(env.default_initial, env.space), rng=rng)
    write_evolution_csv(os.path.join(out, "evolution.csv"), env, traj)
    grid = env.space.geometry != "1d-line"
    for t in _snapshot_times(env.horizon):
        dist = traj.distributions[t]
        if grid:
            _, w, h = env.space.geometry
            panels = [("stopped", dist.stopped.reshape(h, w)), ("alive", dist.alive.reshape(h, w))]
            if t < env.horizon:
                panels.append(("stop probability", np.asarray(traj.rules[t]).reshape(h, w)))
            svg_heatmaps(os.path.join(out, f"evolution_t{t:03d}.svg"), panels,
                         title=f"{env.name} distribution at step {t}")
        else:
            svg_bar_chart(os.path.join(out, f"evolution_t{t:03d}.svg"), list(env.space.labels),
                          [("stopped", dist.stopped), ("alive", dist.alive)],
                          title=f"{env.name} distribution at step {t}", ylabel="mass")


def _loss_curve(out: str, reports) -> None:
    if not isinstance(reports, (list, tuple)):
        rep = reports
        series = [("train loss", np.arange(1, len(rep.train_losses) + 1), rep.train_losses)]
        if rep.evals:
            series.append(("test cost", [e[0] for e in rep.evals], [e[1] for e in rep.evals]))
        svg_line_chart(os.path.join(out, "loss_curve.svg"), series,
                       title=f"{rep.env} {rep.algorithm} training", xlabel="iteration", ylabel="cost")
        return
    if len(reports) <= 8:
        series = [(f"stage {rep.stage}", np.arange(1, len(rep.train_losses) + 1), rep.train_losses)
                  for rep in reports]
        svg_line_chart(os.path.join(out, "loss_curve.svg"), series,
                       title=f"{reports[0].env} dp training", xlabel="iteration", ylabel="cost-to-go")
    else:
        svg_line_chart(os.path.join(out, "loss_curve.svg"),
                       [("final stage test value", [rep.stage for rep in reports],
                         [rep.final_test for rep in reports])],
                       title=f"{reports[0].env} dp stage values", xlabel="stage", ylabel="cost-to-go")


def cmd_train(args) -> int:
    keys = ["env", "algorithm", "stopping_class", "out", *(_TRAIN_FIELDS)]
    settings = _resolve(args, sorted(set(keys)))
    env_name = _require_env(settings)
    algorithm = settings.get("algorithm", "da")
    if algorithm not in ("da", "dp"):
        raise ConfigError(f"algorithm must be 'da' or 'dp', got {algorithm!r}")
    stopping_class = settings.get("stopping_class", "async")
    overrides = {_TRAIN_FIELDS[k]: v for k, v in settings.items() if k in _TRAIN_FIELDS
                 and k not in ("algorithm", "stopping_class")}
    overrides["threads"] = _threads(settings)
    try:
        config = default_config(env_name, algorithm, stopping_class, **overrides)
    except (ValueError, TypeError) as err:
        raise ConfigError(str(err)) from err
    env = make_env(env_name)
    out = settings.get("out") or f"runs/train-{env_name}-{algorithm}-{stopping_class}-seed{config.seed}"
    manifest = {"env": env_name, "algorithm": algorithm, "stopping_class": stopping_class,
                **{k: getattr(config, f) for k, f in _TRAIN_FIELDS.items()
                   if k not in ("algorithm", "stopping_class")},
                "out": out}
    write_manifest(out, "train", manifest)
    if algorithm == "da":
        net, report = train_da(env, config)
        save_checkpoint(os.path.join(out, "checkpoint.npz"), net)
        write_train_report_csv(os.path.join(out, "train_report.csv"), report)
        _loss_curve(out, report)
        policy = net
        final = report.final_test
    else:
        nets, reports = train_dp(env, config)
        for stage, net in enumerate(nets):
            save_checkpoint(os.path.join(out, f"stage{stage:02d}.npz"), net)
        write_train_report_csv(os.path.join(out, "train_report.csv"), reports)
        _loss_curve(out, reports)
        policy = nets
        final = reports[0].final_test if reports else float("nan")
    _write_policy_artifacts(out, env, policy, config.seed)
    print(f"train: {env_name} {algorithm}/{stopping_class} final test cost {final:.6f} -> {out}")
    return 0


def cmd_oracle(args) -> int:
    settings = _resolve(args, ["env", "method", "resolution", "stopping_class", "out"])
    env_name = _require_env(settings)
    env = make_env(env_name)
    method = settings.get("method", "auto")
    if method not in ("auto", "dpp", "grid"):
        raise ConfigError(f"method must be auto, dpp, or grid, got {method!r}")
    if method == "auto":
        method = "dpp" if env.mean_field_free else "grid"
    out = settings.get("out") or f"runs/oracle-{env_name}-{method}"
    stopping_class = settings.get("stopping_class", "async")
    resolution = settings.get("resolution", 10)
    manifest = {"env": env_name, "method": method, "resolution": resolution,
                "stopping_class": stopping_class, "out": out}
    write_manifest(out, "oracle", manifest)
    if method == "dpp":
        res = single_agent_dpp(env)
        write_rules_csv(os.path.join(out, "oracle_rules.csv"), env, res.rules, res.value)
        print(f"oracle: {env_name} single-agent dpp value {res.value:.6f}")
        for step, rule in enumerate(res.rules):
            print(f"  p_{step} = {np.asarray(rule).astype(int).tolist()}")
    else:
        value, point = grid_search_policy(env, resolution=resolution, stopping_class=stopping_class)
        rules = list(point) if point.ndim == 2 else [np.full(env.space.n, v) for v in point]
        rules.append(np.ones(env.space.n))
        write_rules_csv(os.path.join(out, "oracle_rules.csv"), env, rules, value)
        print(f"oracle: {env_name} grid search (M={resolution}, {stopping_class}) value {value:.6f}")
    return 0


def _parse_mu0(settings, env):
    if "mu0" not in settings:
        return None
    try:
        mu0 = np.array([float(v) for v in settings["mu0"].split(",")])
    except ValueError as err:
        raise ConfigError(f"mu0 must be comma-separated reals, got {settings['mu0']!r}") from err
    if mu0.size != env.space.n:
        raise ConfigError(f"mu0 has {mu0.size} entries, {env.name} needs {env.space.n}")
    return mu0


def cmd_eval(args) -> int:
    settings = _resolve(args, ["env", "checkpoint", "mc_paths", "seed", "threads", "mu0", "out"])
    env_name = _require_env(settings)
    env = make_env(env_name)
    if "checkpoint" not in settings:
        raise ConfigError("eval needs --checkpoint")
    policy = _load_policy(settings["checkpoint"])
    seed = settings.get("seed", 0)
    mc_paths = settings.get("mc_paths", 32 if env.noise is not None else 1)
    mu0 = _parse_mu0(settings, env)
    out = settings.get("out") or f"runs/eval-{env_name}"
    manifest = {"env": env_name, "checkpoint": settings["checkpoint"], "mc_paths": mc_paths,
                "seed": seed, "out": out}
    if mu0 is not None:
        manifest["mu0"] = settings["mu0"]
    write_manifest(out, "eval", manifest)
    value = evaluate(env, policy, mu0=mu0, mc_paths=mc_paths, seed=seed, threads=_threads(settings))
    write_csv(os.path.join(out, "eval.csv"), "eval", ["env", "value", "mc_paths", "seed"],
              [(env_name, value, mc_paths, seed)])
    print(f"eval: {env_name} cost {value:.6f}")
    return 0


def cmd_simulate(args) -> int:
    settings = _resolve(args, ["env", "checkpoint", "n_agents", "seed", "out"])
    env_name = _require_env(settings)
    env = make_env(env_name)
    if "checkpoint" not in settings:
        raise ConfigError("simulate needs --checkpoint")
    policy = _load_policy(settings["checkpoint"])
    n_agents = settings.get("n_agents", 1000)
    seed = settings.get("seed", 0)
    out = settings.get("out") or f"runs/simulate-{env_name}-N{n_agents}-seed{seed}"
    write_manifest(out, "simulate", {"env": env_name, "checkpoint": settings["checkpoint"],
                                     "n_agents": n_agents, "seed": seed, "out": out})
    result = simulate(env, policy, n_agents, Rng(seed))
    rows = []
    for t in range(env.horizon + 1):
        for x in range(env.space.n):
            rows.append((t, env.space.labels[x], result.empirical_extended[t, x],
                         result.empirical_extended[t, env.space.n + x]))
    write_csv(os.path.join(out, "empirical.csv"), "empirical", ["time", "state", "stopped", "alive"], rows)
    write_csv(os.path.join(out, "realized.csv"), "realized",
              ["env", "n_agents", "seed", "realized_cost"], [(env_name, n_agents, seed, result.realized_cost)])
    print(f"simulate: {env_name} N={n_agents} realized cost {result.realized_cost:.6f}")
    return 0


def cmd_converge(args) -> int:
    settings = _resolve(args, ["env", "checkpoint", "ns", "reps", "seed", "threads", "out"])
    env_name = _require_env(settings)
    env = make_env(env_name)
    if "checkpoint" not in settings:
        raise ConfigError("converge needs --checkpoint")
    policy = _load_policy(settings["checkpoint"])
    try:
        ns = tuple(int(v) for v in str(settings.get("ns", "10,100,1000,10000")).split(","))
    except ValueError as err:
        raise ConfigError(f"ns must be comma-separated integers, got {settings['ns']!r}") from err
    reps = settings.get("reps", 10)
    seed = settings.get("seed", 0)
    out = settings.get("out") or f"runs/converge-{env_name}"
    write_manifest(out, "converge", {"env": env_name, "checkpoint": settings["checkpoint"],
                                     "ns": ",".join(str(n) for n in ns), "reps": reps,
                                     "seed": seed, "out": out})
    try:
        study = convergence_study(env, policy, ns, reps=reps, rng=Rng(seed), threads=_threads(settings))
    except ValueError as err:
        raise ConfigError(str(err)) from err
    write_study_csv(os.path.join(out, "study.csv"), study)
    svg_line_chart(os.path.join(out, "converge_l2.svg"),
                   [("mean L2 over times", study.ns, study.mean_l2.mean(axis=1))],
                   title=f"{env_name}: empirical flow vs exact flow", xlabel="N agents",
                   ylabel="mean L2 distance", log_x=True, log_y=True)
    svg_line_chart(os.path.join(out, "converge_gap.svg"),
                   [("mean |realized - J|", study.ns, study.mean_cost_gap)],
                   title=f"{env_name}: cost gap", xlabel="N agents", ylabel="mean cost gap",
                   log_x=True, log_y=True)
    print(f"converge: {env_name} log-log L2 slope {study.slope:.3f} (exact J {study.exact_cost:.6f})")
    return 0


def cmd_sweep(args) -> int:
    keys = ["env", "algorithm", "stopping_class", "lrs", "out", *(_TRAIN_FIELDS)]
    settings = _resolve(args, sorted(set(keys)))
    env_name = _require_env(settings)
    algorithm = settings.get("algorithm", "da")
    stopping_class = settings.get("stopping_class", "async")
    try:
        lrs = [float(v) for v in str(settings.get("lrs", "1e-2,1e-3,1e-4")).split(",")]
    except ValueError as err:
        raise ConfigError(f"lrs must be comma-separated reals, got {settings['lrs']!r}") from err
    overrides = {_TRAIN_FIELDS[k]: v for k, v in settings.items() if k in _TRAIN_FIELDS
                 and k not in ("algorithm", "stopping_class", "lr")}
    overrides["threads"] = _threads(settings)
    try:
        config = default_config(env_name, algorithm, stopping_class, **overrides)
    except (ValueError, TypeError) as err:
        raise ConfigError(str(err)) from err
    env = make_env(env_name)
    out = settings.get("out") or f"runs/sweep-{env_name}-{algorithm}"
    write_manifest(out, "sweep", {"env": env_name, "algorithm": algorithm,
                                  "stopping_class": stopping_class,
                                  "lrs": ",".join(f"{lr:g}" for lr in lrs),
                                  "seed": config.seed, "n_iter": config.n_iter, "out": out})
    results = lr_sweep(env, algorithm, lrs, config)
    rows = []
    for lr, rep in results.items():
        reps = rep if isinstance(rep, list) else [rep]
        for one in reps:
            evals = dict(one.evals)
            rows.extend((lr, one.stage if one.stage is not None else "", i + 1, loss, evals.get(i + 1))
                        for i, loss in enumerate(one.train_losses))
        tag = f"{lr:g}".replace("-", "m").replace(".", "p")
        first = reps[0]
        series = [(f"lr={lr:g} train", np.arange(1, len(first.train_losses) + 1), first.train_losses)]
        if first.evals:
            series.append(("test cost", [e[0] for e in first.evals], [e[1] for e in first.evals]))
        svg_line_chart(os.path.join(out, f"loss_curve_lr{tag}.svg"), series,
                       title=f"{env_name} {algorithm} lr={lr:g}", xlabel="iteration", ylabel="cost")
    write_csv(os.path.join(out, "sweep.csv"), "sweep",
              ["lr", "stage", "iteration", "train_loss", "test_loss"], rows)
    finals = {lr: (rep.final_test if not isinstance(rep, list) else rep[0].final_test)
              for lr, rep in results.items()}
    summary = "  ".join(f"lr={lr:g}: {v:.6f}" for lr, v in finals.items())
    print(f"sweep: {env_name} {algorithm} final test costs  {summary}")
    return 0


def _add_common(sub, *names):
    flags = {
        "config": lambda: sub.add_argument("--config", help="flat key = value config file"),
        "env": lambda: sub.add_argument("--env", help="environment name"),
        "seed": lambda: sub.add_argument("--seed", type=int, default=None),
        "threads": lambda: sub.add_argument("--threads", type=int, default=None,
                                            help="worker threads (or MFOS_THREADS)"),
        "out": lambda: sub.add_argument("--out", default=None, help="output directory"),
        "checkpoint": lambda: sub.add_argument("--checkpoint", default=None,
                                               help="checkpoint file (da) or directory of stage files (dp)"),
    }
    for name in names:
        flags[name]()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfos", description="Mean-field optimal stopping toolkit")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("train", help="train a stopping policy")
    _add_common(p, "config", "env", "seed", "threads", "out")
    p.add_argument("--algo", dest="algorithm", choices=["da", "dp"], default=None)
    p.add_argument("--class", dest="stopping_class", choices=["async", "sync"], default=None)
    p.add_argument("--n-iter", dest="n_iter", type=int, default=None)
    p.add_argument("--batch", dest="batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--mc-paths", dest="mc_paths", type=int, default=None)
    p.add_argument("--eval-every", dest="eval_every", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("oracle", help="ground-truth value for an environment")
    _add_common(p, "config", "env", "out")
    p.add_argument("--method", choices=["auto", "dpp", "grid"], default=None)
    p.add_argument("--resolution", type=int, default=None, help="grid points per dimension")
    p.add_argument("--class", dest="stopping_class", choices=["async", "sync"], default=None)
    p.set_defaults(func=cmd_oracle)

    p = subs.add_parser("eval", help="cost of a trained policy")
    _add_common(p, "config", "env", "seed", "threads", "out", "checkpoint")
    p.add_argument("--mc-paths", dest="mc_paths", type=int, default=None)
    p.add_argument("--mu0", default=None, help="comma-separated initial distribution")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("simulate", help="finite-population run under a trained policy")
    _add_common(p, "config", "env", "seed", "out", "checkpoint")
    p.add_argument("--n-agents", dest="n_agents", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = subs.add_parser("converge", help="empirical-vs-exact convergence study")
    _add_common(p, "config", "env", "seed", "threads", "out", "checkpoint")
    p.add_argument("--Ns", "--ns", dest="ns", default=None, help="comma-separated population sizes")
    p.add_argument("--reps", type=int, default=None)
    p.set_defaults(func=cmd_converge)

    p = subs.add_parser("sweep", help="learning-rate sweep")
    _add_common(p, "config", "env", "seed", "threads", "out")
    p.add_argument("--algo", dest="algorithm", choices=["da", "dp"], default=None)
    p.add_argument("--class", dest="stopping_class", choices=["async", "sync"], default=None)
    p.add_argument("--lrs", default=None, help="comma-separated learning rates")
    p.add_argument("--n-iter", dest="n_iter", type=int, default=None)
    p.add_argument("--batch", dest="batch", type=int, default=None)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config: {err}", file=sys.stderr)
        return 1
    except DivergenceError as err:
        print(f"train: {err}", file=sys.stderr)
        return 2
    except ValueError as err:
        print(f"config: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
