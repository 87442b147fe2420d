"""Asynchronous vs synchronous stopping on the die problems (ex2, ex3).

Letting states stop at their own rates should beat forcing one shared rate;
on ex2 the oracle values are 1.6528 (async, backward induction) vs 3.25
(best synchronous play from the default start).
"""

import argparse

from mfos.environments import make_env
from mfos.oracles import single_agent_dpp
from mfos.training import default_config, train_da

parser = argparse.ArgumentParser()
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--n-iter", type=int, default=None, help="override per-env default")
args = parser.parse_args()

for name in ("ex2", "ex3"):
    env = make_env(name)
    values = {}
    for cls in ("async", "sync"):
        overrides = {"seed": args.seed}
        if args.n_iter:
            overrides["n_iter"] = args.n_iter
        net, report = train_da(env, default_config(name, "da", cls, **overrides))
        values[cls] = report.final_test
        print(f"{name} {cls:5s}: final test cost {report.final_test:.4f}  ({report.wall_time:.0f}s)")
    print(f"{name}: async improves on sync by {values['sync'] - values['async']:.4f}")
    if env.mean_field_free:
        print(f"{name}: backward-induction optimum {single_agent_dpp(env).value:.4f}")
    print()
