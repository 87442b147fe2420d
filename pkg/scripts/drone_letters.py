"""Drone display: train per-step policies that spray a swarm into a letter.

Thin wrapper over the CLI so the run leaves the full artifact set (stage
checkpoints, heatmaps every 5 steps, loss curves) under runs/.  Usage:

    python scripts/drone_letters.py M
    python scripts/drone_letters.py S --seed 3
"""

import sys

from mfos.cli import main

letter = sys.argv[1] if len(sys.argv) > 1 else "M"
extra = sys.argv[2:]
if letter not in ("M", "F", "O", "S"):
    sys.exit(f"letter must be one of M, F, O, S, got {letter!r}")

seed = extra[extra.index("--seed") + 1] if "--seed" in extra else "0"
out = f"runs/train-ex6-{letter}-dp-async-seed{seed}"

code = main(["train", "--env", f"ex6-{letter}", "--algo", "dp", "--out", out, *extra])
if code == 0:
    code = main(["eval", "--env", f"ex6-{letter}", "--checkpoint", out, "--mc-paths", "32"])
sys.exit(code)
