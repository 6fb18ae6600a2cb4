"""Run shipped experiment configs over several seeds and print a per-run summary.

Example:
    python scripts/desk_scale.py sphere4_elbo sphere4_is --seeds 0-9 --out runs/desk
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from manideq.config import config_from_dict, parse_config
from manideq.experiment import run_experiment

CONFIGS = os.path.join(os.path.dirname(os.path.abspath(__file__)), "configs")
KEYS = ("relative_ess", "kl_q_p", "kl_p_q", "mean_mse", "cov_mse")


def seed_list(text):
    seeds = []
    for part in text.split(","):
        lo, _, hi = part.partition("-")
        seeds.extend(range(int(lo), int(hi or lo) + 1))
    return seeds


def run(name, seed, out):
    cfg = parse_config(os.path.join(CONFIGS, f"{name}.json"))
    d = cfg.to_dict()
    d["seed"] = seed
    d["out"] = os.path.join(out, name, f"seed_{seed}")
    cfg = config_from_dict(d)
    path = os.path.join(cfg.out, "metrics.json")
    if not os.path.exists(path):
        run_experiment(cfg)
    with open(path) as fh:
        return json.load(fh)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("configs", nargs="*", help="config names in scripts/configs (default: all)")
    p.add_argument("--seeds", default="0")
    p.add_argument("--out", default="runs/desk")
    args = p.parse_args(argv)
    names = args.configs or sorted(f[:-5] for f in os.listdir(CONFIGS) if f.endswith(".json"))
    for name in names:
        rows = []
        for seed in seed_list(args.seeds):
            t0 = time.perf_counter()
            m = run(name, seed, args.out)
            rows.append([m[k] for k in KEYS])
            cells = " ".join(f"{k}={m[k]:.4f}" for k in KEYS)
            print(f"{name} seed={seed} {cells} ({time.perf_counter() - t0:.0f}s)", flush=True)
        mean = np.mean(rows, axis=0)
        print(f"{name} mean " + " ".join(f"{k}={v:.4f}" for k, v in zip(KEYS, mean)), flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
