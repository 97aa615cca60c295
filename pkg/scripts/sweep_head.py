"""Grid over the drift-aware head's hyperparameters on tuning seeds.

Scores each setting by the trailing-window mean accuracy averaged over the
tuning seeds and writes one CSV row per setting.

    python scripts/sweep_head.py --out runs/sweep.csv --seeds 100,101,102,103,104
"""
import argparse
import csv
import itertools
import time

import numpy as np

from cafefl.config import ExperimentConfig
from cafefl.federation import run_experiment

TASK = dict(clients=20, dir_alpha=0.1, cf=0.1, sample_rate=0.3, rounds=100, long_tail=0.7,
            per_class=600, separation=3.0, local_epochs=5, lr=0.01)
GRID = dict(tau=[8.0, 16.0, 32.0], alpha=[0.25, 0.5, 1.0], beta=[0.0, 0.5, 1.0],
            mu_global=[0.0, 0.5], aggregation=["uniform", "data"])


def trailing_acc(res, window=10):
    return float(np.mean([r.acc for r in res.rows[-window:]]))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/sweep.csv")
    ap.add_argument("--seeds", default="100,101,102,103,104")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    base = ExperimentConfig(**TASK)
    fedavg = np.mean([trailing_acc(run_experiment(base.replace(method="fedavg", seed=s))) for s in seeds])
    print(f"fedavg reference {fedavg:.4f}", flush=True)
    keys = list(GRID)
    with open(args.out, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(keys + ["mean_acc", "sd", "fedavg"])
        for values in itertools.product(*GRID.values()):
            t = time.time()
            cfg = base.replace(method="cafe", **dict(zip(keys, values)))
            accs = [trailing_acc(run_experiment(cfg.replace(seed=s))) for s in seeds]
            wr.writerow(list(values) + [f"{np.mean(accs):.4f}", f"{np.std(accs, ddof=1):.4f}", f"{fedavg:.4f}"])
            fh.flush()
            print(dict(zip(keys, values)), f"{np.mean(accs):.4f}", f"{time.time() - t:.0f}s", flush=True)


if __name__ == "__main__":
    main()
