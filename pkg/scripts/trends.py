"""Method comparisons on the skewed synthetic task.

Three tables, each over the given seeds, scored by the trailing-window mean
test accuracy:

* skew: drift-aware head vs FedAvg at Dirichlet 0.1 and 1.0
* participation: every method at CF 0.1 and 1.0 (Dirichlet 0.1)
* ablation: full head vs -PC, -FC, -HA

    python scripts/trends.py --seeds 0,1,2 --out runs/trends
"""
import argparse
import json
import os
import time

from cafefl.experiments import ABLATIONS, final_accuracy, skewed_task


def table(title, entries, seeds):
    print(f"\n{title}")
    out = {}
    for name, cfg in entries.items():
        t = time.time()
        mean, sd, finals = final_accuracy(cfg, seeds)
        out[name] = {"mean": mean, "sd": sd, "per_seed": finals}
        print(f"  {name:22s} {mean:.4f} +/- {sd:.4f}  ({time.time() - t:.0f}s)", flush=True)
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--out", default="runs/trends")
    ap.add_argument("--only", choices=["skew", "participation", "ablation"], default=None)
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    results = {}
    if args.only in (None, "skew"):
        results["skew"] = table("label skew", {
            f"{m} dir={d}": skewed_task(method=m, dir_alpha=d) for d in (0.1, 1.0) for m in ("cafe", "fedavg")
        }, seeds)
        r = results["skew"]
        gaps = {d: r[f"cafe dir={d}"]["mean"] - r[f"fedavg dir={d}"]["mean"] for d in (0.1, 1.0)}
        print(f"  gap dir=0.1 {gaps[0.1]:+.4f}, gap dir=1.0 {gaps[1.0]:+.4f}")
    if args.only in (None, "participation"):
        results["participation"] = table("participation imbalance", {
            f"{m} cf={cf}": skewed_task(method=m, cf=cf) for m in ("cafe", "fedavg", "fedprox") for cf in (0.1, 1.0)
        }, seeds)
        r = results["participation"]
        for m in ("cafe", "fedavg", "fedprox"):
            print(f"  {m} degradation {r[f'{m} cf=1.0']['mean'] - r[f'{m} cf=0.1']['mean']:+.4f}")
    if args.only in (None, "ablation"):
        results["ablation"] = table("module ablation", {
            name: skewed_task(method="cafe", **changes) for name, changes in ABLATIONS.items()
        }, seeds)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "trends.json")
    with open(path, "w") as fh:
        json.dump({"seeds": seeds, "results": results}, fh, indent=2, default=float)
    print(f"\n-> {path}")


if __name__ == "__main__":
    main()
