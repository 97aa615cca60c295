"""Command-line entry point.

    cafe-fl run --config exp.cfg --method fedavg --rounds 50 --out runs/a
    cafe-fl run --seeds 0,1,2 --out runs/sweep
    cafe-fl ablation --dir-alpha 0.1 --out runs/abl
    cafe-fl infer --checkpoint runs/a/checkpoint.bin --config exp.cfg
    cafe-fl config --config exp.cfg
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import add_config_flags, dump_config, flag_overrides, load_config
from .data import load_dataset, load_idx
from .errors import ConfigError, LoadError
from .experiments import checkpoint_predict, run_ablation, save_outputs, write_ablation
from .checkpoint import load_checkpoint
from .federation import FINAL_WINDOW, STREAM_DATA, run_experiment, stream
from .metrics import emit_plot_data, summarize

log = logging.getLogger("cafefl")


def _parse_seeds(text: str | None) -> list[int] | None:
    if not text:
        return None
    return [int(s) for s in text.split(",") if s.strip()]


def _cmd_run(args, cfg):
    seeds = _parse_seeds(args.seeds) or [cfg.seed]
    out = cfg.out or "runs/default"
    series, finals = {}, []
    for s in seeds:
        res = run_experiment(cfg.replace(seed=s))
        tag = f"seed{s}" if len(seeds) > 1 else None
        paths = save_outputs(res, out, tag)
        series[s] = res.rows
        finals.append(res.tail_acc())
        print(f"seed {s}: last-round acc {res.final_acc:.4f}, last-{FINAL_WINDOW} mean {res.tail_acc():.4f}"
              f" -> {paths['metrics']}")
    for s, rows in series.items():
        emit_plot_data({cfg.method: rows}, os.path.join(out, f"plot_{cfg.method}_seed{s}.csv"), s)
    if len(seeds) > 1:
        mean, sd = summarize(finals)
        print(f"{cfg.method}: last-{FINAL_WINDOW} acc {mean:.4f} +/- {sd:.4f} over seeds {seeds}")
    return 0


def _cmd_ablation(args, cfg):
    out = cfg.out or "runs/ablation"
    results = run_ablation(cfg)
    plot = write_ablation(results, out)
    for name, res in results.items():
        print(f"{name:6s} last-round acc {res.final_acc:.4f}, last-{FINAL_WINDOW} mean {res.tail_acc():.4f}")
    print(f"plot data -> {plot}")
    return 0


def _cmd_infer(args, cfg):
    ck = load_checkpoint(args.checkpoint)
    if args.images:
        x, y = load_idx(args.images, args.labels, ck.params.n_classes)
    else:
        ds = load_dataset(cfg, stream(cfg.seed, STREAM_DATA))
        x, y = ds.x_test, ds.y_test
    pred = checkpoint_predict(ck, x)
    print(f"accuracy {float((pred == y).mean()):.4f} on {len(y)} samples (round {ck.round}, {ck.method})")
    return 0


def _cmd_config(args, cfg):
    sys.stdout.write(dump_config(cfg))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cafe-fl", description="Drift-aware federated learning simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, helptext in (("run", _cmd_run, "train one method, optionally over several seeds"),
                               ("ablation", _cmd_ablation, "full head vs -PC, -FC, -HA"),
                               ("infer", _cmd_infer, "evaluate a saved checkpoint"),
                               ("config", _cmd_config, "print the effective configuration")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", dest="config_file", default=None, help="key = value config file")
        add_config_flags(sp)
        sp.set_defaults(func=fn)
        if name == "run":
            sp.add_argument("--seeds", default=None, help="comma-separated seeds, e.g. 0,1,2")
        if name == "infer":
            sp.add_argument("--checkpoint", required=True)
            sp.add_argument("--images", default=None, help="IDX image file (default: synthetic test split)")
            sp.add_argument("--labels", default=None)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config_file, flag_overrides(args))
        return args.func(args, cfg)
    except (ConfigError, LoadError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
