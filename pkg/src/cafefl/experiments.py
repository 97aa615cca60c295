"""Multi-run helpers: seed sweeps, the module ablation, and output files."""
from __future__ import annotations

import os

import numpy as np

from .causal import infer_scores, cosine_logits, predict
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, dump_config
from .data import Dataset
from .federation import FINAL_WINDOW, ExperimentResult, calibration_for, run_experiment
from .metrics import emit_plot_data, summarize, write_metrics
from .model import forward_features, logits

# Desk-scale stand-in for a long-tailed, label-skewed benchmark: ten classes,
# twenty clients, strong skew and strong participation imbalance. Used by the
# trend scripts and the acceptance suite.
SKEWED_TASK = dict(n_classes=10, input_dim=32, per_class=600, separation=3.0, long_tail=0.7,
                   clients=20, dir_alpha=0.1, cf=0.1, sample_rate=0.3, rounds=100,
                   local_epochs=5, batch_size=32, lr=0.01)


def skewed_task(**changes) -> ExperimentConfig:
    return ExperimentConfig(**{**SKEWED_TASK, **changes})


ABLATIONS = {
    "cafe": {},
    "no_pc": {"parameter_calibration": False},
    "no_fc": {"feature_calibration": False},
    "no_ha": {"history_average": False},
}


def to_checkpoint(res: ExperimentResult) -> Checkpoint:
    cfg = res.config
    return Checkpoint(res.params, res.server_drift.directions(), calibration_for(cfg),
                      res.rows[-1].round, cfg.method, cfg.head, res.selection_rng_state, cfg.to_dict())


def save_outputs(res: ExperimentResult, out_dir: str, tag: str | None = None) -> dict[str, str]:
    """``metrics[_tag].csv``, ``checkpoint[_tag].bin`` and ``config[_tag].txt``."""
    os.makedirs(out_dir, exist_ok=True)
    sfx = f"_{tag}" if tag else ""
    paths = {
        "metrics": write_metrics(res.rows, os.path.join(out_dir, f"metrics{sfx}.csv")),
        "checkpoint": os.path.join(out_dir, f"checkpoint{sfx}.bin"),
        "config": os.path.join(out_dir, f"config{sfx}.txt"),
    }
    save_checkpoint(paths["checkpoint"], to_checkpoint(res))
    with open(paths["config"], "w") as fh:
        fh.write(dump_config(res.config))
    return paths


def run_seeds(cfg: ExperimentConfig, seeds: list[int], dataset: Dataset | None = None) -> list[ExperimentResult]:
    return [run_experiment(cfg.replace(seed=s), dataset) for s in seeds]


def final_accuracy(cfg: ExperimentConfig, seeds: list[int],
                   window: int = FINAL_WINDOW) -> tuple[float, float, list[float]]:
    """Mean and sample standard deviation over seeds of the trailing-window
    accuracy (``window=1`` gives the last round alone)."""
    finals = [r.tail_acc(window) for r in run_seeds(cfg, seeds)]
    mean, sd = summarize(finals)
    return mean, sd, finals


def run_ablation(cfg: ExperimentConfig) -> dict[str, ExperimentResult]:
    """Full drift-aware head and the three single-module ablations, sharing
    seed, data and partition."""
    base = cfg.replace(method="cafe")
    return {name: run_experiment(base.replace(**changes)) for name, changes in ABLATIONS.items()}


def write_ablation(results: dict[str, ExperimentResult], out_dir: str) -> str:
    for name, res in results.items():
        save_outputs(res, out_dir, name)
    seed = next(iter(results.values())).config.seed
    return emit_plot_data({k: v.rows for k, v in results.items()}, os.path.join(out_dir, "plot_ablation.csv"), seed)


def checkpoint_predict(ck: Checkpoint, x: np.ndarray) -> np.ndarray:
    """Class predictions from a saved model, without any training state."""
    h, _ = forward_features(x, ck.params)
    if ck.method == "cafe":
        cal = ck.calibration
        scores = infer_scores(h, ck.params.phi, ck.drift.global_dirs, ck.drift.global_valid,
                              cal.tau, cal.gamma, cal.alpha)
    elif ck.head == "cosine":
        scores = cosine_logits(h, ck.params.phi, ck.calibration.tau)
    else:
        scores = logits(h, ck.params.phi)
    return predict(scores)


def evaluate_checkpoint(path: str, x: np.ndarray, y: np.ndarray) -> float:
    return float((checkpoint_predict(load_checkpoint(path), x) == y).mean())
