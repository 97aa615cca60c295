"""CSV persistence for per-round metrics and long-format plot data."""
from __future__ import annotations

import csv
import io
import os
from typing import Iterable, Mapping

import numpy as np

from .federation import MetricsRow


def _fmt(v: float) -> str:
    return "nan" if v != v else f"{v:.6f}"


def metrics_header(n_classes: int) -> list[str]:
    return ["round", "acc", "loss"] + [f"acc_{c}" for c in range(n_classes)] + ["participation", "secs"]


def metrics_csv(rows: list[MetricsRow]) -> str:
    if not rows:
        raise ValueError("no metrics rows to write")
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(metrics_header(len(rows[0].per_class)))
    for r in rows:
        wr.writerow([r.round, _fmt(r.acc), _fmt(r.loss), *(_fmt(v) for v in r.per_class),
                     _fmt(r.participation), _fmt(r.secs)])
    return buf.getvalue()


def write_metrics(rows: list[MetricsRow], path: str) -> str:
    text = metrics_csv(rows)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return path


def read_metrics(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def emit_plot_data(series: Mapping[str, list[MetricsRow]], path: str, seed: int | None = None) -> str:
    """Long format: ``method,seed,round,metric,value`` with metrics acc and loss."""
    if not series:
        raise ValueError("no series to write")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["method", "seed", "round", "metric", "value"])
        for method in series:
            for r in series[method]:
                for metric, v in (("acc", r.acc), ("loss", r.loss)):
                    wr.writerow([method, "" if seed is None else seed, r.round, metric, _fmt(v)])
    return path


def summarize(finals: Iterable[float]) -> tuple[float, float]:
    a = np.asarray(list(finals), dtype=float)
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0
