"""Experiment configuration: dataclass, validation, ``key = value`` file
format, and command-line overrides.

Config files hold one ``key = value`` pair per line. ``#`` starts a comment,
keys may use dashes or underscores, booleans are ``true``/``false``, tuples
are comma separated and ``none`` clears an optional value::

    # skewed ten-client run
    method = cafe
    clients = 10
    dir-alpha = 0.1
    hidden = 64
"""
from __future__ import annotations

import argparse
import dataclasses
import math
import typing
from dataclasses import dataclass, fields

from .errors import ConfigError

METHODS = ("cafe", "fedavg", "fedprox")
HEADS = ("linear", "cosine")


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "synthetic"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    n_classes: int = 10
    input_dim: int = 32
    per_class: int = 300
    separation: float = 3.0
    long_tail: float = 1.0
    # model
    hidden: tuple[int, ...] = (64,)
    activation: str = "relu"
    # federation
    method: str = "cafe"
    head: str = "linear"
    clients: int = 100
    dir_alpha: float = 0.5
    cf: float = 1.0
    sample_rate: float = 0.1
    rounds: int = 300
    local_epochs: int = 5
    batch_size: int = 32
    lr: float = 0.001
    mu_local: float = 0.9
    mu_global: float | None = None
    aggregation: str = "data"
    prox: float = 0.01
    # drift-aware head
    tau: float = 16.0
    gamma: float = 0.01
    alpha: float = 0.5
    beta: float = 0.5
    ring_size: int | None = None
    feature_calibration: bool = True
    parameter_calibration: bool = True
    history_average: bool = True
    drift_reduction: str = "sum"
    drift_mode: str = "running"
    drift_decay: float | None = None
    force_invalid_drift: bool = False
    score_normalizer: str = "softmax"
    # run
    seed: int = 0
    workers: int = 1
    timing: bool = False
    out: str = ""

    def __post_init__(self):
        if isinstance(self.hidden, int):
            self.hidden = (self.hidden,)
        self.hidden = tuple(int(w) for w in self.hidden)
        self.validate()

    def validate(self):
        def bad(name, bound):
            raise ConfigError(f"{name} = {getattr(self, name)!r} violates {bound}")

        if self.method not in METHODS:
            bad("method", f"one of {METHODS}")
        if self.head not in HEADS:
            bad("head", f"one of {HEADS}")
        if self.dataset not in ("synthetic", "idx"):
            bad("dataset", "'synthetic' or 'idx'")
        if self.n_classes < 2:
            bad("n_classes", ">= 2")
        if self.input_dim < 1:
            bad("input_dim", ">= 1")
        if self.per_class < 1:
            bad("per_class", ">= 1")
        if self.separation < 0:
            bad("separation", ">= 0")
        if not 0 < self.long_tail <= 1:
            bad("long_tail", "(0, 1]")
        if not self.hidden or min(self.hidden) < 1:
            bad("hidden", "at least one layer of width >= 1")
        if self.activation not in ("relu", "tanh", "identity"):
            bad("activation", "relu | tanh | identity")
        if self.clients < 2:
            bad("clients", ">= 2")
        if not self.dir_alpha > 0:
            bad("dir_alpha", "> 0")
        if not 0 < self.cf <= 1:
            bad("cf", "(0, 1]")
        if not 0 < self.sample_rate <= 1:
            bad("sample_rate", "(0, 1]")
        if self.rounds < 0:
            bad("rounds", ">= 0")
        if self.local_epochs < 0:
            bad("local_epochs", ">= 0")
        if self.batch_size < 1:
            bad("batch_size", ">= 1")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            bad("lr", "> 0")
        if not 0 <= self.mu_local < 1:
            bad("mu_local", "[0, 1)")
        if self.mu_global is not None and not 0 <= self.mu_global < 1:
            bad("mu_global", "[0, 1)")
        if self.drift_decay is not None and not 0 <= self.drift_decay < 1:
            bad("drift_decay", "[0, 1)")
        if self.aggregation not in ("uniform", "data"):
            bad("aggregation", "'uniform' or 'data'")
        if self.prox < 0:
            bad("prox", ">= 0")
        if not self.tau > 0:
            bad("tau", "> 0")
        if self.gamma < 0:
            bad("gamma", ">= 0")
        if not 0 <= self.alpha <= 1:
            bad("alpha", "[0, 1]")
        if not 0 <= self.beta <= 1:
            bad("beta", "[0, 1]")
        if self.ring_size is not None and self.ring_size < 1:
            bad("ring_size", ">= 1")
        if self.drift_reduction not in ("sum", "mean"):
            bad("drift_reduction", "'sum' or 'mean'")
        if self.drift_mode not in ("running", "per_round"):
            bad("drift_mode", "'running' or 'per_round'")
        if self.score_normalizer not in ("softmax", "clamp"):
            bad("score_normalizer", "'softmax' or 'clamp'")
        if self.workers < 1:
            bad("workers", ">= 1")

    # resolved values -----------------------------------------------------
    @property
    def server_momentum(self) -> float:
        if self.mu_global is not None:
            return self.mu_global
        return 0.5 if self.method == "cafe" else 0.0

    @property
    def aggregation_weighting(self) -> str:
        return self.aggregation

    @property
    def effective_ring(self) -> int:
        if not self.history_average:
            return 1
        return self.ring_size if self.ring_size is not None else max(self.local_epochs, 1)

    @property
    def drift_carry_decay(self) -> float:
        return self.drift_decay if self.drift_decay is not None else self.server_momentum

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_HINTS = typing.get_type_hints(ExperimentConfig)


def _coerce(name: str, raw):
    hint = _HINTS[name]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    optional = type(None) in typing.get_args(hint)
    if optional:
        if text.lower() in ("none", "null", ""):
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    try:
        if hint is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if typing.get_origin(hint) is tuple:
            return tuple(int(t) for t in text.replace(" ", "").split(",") if t)
        return text.strip("\"'")
    except ValueError:
        raise ConfigError(f"cannot parse {name} = {raw!r} as {hint}") from None


def _key(k: str) -> str:
    name = k.strip().replace("-", "_")
    if name not in _HINTS:
        raise ConfigError(f"unknown config key {k.strip()!r}")
    return name


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        name = _key(k)
        values[name] = _coerce(name, v)
    return values


def load_config(path: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """File values first, then ``overrides`` (e.g. CLI flags) on top."""
    values = {}
    if path:
        with open(path) as fh:
            values.update(parse_config_text(fh.read()))
    for k, v in (overrides or {}).items():
        if v is not None:
            name = _key(k)
            values[name] = _coerce(name, v)
    return ExperimentConfig(**values)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if v is None:
            v = "none"
        elif isinstance(v, bool):
            v = str(v).lower()
        elif isinstance(v, tuple):
            v = ",".join(str(t) for t in v)
        lines.append(f"{f.name.replace('_', '-')} = {v}")
    return "\n".join(lines) + "\n"


def add_config_flags(parser: argparse.ArgumentParser):
    """One ``--flag`` per config key; unset flags stay ``None`` so file
    values survive."""
    for f in fields(ExperimentConfig):
        parser.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar="V")


def flag_overrides(ns: argparse.Namespace) -> dict:
    return {f.name: getattr(ns, f.name) for f in fields(ExperimentConfig)
            if getattr(ns, f.name, None) is not None}
