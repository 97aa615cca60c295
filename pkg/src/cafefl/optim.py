"""Momentum gradient descent for clients and server, plus closed-form
expansions of the accumulated displacement.

All optimizers act on flat parameter vectors (see ``ModelParams.to_vector``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError, UsageError


def check_decay(mu: float, name: str = "mu") -> float:
    if not 0.0 <= mu < 1.0:
        raise ConfigError(f"{name} must lie in [0, 1), got {mu}")
    return float(mu)


def _check_finite(g: np.ndarray, what: str):
    if not np.all(np.isfinite(g)):
        bad = np.flatnonzero(~np.isfinite(g))
        raise DivergenceError(f"non-finite {what}: {bad.size} entries, first at index {bad[0]}")


def geometric_weight(mu: float, n: int) -> float:
    """``1 + mu + ... + mu**(n-1)``."""
    if mu == 0.0:
        return 1.0 if n > 0 else 0.0
    return (1.0 - mu ** n) / (1.0 - mu)


@dataclass
class LocalMomentum:
    """Client optimizer: ``f <- mu f + g``; ``w <- w - lr f``.

    ``buffer_sum`` tracks ``f^(1) + ... + f^(e)`` for the current round, which
    is what the local drift statistic consumes.
    """

    mu: float
    lr: float
    keep_history: bool = False
    buffer: np.ndarray | None = None
    buffer_sum: np.ndarray | None = None
    steps: int = 0
    history: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        check_decay(self.mu, "mu_local")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")

    def reset(self, size: int):
        """Zero the buffer at the start of a communication round."""
        self.buffer = np.zeros(size)
        self.buffer_sum = np.zeros(size)
        self.steps = 0
        self.history = []

    def step(self, grad: np.ndarray, params: np.ndarray) -> np.ndarray:
        if self.buffer is None:
            self.reset(params.size)
        _check_finite(grad, "local gradient")
        if grad.shape != self.buffer.shape:
            raise ConfigError(f"gradient shape {grad.shape} != buffer shape {self.buffer.shape}")
        self.buffer = self.mu * self.buffer + grad
        self.buffer_sum = self.buffer_sum + self.buffer
        self.steps += 1
        if self.keep_history:
            self.history.append(np.array(grad, copy=True))
        return params - self.lr * self.buffer


@dataclass
class GlobalMomentum:
    """Server optimizer: ``f_G <- mu_G f_G + agg``; ``w_G <- w_G - lr f_G``.

    The learning rate is applied at the server so that with ``mu_G = 0`` and
    client updates ``xi = (w_in - w_out) / lr`` the step is plain model
    averaging.
    """

    mu: float
    lr: float
    keep_history: bool = False
    buffer: np.ndarray | None = None
    rounds: int = 0
    history: list[dict[int, tuple[float, np.ndarray]]] = field(default_factory=list)

    def __post_init__(self):
        check_decay(self.mu, "mu_global")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")

    def step(self, aggregate: np.ndarray, params: np.ndarray,
             contributions: dict[int, tuple[float, np.ndarray]] | None = None) -> np.ndarray:
        """Apply one server update with an already-weighted aggregate.

        ``contributions`` maps client id to ``(weight, xi)`` and is only
        recorded for the expansion oracle.
        """
        if self.buffer is None:
            self.buffer = np.zeros(params.size)
        _check_finite(aggregate, "aggregate")
        self.buffer = self.mu * self.buffer + aggregate
        self.rounds += 1
        if self.keep_history:
            if contributions is None:
                contributions = {-1: (1.0, np.array(aggregate, copy=True))}
            self.history.append({k: (w, np.array(x, copy=True)) for k, (w, x) in contributions.items()})
        return params - self.lr * self.buffer


def expand_local(grads: list[np.ndarray], mu: float, lr: float, e: int | None = None) -> np.ndarray:
    """Displacement ``w^(e) - w^(0)`` after ``e`` local momentum steps.

    Batch ``j`` contributes ``-lr * zeta_j * (1 - mu**(e+1-j)) / (1 - mu)``.
    """
    check_decay(mu)
    if e is None:
        e = len(grads)
    if e > len(grads):
        raise UsageError(f"history has {len(grads)} batches, asked for {e}")
    if e == 0:
        raise UsageError("expand_local needs at least one batch")
    out = np.zeros_like(np.asarray(grads[0], dtype=float))
    for j in range(1, e + 1):
        out -= lr * geometric_weight(mu, e + 1 - j) * grads[j - 1]
    return out


def expand_global(history: list[dict[int, tuple[float, np.ndarray]]], mu: float,
                  lr: float) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Displacement ``w_G^(r) - w_G^(0)`` after ``r = len(history)`` rounds.

    Client ``k``'s upload in round ``s`` enters with factor
    ``-lr * p * (1 - mu**(r-s+1)) / (1 - mu)``. Returns the total and the
    per-client contributions, which sum to it.
    """
    check_decay(mu)
    if not history:
        raise UsageError("expand_global needs at least one round")
    r = len(history)
    per_client: dict[int, np.ndarray] = {}
    for s, round_ in enumerate(history, start=1):
        factor = -lr * geometric_weight(mu, r - s + 1)
        for k in sorted(round_):
            p, xi = round_[k]
            term = factor * p * np.asarray(xi, dtype=float)
            per_client[k] = per_client[k] + term if k in per_client else term
    total = np.zeros_like(next(iter(per_client.values())))
    for k in sorted(per_client):
        total += per_client[k]
    return total, per_client


def expand_global_buffer(history: list[dict[int, tuple[float, np.ndarray]]], mu: float) -> np.ndarray:
    """Server buffer after ``r`` rounds: ``sum_s mu**(r-s) sum_k p xi``."""
    check_decay(mu)
    r = len(history)
    out = None
    for s, round_ in enumerate(history, start=1):
        for k in sorted(round_):
            p, xi = round_[k]
            term = mu ** (r - s) * p * np.asarray(xi, dtype=float)
            out = term if out is None else out + term
    return out
