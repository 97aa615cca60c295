"""Drift-aware scoring head: feature and parameter calibration, the
history-aware average over per-batch classifier snapshots, and the
deconfounded inference rule.

Score for sample ``i`` and class ``c`` under one snapshot ``row_c``::

    row_c . [ u_i - alpha cos(h_i, dG_c) dG_c - beta cos(h_i, dk_c) dk_c ]

with ``u_i = h_i / |h_i|`` and ``row_c = phi_c / (|phi_c| + gamma)``.
Training averages this over the snapshot ring and multiplies by ``tau``;
inference uses the final global classifier and global direction only.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .drift import DriftDirections, decompose
from .errors import ConfigError, UsageError
from .model import (LOG_CLAMP, ModelParams, backprop_extractor, cross_entropy, forward_features,
                    one_hot, softmax)

EPS = 1e-12


@dataclass(frozen=True)
class CalibrationParams:
    tau: float = 16.0
    gamma: float = 0.01
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if not self.gamma >= 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")


class SnapshotRing:
    """Calibrated classifier matrices from the batches of the current round."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError(f"snapshot ring capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._rows: deque[np.ndarray] = deque(maxlen=capacity)

    def clear(self):
        self._rows.clear()

    def push(self, rows: np.ndarray):
        self._rows.append(np.array(rows, copy=True))

    def __len__(self):
        return len(self._rows)

    def __iter__(self):
        return iter(self._rows)

    def snapshots(self) -> list[np.ndarray]:
        return list(self._rows)


def unit_rows(h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``h / |h|`` row-wise, with zero rows where ``|h| < 1e-12``."""
    h = np.atleast_2d(h)
    n = np.linalg.norm(h, axis=1)
    u = np.zeros_like(h)
    ok = n >= EPS
    u[ok] = h[ok] / n[ok, None]
    return u, n


def feature_calibration(h: np.ndarray, dirs: DriftDirections, c: int) -> np.ndarray:
    """``(h - d_G - d_k) / |h|`` for class ``c``."""
    h = np.asarray(h, dtype=float)
    n = np.linalg.norm(h, axis=-1, keepdims=True)
    inv = decompose(h, dirs, c).h_inv
    return np.where(n >= EPS, inv / np.maximum(n, EPS), 0.0)


def parameter_calibration(phi: np.ndarray, gamma: float) -> np.ndarray:
    """Each column ``phi_c / (|phi_c| + gamma)``; zero where the denominator
    is below 1e-12. Accepts a single vector or a ``(d_h, C)`` matrix."""
    phi = np.asarray(phi, dtype=float)
    n = np.linalg.norm(phi, axis=0)
    den = n + gamma
    return np.where(den >= EPS, phi / np.maximum(den, EPS), 0.0)


def _indirect(u: np.ndarray, rows: np.ndarray, dirs_: np.ndarray) -> np.ndarray:
    # cos(h_i, d_c) * (row_c . d_c), shape (N, C); invalid directions are zero rows
    cos = u @ dirs_.T
    return cos * np.einsum("dc,cd->c", rows, dirs_)


def snapshot_score(h: np.ndarray, rows: np.ndarray, dirs: DriftDirections,
                   alpha: float, beta: float) -> np.ndarray:
    """Per-class score under one calibrated classifier snapshot (no ``tau``)."""
    u, _ = unit_rows(h)
    return (u @ rows - alpha * _indirect(u, rows, dirs.global_dirs)
            - beta * _indirect(u, rows, dirs.local_dirs))


def train_scores(h: np.ndarray, ring, dirs: DriftDirections, cal: CalibrationParams) -> np.ndarray:
    """``tau`` times the mean snapshot score over every stored snapshot."""
    snaps = list(ring)
    if not snaps:
        raise UsageError("train_scores needs at least one classifier snapshot")
    total = sum(snapshot_score(h, r, dirs, cal.alpha, cal.beta) for r in snaps)
    return cal.tau * total / len(snaps)


def infer_scores(h: np.ndarray, phi: np.ndarray, global_dirs: np.ndarray, global_valid: np.ndarray,
                 tau: float, gamma: float, alpha: float) -> np.ndarray:
    """Deconfounded inference with the final global classifier and global
    drift directions. Client-local state never enters."""
    rows = parameter_calibration(phi, gamma)
    u, _ = unit_rows(h)
    g = np.where(np.asarray(global_valid)[:, None], global_dirs, 0.0)
    return tau * (u @ rows - alpha * _indirect(u, rows, g))


def predict(scores: np.ndarray) -> np.ndarray:
    """Argmax per row; ties go to the lowest class index."""
    return np.argmax(np.atleast_2d(scores), axis=1)


def calibration_loss(scores: np.ndarray, y: np.ndarray, normalizer: str = "softmax") -> float:
    if normalizer == "softmax":
        return cross_entropy(softmax(scores), y)
    if normalizer == "clamp":
        return cross_entropy(np.clip(scores, LOG_CLAMP, 1.0), y)
    raise ConfigError(f"score normalizer must be 'softmax' or 'clamp', got {normalizer!r}")


def _dscores(scores: np.ndarray, y: np.ndarray, normalizer: str) -> np.ndarray:
    n = len(y)
    if normalizer == "softmax":
        return (softmax(scores) - one_hot(y, scores.shape[1])) / n
    g = np.zeros_like(scores)
    sy = scores[np.arange(n), y]
    live = (sy > LOG_CLAMP) & (sy < 1.0)
    g[np.arange(n)[live], y[live]] = -1.0 / (n * sy[live])
    return g


def _calibration_vjp(phi: np.ndarray, gamma: float, g: np.ndarray) -> np.ndarray:
    # d/dphi_c of phi_c/(n+gamma) is I/(n+gamma) - phi phi^T/(n (n+gamma)^2), symmetric
    n = np.linalg.norm(phi, axis=0)
    den = n + gamma
    out = np.zeros_like(phi)
    ok = (n >= EPS) & (den >= EPS)
    dots = np.einsum("dc,dc->c", phi, g)
    out[:, ok] = g[:, ok] / den[ok] - phi[:, ok] * (dots[ok] / (n[ok] * den[ok] ** 2))
    return out


@dataclass
class HeadOutput:
    loss: float
    grad: np.ndarray
    h: np.ndarray
    scores: np.ndarray
    probs: np.ndarray


def cafe_loss_and_grad(params: ModelParams, x: np.ndarray, y: np.ndarray, ring: SnapshotRing,
                       dirs: DriftDirections, cal: CalibrationParams,
                       normalizer: str = "softmax") -> HeadOutput:
    """Calibration loss of one batch and its gradient.

    The current batch's calibrated classifier is pushed onto ``ring`` first
    and is the only snapshot that carries gradient to ``phi``. Earlier
    snapshots and the drift terms are constants; gradient reaches ``h``
    through the direct term ``row . u`` of every snapshot.
    """
    y = np.asarray(y)
    h, cache = forward_features(x, params)
    ring.push(parameter_calibration(params.phi, cal.gamma))
    snaps = ring.snapshots()
    scores = train_scores(h, snaps, dirs, cal)
    loss = calibration_loss(scores, y, normalizer)
    g = _dscores(scores, y, normalizer)

    u, norms = unit_rows(h)
    scale = cal.tau / len(snaps)
    du = scale * g @ sum(snaps).T
    ok = norms >= EPS
    dh = np.zeros_like(h)
    dh[ok] = (du[ok] - u[ok] * np.sum(du[ok] * u[ok], axis=1, keepdims=True)) / norms[ok, None]
    drows = scale * u.T @ g
    dphi = _calibration_vjp(params.phi, cal.gamma, drows)
    dW, db = backprop_extractor(dh, params, cache)
    grad = ModelParams(dW, db, dphi, params.activation).to_vector()
    probs = softmax(scores) if normalizer == "softmax" else np.clip(scores, 0.0, 1.0)
    return HeadOutput(loss, grad, h, scores, probs)


def cosine_logits(h: np.ndarray, phi: np.ndarray, tau: float) -> np.ndarray:
    """``tau * cos(h_i, phi_c)``."""
    hn = np.linalg.norm(h, axis=1, keepdims=True)
    pn = np.linalg.norm(phi, axis=0, keepdims=True)
    return tau * (h @ phi) / np.maximum(hn * pn, EPS)


def cosine_loss_and_grad(params: ModelParams, x: np.ndarray, y: np.ndarray,
                         tau: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Plain cosine-classifier cross-entropy; reference path for the
    reduced drift-aware head."""
    y = np.asarray(y)
    h, cache = forward_features(x, params)
    phi = params.phi
    hn = np.linalg.norm(h, axis=1)
    pn = np.linalg.norm(phi, axis=0)
    hn_safe = np.where(hn >= EPS, hn, np.inf)
    pn_safe = np.where(pn >= EPS, pn, np.inf)
    hu = h / hn_safe[:, None]
    pu = phi / pn_safe[None, :]
    z = tau * hu @ pu
    p = softmax(z)
    g = (p - one_hot(y, phi.shape[1])) / len(y) * tau
    # d(hu)/dh = (I - hu hu^T)/|h|, likewise for each phi column
    dhu = g @ pu.T
    dh = (dhu - hu * np.sum(dhu * hu, axis=1, keepdims=True)) / hn_safe[:, None]
    dpu = hu.T @ g
    dphi = (dpu - pu * np.sum(dpu * pu, axis=0, keepdims=True)) / pn_safe[None, :]
    dW, db = backprop_extractor(dh, params, cache)
    return cross_entropy(p, y), ModelParams(dW, db, dphi, params.activation).to_vector(), h
