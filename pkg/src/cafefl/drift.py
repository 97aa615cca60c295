"""Per-class drift statistics and the invariant/drift split of embeddings.

Accumulators are stored as ``(C, d_h)`` arrays: row ``c`` is the statistic for
class ``c``. The global statistic for class ``c`` is the round-initial
classifier column ``phi_c`` scaled by minus the batch residual sum for that
class; the local one is the same residual sum times ``lr`` times the running
sum of the local momentum buffers restricted to column ``c``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError

NORM_FLOOR = 1e-8


def _residual_total(resid: np.ndarray, reduction: str) -> np.ndarray:
    resid = np.atleast_2d(resid)
    total = resid.sum(axis=0)
    if reduction == "mean":
        total = total / max(len(resid), 1)
    elif reduction != "sum":
        raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    return total


def update_lambda_global(lam: np.ndarray, resid: np.ndarray, phi_round_init: np.ndarray | None,
                         reduction: str = "sum") -> np.ndarray:
    if phi_round_init is None:
        raise UsageError("global drift needs the round-initial classifier snapshot")
    total = _residual_total(resid, reduction)
    return lam - total[:, None] * phi_round_init.T


def update_lambda_local(lam: np.ndarray, resid: np.ndarray, phi_buffer_sum: np.ndarray | None,
                        lr: float, reduction: str = "sum") -> np.ndarray:
    """``phi_buffer_sum`` is the classifier block of ``f^(1) + ... + f^(e)``,
    shaped like ``phi``."""
    if phi_buffer_sum is None:
        raise UsageError("local drift needs the local momentum partial sums")
    total = _residual_total(resid, reduction)
    return lam + total[:, None] * (lr * phi_buffer_sum.T)


def normalize(lam: np.ndarray, floor: float = NORM_FLOOR) -> tuple[np.ndarray, bool]:
    """Unit direction of ``lam`` and whether it is valid (norm >= floor)."""
    lam = np.asarray(lam, dtype=float)
    n = np.linalg.norm(lam)
    if not n >= floor:
        return np.zeros_like(lam), False
    return lam / n, True


def normalize_rows(lam: np.ndarray, floor: float = NORM_FLOOR) -> tuple[np.ndarray, np.ndarray]:
    n = np.linalg.norm(lam, axis=1)
    valid = n >= floor
    dirs = np.zeros_like(lam)
    dirs[valid] = lam[valid] / n[valid, None]
    return dirs, valid


@dataclass
class DriftDirections:
    """Unit drift directions per class; invalid rows are zero."""

    global_dirs: np.ndarray
    local_dirs: np.ndarray
    global_valid: np.ndarray
    local_valid: np.ndarray

    @classmethod
    def from_accumulators(cls, lam_global: np.ndarray, lam_local: np.ndarray,
                          floor: float = NORM_FLOOR) -> "DriftDirections":
        g, gv = normalize_rows(lam_global, floor)
        k, kv = normalize_rows(lam_local, floor)
        return cls(g, k, gv, kv)

    @classmethod
    def invalid(cls, n_classes: int, dim: int) -> "DriftDirections":
        z = np.zeros((n_classes, dim))
        f = np.zeros(n_classes, dtype=bool)
        return cls(z, z.copy(), f, f.copy())

    def global_only(self) -> "DriftDirections":
        return DriftDirections(self.global_dirs, np.zeros_like(self.local_dirs), self.global_valid,
                               np.zeros_like(self.local_valid))


@dataclass
class Decomposition:
    h_inv: np.ndarray
    d_global: np.ndarray
    d_local: np.ndarray


def _orthonormal_pair(dg: np.ndarray, vg: bool, dk: np.ndarray, vk: bool,
                      floor: float) -> tuple[np.ndarray | None, np.ndarray | None]:
    qg = dg if vg else None
    if not vk:
        return qg, None
    q = dk - (dk @ qg) * qg if qg is not None else dk
    n = np.linalg.norm(q)
    return qg, (q / n if n >= floor else None)


def decompose(h: np.ndarray, dirs: DriftDirections, c: int, floor: float = NORM_FLOOR) -> Decomposition:
    """Split ``h`` into ``h_inv + d_G + d_k`` for class ``c``.

    The two directions are orthonormalized (global first) before projecting,
    so ``h_inv`` is orthogonal to both even when they are oblique. Works on a
    single embedding or a batch of rows.
    """
    h = np.asarray(h, dtype=float)
    qg, qk = _orthonormal_pair(dirs.global_dirs[c], bool(dirs.global_valid[c]),
                               dirs.local_dirs[c], bool(dirs.local_valid[c]), floor)
    d_g = np.zeros_like(h) if qg is None else np.multiply.outer(h @ qg, qg)
    d_k = np.zeros_like(h) if qk is None else np.multiply.outer(h @ qk, qk)
    return Decomposition(h - d_g - d_k, d_g, d_k)


@dataclass
class DriftState:
    """One client's drift accumulators for the current round.

    ``lam_global`` may start from a carried-over value (running accumulation
    across rounds); ``lam_local`` always starts at zero.
    """

    n_classes: int
    dim: int
    reduction: str = "sum"
    floor: float = NORM_FLOOR
    lam_global: np.ndarray = field(init=False)
    lam_local: np.ndarray = field(init=False)
    round_contribution: np.ndarray = field(init=False)
    phi_round_init: np.ndarray | None = None
    batch: int = 0

    def __post_init__(self):
        self.lam_global = np.zeros((self.n_classes, self.dim))
        self.lam_local = np.zeros((self.n_classes, self.dim))
        self.round_contribution = np.zeros((self.n_classes, self.dim))

    def start_round(self, phi_round_init: np.ndarray, carried_global: np.ndarray | None = None):
        self.phi_round_init = phi_round_init.copy()
        self.lam_global = np.zeros((self.n_classes, self.dim)) if carried_global is None \
            else np.array(carried_global, dtype=float)
        self.lam_local = np.zeros((self.n_classes, self.dim))
        self.round_contribution = np.zeros((self.n_classes, self.dim))
        self.batch = 0

    def observe_batch(self, resid: np.ndarray, phi_buffer_sum: np.ndarray, lr: float):
        """Fold one batch into both accumulators.

        ``phi_buffer_sum`` is the partial momentum sum *before* this batch's
        optimizer step, so the first batch of a round adds nothing locally.
        """
        new_g = update_lambda_global(np.zeros_like(self.lam_global), resid, self.phi_round_init,
                                     self.reduction)
        self.round_contribution += new_g
        self.lam_global = self.lam_global + new_g
        self.lam_local = update_lambda_local(self.lam_local, resid, phi_buffer_sum, lr, self.reduction)
        self.batch += 1

    def directions(self) -> DriftDirections:
        return DriftDirections.from_accumulators(self.lam_global, self.lam_local, self.floor)
