"""Round orchestration: partitioning, participation, local training, server
aggregation, and the experiment loop.

Random streams (all derived from ``cfg.seed``, so every method run with the
same seed sees the same data, partition, initial model and client
selections):

1. data synthesis
2. Dirichlet partition
3. model initialization
4. per-round client selection
5. local mini-batch order, one independent stream per ``(round, client)``
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .causal import (CalibrationParams, SnapshotRing, cafe_loss_and_grad, cosine_logits,
                     cosine_loss_and_grad, infer_scores, predict)
from .config import ExperimentConfig
from .data import Dataset, load_dataset
from .drift import DriftDirections, DriftState
from .errors import ConfigError
from .model import (ModelParams, cross_entropy, forward_features, init_params, logits, one_hot,
                    softmax, softmax_loss_and_grad)
from .optim import GlobalMomentum, LocalMomentum

log = logging.getLogger(__name__)

STREAM_DATA, STREAM_PARTITION, STREAM_INIT, STREAM_PARTICIPATION = range(4)
STREAM_LOCAL = 4
FINAL_WINDOW = 10


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


# --- partition ---------------------------------------------------------------

@dataclass
class Partition:
    indices: list[np.ndarray]
    histograms: np.ndarray
    weights: np.ndarray

    @property
    def n_clients(self) -> int:
        return len(self.indices)


def dirichlet_partition(labels: np.ndarray, n_clients: int, concentration: float,
                        rng: np.random.Generator | int, n_classes: int | None = None) -> Partition:
    """Per class, split its samples across clients by a symmetric Dirichlet
    draw. Empty clients then each take one sample from the currently largest
    client."""
    labels = np.asarray(labels)
    if n_clients < 2:
        raise ConfigError(f"need at least 2 clients, got {n_clients}")
    if not concentration > 0:
        raise ConfigError(f"Dirichlet concentration must be > 0, got {concentration}")
    if len(labels) < n_clients:
        raise ConfigError(f"{len(labels)} samples cannot cover {n_clients} clients")
    rng = np.random.default_rng(rng)
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for c in range(n_classes):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(n_clients, concentration))
        cuts = np.floor(np.cumsum(props)[:-1] * len(idx)).astype(int)
        for k, part in enumerate(np.split(idx, cuts)):
            buckets[k].extend(part.tolist())
    for k in range(n_clients):
        if not buckets[k]:
            donor = max(range(n_clients), key=lambda j: (len(buckets[j]), -j))
            buckets[k].append(buckets[donor].pop())
    indices = [np.sort(np.asarray(b, dtype=np.int64)) for b in buckets]
    hist = np.stack([np.bincount(labels[i], minlength=n_classes) for i in indices])
    sizes = hist.sum(axis=1)
    return Partition(indices, hist, sizes / sizes.sum())


# --- participation -------------------------------------------------------------

@dataclass
class ParticipationModel:
    freqs: np.ndarray

    @property
    def n_clients(self) -> int:
        return len(self.freqs)


def build_participation(n_clients: int, cf: float) -> ParticipationModel:
    """Availability linearly spaced from ``cf`` (client 0) to 1.0."""
    if not 0 < cf <= 1:
        raise ConfigError(f"cf must lie in (0, 1], got {cf}")
    return ParticipationModel(np.linspace(cf, 1.0, n_clients))


def pool_size(n_clients: int, sample_rate: float) -> int:
    return max(1, min(n_clients, math.ceil(sample_rate * n_clients - 1e-9)))


def select_round_clients(model: ParticipationModel, sample_rate: float,
                         rng: np.random.Generator) -> np.ndarray:
    """Uniform candidate pool, then each candidate stays with its own
    availability; redrawn until nonempty."""
    if not 0 < sample_rate <= 1:
        raise ConfigError(f"sample_rate must lie in (0, 1], got {sample_rate}")
    m = pool_size(model.n_clients, sample_rate)
    while True:
        pool = rng.choice(model.n_clients, size=m, replace=False)
        keep = rng.random(m) < model.freqs[pool]
        chosen = np.sort(pool[keep])
        if chosen.size:
            return chosen


# --- client ----------------------------------------------------------------

@dataclass
class ClientUpdate:
    client: int
    round: int
    xi: np.ndarray
    n_samples: int
    loss: float = 0.0
    drift_contribution: np.ndarray | None = None

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.xi))


def calibration_for(cfg: ExperimentConfig) -> CalibrationParams:
    """Head hyperparameters after applying the ablation switches."""
    return CalibrationParams(
        tau=cfg.tau,
        gamma=cfg.gamma if cfg.parameter_calibration else 0.0,
        alpha=cfg.alpha if cfg.feature_calibration else 0.0,
        beta=cfg.beta if cfg.feature_calibration else 0.0,
    )


def _batches(n: int, batch_size: int, steps: int, rng: np.random.Generator):
    order = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos >= n:
            order = rng.permutation(n)
            pos = 0
        yield order[pos:pos + batch_size]
        pos += batch_size


def client_local_train(params_in: ModelParams, x: np.ndarray, y: np.ndarray, cfg: ExperimentConfig,
                       rng: np.random.Generator, client: int = 0, round_: int = 0,
                       drift_carry: np.ndarray | None = None,
                       optimizer: LocalMomentum | None = None) -> ClientUpdate | None:
    """Run ``cfg.local_epochs`` mini-batch steps from the round's global model.

    Returns ``xi = (w_in - w_out) / lr``. An empty shard yields ``None``.
    """
    if len(y) == 0:
        log.warning("client %d has no data; skipped in round %d", client, round_)
        return None
    w_in = params_in.to_vector()
    w = w_in.copy()
    model = params_in
    opt = optimizer or LocalMomentum(cfg.mu_local, cfg.lr)
    opt.reset(w.size)
    steps = cfg.local_epochs
    losses = []
    drift = None

    if cfg.method == "cafe":
        cal = calibration_for(cfg)
        ring = SnapshotRing(cfg.effective_ring)
        drift = DriftState(params_in.n_classes, params_in.embed_dim, reduction=cfg.drift_reduction)
        carry = drift_carry if cfg.drift_mode == "running" else None
        drift.start_round(params_in.phi, carry)
        phi_sl = params_in.phi_slice()
        no_dirs = DriftDirections.invalid(params_in.n_classes, params_in.embed_dim)
        for idx in _batches(len(y), cfg.batch_size, steps, rng):
            use_dirs = cfg.feature_calibration and not cfg.force_invalid_drift
            dirs = drift.directions() if use_dirs else no_dirs
            out = cafe_loss_and_grad(model, x[idx], y[idx], ring, dirs, cal, cfg.score_normalizer)
            resid = one_hot(y[idx], params_in.n_classes) - out.probs
            drift.observe_batch(resid, opt.buffer_sum[phi_sl].reshape(params_in.phi.shape), cfg.lr)
            w = opt.step(out.grad, w)
            model = params_in.with_vector(w)
            losses.append(out.loss)
    else:
        prox = cfg.prox if cfg.method == "fedprox" else 0.0
        for idx in _batches(len(y), cfg.batch_size, steps, rng):
            if cfg.head == "cosine":
                loss, grad, _ = cosine_loss_and_grad(model, x[idx], y[idx], cfg.tau)
            else:
                loss, grad = softmax_loss_and_grad(model, x[idx], y[idx])
            if cfg.method == "fedprox":
                diff = w - w_in
                grad = grad + prox * diff
                loss += 0.5 * prox * float(diff @ diff)
            w = opt.step(grad, w)
            model = params_in.with_vector(w)
            losses.append(loss)

    return ClientUpdate(client, round_, (w_in - w) / cfg.lr, len(y),
                        float(np.mean(losses)) if losses else 0.0,
                        drift.round_contribution.copy() if drift is not None else None)


# --- server ----------------------------------------------------------------

def aggregation_weights(updates: list[ClientUpdate], weighting: str) -> np.ndarray:
    if weighting == "data":
        n = np.array([u.n_samples for u in updates], dtype=float)
        return n / n.sum()
    return np.full(len(updates), 1.0 / len(updates))


def server_aggregate(updates: list[ClientUpdate], params: np.ndarray, momentum: GlobalMomentum,
                     weighting: str = "data") -> tuple[np.ndarray, np.ndarray]:
    """Weighted mean of the uploads (ascending client order) fed into the
    server momentum step. Returns new flat params and the weights used."""
    if not updates:
        raise ConfigError("server_aggregate needs at least one update")
    updates = sorted(updates, key=lambda u: u.client)
    for u in updates:
        if u.xi.shape != params.shape:
            raise ConfigError(f"client {u.client} uploaded shape {u.xi.shape}, expected {params.shape}")
    weights = aggregation_weights(updates, weighting)
    agg = np.zeros_like(params)
    for wk, u in zip(weights, updates):
        agg += wk * u.xi
    contrib = {u.client: (float(wk), u.xi) for wk, u in zip(weights, updates)} if momentum.keep_history else None
    return momentum.step(agg, params, contrib), weights


# --- evaluation ---------------------------------------------------------------

@dataclass
class ServerDrift:
    """Server-side running global drift accumulator, one row per class."""

    lam: np.ndarray
    rounds: int = 0

    def update(self, contributions: list[np.ndarray], weights: np.ndarray, decay: float, mode: str):
        agg = np.zeros_like(self.lam)
        for wk, c in zip(weights, contributions):
            agg += wk * c
        self.lam = decay * self.lam + agg if mode == "running" else agg
        self.rounds += 1

    def directions(self) -> DriftDirections:
        return DriftDirections.from_accumulators(self.lam, np.zeros_like(self.lam))


def model_scores(params: ModelParams, x: np.ndarray, cfg: ExperimentConfig,
                 server_drift: ServerDrift | None = None) -> np.ndarray:
    h, _ = forward_features(x, params)
    if cfg.method == "cafe":
        cal = calibration_for(cfg)
        if server_drift is None or cfg.force_invalid_drift or not cfg.feature_calibration:
            dirs = DriftDirections.invalid(params.n_classes, params.embed_dim)
        else:
            dirs = server_drift.directions()
        return infer_scores(h, params.phi, dirs.global_dirs, dirs.global_valid, cal.tau, cal.gamma, cal.alpha)
    if cfg.head == "cosine":
        return cosine_logits(h, params.phi, cfg.tau)
    return logits(h, params.phi)


def evaluate(params: ModelParams, x: np.ndarray, y: np.ndarray, cfg: ExperimentConfig,
             server_drift: ServerDrift | None = None) -> tuple[float, float, np.ndarray]:
    """Accuracy, cross-entropy of the softmax over scores, per-class accuracy."""
    scores = model_scores(params, x, cfg, server_drift)
    pred = predict(scores)
    correct = pred == y
    per_class = np.array([correct[y == c].mean() if np.any(y == c) else np.nan
                          for c in range(params.n_classes)])
    return float(correct.mean()), cross_entropy(softmax(scores), y), per_class


# --- experiment loop ------------------------------------------------------------

@dataclass
class RoundRecord:
    round: int
    selected: list[int]
    update_norms: dict[int, float]
    aggregate_norm: float
    seconds: float


@dataclass
class MetricsRow:
    round: int
    acc: float
    loss: float
    per_class: np.ndarray
    participation: float
    secs: float


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list[MetricsRow]
    params: ModelParams
    server_drift: ServerDrift
    partition: Partition
    participation_counts: np.ndarray
    records: list[RoundRecord] = field(default_factory=list)
    server_momentum: GlobalMomentum | None = None
    selection_rng_state: dict | None = None

    @property
    def final_acc(self) -> float:
        return self.rows[-1].acc

    def tail_acc(self, window: int = FINAL_WINDOW) -> float:
        """Mean test accuracy over the last ``window`` rounds (round 0
        excluded unless nothing else exists). Smooths the round-to-round
        swings that partial participation causes."""
        rows = self.rows[1:] or self.rows
        return float(np.mean([r.acc for r in rows[-window:]]))


def prepare(cfg: ExperimentConfig, dataset: Dataset | None = None):
    ds = dataset if dataset is not None else load_dataset(cfg, stream(cfg.seed, STREAM_DATA))
    if ds.n_classes != cfg.n_classes:
        raise ConfigError(f"dataset has {ds.n_classes} classes, config says {cfg.n_classes}")
    part = dirichlet_partition(ds.y_train, cfg.clients, cfg.dir_alpha, stream(cfg.seed, STREAM_PARTITION),
                               ds.n_classes)
    params = init_params(stream(cfg.seed, STREAM_INIT), ds.input_dim, cfg.hidden, ds.n_classes, cfg.activation)
    return ds, part, params


def run_experiment(cfg: ExperimentConfig, dataset: Dataset | None = None,
                   keep_history: bool = False) -> ExperimentResult:
    ds, part, params = prepare(cfg, dataset)
    pmodel = build_participation(cfg.clients, cfg.cf)
    sel_rng = stream(cfg.seed, STREAM_PARTICIPATION)
    gm = GlobalMomentum(cfg.server_momentum, cfg.lr, keep_history=keep_history)
    sdrift = ServerDrift(np.zeros((ds.n_classes, params.embed_dim)))
    counts = np.zeros(cfg.clients, dtype=np.int64)
    timer = time.perf_counter
    t0 = timer()

    def row(r: int) -> MetricsRow:
        acc, loss, pc = evaluate(params, ds.x_test, ds.y_test, cfg, sdrift)
        secs = timer() - t0 if cfg.timing else 0.0
        return MetricsRow(r, acc, loss, pc, float(counts.mean()), secs)

    rows = [row(0)]
    records = []
    w = params.to_vector()
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for r in range(1, cfg.rounds + 1):
            t_round = timer()
            chosen = select_round_clients(pmodel, cfg.sample_rate, sel_rng)
            carry = cfg.drift_carry_decay * sdrift.lam if cfg.method == "cafe" else None

            def train(k, params=params, r=r, carry=carry):
                idx = part.indices[k]
                return client_local_train(params, ds.x_train[idx], ds.y_train[idx], cfg,
                                          stream(cfg.seed, STREAM_LOCAL, r, int(k)), int(k), r, carry)

            results = list(pool.map(train, chosen)) if pool else [train(k) for k in chosen]
            updates = [u for u in results if u is not None]
            if not updates:
                rows.append(row(r))
                continue
            for u in updates:
                counts[u.client] += 1
            w, weights = server_aggregate(updates, w, gm, cfg.aggregation_weighting)
            params = params.with_vector(w)
            if cfg.method == "cafe":
                ordered = sorted(updates, key=lambda u: u.client)
                sdrift.update([u.drift_contribution for u in ordered], weights,
                              cfg.drift_carry_decay, cfg.drift_mode)
            records.append(RoundRecord(r, [int(k) for k in chosen], {u.client: u.norm for u in updates},
                                       float(np.linalg.norm(gm.buffer)), timer() - t_round))
            rows.append(row(r))
    finally:
        if pool:
            pool.shutdown()
    return ExperimentResult(cfg, rows, params, sdrift, part, counts, records, gm,
                            sel_rng.bit_generator.state)
