import itertools
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cafefl.config import ExperimentConfig
from cafefl.data import generate_synthetic
from cafefl.errors import ConfigError
from cafefl.federation import (ClientUpdate, ServerDrift, build_participation, client_local_train,
                               dirichlet_partition, pool_size, prepare, run_experiment,
                               select_round_clients, server_aggregate, stream)
from cafefl.metrics import metrics_csv
from cafefl.model import init_params
from cafefl.optim import GlobalMomentum

TINY = dict(n_classes=4, input_dim=6, per_class=30, clients=4, rounds=3, local_epochs=2,
            batch_size=8, hidden=(8,), lr=0.05, sample_rate=0.5)


def tiny(**kw):
    return ExperimentConfig(**{**TINY, **kw})


def entropy_rows(hist):
    p = hist / np.maximum(hist.sum(axis=1, keepdims=True), 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.nansum(np.where(p > 0, p * np.log(p), 0.0), axis=1)


# --- partition -----------------------------------------------------------------

@settings(max_examples=40)
@given(st.integers(2, 12), st.floats(0.05, 20.0), st.integers(0, 2**32 - 1))
def test_partition_is_a_set_partition(K, conc, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 5, 120)
    part = dirichlet_partition(labels, K, conc, seed, 5)
    allidx = np.concatenate(part.indices)
    assert len(allidx) == len(labels)
    assert np.array_equal(np.sort(allidx), np.arange(len(labels)))
    assert all(len(i) > 0 for i in part.indices)
    np.testing.assert_array_equal(part.histograms.sum(axis=0), np.bincount(labels, minlength=5))
    assert abs(part.weights.sum() - 1.0) <= 1e-12


def test_partition_errors():
    with pytest.raises(ConfigError):
        dirichlet_partition(np.zeros(10, int), 1, 0.5, 0)
    with pytest.raises(ConfigError):
        dirichlet_partition(np.zeros(10, int), 3, 0.0, 0)
    with pytest.raises(ConfigError):
        dirichlet_partition(np.zeros(3, int), 5, 0.5, 0)


def test_large_concentration_matches_global_proportions():
    labels = np.repeat(np.arange(10), 1000)
    part = dirichlet_partition(labels, 10, 1e4, 0, 10)
    props = part.histograms / part.histograms.sum(axis=1, keepdims=True)
    assert np.max(np.abs(props - 0.1)) < 0.05


def test_small_concentration_is_more_skewed():
    labels = np.repeat(np.arange(10), 200)
    skewed = [entropy_rows(dirichlet_partition(labels, 20, 0.1, s, 10).histograms).mean() for s in range(20)]
    mild = [entropy_rows(dirichlet_partition(labels, 20, 1.0, s, 10).histograms).mean() for s in range(20)]
    assert np.mean(skewed) < np.mean(mild)


# --- participation ----------------------------------------------------------------

def test_participation_examples():
    np.testing.assert_array_equal(build_participation(7, 1.0).freqs, np.ones(7))
    np.testing.assert_allclose(build_participation(2, 0.1).freqs, [0.1, 1.0])
    with pytest.raises(ConfigError):
        build_participation(5, 0.0)
    with pytest.raises(ConfigError):
        build_participation(5, 1.5)
    assert np.all(build_participation(50, 0.01).freqs > 0)


def test_full_rate_full_availability_selects_everyone():
    rng = np.random.default_rng(0)
    m = build_participation(9, 1.0)
    for _ in range(5):
        np.testing.assert_array_equal(select_round_clients(m, 1.0, rng), np.arange(9))


def test_selection_never_empty():
    rng = np.random.default_rng(1)
    m = build_participation(10, 0.01)
    assert all(len(select_round_clients(m, 0.1, rng)) >= 1 for _ in range(500))
    with pytest.raises(ConfigError):
        select_round_clients(m, 0.0, rng)


def test_top_decile_participates_far_more_than_bottom():
    m = build_participation(100, 0.1)
    for seed in range(3):
        rng = stream(seed, 3)
        counts = np.zeros(100)
        for _ in range(300):
            counts[select_round_clients(m, 0.1, rng)] += 1
        assert counts[90:].sum() >= 5 * counts[:10].sum()


def exact_selection_rates(freqs, m):
    """P(client k selected) by enumerating every candidate pool, conditioned
    on a nonempty selection (the redraw rule)."""
    K = len(freqs)
    pools = list(itertools.combinations(range(K), m))
    hit = np.zeros(K)
    p_empty = 0.0
    for pool in pools:
        p_empty += np.prod([1 - freqs[j] for j in pool]) / len(pools)
        for k in pool:
            hit[k] += freqs[k] / len(pools)
    return hit / (1 - p_empty)


def test_selection_frequencies_match_enumeration():
    m = build_participation(10, 0.5)
    rng = np.random.default_rng(2)
    n = 1000
    counts = np.zeros(10)
    for _ in range(n):
        counts[select_round_clients(m, 0.5, rng)] += 1
    p = exact_selection_rates(m.freqs, pool_size(10, 0.5))
    # the enumeration is the analytic rate * f_k, rescaled by the redraw rule
    ratio = p / (0.5 * m.freqs)
    np.testing.assert_allclose(ratio, ratio[0], rtol=1e-12)
    assert 1.0 <= ratio[0] < 1.05
    sigma = np.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(counts / n - p) <= 3 * sigma)


# --- client and server -------------------------------------------------------------

def client_setup(cfg, seed=0):
    ds, part, params = prepare(cfg)
    idx = part.indices[0]
    return params, ds.x_train[idx], ds.y_train[idx]


def test_zero_local_steps_is_zero_update():
    for method in ("fedavg", "cafe"):
        cfg = tiny(method=method, local_epochs=0)
        params, x, y = client_setup(cfg)
        u = client_local_train(params, x, y, cfg, np.random.default_rng(0))
        assert np.all(u.xi == 0)


def test_empty_shard_is_skipped_with_warning(caplog):
    cfg = tiny()
    params, x, y = client_setup(cfg)
    with caplog.at_level(logging.WARNING):
        assert client_local_train(params, x[:0], y[:0], cfg, np.random.default_rng(0), client=3) is None
    assert "client 3" in caplog.text


def test_fedprox_zero_weight_is_fedavg_bitwise():
    a = run_experiment(tiny(method="fedavg", rounds=5))
    b = run_experiment(tiny(method="fedprox", prox=0.0, rounds=5))
    assert a.params.to_vector().tobytes() == b.params.to_vector().tobytes()
    assert metrics_csv(a.rows) == metrics_csv(b.rows)


def test_fedprox_pulls_toward_global_model():
    cfg = tiny(method="fedprox", prox=0.0, local_epochs=10, lr=0.1)
    params, x, y = client_setup(cfg)
    free = client_local_train(params, x, y, cfg, np.random.default_rng(0))
    held = client_local_train(params, x, y, cfg.replace(prox=5.0), np.random.default_rng(0))
    assert held.norm < free.norm


def reduced_pair(**kw):
    shared = dict(mu_global=0.3, aggregation="data", tau=5.0, **kw)
    cafe = tiny(method="cafe", alpha=0.0, beta=0.0, gamma=0.0, ring_size=1, force_invalid_drift=True, **shared)
    cos = tiny(method="fedavg", head="cosine", **shared)
    return cafe, cos


def test_reduced_head_trajectory_matches_cosine_baseline():
    cafe, cos = reduced_pair(rounds=5)
    a, b = run_experiment(cafe), run_experiment(cos)
    assert np.linalg.norm(a.params.to_vector() - b.params.to_vector()) <= 1e-10


def test_server_single_participant_moves_by_its_update():
    w = np.arange(4.0)
    xi = np.array([1.0, -1.0, 0.5, 2.0])
    new, weights = server_aggregate([ClientUpdate(2, 1, xi, 17)], w, GlobalMomentum(0.0, 0.1))
    np.testing.assert_array_equal(weights, [1.0])
    np.testing.assert_allclose(new, w - 0.1 * xi, rtol=1e-15)


def test_server_identical_updates_idempotent():
    xi = np.array([0.3, -0.2])
    ups = [ClientUpdate(k, 1, xi.copy(), n) for k, n in enumerate((3, 9, 20))]
    new, _ = server_aggregate(ups, np.zeros(2), GlobalMomentum(0.0, 1.0))
    np.testing.assert_allclose(new, -xi, rtol=1e-14)


def test_server_unequal_clients_weighted_mean():
    rng = np.random.default_rng(3)
    ns = (5, 12, 40)
    ups = [ClientUpdate(k, 1, rng.normal(size=6), n) for k, n in zip((7, 2, 4), ns)]
    new, weights = server_aggregate(ups, np.zeros(6), GlobalMomentum(0.0, 1.0), "data")
    total = sum(ns)
    hand = np.zeros(6)
    for u in ups:
        hand += u.n_samples / total * u.xi
    np.testing.assert_allclose(new, -hand, rtol=1e-12)
    assert abs(weights.sum() - 1.0) <= 1e-12
    # weights are reported in ascending client order
    np.testing.assert_allclose(weights, [12 / total, 40 / total, 5 / total])
    new, weights = server_aggregate(ups, np.zeros(6), GlobalMomentum(0.0, 1.0), "uniform")
    np.testing.assert_allclose(new, -sum(u.xi for u in ups) / 3, rtol=1e-12)


def test_server_rejects_bad_shapes_and_empty():
    with pytest.raises(ConfigError):
        server_aggregate([], np.zeros(2), GlobalMomentum(0.0, 1.0))
    with pytest.raises(ConfigError):
        server_aggregate([ClientUpdate(0, 1, np.zeros(3), 1)], np.zeros(2), GlobalMomentum(0.0, 1.0))


def test_server_drift_modes():
    sd = ServerDrift(np.ones((2, 3)))
    sd.update([np.full((2, 3), 2.0), np.zeros((2, 3))], np.array([0.5, 0.5]), 0.5, "running")
    np.testing.assert_allclose(sd.lam, 1.5)
    sd.update([np.full((2, 3), 4.0)], np.array([1.0]), 0.5, "per_round")
    np.testing.assert_allclose(sd.lam, 4.0)


# --- experiment loop ------------------------------------------------------------------

def test_zero_rounds_returns_initial_metrics():
    res = run_experiment(tiny(rounds=0))
    assert len(res.rows) == 1 and res.rows[0].round == 0
    init = init_params(stream(res.config.seed, 2), 6, (8,), 4)
    np.testing.assert_array_equal(res.params.to_vector(), init.to_vector())


@pytest.mark.parametrize("method", ["cafe", "fedavg", "fedprox"])
def test_same_seed_same_csv(method):
    a = run_experiment(tiny(method=method))
    b = run_experiment(tiny(method=method))
    assert metrics_csv(a.rows) == metrics_csv(b.rows)


def test_different_seed_changes_run():
    a = run_experiment(tiny(seed=0))
    b = run_experiment(tiny(seed=1))
    assert metrics_csv(a.rows) != metrics_csv(b.rows)


@pytest.mark.parametrize("method", ["cafe", "fedavg"])
def test_parallel_clients_match_serial(method):
    a = run_experiment(tiny(method=method, workers=1, sample_rate=1.0))
    b = run_experiment(tiny(method=method, workers=3, sample_rate=1.0))
    assert a.params.to_vector().tobytes() == b.params.to_vector().tobytes()
    assert metrics_csv(a.rows) == metrics_csv(b.rows)


def test_homogeneous_limit_reduced_head_matches_baseline():
    # full availability, every client each round, near-uniform shards, no momentum
    cafe, cos = reduced_pair(rounds=4, cf=1.0, sample_rate=1.0, dir_alpha=1e4)
    cafe = cafe.replace(mu_global=0.0, mu_local=0.0)
    cos = cos.replace(mu_global=0.0, mu_local=0.0)
    a, b = run_experiment(cafe), run_experiment(cos)
    assert np.linalg.norm(a.params.to_vector() - b.params.to_vector()) <= 1e-10
    props = a.partition.histograms / a.partition.histograms.sum(axis=1, keepdims=True)
    assert np.max(np.abs(props - props.mean(axis=0))) < 0.2


def test_participation_counts_and_records():
    res = run_experiment(tiny(rounds=6, sample_rate=1.0, cf=1.0))
    np.testing.assert_array_equal(res.participation_counts, np.full(4, 6))
    assert [r.round for r in res.records] == list(range(1, 7))
    assert all(r.selected == [0, 1, 2, 3] for r in res.records)
    assert [row.participation for row in res.rows] == [float(r) for r in range(7)]


def test_cafe_builds_global_drift_directions():
    res = run_experiment(tiny(method="cafe", rounds=4))
    dirs = res.server_drift.directions()
    assert dirs.global_valid.any()
    norms = np.linalg.norm(dirs.global_dirs[dirs.global_valid], axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-9)


def test_class_count_mismatch_is_config_error():
    ds = generate_synthetic(3, 6, 10, 3.0, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        run_experiment(tiny(), dataset=ds)
