import os
import struct
import subprocess
import sys

import numpy as np
import pytest

from cafefl.checkpoint import load_checkpoint, save_checkpoint
from cafefl.cli import main
from cafefl.config import ExperimentConfig, dump_config, load_config, parse_config_text
from cafefl.data import (centroid_accuracy, class_counts, generate_synthetic, load_idx, write_idx)
from cafefl.errors import ConfigError, LoadError
from cafefl.experiments import (ABLATIONS, evaluate_checkpoint, run_ablation, save_outputs,
                                to_checkpoint)
from cafefl.federation import evaluate, prepare, run_experiment
from cafefl.metrics import emit_plot_data, metrics_csv, metrics_header, read_metrics, write_metrics

SMALL = dict(n_classes=4, input_dim=6, per_class=30, clients=4, rounds=3, local_epochs=2,
             batch_size=8, hidden=(8,), lr=0.05, sample_rate=0.5)


def small(**kw):
    return ExperimentConfig(**{**SMALL, **kw})


# --- config -------------------------------------------------------------------

def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "empty.cfg"
    p.write_text("")
    assert load_config(str(p)) == ExperimentConfig()
    d = ExperimentConfig()
    assert (d.lr, d.local_epochs, d.rounds, d.clients) == (0.001, 5, 300, 100)


def test_negative_lr_names_the_field():
    with pytest.raises(ConfigError, match="lr"):
        ExperimentConfig(lr=-1)
    with pytest.raises(ConfigError, match="cf"):
        ExperimentConfig(cf=0.0)
    with pytest.raises(ConfigError, match="mu_local"):
        ExperimentConfig(mu_local=1.0)
    with pytest.raises(ConfigError, match="tau"):
        ExperimentConfig(tau=0.0)


def test_flags_override_file(tmp_path):
    p = tmp_path / "a.cfg"
    p.write_text("dir_alpha = 0.5\nrounds = 7  # comment\nmethod = fedprox\n")
    cfg = load_config(str(p), {"dir_alpha": "0.1"})
    assert cfg.dir_alpha == 0.1 and cfg.rounds == 7 and cfg.method == "fedprox"


def test_config_text_errors():
    with pytest.raises(ConfigError):
        parse_config_text("not_a_key = 3\n")
    with pytest.raises(ConfigError):
        parse_config_text("rounds 3\n")


def test_dump_roundtrip(tmp_path):
    cfg = small(method="cafe", hidden=(8, 5), mu_global=0.2, feature_calibration=False)
    p = tmp_path / "c.cfg"
    p.write_text(dump_config(cfg))
    assert load_config(str(p)) == cfg


# --- data ---------------------------------------------------------------------

def test_zero_separation_is_chance():
    ds = generate_synthetic(4, 8, 3000, 0.0, np.random.default_rng(0))
    assert abs(centroid_accuracy(ds) - 0.25) < 0.03


def test_large_separation_centroid_accuracy():
    ds = generate_synthetic(10, 32, 300, 10.0, np.random.default_rng(1))
    assert centroid_accuracy(ds) >= 0.99


def test_long_tail_ratio_and_split():
    counts = class_counts(512, 10, 0.5)
    assert counts[0] / counts[-1] == 2 ** 9
    ds = generate_synthetic(10, 10, 600, 3.0, np.random.default_rng(2))
    assert len(ds.y_train) == 5 * len(ds.y_test)
    with pytest.raises(ConfigError):
        generate_synthetic(1, 4, 10, 1.0, 0)


def test_synthetic_is_seeded():
    a = generate_synthetic(3, 5, 20, 2.0, np.random.default_rng(3))
    b = generate_synthetic(3, 5, 20, 2.0, np.random.default_rng(3))
    assert a.x_train.tobytes() == b.x_train.tobytes()


def test_idx_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    imgs = rng.integers(0, 256, size=(4, 3, 5), dtype=np.uint8)
    labels = np.array([0, 3, 9, 1], dtype=np.uint8)
    ip, lp = str(tmp_path / "i.idx"), str(tmp_path / "l.idx")
    write_idx(ip, lp, imgs, labels)
    x, y = load_idx(ip, lp, 10)
    np.testing.assert_array_equal(np.round(x * 255).astype(np.uint8), imgs.reshape(4, 15))
    np.testing.assert_array_equal(y, labels)


def test_idx_errors(tmp_path):
    imgs = np.zeros((4, 2, 2), np.uint8)
    ip, lp = str(tmp_path / "i.idx"), str(tmp_path / "l.idx")
    write_idx(ip, lp, imgs, np.array([0, 1, 2, 7], np.uint8))
    with pytest.raises(LoadError, match="outside"):
        load_idx(ip, lp, 5)
    raw = open(ip, "rb").read()
    open(ip, "wb").write(raw[:-3])
    with pytest.raises(LoadError, match="pixel bytes"):
        load_idx(ip, lp, 10)
    open(ip, "wb").write(struct.pack(">IIII", 0x0803 + 1, 4, 2, 2) + raw[16:])
    with pytest.raises(LoadError, match="magic"):
        load_idx(ip, lp, 10)
    open(ip, "wb").write(raw[:6])
    with pytest.raises(LoadError, match="header"):
        load_idx(ip, lp, 10)
    write_idx(ip, lp, imgs, np.array([0, 1, 2], np.uint8))
    with pytest.raises(LoadError, match="declares"):
        load_idx(ip, lp, 10)


def test_idx_dataset_trains(tmp_path):
    rng = np.random.default_rng(5)
    labels = rng.integers(0, 3, 60).astype(np.uint8)
    imgs = (rng.integers(0, 60, size=(60, 4, 4)) + 60 * labels[:, None, None]).astype(np.uint8)
    paths = {k: str(tmp_path / f"{k}.idx") for k in ("ti", "tl", "vi", "vl")}
    write_idx(paths["ti"], paths["tl"], imgs[:48], labels[:48])
    write_idx(paths["vi"], paths["vl"], imgs[48:], labels[48:])
    cfg = small(dataset="idx", n_classes=3, train_images=paths["ti"], train_labels=paths["tl"],
                test_images=paths["vi"], test_labels=paths["vl"], rounds=2)
    res = run_experiment(cfg)
    assert len(res.rows) == 3 and res.params.input_dim == 16


# --- metrics and plot data ---------------------------------------------------------

def test_metrics_csv_shapes(tmp_path):
    res = run_experiment(small(rounds=0))
    text = metrics_csv(res.rows)
    assert text.count("\n") == 2
    assert text.splitlines()[0] == ",".join(metrics_header(4))
    assert metrics_header(2) == ["round", "acc", "loss", "acc_0", "acc_1", "participation", "secs"]
    with pytest.raises(ValueError):
        metrics_csv([])


def test_metrics_rounds_strictly_increase(tmp_path):
    res = run_experiment(small(rounds=300, clients=2, per_class=6, local_epochs=1, sample_rate=1.0))
    path = write_metrics(res.rows, str(tmp_path / "m.csv"))
    rounds = [int(r["round"]) for r in read_metrics(path)]
    assert len(rounds) == 301 and all(b > a for a, b in zip(rounds, rounds[1:]))


def test_same_seed_same_bytes(tmp_path):
    a = write_metrics(run_experiment(small(method="cafe")).rows, str(tmp_path / "a.csv"))
    b = write_metrics(run_experiment(small(method="cafe")).rows, str(tmp_path / "b.csv"))
    assert open(a, "rb").read() == open(b, "rb").read()


def test_timing_column_opt_in():
    res = run_experiment(small(timing=True))
    assert res.rows[-1].secs > 0
    assert all(r.secs == 0 for r in run_experiment(small()).rows)


def test_plot_data_long_format(tmp_path):
    a, b = run_experiment(small(method="fedavg")), run_experiment(small(method="cafe"))
    path = emit_plot_data({"fedavg": a.rows, "cafe": b.rows}, str(tmp_path / "p.csv"), seed=0)
    rows = read_metrics(path)
    assert list(rows[0]) == ["method", "seed", "round", "metric", "value"]
    assert len(rows) == 2 * 2 * len(a.rows)
    assert {r["method"] for r in rows} == {"fedavg", "cafe"}


def test_unwritable_path_raises(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        write_metrics(run_experiment(small(rounds=0)).rows, str(blocker / "m.csv"))


# --- checkpoint ---------------------------------------------------------------------

@pytest.mark.parametrize("method,head", [("cafe", "linear"), ("fedavg", "linear"), ("fedavg", "cosine")])
def test_checkpoint_roundtrip_predictions(tmp_path, method, head):
    res = run_experiment(small(method=method, head=head, rounds=4))
    path = str(tmp_path / "ck.bin")
    save_checkpoint(path, to_checkpoint(res))
    ck = load_checkpoint(path)
    assert all(np.array_equal(a, b) for a, b in zip(ck.params.arrays(), res.params.arrays()))
    assert ck.round == 4 and ck.method == method and ck.config["rounds"] == 4
    ds, _, _ = prepare(res.config)
    acc, _, _ = evaluate(res.params, ds.x_test, ds.y_test, res.config, res.server_drift)
    assert evaluate_checkpoint(path, ds.x_test, ds.y_test) == pytest.approx(acc, abs=0)


def test_checkpoint_rejects_bad_files(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"NOTACKPT" + bytes(8))
    with pytest.raises(LoadError):
        load_checkpoint(str(p))
    res = run_experiment(small(rounds=1))
    good = tmp_path / "good.bin"
    save_checkpoint(str(good), to_checkpoint(res))
    raw = good.read_bytes()
    p.write_bytes(raw[:-10])
    with pytest.raises(LoadError):
        load_checkpoint(str(p))


# --- ablation ---------------------------------------------------------------------------

def test_ablation_shares_partition_and_switches_modules():
    results = run_ablation(small(rounds=2))
    assert list(results) == list(ABLATIONS)
    parts = [r.partition.indices for r in results.values()]
    for other in parts[1:]:
        assert all(np.array_equal(a, b) for a, b in zip(parts[0], other))
    assert results["no_ha"].config.effective_ring == 1
    assert not results["no_fc"].config.feature_calibration


def test_all_modules_off_is_cosine_baseline():
    shared = dict(mu_global=0.0, aggregation="data", tau=5.0, rounds=3)
    off = small(method="cafe", parameter_calibration=False, feature_calibration=False,
                history_average=False, **shared)
    cos = small(method="fedavg", head="cosine", **shared)
    a, b = run_experiment(off), run_experiment(cos)
    assert np.linalg.norm(a.params.to_vector() - b.params.to_vector()) <= 1e-10


# --- CLI --------------------------------------------------------------------------------

def cli_args(out, *extra):
    base = ["--n-classes", "4", "--input-dim", "6", "--per-class", "30", "--clients", "4", "--rounds", "2",
            "--local-epochs", "2", "--batch-size", "8", "--hidden", "8", "--lr", "0.05", "--out", str(out)]
    return base + list(extra)


def test_cli_run_and_infer(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", *cli_args(out, "--method", "cafe")]) == 0
    assert (out / "metrics.csv").exists() and (out / "checkpoint.bin").exists()
    assert main(["infer", "--checkpoint", str(out / "checkpoint.bin"), "--config", str(out / "config.txt")]) == 0
    assert "accuracy" in capsys.readouterr().out


def test_cli_seeds_and_ablation(tmp_path, capsys):
    assert main(["run", *cli_args(tmp_path / "s", "--method", "fedavg"), "--seeds", "0,1"]) == 0
    assert (tmp_path / "s" / "metrics_seed1.csv").exists()
    assert main(["ablation", *cli_args(tmp_path / "a")]) == 0
    assert (tmp_path / "a" / "plot_ablation.csv").exists()
    assert "no_fc" in capsys.readouterr().out


def test_cli_reports_config_errors(capsys):
    assert main(["config", "--lr", "-1"]) == 2
    assert "lr" in capsys.readouterr().err


def test_cli_infer_in_separate_process(tmp_path):
    out = tmp_path / "r"
    assert main(["run", *cli_args(out)]) == 0
    res = subprocess.run([sys.executable, "-m", "cafefl", "infer", "--checkpoint", str(out / "checkpoint.bin"),
                          "--config", str(out / "config.txt")], capture_output=True, text=True, check=True)
    assert res.stdout.startswith("accuracy")


def test_save_outputs_files(tmp_path):
    res = run_experiment(small(rounds=1))
    paths = save_outputs(res, str(tmp_path), "x")
    assert all(os.path.exists(p) for p in paths.values())
    assert load_config(paths["config"]) == res.config
