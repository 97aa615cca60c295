"""Datasets: synthetic Gaussian mixtures and IDX (MNIST-format) files."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, LoadError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int

    @property
    def input_dim(self) -> int:
        return self.x_train.shape[1]


def class_counts(per_class: int, n_classes: int, decay: float = 1.0) -> np.ndarray:
    """``per_class * decay**c``, rounded, at least one sample per class."""
    return np.maximum(1, np.round(per_class * decay ** np.arange(n_classes))).astype(int)


def generate_synthetic(n_classes: int, dim: int, per_class: int, separation: float,
                       rng: np.random.Generator | int, long_tail: float = 1.0,
                       test_fraction: float = 1 / 6) -> Dataset:
    """Spherical unit-variance Gaussian per class.

    Class means sit on the vertices of a regular simplex with pairwise
    distance ``separation`` (in units of the noise sigma), then a random
    rotation mixes all coordinates. Each class is split 5:1 into train and
    test. ``long_tail < 1`` scales class ``c`` by ``long_tail**c`` before the
    split.

    Draw order: rotation, then per class the sample matrix and a shuffle.
    """
    if n_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {n_classes}")
    if dim < n_classes:
        raise ConfigError(f"input dim {dim} must be >= number of classes {n_classes}")
    rng = np.random.default_rng(rng)
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    means = np.zeros((n_classes, dim))
    means[:, :n_classes] = np.eye(n_classes) * (separation / np.sqrt(2.0))
    means = means @ q.T
    xs_tr, ys_tr, xs_te, ys_te = [], [], [], []
    for c, n in enumerate(class_counts(per_class, n_classes, long_tail)):
        x = means[c] + rng.normal(size=(n, dim))
        rng.shuffle(x)
        n_test = int(round(n * test_fraction))
        xs_te.append(x[:n_test])
        xs_tr.append(x[n_test:])
        ys_te.append(np.full(n_test, c))
        ys_tr.append(np.full(n - n_test, c))
    return Dataset(np.concatenate(xs_tr), np.concatenate(ys_tr).astype(np.int64),
                   np.concatenate(xs_te), np.concatenate(ys_te).astype(np.int64), n_classes)


def centroid_accuracy(ds: Dataset) -> float:
    """Nearest-class-mean classifier fit on train, scored on test."""
    cents = np.stack([ds.x_train[ds.y_train == c].mean(axis=0) for c in range(ds.n_classes)])
    d = ((ds.x_test[:, None, :] - cents[None]) ** 2).sum(-1)
    return float((d.argmin(1) == ds.y_test).mean())


def _read_header(buf: bytes, path: str, magic: int, ndim: int) -> tuple[int, ...]:
    need = 4 + 4 * ndim
    if len(buf) < need:
        raise LoadError(f"{path}: {len(buf)} bytes, header needs {need}")
    (got,) = struct.unpack_from(">I", buf, 0)
    if got != magic:
        raise LoadError(f"{path}: magic 0x{got:08x} at offset 0, expected 0x{magic:08x}")
    return struct.unpack_from(f">{ndim}I", buf, 4)


def load_idx(images_path: str, labels_path: str, n_classes: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Unsigned-byte IDX image/label pair -> (features in [0, 1], labels).

    Images are flattened row-major. Dimensions are big-endian.
    """
    with open(images_path, "rb") as fh:
        ibuf = fh.read()
    with open(labels_path, "rb") as fh:
        lbuf = fh.read()
    n_img, rows, cols = _read_header(ibuf, images_path, IDX_IMAGES_MAGIC, 3)
    (n_lab,) = _read_header(lbuf, labels_path, IDX_LABELS_MAGIC, 1)
    if n_img != n_lab:
        raise LoadError(f"{images_path} declares {n_img} images but {labels_path} declares {n_lab} labels")
    body = n_img * rows * cols
    if len(ibuf) - 16 < body:
        raise LoadError(f"{images_path}: expected {body} pixel bytes from offset 16, found {len(ibuf) - 16}")
    if len(lbuf) - 8 < n_lab:
        raise LoadError(f"{labels_path}: expected {n_lab} label bytes from offset 8, found {len(lbuf) - 8}")
    x = np.frombuffer(ibuf, dtype=np.uint8, count=body, offset=16).reshape(n_img, rows * cols)
    y = np.frombuffer(lbuf, dtype=np.uint8, count=n_lab, offset=8).astype(np.int64)
    if n_lab and y.max() >= n_classes:
        bad = int(np.argmax(y >= n_classes))
        raise LoadError(f"{labels_path}: label {y[bad]} at offset {8 + bad} outside [0, {n_classes})")
    return x.astype(np.float64) / 255.0, y


def write_idx(images_path: str, labels_path: str, images: np.ndarray, labels: np.ndarray):
    """Write ``(N, rows, cols)`` uint8 images and uint8 labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def load_dataset(cfg, rng: np.random.Generator) -> Dataset:
    if cfg.dataset == "idx":
        xtr, ytr = load_idx(cfg.train_images, cfg.train_labels, cfg.n_classes)
        xte, yte = load_idx(cfg.test_images, cfg.test_labels, cfg.n_classes)
        return Dataset(xtr, ytr, xte, yte, cfg.n_classes)
    return generate_synthetic(cfg.n_classes, cfg.input_dim, cfg.per_class, cfg.separation, rng,
                              long_tail=cfg.long_tail)
