"""Feed-forward feature extractor and bias-free linear classifier.

Forward and backward passes are written out by hand. Shapes:

* ``x``: ``(N, d_in)`` feature rows
* ``h``: ``(N, d_h)`` embeddings
* ``phi``: ``(d_h, C)``, one column per class
* residual ``r[i, c] = 1{y_i = c} - p[i, c]``

Gradients are stored in descent form (``dL/d.``) throughout.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UsageError

ACTIVATIONS = ("relu", "tanh", "identity")
LOG_CLAMP = 1e-12


def _act(a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "tanh":
        return np.tanh(a)
    return a


def _act_grad(a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (a > 0.0).astype(a.dtype)
    if kind == "tanh":
        return 1.0 - np.tanh(a) ** 2
    return np.ones_like(a)


@dataclass
class ModelParams:
    """Trainable state ``w = {theta, phi}``.

    ``weights[l]`` has shape ``(fan_in, fan_out)``; the classifier carries no
    bias term.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    phi: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if len(self.weights) != len(self.biases):
            raise ConfigError("weights and biases must have the same number of layers")
        d = None
        for W, b in zip(self.weights, self.biases):
            if d is not None and W.shape[0] != d:
                raise ConfigError(f"layer fan-in {W.shape[0]} does not match previous width {d}")
            if b.shape != (W.shape[1],):
                raise ConfigError(f"bias shape {b.shape} does not match layer width {W.shape[1]}")
            d = W.shape[1]
        if d is not None and self.phi.shape[0] != d:
            raise ConfigError(f"phi has {self.phi.shape[0]} rows, embedding width is {d}")

    @property
    def n_classes(self) -> int:
        return self.phi.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.phi.shape[0]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0] if self.weights else self.phi.shape[0]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        out.append(self.phi)
        return out

    def copy(self) -> "ModelParams":
        return ModelParams([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                           self.phi.copy(), self.activation)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_vector(self, vec: np.ndarray) -> "ModelParams":
        """New params with this layout, filled from a flat vector."""
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.size:
            raise ConfigError(f"vector has {vec.size} entries, model has {self.size}")
        arrays, i = [], 0
        for a in self.arrays():
            arrays.append(vec[i:i + a.size].reshape(a.shape).copy())
            i += a.size
        n = len(self.weights)
        return ModelParams(arrays[0:2 * n:2], arrays[1:2 * n:2], arrays[-1], self.activation)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def phi_slice(self) -> slice:
        """Location of ``phi`` (row-major) inside :meth:`to_vector`."""
        return slice(self.size - self.phi.size, self.size)


def init_params(rng: np.random.Generator, d_in: int, hidden: tuple[int, ...], n_classes: int,
                activation: str = "relu") -> ModelParams:
    """He-style init for the extractor, small Gaussian init for ``phi``.

    Draw order: each layer's weight matrix in order, then ``phi``. Biases start
    at zero.
    """
    if d_in < 1 or n_classes < 2 or any(w < 1 for w in hidden):
        raise ConfigError(f"bad model dimensions d_in={d_in} hidden={hidden} C={n_classes}")
    weights, biases = [], []
    fan_in = d_in
    for width in hidden:
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, width)))
        biases.append(np.zeros(width))
        fan_in = width
    phi = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, n_classes))
    return ModelParams(weights, biases, phi, activation)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)


def forward_features(x: np.ndarray, params: ModelParams) -> tuple[np.ndarray, ForwardCache]:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != params.input_dim:
        raise ConfigError(f"input has {x.shape[1]} features, model expects {params.input_dim}")
    cache = ForwardCache()
    h = x
    for W, b in zip(params.weights, params.biases):
        cache.inputs.append(h)
        a = h @ W + b
        cache.preacts.append(a)
        h = _act(a, params.activation)
    return h, cache


def logits(h: np.ndarray, phi: np.ndarray) -> np.ndarray:
    if h.shape[-1] != phi.shape[0]:
        raise ConfigError(f"embedding width {h.shape[-1]} does not match phi rows {phi.shape[0]}")
    return h @ phi


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_jacobian(p: np.ndarray) -> np.ndarray:
    """``dp_j/dz_c`` for one probability row: ``p_c(1-p_c)`` on the diagonal,
    ``-p_c p_j`` off it."""
    return np.diag(p) - np.outer(p, p)


def one_hot(y: np.ndarray, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ConfigError(f"labels must lie in [0, {n_classes})")
    out = np.zeros((y.size, n_classes))
    out[np.arange(y.size), y] = 1.0
    return out


def cross_entropy(p: np.ndarray, y: np.ndarray) -> float:
    """Mean of ``-log p_y`` over the batch, with ``p_y`` clamped at 1e-12."""
    p = np.atleast_2d(p)
    y = np.atleast_1d(y)
    py = np.maximum(p[np.arange(y.size), y], LOG_CLAMP)
    return float(-np.log(py).mean())


def residuals(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``1{y_i = c} - p_ic``; each row sums to zero."""
    p = np.atleast_2d(p)
    return one_hot(y, p.shape[1]) - p


def grad_wrt_features(resid: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Per-sample ``dl_i/dh_i = sum_c (p_ic - 1{y_i=c}) phi_c``."""
    return -resid @ phi.T


def grad_wrt_classifier(resid: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Column ``c`` is ``zeta_c = sum_i (p_ic - 1{y_i=c}) h_i`` (summed loss)."""
    return -h.T @ resid


def to_pos_neg_form(zeta: np.ndarray) -> np.ndarray:
    """Flip a descent-form classifier gradient to the positive/negative-sample
    form ``sum_{y=c} (1-p) h - sum_{y!=c} p h``.

    The two conventions differ only by sign; every training path uses the
    descent form.
    """
    return -zeta


def backprop_extractor(dh: np.ndarray, params: ModelParams,
                       cache: ForwardCache | None) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Chain ``dL/dh`` back through the extractor layers."""
    if cache is None or len(cache.inputs) != len(params.weights):
        raise UsageError("backprop_extractor needs the cache from forward_features")
    dW = [None] * len(params.weights)
    db = [None] * len(params.weights)
    g = np.asarray(dh, dtype=float)
    for l in range(len(params.weights) - 1, -1, -1):
        g = g * _act_grad(cache.preacts[l], params.activation)
        dW[l] = cache.inputs[l].T @ g
        db[l] = g.sum(axis=0)
        if l:
            g = g @ params.weights[l].T
    return dW, db


def softmax_loss_and_grad(params: ModelParams, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of the linear-softmax head and its flat gradient."""
    h, cache = forward_features(x, params)
    p = softmax(logits(h, params.phi))
    n = len(y)
    r = residuals(p, y)
    dphi = grad_wrt_classifier(r, h) / n
    dh = grad_wrt_features(r, params.phi) / n
    dW, db = backprop_extractor(dh, params, cache)
    return cross_entropy(p, y), ModelParams(dW, db, dphi, params.activation).to_vector()
