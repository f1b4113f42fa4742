"""Layer-level forward and backward passes.

Matrices are laid out units x batch: a dense layer with N inputs and M
outputs maps an N x B input to an M x B pre-activation.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .instrument import MultCounter, record_runtime
from .quantize import (
    DEFAULT_BUDGET,
    QuantizedMatrix,
    ShiftBudget,
    clip,
    pow2_quantize_matrix,
    sample_binary,
    sample_ternary,
    shift_outer,
)
from .tensor import FLOAT, Prng, ShapeError, as_matrix, matmul, sign_accumulate_matmul


class ForwardMode(enum.Enum):
    FULL = "full"
    BINARY = "binary"
    TERNARY = "ternary"

    @property
    def sampled(self) -> bool:
        return self is not ForwardMode.FULL


class BackwardMode(enum.Enum):
    FULL = "full"
    QBP = "qbp"


class CacheError(RuntimeError):
    """Backward called without the caches of a matching forward call."""


@dataclass
class Updates:
    dw: np.ndarray
    db: np.ndarray


@dataclass
class DenseLayer:
    wbar: np.ndarray
    bias: np.ndarray
    activation: str = "identity"
    cache_sampled: np.ndarray | None = field(default=None, repr=False)
    cache_preact: np.ndarray | None = field(default=None, repr=False)
    cache_input: np.ndarray | None = field(default=None, repr=False)
    cache_input_q: QuantizedMatrix | None = field(default=None, repr=False)

    def __post_init__(self):
        self.wbar = as_matrix(self.wbar)
        self.bias = as_matrix(self.bias, dtype=self.wbar.dtype)
        if self.bias.shape != (self.wbar.shape[0], 1):
            raise ShapeError(f"bias shape {self.bias.shape} does not match weights {self.wbar.shape}")
        if self.activation not in ("identity", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def init(cls, n_in: int, n_out: int, prng: Prng, activation: str = "identity", dtype=FLOAT) -> "DenseLayer":
        """Uniform init in [-s, s] with s = min(1, sqrt(6 / (n_in + n_out)))."""
        s = init_bound(n_in, n_out)
        w = (prng.uniforms((n_out, n_in)) * 2.0 - 1.0) * s
        return cls(w.astype(dtype), np.zeros((n_out, 1), dtype=dtype), activation)

    @property
    def n_in(self) -> int:
        return self.wbar.shape[1]

    @property
    def n_out(self) -> int:
        return self.wbar.shape[0]

    def clear_cache(self) -> None:
        self.cache_sampled = self.cache_preact = self.cache_input = self.cache_input_q = None


def init_bound(n_in: int, n_out: int) -> float:
    return float(min(1.0, np.sqrt(6.0 / (n_in + n_out))))


def sample_weights(wbar: np.ndarray, mode: ForwardMode, prng: Prng) -> np.ndarray:
    if mode is ForwardMode.BINARY:
        return sample_binary(wbar, prng)
    if mode is ForwardMode.TERNARY:
        return sample_ternary(wbar, prng)
    raise ValueError(f"mode {mode} does not sample weights")


def dense_forward(
    layer: DenseLayer,
    x: np.ndarray,
    mode: ForwardMode,
    prng: Prng | None = None,
    counter: MultCounter | None = None,
) -> np.ndarray:
    """Pre-activation W x + b; caches what the backward pass needs."""
    x = as_matrix(x, dtype=layer.wbar.dtype)
    if x.shape[0] != layer.n_in:
        raise ShapeError(f"layer expects {layer.n_in} inputs, got input of shape {x.shape}")
    B = x.shape[1]
    if mode.sampled:
        if prng is None:
            raise ValueError("sampling modes need a Prng")
        wb = sample_weights(layer.wbar, mode, prng)
        z = sign_accumulate_matmul(wb, x) + layer.bias
        record_runtime(counter, "adds", int(np.count_nonzero(wb)) * B)
    else:
        wb = None
        z = matmul(layer.wbar, x) + layer.bias
        record_runtime(counter, "forward_mults", layer.n_in * layer.n_out * B)
    layer.cache_sampled, layer.cache_input, layer.cache_preact = wb, x, z
    layer.cache_input_q = None
    return z


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0).astype(z.dtype, copy=False)


def relu_prime(z: np.ndarray) -> np.ndarray:
    """Indicator of z > 0; the derivative at exactly 0 is taken as 0."""
    return (z > 0).astype(z.dtype)


def _take_caches(layer: DenseLayer):
    if layer.cache_preact is None or layer.cache_input is None:
        raise CacheError("backward needs the caches of a forward call on the same step")
    return layer.cache_preact, layer.cache_input, layer.cache_sampled


def _local_gradient(layer: DenseLayer, delta: np.ndarray, z: np.ndarray) -> np.ndarray:
    delta = as_matrix(delta, dtype=layer.wbar.dtype)
    if delta.shape != z.shape:
        raise ShapeError(f"error signal shape {delta.shape} does not match layer output {z.shape}")
    if layer.activation == "relu":
        # masking, not multiplying
        return np.where(z > 0, delta, np.zeros_like(delta))
    return delta


def _propagate(layer, gd, sampled, backward_weights, counter):
    """Error signal for the layer below, through the weights the forward used."""
    if sampled is not None and backward_weights == "sampled":
        return sign_accumulate_matmul(np.ascontiguousarray(sampled.T), gd)
    record_runtime(counter, "backward_mults", layer.n_in * layer.n_out * gd.shape[1])
    return matmul(np.ascontiguousarray(layer.wbar.T), gd)


def _apply(layer: DenseLayer, dw: np.ndarray, db: np.ndarray) -> None:
    layer.wbar = clip(layer.wbar - dw)
    layer.bias = (layer.bias - db).astype(layer.wbar.dtype)


def _bias_update(g: np.ndarray) -> np.ndarray:
    return g.sum(axis=1, keepdims=True, dtype=g.dtype)


def dense_backward_qbp(
    layer: DenseLayer,
    delta: np.ndarray,
    eta: float,
    budget: ShiftBudget = DEFAULT_BUDGET,
    counter: MultCounter | None = None,
    backward_weights: str = "sampled",
) -> tuple[np.ndarray, Updates]:
    """Quantized back propagation through one dense layer.

    ``delta`` is dC/d(output of this layer's activation) for a ReLU layer and
    dC/d(pre-activation) otherwise. The layer input is quantized to signed
    powers of two, so the weight-gradient outer product is computed with
    shifts. Weights are updated in place (then clipped) and the caches are
    consumed.
    """
    z, x, sampled = _take_caches(layer)
    if layer.cache_input_q is not None and layer.cache_input_q.budget != budget:
        raise ValueError(f"cached input was quantized with {layer.cache_input_q.budget}, not {budget}")
    if layer.wbar.dtype != np.float32:
        raise TypeError("quantized back propagation works on float32 layers only")
    gd = _local_gradient(layer, delta, z)
    B = gd.shape[1]
    g = (np.float32(eta) * gd).astype(np.float32)
    record_runtime(counter, "elementwise_mults", 3 * layer.n_out * B)
    xq = layer.cache_input_q if layer.cache_input_q is not None else pow2_quantize_matrix(x, budget)
    layer.cache_input_q = xq
    dw, n_sat = shift_outer(g, xq)
    record_runtime(counter, "shifts", layer.n_out * layer.n_in * B)
    record_runtime(counter, "adds", layer.n_out * layer.n_in * B)
    record_runtime(counter, "saturations", n_sat)
    db = _bias_update(g)
    delta_prev = _propagate(layer, gd, sampled, backward_weights, counter)
    _apply(layer, dw, db)
    layer.clear_cache()
    return delta_prev, Updates(dw, db)


def dense_backward_full(
    layer: DenseLayer,
    delta: np.ndarray,
    eta: float,
    counter: MultCounter | None = None,
    backward_weights: str = "sampled",
) -> tuple[np.ndarray, Updates]:
    """Standard back propagation with real-valued products."""
    z, x, sampled = _take_caches(layer)
    gd = _local_gradient(layer, delta, z)
    B = gd.shape[1]
    g = (gd.dtype.type(eta) * gd).astype(gd.dtype)
    record_runtime(counter, "elementwise_mults", 3 * layer.n_out * B)
    dw = matmul(g, np.ascontiguousarray(x.T))
    record_runtime(counter, "backward_mults", layer.n_out * layer.n_in * B)
    db = _bias_update(g)
    delta_prev = _propagate(layer, gd, sampled, backward_weights, counter)
    _apply(layer, dw, db)
    layer.clear_cache()
    return delta_prev, Updates(dw, db)


@dataclass
class BatchNormLayer:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-4
    momentum: float = 0.1
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    # population statistics of the deterministic (real-valued) forward pass
    pop_mean: np.ndarray | None = None
    pop_var: np.ndarray | None = None
    _cache: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        self.gamma = as_matrix(self.gamma)
        self.beta = as_matrix(self.beta, dtype=self.gamma.dtype)
        m = self.gamma.shape[0]
        if self.running_mean is None:
            self.running_mean = np.zeros((m, 1), dtype=self.gamma.dtype)
        if self.running_var is None:
            self.running_var = np.ones((m, 1), dtype=self.gamma.dtype)

    @classmethod
    def init(cls, m: int, dtype=FLOAT, **kw) -> "BatchNormLayer":
        return cls(np.ones((m, 1), dtype=dtype), np.zeros((m, 1), dtype=dtype), **kw)

    @property
    def size(self) -> int:
        return self.gamma.shape[0]


def bn_forward(
    bn: BatchNormLayer,
    h: np.ndarray,
    training: bool,
    counter: MultCounter | None = None,
    stats: str = "running",
) -> np.ndarray:
    """gamma * (h - mean) / sqrt(var + eps) + beta, statistics per row.

    Inference uses the running averages, or the population statistics when
    ``stats="population"`` and they have been computed.
    """
    h = as_matrix(h, dtype=bn.gamma.dtype)
    if h.shape[0] != bn.size:
        raise ShapeError(f"batch norm expects {bn.size} rows, got {h.shape}")
    dt = h.dtype.type
    if training:
        B = h.shape[1]
        if B < 2:
            raise ValueError("batch norm training needs a batch of at least 2")
        mu = h.mean(axis=1, keepdims=True, dtype=h.dtype)
        centered = h - mu
        var = (centered * centered).mean(axis=1, keepdims=True, dtype=h.dtype)
        inv_std = dt(1) / np.sqrt(var + dt(bn.eps))
        xhat = centered * inv_std
        mom = dt(bn.momentum)
        bn.running_mean = ((dt(1) - mom) * bn.running_mean + mom * mu).astype(h.dtype)
        bn.running_var = ((dt(1) - mom) * bn.running_var + mom * var * dt(B / (B - 1))).astype(h.dtype)
        bn._cache = (xhat, inv_std)
        record_runtime(counter, "bn_mults", 3 * B * bn.size + 3 * bn.size)
    else:
        if stats == "population" and bn.pop_mean is not None:
            mu, var = bn.pop_mean, bn.pop_var
        else:
            mu, var = bn.running_mean, bn.running_var
        xhat = (h - mu) / np.sqrt(var + dt(bn.eps))
    return (bn.gamma * xhat + bn.beta).astype(h.dtype)


def bn_backward(
    bn: BatchNormLayer, delta: np.ndarray, eta: float, counter: MultCounter | None = None
) -> np.ndarray:
    """Gradient w.r.t. the BN input; gamma and beta take an SGD step."""
    if bn._cache is None:
        raise CacheError("bn_backward needs the caches of a training-mode forward call")
    xhat, inv_std = bn._cache
    delta = as_matrix(delta, dtype=xhat.dtype)
    if delta.shape != xhat.shape:
        raise ShapeError(f"error signal shape {delta.shape} does not match {xhat.shape}")
    dt = xhat.dtype.type
    B = xhat.shape[1]
    dgamma = (delta * xhat).sum(axis=1, keepdims=True, dtype=xhat.dtype)
    dbeta = delta.sum(axis=1, keepdims=True, dtype=xhat.dtype)
    dxhat = delta * bn.gamma
    dh = (inv_std / dt(B)) * (
        dt(B) * dxhat
        - dxhat.sum(axis=1, keepdims=True, dtype=xhat.dtype)
        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True, dtype=xhat.dtype)
    )
    bn.gamma = (bn.gamma - dt(eta) * dgamma).astype(xhat.dtype)
    bn.beta = (bn.beta - dt(eta) * dbeta).astype(xhat.dtype)
    bn._cache = None
    record_runtime(counter, "bn_mults", 2 * (3 * B * bn.size + 3 * bn.size))
    return dh.astype(xhat.dtype)


def hinge_loss(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """One-vs-rest squared hinge loss, averaged over the batch.

    ``scores`` is M x B; targets are +1 for the true class and -1 elsewhere.
    Returns the loss and its exact gradient w.r.t. ``scores``.
    """
    scores = as_matrix(scores)
    labels = np.asarray(labels)
    M, B = scores.shape
    if labels.shape != (B,):
        raise ShapeError(f"expected {B} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= M):
        raise ValueError(f"labels must lie in [0, {M})")
    t = -np.ones_like(scores)
    t[labels, np.arange(B)] = 1
    margin = np.maximum(0, 1 - t * scores)
    loss = float((margin.astype(np.float64) ** 2).sum() / B)
    delta = (-2 * t * margin / scores.dtype.type(B)).astype(scores.dtype)
    return loss, delta
