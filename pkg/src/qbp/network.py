"""A stack of dense blocks (dense -> optional batch norm -> ReLU) and checkpoints.

The last block has no ReLU; its output is the class-score matrix. Without
batch norm the ReLU is folded into the dense layer so its derivative is
applied there; with batch norm the ReLU follows the normalization.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .instrument import MultCounter
from .layers import (
    BackwardMode,
    BatchNormLayer,
    DenseLayer,
    ForwardMode,
    bn_backward,
    bn_forward,
    dense_backward_full,
    dense_backward_qbp,
    dense_forward,
    hinge_loss,
    relu,
    init_bound,
    sample_weights,
)
from .quantize import DEFAULT_BUDGET, ShiftBudget
from .tensor import FLOAT, Prng, ShapeError, as_matrix, matmul, sign_accumulate_matmul

CHECKPOINT_FORMAT = "qbp-checkpoint"
CHECKPOINT_VERSION = 1

# PRNG stream tags: (tag, layer index)
INIT_STREAM = 0
SAMPLE_STREAM = 1


class NumericAbort(RuntimeError):
    """A non-finite value appeared during training."""


@dataclass
class Network:
    dense: list[DenseLayer]
    bn: list[BatchNormLayer | None]
    seed: int = 0
    # per-layer multiplier on the dense-layer learning rate
    lr_scales: list[float] | None = None
    prngs: list[Prng] = field(default_factory=list, repr=False)
    _bn_outputs: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if len(self.dense) != len(self.bn):
            raise ValueError("need one (possibly empty) batch-norm slot per dense layer")
        for a, b in zip(self.dense[:-1], self.dense[1:]):
            if a.n_out != b.n_in:
                raise ShapeError(f"layer widths do not chain: {a.n_out} -> {b.n_in}")
        if self.lr_scales is None:
            self.lr_scales = [1.0] * len(self.dense)
        if not self.prngs:
            self.prngs = [Prng(self.seed, (SAMPLE_STREAM, i)) for i in range(len(self.dense))]

    @classmethod
    def build(cls, arch, use_bn: bool = True, seed: int = 0, dtype=FLOAT, lr_scale: str = "none") -> "Network":
        """Fresh network. ``lr_scale="glorot"`` gives each dense layer a
        learning-rate multiplier of 1 / (its init bound)."""
        if lr_scale not in ("none", "glorot"):
            raise ValueError(f"unknown lr_scale {lr_scale!r}")
        arch = [int(a) for a in arch]
        if len(arch) < 2:
            raise ValueError("architecture needs at least an input and an output width")
        dense, bns = [], []
        for i, (n, m) in enumerate(zip(arch[:-1], arch[1:])):
            hidden = i < len(arch) - 2
            act = "relu" if hidden and not use_bn else "identity"
            dense.append(DenseLayer.init(n, m, Prng(seed, (INIT_STREAM, i)), act, dtype))
            bns.append(BatchNormLayer.init(m, dtype) if use_bn else None)
        scales = None
        if lr_scale == "glorot":
            scales = [1.0 / init_bound(n, m) for n, m in zip(arch[:-1], arch[1:])]
        return cls(dense, bns, seed, scales)

    @property
    def arch(self) -> list[int]:
        return [self.dense[0].n_in] + [d.n_out for d in self.dense]

    @property
    def use_bn(self) -> bool:
        return self.bn[0] is not None

    def _is_hidden(self, i: int) -> bool:
        return i < len(self.dense) - 1

    def forward_train(self, x: np.ndarray, mode: ForwardMode, counter: MultCounter | None = None) -> np.ndarray:
        """Training forward pass; weights are sampled once per call."""
        a = as_matrix(x, dtype=self.dense[0].wbar.dtype)
        self._bn_outputs = []
        for i, (layer, bn) in enumerate(zip(self.dense, self.bn)):
            z = dense_forward(layer, a, mode, self.prngs[i], counter)
            _check_finite(z, i, "pre-activation")
            if bn is not None:
                z = bn_forward(bn, z, training=True, counter=counter)
                _check_finite(z, i, "batch-norm output")
                self._bn_outputs.append(z)
            a = relu(z) if self._is_hidden(i) else z
        return a

    def backward(
        self,
        delta: np.ndarray,
        eta: float,
        backward: BackwardMode,
        budget: ShiftBudget = DEFAULT_BUDGET,
        counter: MultCounter | None = None,
        backward_weights: str = "sampled",
    ) -> None:
        """Propagate ``delta`` (dC/dscores) down the stack, updating every layer."""
        for i in reversed(range(len(self.dense))):
            layer, bn = self.dense[i], self.bn[i]
            if bn is not None:
                if self._is_hidden(i):
                    delta = np.where(self._bn_outputs[i] > 0, delta, np.zeros_like(delta))
                delta = bn_backward(bn, delta, eta, counter)
            eta_w = eta * self.lr_scales[i]
            if backward is BackwardMode.QBP:
                delta, _ = dense_backward_qbp(layer, delta, eta_w, budget, counter, backward_weights)
            else:
                delta, _ = dense_backward_full(layer, delta, eta_w, counter, backward_weights)
            _check_finite(delta, i, "error signal")
        self._bn_outputs = []

    def train_step(
        self,
        x: np.ndarray,
        labels: np.ndarray,
        eta: float,
        mode: ForwardMode,
        backward: BackwardMode,
        budget: ShiftBudget = DEFAULT_BUDGET,
        counter: MultCounter | None = None,
        backward_weights: str = "sampled",
    ) -> float:
        scores = self.forward_train(x, mode, counter)
        loss, delta = hinge_loss(scores, labels)
        if not np.isfinite(loss):
            raise NumericAbort(f"non-finite loss {loss} at the output layer {len(self.dense) - 1}")
        self.backward(delta, eta, backward, budget, counter, backward_weights)
        return loss

    def _infer(self, x: np.ndarray, weights: list[np.ndarray] | None, stats: str, keep_inputs: bool = False):
        a = as_matrix(x, dtype=self.dense[0].wbar.dtype)
        if a.shape[0] != self.dense[0].n_in:
            raise ShapeError(f"network expects {self.dense[0].n_in} input features, got {a.shape[0]}")
        inputs = []
        for i, (layer, bn) in enumerate(zip(self.dense, self.bn)):
            if keep_inputs:
                inputs.append(a)
            if weights is None:
                z = matmul(layer.wbar, a) + layer.bias
            else:
                z = sign_accumulate_matmul(weights[i], a) + layer.bias
            if bn is not None:
                z = bn_forward(bn, z, training=False, stats=stats)
            a = relu(z) if self._is_hidden(i) else z
        return (a, inputs) if keep_inputs else a

    def sample(self, mode: ForwardMode, prng: Prng) -> list[np.ndarray]:
        return [sample_weights(layer.wbar, mode, prng) for layer in self.dense]

    def predict_scores(self, x: np.ndarray, weights: list[np.ndarray] | None = None) -> np.ndarray:
        """Inference scores. With ``weights`` (sampled matrices) the sampled
        forward uses the training running statistics; otherwise the
        real-valued forward uses population statistics when available."""
        return self._infer(x, weights, "running" if weights is not None else "population")

    def layer_inputs(self, x: np.ndarray) -> list[np.ndarray]:
        return self._infer(x, None, "population", keep_inputs=True)[1]

    def calibrate(self, batches) -> None:
        """Population BN statistics for the deterministic real-valued forward.

        Averages per-batch means and unbiased variances over ``batches``
        (iterable of N x B inputs), layer by layer.
        """
        if not self.use_bn:
            return
        batches = [as_matrix(b, dtype=self.dense[0].wbar.dtype) for b in batches]
        acts = batches
        for i, (layer, bn) in enumerate(zip(self.dense, self.bn)):
            zs = [matmul(layer.wbar, a) + layer.bias for a in acts]
            means = [z.mean(axis=1, keepdims=True, dtype=np.float64) for z in zs]
            vars_ = [z.var(axis=1, keepdims=True, dtype=np.float64) * z.shape[1] / (z.shape[1] - 1) for z in zs]
            bn.pop_mean = np.mean(means, axis=0).astype(layer.wbar.dtype)
            bn.pop_var = np.mean(vars_, axis=0).astype(layer.wbar.dtype)
            nxt = [bn_forward(bn, z, training=False, stats="population") for z in zs]
            acts = [relu(z) for z in nxt] if self._is_hidden(i) else nxt

    def snapshot(self) -> "Network":
        clone = copy.deepcopy(self)
        for layer in clone.dense:
            layer.clear_cache()
        for bn in clone.bn:
            if bn is not None:
                bn._cache = None
        clone._bn_outputs = []
        return clone


def _check_finite(a: np.ndarray, layer: int, what: str) -> None:
    if not np.isfinite(a).all():
        raise NumericAbort(f"non-finite {what} in layer {layer}")


def save_checkpoint(net: Network, path, meta: dict | None = None) -> Path:
    """Write ``net`` as an .npz archive; see README for the field list."""
    path = Path(path)
    arrays = {}
    for i, layer in enumerate(net.dense):
        arrays[f"dense{i}_wbar"] = layer.wbar
        arrays[f"dense{i}_bias"] = layer.bias
        bn = net.bn[i]
        if bn is not None:
            arrays[f"bn{i}_gamma"] = bn.gamma
            arrays[f"bn{i}_beta"] = bn.beta
            arrays[f"bn{i}_running_mean"] = bn.running_mean
            arrays[f"bn{i}_running_var"] = bn.running_var
            if bn.pop_mean is not None:
                arrays[f"bn{i}_pop_mean"] = bn.pop_mean
                arrays[f"bn{i}_pop_var"] = bn.pop_var
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": net.arch,
        "use_batch_norm": net.use_bn,
        "activations": [d.activation for d in net.dense],
        "bn": [None if b is None else {"eps": b.eps, "momentum": b.momentum} for b in net.bn],
        "seed": net.seed,
        "lr_scales": net.lr_scales,
        "prng_states": [p.state for p in net.prngs],
        "meta": meta or {},
    }
    arrays["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[Network, dict]:
    try:
        z = np.load(path)
        header = json.loads(bytes(z["header"]).decode())
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    dense, bns = [], []
    for i, act in enumerate(header["activations"]):
        dense.append(DenseLayer(z[f"dense{i}_wbar"], z[f"dense{i}_bias"], act))
        spec = header["bn"][i]
        if spec is None:
            bns.append(None)
            continue
        bn = BatchNormLayer(
            z[f"bn{i}_gamma"],
            z[f"bn{i}_beta"],
            spec["eps"],
            spec["momentum"],
            z[f"bn{i}_running_mean"],
            z[f"bn{i}_running_var"],
        )
        if f"bn{i}_pop_mean" in z:
            bn.pop_mean, bn.pop_var = z[f"bn{i}_pop_mean"], z[f"bn{i}_pop_var"]
        bns.append(bn)
    net = Network(dense, bns, header["seed"], header.get("lr_scales"))
    for p, st in zip(net.prngs, header["prng_states"]):
        p.state = st
    return net, header["meta"]
