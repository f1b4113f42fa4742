"""Oracles shared by the unit and acceptance tests."""

import copy

import numpy as np

from qbp.layers import (
    BatchNormLayer,
    DenseLayer,
    ForwardMode,
    bn_backward,
    bn_forward,
    dense_backward_full,
    dense_forward,
    hinge_loss,
    relu,
)
from qbp.tensor import Prng


def reference_matmul(a, b):
    """Ascending-k accumulation with numpy elementwise float32 ops."""
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float32)
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def rel_err(a, n, floor=1e-8):
    a, n = np.ravel(a), np.ravel(n)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def small_net(arch=(5, 5, 3), use_bn=True, seed=0, batch=8):
    """float64 dense(+BN) stack with random affine BN parameters and a batch."""
    r = np.random.default_rng(seed)
    dense, bns = [], []
    for i, (n, m) in enumerate(zip(arch[:-1], arch[1:])):
        hidden = i < len(arch) - 2
        d = DenseLayer.init(n, m, Prng(seed, (0, i)), "relu" if hidden and not use_bn else "identity", np.float64)
        d.bias = r.normal(0, 0.1, (m, 1))
        dense.append(d)
        if use_bn:
            bn = BatchNormLayer.init(m, np.float64)
            bn.gamma = r.uniform(0.5, 1.5, (m, 1))
            bn.beta = r.normal(0, 0.2, (m, 1))
            bns.append(bn)
        else:
            bns.append(None)
    x = r.uniform(0, 1, (arch[0], batch))
    labels = r.integers(0, arch[-1], batch)
    return dense, bns, x, labels


def net_forward(dense, bns, x):
    a = x
    bn_out = []
    for i, (d, bn) in enumerate(zip(dense, bns)):
        z = dense_forward(d, a, ForwardMode.FULL)
        if bn is not None:
            z = bn_forward(bn, z, training=True)
            bn_out.append(z)
        a = relu(z) if i < len(dense) - 1 else z
    return a, bn_out


def net_loss(dense, bns, x, labels):
    return hinge_loss(net_forward(dense, bns, x)[0], labels)[0]


def params(dense, bns):
    out = {}
    for i, (d, bn) in enumerate(zip(dense, bns)):
        out[f"w{i}"], out[f"b{i}"] = d.wbar, d.bias
        if bn is not None:
            out[f"gamma{i}"], out[f"beta{i}"] = bn.gamma, bn.beta
    return out


def analytic_grads(dense, bns, x, labels):
    """Gradients from the library's backward passes (eta = 1, on copies)."""
    dense, bns = copy.deepcopy(dense), copy.deepcopy(bns)
    before = {k: v.copy() for k, v in params(dense, bns).items()}
    scores, bn_out = net_forward(dense, bns, x)
    _, delta = hinge_loss(scores, labels)
    grads = {}
    for i in reversed(range(len(dense))):
        bn = bns[i]
        if bn is not None:
            if i < len(dense) - 1:
                delta = np.where(bn_out[i] > 0, delta, 0.0)
            delta = bn_backward(bn, delta, 1.0)
            grads[f"gamma{i}"] = before[f"gamma{i}"] - bn.gamma
            grads[f"beta{i}"] = before[f"beta{i}"] - bn.beta
        delta, upd = dense_backward_full(dense[i], delta, 1.0)
        grads[f"w{i}"], grads[f"b{i}"] = upd.dw, upd.db
    grads["x"] = delta
    return grads


def numeric_grads(dense, bns, x, labels, h=1e-3):
    dense, bns = copy.deepcopy(dense), copy.deepcopy(bns)
    x = x.copy()
    targets = dict(params(dense, bns), x=x)
    grads = {}
    for name, arr in targets.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = net_loss(dense, bns, x, labels)
            arr[idx] = old - h
            down = net_loss(dense, bns, x, labels)
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def bn_gradcheck(seed=0, m=4, batch=8, h=1e-3):
    """(analytic, numeric) gradients of sum(R * bn(h)) for input, gamma, beta."""
    r = np.random.default_rng(seed)
    hin = r.normal(1.0, 2.0, (m, batch))
    weights = r.normal(size=(m, batch))
    bn = BatchNormLayer.init(m, np.float64)
    bn.gamma, bn.beta = r.uniform(0.5, 1.5, (m, 1)), r.normal(size=(m, 1))

    def loss(layer, hh):
        return float((weights * bn_forward(layer, hh, training=True)).sum())

    work = copy.deepcopy(bn)
    bn_forward(work, hin, training=True)
    g0, b0 = work.gamma.copy(), work.beta.copy()
    dh = bn_backward(work, weights, 1.0)
    analytic = {"h": dh, "gamma": g0 - work.gamma, "beta": b0 - work.beta}

    numeric = {}
    for name in ("h", "gamma", "beta"):
        layer = copy.deepcopy(bn)
        hh = hin.copy()
        arr = hh if name == "h" else getattr(layer, name)
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = loss(layer, hh)
            arr[idx] = old - h
            down = loss(layer, hh)
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
        numeric[name] = g
    return analytic, numeric


def hinge_gradcheck(seed=0, m=3, batch=5, h=1e-3):
    r = np.random.default_rng(seed)
    s = r.normal(0, 1.5, (m, batch))
    labels = r.integers(0, m, batch)
    _, delta = hinge_loss(s, labels)
    num = np.zeros_like(s)
    for idx in np.ndindex(s.shape):
        old = s[idx]
        s[idx] = old + h
        up = hinge_loss(s, labels)[0]
        s[idx] = old - h
        down = hinge_loss(s, labels)[0]
        s[idx] = old
        num[idx] = (up - down) / (2 * h)
    return delta, num


def relu_margin(dense, bns, x):
    """Smallest |ReLU input| in the forward pass; finite differences with step
    h are only meaningful when this is well above h."""
    _, bn_out = net_forward(copy.deepcopy(dense), copy.deepcopy(bns), x)
    if bn_out:
        return min(float(np.abs(z).min()) for z in bn_out[:-1])
    a, margins = x, []
    for d in dense[:-1]:
        z = d.wbar @ a + d.bias
        margins.append(float(np.abs(z).min()))
        a = np.maximum(z, 0)
    return min(margins)


def qbp_case(seed):
    """One random layer state pushed through the quantized backward pass.

    Returns (updates, delta_prev, oracle) where the oracle values come from
    scalar quantization, dequantization and plain float32 multiplies.
    """
    from qbp.layers import dense_backward_qbp
    from qbp.quantize import ShiftBudget, pow2_quantize

    r = np.random.default_rng(seed)
    n, m, batch = int(r.integers(1, 41)), int(r.integers(1, 21)), int(r.integers(2, 31))
    budget = ShiftBudget(int(r.integers(0, 9)), int(r.integers(0, 9)))
    act = "relu" if r.random() < 0.5 else "identity"
    layer = DenseLayer(r.uniform(-1, 1, (m, n)).astype(np.float32), r.normal(0, 0.1, (m, 1)), act)
    x = np.maximum(r.normal(size=(n, batch)), 0) * np.exp2(r.integers(-6, 7, (n, batch)))
    x = x.astype(np.float32)
    delta = (r.normal(size=(m, batch)) * 10.0 ** r.uniform(-4, 0)).astype(np.float32)
    eta = float(10 ** r.uniform(-3, 0))

    dense_forward(layer, x, ForwardMode.TERNARY, Prng(seed, (1, 0)))
    z, wb = layer.cache_preact.copy(), layer.cache_sampled.copy()
    delta_prev, upd = dense_backward_qbp(layer, delta, eta, budget)

    gd = np.where(z > 0, delta, np.float32(0)) if act == "relu" else delta
    g = np.float32(eta) * gd
    xdeq = np.array([[pow2_quantize(float(v), budget).dequantize() for v in row] for row in x], dtype=np.float32)
    oracle = {
        "dw": reference_matmul(g, np.ascontiguousarray(xdeq.T)),
        "db": g.sum(axis=1, keepdims=True, dtype=np.float32),
        "delta_prev": reference_matmul(wb.T.astype(np.float32), gd),
    }
    return upd, delta_prev, oracle


def bits(a):
    return np.ascontiguousarray(a, dtype=np.float32).view(np.uint32)
