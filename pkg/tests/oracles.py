"""Independent plain-numpy reference computations used by the tests."""

import itertools

import numpy as np

from causal_probe.concept_ae import LAYERS, AugmentedNetwork, build_autoencoder
from causal_probe.data import Dataset
from causal_probe.nets import Activation, Conv, Dense, Flatten, NetworkSpec, build_network
from causal_probe.tensor import Tensor


def naive_conv(x, K, b, pad):
    B, C, H, W = x.shape
    F, _, k, _ = K.shape
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad:pad + H, pad:pad + W] = x
    OH, OW = H + 2 * pad - k + 1, W + 2 * pad - k + 1
    out = np.zeros((B, F, OH, OW))
    for n, f, i, j in itertools.product(range(B), range(F), range(OH), range(OW)):
        out[n, f, i, j] = b[f] + np.sum(xp[n, :, i:i + k, j:j + k] * K[f])
    return out


def relu(v):
    return np.maximum(v, 0.0)


def softmax(v):
    e = np.exp(v - v.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def enumerable_model(seed=0):
    """1×2×2 binary inputs (16 of them), 3-channel level, 2-concept bottleneck, 2 classes."""
    spec = NetworkSpec((Conv(3, 1, 1, 0), Activation("relu"), Flatten(), Dense(2)), (1, 2, 2), 2)
    host = build_network(spec, seed)
    rng = np.random.default_rng(seed + 100)
    host.params["0.b"].data = rng.uniform(0.0, 0.3, size=3)
    ae = build_autoencoder(host, 1, 2, seed=seed)
    for name in LAYERS:
        ae.params[f"{name}.W"] = Tensor(rng.normal(scale=0.8, size=ae.params[f"{name}.W"].shape), requires_grad=True)
        ae.params[f"{name}.b"] = Tensor(rng.uniform(0.0, 0.2, size=ae.params[f"{name}.b"].shape), requires_grad=True)
    host.params["3.W"].data = rng.normal(scale=2.0, size=(12, 2))
    return AugmentedNetwork(host, ae)


def all_binary_inputs():
    x = np.array(list(itertools.product([0.0, 1.0], repeat=4))).reshape(16, 1, 2, 2)
    return Dataset(x, np.zeros(16, dtype=np.int64), 2)


def _params(aug):
    p = {k: v.data for k, v in aug.host.params.items()}
    p.update({k: v.data for k, v in aug.ae.params.items()})
    return p


def oracle_bottleneck(aug, x):
    p = _params(aug)
    a = relu(naive_conv(x, p["0.W"], p["0.b"], 0))
    h = relu(naive_conv(a, p["enc1.W"], p["enc1.b"], 1))
    h = relu(naive_conv(h, p["enc2.W"], p["enc2.b"], 1))
    return relu(naive_conv(h, p["mid.W"], p["mid.b"], 1))


def oracle_probs_from_z(aug, z):
    p = _params(aug)
    h = relu(naive_conv(z, p["dec1.W"], p["dec1.b"], 1))
    r = relu(naive_conv(h, p["dec2.W"], p["dec2.b"], 1))
    return softmax(r.reshape(len(r), -1) @ p["3.W"] + p["3.b"])


def oracle_do(z, node, value):
    z = z.copy()
    if value == 0.0:
        z[:, node] = 0.0
    else:
        for i in range(len(z)):
            z[i, node] += value - z[i, node].mean()
    return z


def oracle_expected_ce(aug, x, node, bins, baseline):
    """Brute force: every input, every bin, both intervention states."""
    z = oracle_bottleneck(aug, x)
    cls = oracle_probs_from_z(aug, z).argmax(axis=1)
    rows = np.arange(len(x))

    def p_class(zz):
        return oracle_probs_from_z(aug, zz)[rows, cls].mean()

    base = p_class(oracle_do(z, node, 0.0)) if baseline == "zero-fill" else p_class(z)
    s = sorted(float(z[i, node].mean()) for i in range(len(x)))
    total = 0.0
    size, extra = divmod(len(s), bins)
    start = 0
    for b in range(bins):
        chunk = s[start:start + size + (1 if b < extra else 0)]
        start += len(chunk)
        rep = sum(chunk) / len(chunk)
        total += len(chunk) / len(s) * (p_class(oracle_do(z, node, rep)) - base)
    return total


def _copy_kernel(cout, cin, pairs):
    """3×3 kernels whose centre tap copies input channel j to output channel i."""
    W = np.zeros((cout, cin, 3, 3))
    for i, j in pairs:
        W[i, j, 1, 1] = 1.0
    return W


def identity_setup(seed=0):
    """Host whose level-1 output has only 2 live channels, and an AE copying them through."""
    spec = NetworkSpec((Conv(4, 3, 1, 1), Activation("relu"), Flatten(), Dense(2)), (1, 4, 4), 2)
    host = build_network(spec, seed)
    host.params["0.W"].data[2:] = 0.0
    ae = build_autoencoder(host, 1, 2, seed=seed)
    assert ae.schedule == [(4, 2), (2, 2), (2, 2), (2, 2), (2, 4)]
    pairs = {"enc1": [(0, 0), (1, 1)], "enc2": [(0, 0), (1, 1)], "mid": [(0, 0), (1, 1)],
             "dec1": [(0, 0), (1, 1)], "dec2": [(0, 0), (1, 1)]}
    for name, (cin, cout) in zip(LAYERS, ae.schedule):
        ae.params[f"{name}.W"] = Tensor(_copy_kernel(cout, cin, pairs[name]), requires_grad=True)
        ae.params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True)
    return AugmentedNetwork(host, ae)


def null_path(aug: AugmentedNetwork, node: int) -> AugmentedNetwork:
    """Copy of ``aug`` whose decoder ignores bottleneck channel ``node``."""
    ae = aug.ae.copy()
    ae.params["dec1.W"].data[:, node] = 0.0
    return AugmentedNetwork(aug.host, ae)
