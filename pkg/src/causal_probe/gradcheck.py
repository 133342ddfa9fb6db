"""Finite-difference checks for every differentiable primitive.

Each case draws a random shape and input from its seed, reduces the op's
output to a scalar with fixed random weights, and compares backprop to
central differences. Inputs to kinked ops (relu, abs, maxpool) are kept away
from their kinks so the check measures the derivative, not the kink.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    primitive: str
    seed: int
    shape: tuple
    error: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _away_from_zero(rng, shape, gap=0.05):
    u = rng.uniform(-1.0, 1.0, size=shape)
    return np.sign(u) * (gap + np.abs(u))


def _distinct(rng, shape):
    n = int(np.prod(shape))
    return (rng.permutation(n) / n).reshape(shape) - 0.5


def _weighted(rng, fn):
    """Scalar ``sum(w * fn(x))`` with ``w`` fixed by ``rng``."""
    cache = {}

    def f(x):
        out = fn(x)
        if "w" not in cache:
            cache["w"] = Tensor(rng.normal(size=out.shape))
        return T.sum(T.mul(out, cache["w"]))

    return f


def _case(name, rng):
    """Return ``(f, x)`` for one primitive, or one input of a multi-input primitive."""
    dims = lambda n: tuple(int(v) for v in rng.integers(1, 4, size=n))  # noqa: E731
    if name in ("add", "sub", "mul"):
        shape = dims(2)
        other = Tensor(rng.normal(size=shape))
        op = getattr(T, name)
        return _weighted(rng, lambda x: op(x, other)), rng.normal(size=shape)
    if name in ("add[rhs]", "sub[rhs]", "mul[rhs]"):
        shape = dims(2)
        other = Tensor(rng.normal(size=shape))
        op = getattr(T, name.split("[")[0])
        return _weighted(rng, lambda x: op(other, x)), rng.normal(size=shape)
    if name == "neg":
        return _weighted(rng, T.neg), rng.normal(size=dims(2))
    if name == "scale":
        c = float(rng.normal())
        return _weighted(rng, lambda x: T.scale(x, c)), rng.normal(size=dims(2))
    if name == "add_scalar":
        c = float(rng.normal())
        return _weighted(rng, lambda x: T.add_scalar(x, c)), rng.normal(size=dims(2))
    if name == "exp":
        return _weighted(rng, T.exp), rng.uniform(-2, 2, size=dims(2))
    if name == "log":
        return _weighted(rng, T.log), rng.uniform(0.5, 3.0, size=dims(2))
    if name == "abs":
        return _weighted(rng, T.abs), _away_from_zero(rng, dims(2))
    if name == "sum":
        return T.sum, rng.normal(size=dims(3))
    if name == "mean":
        return T.mean, rng.normal(size=dims(3))
    if name == "reshape":
        shape = dims(2)
        return _weighted(rng, lambda x: T.reshape(x, (shape[1], shape[0]))), rng.normal(size=shape)
    if name == "flatten":
        return _weighted(rng, T.flatten), rng.normal(size=dims(3))
    if name == "pick":
        b, c = dims(2)
        idx = rng.integers(0, c, size=b)
        return _weighted(rng, lambda x: T.pick(x, idx)), rng.normal(size=(b, c))
    if name == "relu":
        return _weighted(rng, T.relu), _away_from_zero(rng, dims(2))
    if name == "sigmoid":
        return _weighted(rng, T.sigmoid), rng.normal(scale=2.0, size=dims(2))
    if name == "log_softmax":
        return _weighted(rng, T.log_softmax), rng.normal(size=dims(2))
    if name == "softmax":
        return _weighted(rng, lambda x: T.softmax_logprob(x)[0]), rng.normal(size=dims(2))
    if name == "bce_with_logits":
        shape = dims(2)
        t = rng.uniform(0, 1, size=shape)
        return _weighted(rng, lambda x: T.bce_with_logits(x, t)), rng.normal(scale=2.0, size=shape)
    if name.startswith("dense"):
        b, i, o = dims(3)
        x, W, bias = rng.normal(size=(b, i)), rng.normal(size=(i, o)), rng.normal(size=o)
        which = name[6:-1] if "[" in name else "x"
        args = {"x": x, "W": W, "b": bias}

        def fn(v):
            a = {k: (v if k == which else Tensor(val)) for k, val in args.items()}
            return T.dense(a["x"], a["W"], a["b"])

        return _weighted(rng, fn), args[which]
    if name.startswith("conv2d"):
        B, C, F = dims(3)
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        H, W = (int(v) for v in rng.integers(k, k + 4, size=2))
        args = {"x": rng.normal(size=(B, C, H, W)), "K": rng.normal(size=(F, C, k, k)), "b": rng.normal(size=F)}
        which = name[7:-1] if "[" in name else "x"

        def fn(v):
            a = {key: (v if key == which else Tensor(val)) for key, val in args.items()}
            return T.conv2d(a["x"], a["K"], a["b"], stride, pad)

        return _weighted(rng, fn), args[which]
    if name == "maxpool2d":
        k = int(rng.integers(1, 4))
        B, C = dims(2)
        h, w = (int(v) for v in rng.integers(1, 3, size=2))
        return _weighted(rng, lambda x: T.maxpool2d(x, k)), _distinct(rng, (B, C, h * k, w * k))
    raise KeyError(name)


PRIMITIVES = (
    "add", "add[rhs]", "sub", "sub[rhs]", "mul", "mul[rhs]", "neg", "scale", "add_scalar",
    "exp", "log", "abs", "sum", "mean", "reshape", "flatten", "pick", "relu", "sigmoid",
    "log_softmax", "softmax", "bce_with_logits", "dense[x]", "dense[W]", "dense[b]",
    "conv2d[x]", "conv2d[K]", "conv2d[b]", "maxpool2d",
)


def check_primitive(name: str, seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    f, x = _case(name, rng)
    return CheckResult(name, seed, tuple(np.shape(x)), T.finite_diff_check(f, x))


def gradient_suite(seeds=range(100), primitives=PRIMITIVES) -> list[CheckResult]:
    return [check_primitive(p, s) for p in primitives for s in seeds]


def summarize(results) -> dict:
    """Worst error per primitive."""
    out = {}
    for r in results:
        out[r.primitive] = max(out.get(r.primitive, 0.0), r.error)
    return out
