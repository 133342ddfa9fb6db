"""Reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable primitive records a :class:`Node` on its output when any
input requires a gradient. :class:`Graph` is the topologically ordered node
list reachable from a scalar loss; :func:`backward` walks it in reverse.

Broadcasting is deliberately limited to bias adds and Python scalars.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"Node({self.op}, out={self.output.shape})"


class Tensor:
    """An n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64, copy=True, order="C")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._node = None

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        t = cls.__new__(cls)
        t.data = np.asarray(arr, dtype=np.float64, order="C")
        t.grad = None
        t.requires_grad = requires_grad
        t._node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        return backward(Graph.from_output(self), self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(neg(self), float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _record(op: str, out_data, inputs: tuple, backward_fn) -> Tensor:
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires_grad=needs)
    if needs:
        out._node = Node(op, inputs, out, backward_fn)
    return out


class Graph:
    """Nodes reachable from an output, in a valid evaluation order."""

    def __init__(self, nodes: Sequence[Node]):
        self.nodes = tuple(nodes)

    def __len__(self):
        return len(self.nodes)

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        order: list[Node] = []
        if out._node is None:
            return cls(order)
        seen: set[int] = set()
        stack = [(out._node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for t in reversed(node.inputs):
                if t._node is not None and id(t._node) not in seen:
                    stack.append((t._node, False))
        return cls(order)


def backward(graph: Graph, loss: Tensor) -> dict:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Gradients from multiple paths are summed in reverse topological order.
    The graph is not consumed; calling again accumulates again.

    Returns a mapping from each touched leaf tensor to its ``.grad``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    touched: dict = {}
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
            touched[loss] = loss.grad
        return touched
    pending = {id(loss): seed}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                t.grad = np.array(gi, dtype=np.float64) if t.grad is None else t.grad + gi
                touched[t] = t.grad
            else:
                k = id(t)
                pending[k] = pending[k] + gi if k in pending else gi
    return touched


# ---------------------------------------------------------------------------
# primitives


def _same_shape(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _record("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _record("add_scalar", a.data + c, (a,), lambda g: (g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _record("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sum(a: Tensor) -> Tensor:  # noqa: A001
    shape = a.shape
    return _record("sum", np.sum(a.data), (a,), lambda g: (np.full(shape, np.asarray(g).item()),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _record("mean", np.mean(a.data), (a,), lambda g: (np.full(shape, np.asarray(g).item() / n),))


def reshape(a: Tensor, shape: Iterable[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from exc
    return _record("reshape", out, (a,), lambda g: (g.reshape(old),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def pick(a: Tensor, index) -> Tensor:
    """Row-wise gather: ``out[n] = a[n, index[n]]``."""
    index = np.asarray(index, dtype=np.intp)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise DimensionError(f"pick: need B×C input and B indices, got {a.shape} and {index.shape}")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[rows, index] = g
        return (full,)

    return _record("pick", a.data[rows, index], (a,), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ContractError(f"unknown activation kind {kind!r}")


def log_softmax(x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"log_softmax expects B×C with C ≥ 1, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    probs = np.exp(out)
    return _record("log_softmax", out, (x,), lambda g: (g - probs * g.sum(axis=1, keepdims=True),))


def softmax_logprob(x: Tensor) -> tuple[Tensor, Tensor]:
    """Return ``(probs, logprobs)`` computed via max subtraction."""
    lp = log_softmax(x)
    return exp(lp), lp


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy on logits (stable form)."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise DimensionError(f"bce: logits {logits.shape} vs targets {t.shape}")
    x = logits.data
    out = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    return _record("bce", out, (logits,), lambda g: (g * (_sigmoid(x) - t),))


def dense(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"dense: input {x.shape} incompatible with weight {W.shape}")
    if b.shape != (W.shape[1],):
        raise DimensionError(f"dense: bias {b.shape} incompatible with weight {W.shape}")
    out = x.data @ W.data + b.data

    def back(g):
        return (
            g @ W.data.T if x.requires_grad else None,
            x.data.T @ g if W.requires_grad else None,
            g.sum(axis=0) if b.requires_grad else None,
        )

    return _record("dense", out, (x, W, b), back)


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, K: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation, ``x: B×C×H×W``, ``K: F×C×k×k``."""
    if x.ndim != 4 or K.ndim != 4 or x.shape[1] != K.shape[1] or K.shape[2] != K.shape[3]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {K.shape}")
    if stride < 1 or pad < 0:
        raise ContractError(f"conv2d: stride must be ≥ 1 and pad ≥ 0 (got {stride}, {pad})")
    B, C, H, W = x.shape
    F, _, k, _ = K.shape
    if k > H + 2 * pad or k > W + 2 * pad:
        raise DimensionError(f"conv2d: kernel {K.shape} larger than padded input {x.shape} (pad={pad})")
    if b is not None and b.shape != (F,):
        raise DimensionError(f"conv2d: bias {b.shape} does not match {F} filters")
    OH, OW = conv_output_size(H, k, stride, pad), conv_output_size(W, k, stride, pad)
    cols = kernels.im2col(x.data, k, stride, pad)
    K2 = K.data.reshape(F, -1)
    out = (K2 @ cols).reshape(F, B, OH, OW).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data[None, :, None, None]
    inputs = (x, K) if b is None else (x, K, b)

    def back(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(F, -1)
        gx = kernels.col2im(np.ascontiguousarray(K2.T @ g2), B, C, H, W, k, stride, pad) if x.requires_grad else None
        gK = (g2 @ cols.T).reshape(K.shape) if K.requires_grad else None
        if b is None:
            return gx, gK
        return gx, gK, (g.sum(axis=(0, 2, 3)) if b.requires_grad else None)

    return _record("conv2d", out, inputs, back)


def conv2d_forward(x: Tensor, K: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    return conv2d(x, K, None, stride, pad)


dense_forward = dense


def maxpool2d(x: Tensor, k: int) -> Tensor:
    if x.ndim != 4 or k < 1 or x.shape[2] < k or x.shape[3] < k:
        raise DimensionError(f"maxpool2d: window {k} does not fit input {x.shape}")
    H, W = x.shape[2], x.shape[3]
    out, arg = kernels.maxpool_forward(x.data, k)
    return _record(
        "maxpool2d", out, (x,),
        lambda g: (kernels.maxpool_backward(np.ascontiguousarray(g), arg, H, W, k),),
    )


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5, floor: float = 1e-6) -> float:
    """Max relative error between backprop and central differences of ``f`` at ``x``.

    The denominator is ``max(|analytic|, |numeric|, floor)`` so entries whose
    true gradient is zero are judged on roundoff, not on a 0/0 ratio.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base, requires_grad=True)
    backward(Graph.from_output(out := f(xt)), out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)
    numeric = np.empty_like(base)
    with no_grad():
        for idx in np.ndindex(base.shape):
            xp = base.copy()
            xp[idx] += eps
            fp = f(Tensor._wrap(xp)).item()
            xp[idx] = base[idx] - eps
            fm = f(Tensor._wrap(xp)).item()
            numeric[idx] = (fp - fm) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
