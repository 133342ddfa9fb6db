"""Sequential conv/pool/dense networks with activation taps.

A *level* is the 1-based index of an activation layer in the spec; tapping
level ``L`` returns the post-activation output of that layer.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import ContractError, RangeError, SpecError, TrainingError
from .optim import AdamState, adam_step
from .serialize import load_container, save_container
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

LOSSES = ("categorical-ce", "binary-ce")


@dataclass(frozen=True)
class Conv:
    filters: int
    k: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class Pool:
    k: int


@dataclass(frozen=True)
class Dense:
    out: int


@dataclass(frozen=True)
class Activation:
    kind: str


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Union[Conv, Pool, Dense, Activation, Flatten]
_LAYER_TYPES = {"conv": Conv, "pool": Pool, "dense": Dense, "activation": Activation, "flatten": Flatten}
_TYPE_NAMES = {v: k for k, v in _LAYER_TYPES.items()}


def _describe(i: int, layer) -> str:
    return f"layer {i} ({_TYPE_NAMES[type(layer)]} {asdict(layer)})"


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: tuple
    num_classes: int
    loss: str = "categorical-ce"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        self.shapes()

    @property
    def levels(self) -> list[int]:
        """Layer index of each activation layer; level L is ``levels[L-1]``."""
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, Activation)]

    def shapes(self) -> list[tuple]:
        """Per-sample output shape after each layer; raises SpecError on the first bad layer."""
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"input_shape must be C×H×W with positive extents, got {self.input_shape}")
        if self.loss not in LOSSES:
            raise SpecError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.num_classes < (2 if self.loss == "categorical-ce" else 1):
            raise SpecError(f"num_classes={self.num_classes} too small for {self.loss}")
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            where = _describe(i, layer)
            if isinstance(layer, Conv):
                if len(shape) != 3:
                    raise SpecError(f"{where}: needs a C×H×W input, got {shape}")
                if layer.filters < 1 or layer.k < 1 or layer.stride < 1 or layer.pad < 0:
                    raise SpecError(f"{where}: filters, k, stride must be ≥ 1 and pad ≥ 0")
                c, h, w = shape
                if layer.k > h + 2 * layer.pad or layer.k > w + 2 * layer.pad:
                    raise SpecError(f"{where}: kernel larger than padded input {shape}")
                shape = (layer.filters, T.conv_output_size(h, layer.k, layer.stride, layer.pad),
                         T.conv_output_size(w, layer.k, layer.stride, layer.pad))
            elif isinstance(layer, Pool):
                if len(shape) != 3 or layer.k < 1 or layer.k > min(shape[1:]):
                    raise SpecError(f"{where}: window does not fit input {shape}")
                shape = (shape[0], shape[1] // layer.k, shape[2] // layer.k)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, Dense):
                if len(shape) != 1:
                    raise SpecError(f"{where}: needs a flat input (add a flatten layer), got {shape}")
                if layer.out < 1:
                    raise SpecError(f"{where}: out must be ≥ 1")
                shape = (layer.out,)
            elif isinstance(layer, Activation):
                if layer.kind not in ("relu", "sigmoid"):
                    raise SpecError(f"{where}: unknown activation kind {layer.kind!r}")
            else:
                raise SpecError(f"layer {i}: unknown layer {layer!r}")
            out.append(shape)
        if not self.layers or not isinstance(self.layers[-1], Dense):
            raise SpecError("the last layer must be the dense output head")
        if shape != (self.num_classes,):
            raise SpecError(f"output head produces {shape}, expected ({self.num_classes},)")
        return out

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "loss": self.loss,
            "layers": [{"type": _TYPE_NAMES[type(layer)], **asdict(layer)} for layer in self.layers],
        }

    def canonical_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = []
        for i, raw in enumerate(d["layers"]):
            raw = dict(raw)
            kind = raw.pop("type", None)
            if kind not in _LAYER_TYPES:
                raise SpecError(f"layer {i}: unknown layer type {kind!r}")
            try:
                layers.append(_LAYER_TYPES[kind](**raw))
            except TypeError as exc:
                raise SpecError(f"layer {i} ({kind}): {exc}") from exc
        return cls(tuple(layers), tuple(d["input_shape"]), int(d["num_classes"]), d.get("loss", "categorical-ce"))


def fashion_2conv_spec() -> NetworkSpec:
    """Two-conv classifier for 28×28 grayscale, 10 classes."""
    return NetworkSpec(
        (Conv(16, 3, 1, 1), Activation("relu"), Pool(2),
         Conv(32, 3, 1, 1), Activation("relu"), Pool(2),
         Flatten(), Dense(10)),
        (1, 28, 28), 10)


def bars_spec(size: int = 8) -> NetworkSpec:
    return NetworkSpec(
        (Conv(8, 3, 1, 1), Activation("relu"), Conv(16, 3, 1, 1), Activation("relu"),
         Pool(2), Flatten(), Dense(2)),
        (1, size, size), 2)


PRESETS = {"fashion-2conv": fashion_2conv_spec, "bars": bars_spec}


@dataclass
class Network:
    spec: NetworkSpec
    params: dict
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    @property
    def level_index(self) -> dict:
        return {lvl: idx for lvl, idx in enumerate(self.spec.levels, start=1)}

    @property
    def head(self) -> str:
        return "binary" if self.spec.loss == "binary-ce" else "categorical"

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def requires_grad_(self, flag: bool) -> "Network":
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None
        return self

    def copy(self) -> "Network":
        return Network(self.spec, {k: Tensor(v.data, requires_grad=v.requires_grad) for k, v in self.params.items()},
                       self.seed, copy.deepcopy(self.metadata))

    def layer_of_level(self, level: int) -> int:
        idx = self.level_index.get(level)
        if idx is None:
            raise RangeError(f"unknown level {level}; valid levels are 1..{len(self.spec.levels)}")
        return idx

    def run(self, x, start: int = 0, stop: int | None = None, tap_layers=()) -> tuple[Tensor, dict]:
        """Apply layers ``start:stop``; collect outputs of layer indices in ``tap_layers``."""
        h = T.as_tensor(x)
        taps = {}
        stop = len(self.spec.layers) if stop is None else stop
        for i in range(start, stop):
            layer = self.spec.layers[i]
            if isinstance(layer, Conv):
                h = T.conv2d(h, self.params[f"{i}.W"], self.params[f"{i}.b"], layer.stride, layer.pad)
            elif isinstance(layer, Dense):
                h = T.dense(h, self.params[f"{i}.W"], self.params[f"{i}.b"])
            elif isinstance(layer, Pool):
                h = T.maxpool2d(h, layer.k)
            elif isinstance(layer, Flatten):
                h = T.flatten(h)
            else:
                h = T.activation(layer.kind, h)
            if i in tap_layers:
                taps[i] = h
        return h, taps

    def forward(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[1:] != self.spec.input_shape:
            raise ContractError(f"input {x.shape} does not match spec input {self.spec.input_shape}")
        return self.run(x)[0]

    def probs(self, x, batch_size: int = 500) -> np.ndarray:
        return output_probs(self, x, batch_size)

    def predict(self, x, batch_size: int = 500) -> np.ndarray:
        return predict_from_probs(self.probs(x, batch_size), self.head)


def output_probs(model, x, batch_size: int = 500) -> np.ndarray:
    """Softmax (categorical) or per-label sigmoid (binary) outputs, no graph recorded."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    outs = []
    with no_grad():
        for s in range(0, len(x), batch_size):
            logits = model.forward(x[s:s + batch_size])
            outs.append(probs_from_logits(logits.data, model.head))
    return np.concatenate(outs) if outs else np.zeros((0, 0))


def probs_from_logits(logits: np.ndarray, head: str) -> np.ndarray:
    if head == "binary":
        return T._sigmoid(logits)
    return np.exp(T.log_softmax(Tensor._wrap(logits)).data)


def predict_from_probs(probs: np.ndarray, head: str) -> np.ndarray:
    if head == "binary":
        return (probs >= 0.5).astype(np.int64)
    return probs.argmax(axis=1)


def build_network(spec: NetworkSpec, seed: int) -> Network:
    """Instantiate parameters: He-uniform before a relu, Xavier-uniform otherwise; zero biases."""
    shapes = spec.shapes()
    rng = np.random.default_rng(seed)
    params = {}
    in_shape = spec.input_shape
    for i, layer in enumerate(spec.layers):
        nxt = spec.layers[i + 1] if i + 1 < len(spec.layers) else None
        he = isinstance(nxt, Activation) and nxt.kind == "relu"
        if isinstance(layer, (Conv, Dense)):
            if isinstance(layer, Conv):
                wshape = (layer.filters, in_shape[0], layer.k, layer.k)
                fan_in, fan_out = in_shape[0] * layer.k ** 2, layer.filters * layer.k ** 2
            else:
                wshape = (in_shape[0], layer.out)
                fan_in, fan_out = in_shape[0], layer.out
            limit = np.sqrt(6.0 / fan_in) if he else np.sqrt(6.0 / (fan_in + fan_out))
            params[f"{i}.W"] = Tensor(rng.uniform(-limit, limit, size=wshape), requires_grad=True)
            params[f"{i}.b"] = Tensor(np.zeros(wshape[0] if isinstance(layer, Conv) else layer.out), requires_grad=True)
        in_shape = shapes[i]
    return Network(spec, params, seed, {"init": "he-uniform before relu, xavier-uniform otherwise; zero bias"})


def forward_with_taps(net: Network, batch, taps: Iterable[int] = ()) -> tuple[Tensor, dict]:
    """Logits plus the post-activation output of each requested level."""
    layer_for = {lvl: net.layer_of_level(lvl) for lvl in taps}
    x = T.as_tensor(batch)
    if x.shape[1:] != net.spec.input_shape:
        raise ContractError(f"input {x.shape} does not match spec input {net.spec.input_shape}")
    logits, got = net.run(x, tap_layers=set(layer_for.values()))
    return logits, {lvl: got[idx] for lvl, idx in layer_for.items()}


def classification_loss(logits: Tensor, labels, loss: str, reduction: str = "mean") -> Tensor:
    """Categorical cross-entropy or summed-over-labels binary cross-entropy."""
    if loss == "binary-ce":
        per = T.bce_with_logits(logits, labels)
        total = T.sum(per)
        n = logits.shape[0]
    else:
        total = -T.sum(T.pick(T.log_softmax(logits), labels))
        n = logits.shape[0]
    return total if reduction == "sum" else total / n


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 100
    epochs: int = 5
    seed: int = 0


def train_classifier(net: Network, data: Dataset, cfg: TrainConfig, test_data: Dataset | None = None):
    """Train a copy of ``net`` with Adam; return ``(trained, history)``.

    ``history`` holds per-epoch ``train_loss``/``test_accuracy`` and the raw
    per-step losses.
    """
    if len(data) == 0:
        raise ContractError("training data is empty")
    if not 1 <= cfg.batch_size <= len(data):
        raise ContractError(f"batch_size {cfg.batch_size} must be in [1, {len(data)}]")
    net = net.copy().requires_grad_(True)
    params = net.parameters()
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    history = {"epochs": [], "step_losses": []}
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        losses = []
        for step, s in enumerate(range(0, len(data), cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            loss = classification_loss(net.forward(data.images[idx]), data.labels[idx], net.spec.loss)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"loss diverged to {loss.item()} at epoch {epoch}, step {step}")
            for p in params:
                p.grad = None
            loss.backward()
            adam_step(params, [p.grad for p in params], state, cfg.lr, cfg.beta1, cfg.beta2)
            losses.append(loss.item())
        rec = {"epoch": epoch + 1, "train_loss": float(np.mean(losses))}
        if test_data is not None:
            rec["test_accuracy"] = evaluate(net, test_data)["accuracy"]
        log.info("epoch %d: %s", epoch + 1, rec)
        history["epochs"].append(rec)
        history["step_losses"].extend(losses)
    for p in params:
        p.grad = None
    return net, history


def evaluate(model, data: Dataset, batch_size: int = 500) -> dict:
    """Accuracy, mean loss and per-class accuracy of a Network-like model."""
    n = len(data)
    if n == 0:
        return {"accuracy": float("nan"), "loss": float("nan"), "per_class_accuracy": []}
    loss_name = "binary-ce" if model.head == "binary" else "categorical-ce"
    total_loss = 0.0
    preds = []
    with no_grad():
        for s in range(0, n, batch_size):
            logits = model.forward(data.images[s:s + batch_size])
            total_loss += classification_loss(logits, data.labels[s:s + batch_size], loss_name, "sum").item()
            preds.append(predict_from_probs(probs_from_logits(logits.data, model.head), model.head))
    pred = np.concatenate(preds)
    if data.multilabel:
        correct = (pred == data.labels).all(axis=1)
        per_class = ((pred == data.labels).mean(axis=0)).tolist()
    else:
        correct = pred == data.labels
        per_class = [float(correct[data.labels == c].mean()) if np.any(data.labels == c) else float("nan")
                     for c in range(data.num_classes)]
    return {"accuracy": float(correct.mean()), "loss": total_loss / n, "per_class_accuracy": per_class}


def save_network(net: Network, path, metadata: dict | None = None) -> Path:
    header = {
        "kind": "network",
        "spec": net.spec.canonical_text(),
        "seed": net.seed,
        "metadata": {**net.metadata, **(metadata or {})},
    }
    return save_container(path, {k: v.data for k, v in net.params.items()}, header)


def load_network(path) -> Network:
    header, tensors = load_container(path)
    if header.get("kind") != "network":
        raise ContractError(f"{path} is not a network checkpoint (kind={header.get('kind')!r})")
    spec = NetworkSpec.from_dict(json.loads(header["spec"]))
    params = {k: Tensor(v, requires_grad=True) for k, v in tensors.items()}
    return Network(spec, params, header.get("seed", 0), header.get("metadata", {}))
