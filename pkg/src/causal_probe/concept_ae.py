"""Bottleneck concept autoencoder spliced into a host network at one level.

Five 3×3 same-padded stride-1 convolutions with channel schedule
``C → h → K → K → h → C`` where ``h = max(C // 2, K)``. The output of the
middle layer (``K`` channels) is the bottleneck; each channel is a concept
node.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import ContractError, TrainingError
from .nets import Network, output_probs
from .optim import AdamState, adam_step
from .serialize import load_container, save_container
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (1.0, 1.0, 0.1)  # shallow, deep, interpretability
LAYERS = ("enc1", "enc2", "mid", "dec1", "dec2")


@dataclass
class ConceptAutoencoder:
    insertion_level: int
    in_channels: int
    bottleneck_channels: int
    params: dict
    lambdas: tuple = DEFAULT_LAMBDAS
    out_activation: str = "relu"
    seed: int = 0

    @property
    def hidden_channels(self) -> int:
        return max(self.in_channels // 2, self.bottleneck_channels)

    @property
    def schedule(self) -> list[tuple[int, int]]:
        C, h, K = self.in_channels, self.hidden_channels, self.bottleneck_channels
        return [(C, h), (h, K), (K, K), (K, h), (h, C)]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def _conv(self, name, x):
        return T.conv2d(x, self.params[f"{name}.W"], self.params[f"{name}.b"], 1, 1)

    def encode(self, a) -> Tensor:
        h = T.relu(self._conv("enc1", T.as_tensor(a)))
        h = T.relu(self._conv("enc2", h))
        return T.relu(self._conv("mid", h))

    def decode(self, z) -> Tensor:
        h = T.relu(self._conv("dec1", T.as_tensor(z)))
        return T.activation(self.out_activation, self._conv("dec2", h))

    def copy(self) -> "ConceptAutoencoder":
        return ConceptAutoencoder(self.insertion_level, self.in_channels, self.bottleneck_channels,
                                  {k: Tensor(v.data, requires_grad=True) for k, v in self.params.items()},
                                  tuple(self.lambdas), self.out_activation, self.seed)


def build_autoencoder(host: Network, level: int, bottleneck_channels: int, seed: int,
                      lambdas=DEFAULT_LAMBDAS) -> ConceptAutoencoder:
    idx = host.layer_of_level(level)
    shape = host.spec.shapes()[idx]
    if len(shape) != 3:
        raise ContractError(f"level {level} output {shape} is not a C×H×W feature map")
    C = shape[0]
    if not 1 <= bottleneck_channels < C:
        raise ContractError(f"bottleneck_channels must be in [1, {C}) at level {level}, got {bottleneck_channels}")
    if any(v < 0 for v in lambdas):
        raise ContractError("lambdas must be nonnegative")
    ae = ConceptAutoencoder(level, C, bottleneck_channels, {}, tuple(float(v) for v in lambdas),
                            host.spec.layers[idx].kind, seed)
    rng = np.random.default_rng(seed)
    for name, (cin, cout) in zip(LAYERS, ae.schedule):
        limit = np.sqrt(6.0 / (cin * 9))
        ae.params[f"{name}.W"] = Tensor(rng.uniform(-limit, limit, size=(cout, cin, 3, 3)), requires_grad=True)
        ae.params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True)
    return ae


@dataclass
class AugmentedNetwork:
    """Host network with the autoencoder spliced in after ``ae.insertion_level``."""

    host: Network
    ae: ConceptAutoencoder
    mode: str = "inserted"
    _split: int = field(init=False, repr=False)

    def __post_init__(self):
        if self.mode not in ("inserted", "passthrough"):
            raise ContractError(f"mode must be 'inserted' or 'passthrough', got {self.mode!r}")
        self._split = self.host.layer_of_level(self.ae.insertion_level)

    @property
    def head(self) -> str:
        return self.host.head

    @property
    def spec(self):
        return self.host.spec

    @property
    def level(self) -> int:
        return self.ae.insertion_level

    def with_mode(self, mode: str) -> "AugmentedNetwork":
        return AugmentedNetwork(self.host, self.ae, mode)

    def prefix(self, x) -> Tensor:
        return self.host.run(x, 0, self._split + 1)[0]

    def suffix(self, a) -> Tensor:
        return self.host.run(a, self._split + 1)[0]

    def bottleneck(self, x) -> Tensor:
        self._require_inserted()
        return self.ae.encode(self.prefix(x))

    def from_bottleneck(self, z) -> Tensor:
        return self.suffix(self.ae.decode(z))

    def forward(self, x, hook=None) -> Tensor:
        """Logits; ``hook`` (inserted mode only) maps bottleneck Tensor -> Tensor."""
        if self.mode == "passthrough":
            if hook is not None:
                raise ContractError("bottleneck hooks need inserted mode")
            return self.host.forward(x)
        x = T.as_tensor(x)
        if x.shape[1:] != self.host.spec.input_shape:
            raise ContractError(f"input {x.shape} does not match spec input {self.host.spec.input_shape}")
        z = self.bottleneck(x)
        if hook is not None:
            z = hook(z)
        return self.from_bottleneck(z)

    def probs(self, x, batch_size: int = 500) -> np.ndarray:
        return output_probs(self, x, batch_size)

    def _require_inserted(self):
        if self.mode != "inserted":
            raise ContractError("operation needs the autoencoder in inserted mode")


def bottleneck_activations(aug: AugmentedNetwork, batch, batch_size: int = 500) -> Tensor:
    x = np.asarray(batch.data if isinstance(batch, Tensor) else batch, dtype=np.float64)
    with no_grad():
        parts = [aug.bottleneck(x[s:s + batch_size]).data for s in range(0, len(x), batch_size)]
    return Tensor._wrap(np.concatenate(parts))


def _deep_loss(orig_logits: np.ndarray, ins_logits: Tensor, head: str) -> Tensor:
    """KL(original ‖ inserted), averaged over the batch."""
    n = orig_logits.shape[0]
    if head == "binary":
        p = T._sigmoid(orig_logits)
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = -(np.where(p > 0, p * np.log(p), 0.0) + np.where(p < 1, (1 - p) * np.log1p(-p), 0.0))
        cross = T.sum(T.bce_with_logits(ins_logits, p))
        return (cross - float(ent.sum())) / n
    lp = T.log_softmax(Tensor._wrap(orig_logits)).data
    p = Tensor._wrap(np.exp(lp))
    return T.sum(T.mul(p, T.sub(Tensor._wrap(lp), T.log_softmax(ins_logits)))) / n


def composite_loss(aug: AugmentedNetwork, batch) -> dict:
    """Weighted shallow + deep + interpretability loss; values are Tensors."""
    aug._require_inserted()
    a = aug.prefix(batch)
    with no_grad():
        orig = aug.suffix(a).data
    z = aug.ae.encode(a)
    r = aug.ae.decode(z)
    shallow = T.mean(T.abs(T.sub(a, r)))
    deep = _deep_loss(orig, aug.suffix(r), aug.head)
    interp = T.mean(T.abs(z))
    ls, ld, li = aug.ae.lambdas
    total = shallow * ls + deep * ld + interp * li
    return {"total": total, "shallow": shallow, "deep": deep, "interpretability": interp}


@dataclass
class AETrainConfig:
    lr: float = 1e-3
    epochs: int = 3
    batch_size: int = 100
    lambdas: tuple | None = None
    seed: int = 0


def train_autoencoder(aug: AugmentedNetwork, data: Dataset, cfg: AETrainConfig):
    """Fit a copy of the autoencoder with the host frozen; return ``(ae, history)``."""
    if len(data) == 0:
        raise ContractError("training data is empty")
    ae = aug.ae.copy()
    if cfg.lambdas is not None:
        ae.lambdas = tuple(float(v) for v in cfg.lambdas)
    work = AugmentedNetwork(aug.host, ae, "inserted")
    host_flags = {k: p.requires_grad for k, p in aug.host.params.items()}
    aug.host.requires_grad_(False)
    params = ae.parameters()
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    history = {"epochs": [], "step_losses": []}
    bs = min(cfg.batch_size, len(data))
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(data))
            sums = {"total": 0.0, "shallow": 0.0, "deep": 0.0, "interpretability": 0.0}
            steps = 0
            for step, s in enumerate(range(0, len(data), bs)):
                parts = composite_loss(work, data.images[order[s:s + bs]])
                total = parts["total"]
                if not np.isfinite(total.item()):
                    raise TrainingError(f"autoencoder loss diverged at epoch {epoch}, step {step}")
                for p in params:
                    p.grad = None
                total.backward()
                adam_step(params, [p.grad for p in params], state, cfg.lr)
                for k in sums:
                    sums[k] += parts[k].item()
                history["step_losses"].append(total.item())
                steps += 1
            rec = {"epoch": epoch + 1, **{k: v / steps for k, v in sums.items()}}
            log.info("ae epoch %d: %s", epoch + 1, rec)
            history["epochs"].append(rec)
    finally:
        for k, p in aug.host.params.items():
            p.requires_grad = host_flags[k]
            p.grad = None
    for p in params:
        p.grad = None
    return ae, history


def save_autoencoder(ae: ConceptAutoencoder, path, metadata: dict | None = None) -> Path:
    header = {
        "kind": "autoencoder",
        "seed": ae.seed,
        "metadata": {
            "insertion_level": ae.insertion_level,
            "in_channels": ae.in_channels,
            "bottleneck_channels": ae.bottleneck_channels,
            "lambdas": list(ae.lambdas),
            "out_activation": ae.out_activation,
            "interpretability_loss": "mean L1 of bottleneck activations",
            **(metadata or {}),
        },
    }
    return save_container(path, {k: v.data for k, v in ae.params.items()}, header)


def load_autoencoder(path) -> ConceptAutoencoder:
    header, tensors = load_container(path)
    if header.get("kind") != "autoencoder":
        raise ContractError(f"{path} is not an autoencoder checkpoint (kind={header.get('kind')!r})")
    m = header["metadata"]
    return ConceptAutoencoder(m["insertion_level"], m["in_channels"], m["bottleneck_channels"],
                              {k: Tensor(v, requires_grad=True) for k, v in tensors.items()},
                              tuple(m["lambdas"]), m.get("out_activation", "relu"), header.get("seed", 0))
