"""Interventions on concept nodes and pixels, and the causal effects they induce.

The effect of setting a concept ``X_i`` to ``x'`` on the model's output
class ``x_j`` is::

    CE(x') = P(x_j | do(x'), Z) - P(x_j | Z_baseline)

and its expectation under the observed distribution of ``X_i``::

    E[CE] = sum_b P(X_i in bin b | Z) * CE(rep_b)

Probabilities are mean model outputs of the policy class over the evaluation
set; ``Z`` is the input regime (clean, pixel-masked, adversarial).
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, run_attack
from .concept_ae import AugmentedNetwork
from .data import Dataset
from .errors import ContractError, FormatError, RangeError
from .nets import output_probs, probs_from_logits
from .tensor import Tensor, no_grad

CHUNK = 500
LEVEL_CONVENTION = "level = 1-based index of activation layers in the host spec; node = bottleneck channel"
BASELINES = ("zero-fill", "clean")


# ---------------------------------------------------------------------------
# intervention variables


@dataclass(frozen=True)
class Concept:
    level: int
    node: int


@dataclass(frozen=True, eq=False)
class PixelRegion:
    mask: np.ndarray  # boolean H×W


@dataclass(frozen=True)
class Idle:
    pass


@dataclass(frozen=True)
class Do:
    value: float


IDLE = Idle()


@dataclass(frozen=True)
class InterventionVariable:
    """An explicit F node: either idle, or forcing its target to a value."""

    target: Union[Concept, PixelRegion]
    state: Union[Idle, Do] = IDLE

    def __post_init__(self):
        if not isinstance(self.state, (Idle, Do)):
            raise ContractError(f"intervention state must be Idle or Do, got {self.state!r}")


def intervene_bottleneck(z: np.ndarray, node: int, value: float) -> np.ndarray:
    """Shift channel ``node`` so its per-sample spatial mean is ``value``.

    ``value == 0`` zero-fills the channel instead.
    """
    out = np.array(z, dtype=np.float64, copy=True)
    if value == 0.0:
        out[:, node] = 0.0
    else:
        ch = out[:, node]
        out[:, node] = ch + (value - ch.mean(axis=(1, 2)))[:, None, None]
    return out


def _do_hook(node: int, value: float):
    def hook(z: Tensor) -> Tensor:
        keep = np.ones(z.shape)
        shift = np.zeros(z.shape)
        if value == 0.0:
            keep[:, node] = 0.0
        else:
            shift[:, node] = (value - z.data[:, node].mean(axis=(1, 2)))[:, None, None]
        return T.add(T.mul(z, Tensor._wrap(keep)), Tensor._wrap(shift))
    return hook


def _check_concept(aug, target: Concept):
    if not isinstance(aug, AugmentedNetwork) or aug.mode != "inserted":
        raise ContractError("concept interventions need an AugmentedNetwork in inserted mode")
    if target.level != aug.level:
        raise RangeError(f"level {target.level} has no autoencoder (inserted at level {aug.level})")
    if not 0 <= target.node < aug.ae.bottleneck_channels:
        raise RangeError(f"node {target.node} out of range [0, {aug.ae.bottleneck_channels})")


def _apply_region(x: np.ndarray, mask: np.ndarray, fill: float) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[-2:]:
        raise ContractError(f"region mask {mask.shape} does not match image {x.shape[-2:]}")
    if not mask.any():
        raise ContractError("region mask is empty")
    out = np.array(x, dtype=np.float64, copy=True)
    out[..., mask] = fill
    return out


def apply_intervention(model, x, F: InterventionVariable) -> np.ndarray:
    """Output probabilities with the intervention ``F`` in force."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if isinstance(F.state, Idle):
        return output_probs(model, x, CHUNK)
    if isinstance(F.target, PixelRegion):
        return output_probs(model, _apply_region(x, F.target.mask, float(F.state.value)), CHUNK)
    _check_concept(model, F.target)
    hook = _do_hook(F.target.node, float(F.state.value))
    outs = []
    with no_grad():
        for s in range(0, len(x), CHUNK):
            logits = model.forward(x[s:s + CHUNK], hook=hook)
            outs.append(probs_from_logits(logits.data, model.head))
    return np.concatenate(outs)


# ---------------------------------------------------------------------------
# concept summaries and discretization


def concept_summary(activations, node: int) -> np.ndarray:
    a = activations.data if isinstance(activations, Tensor) else np.asarray(activations)
    if not 0 <= node < a.shape[1]:
        raise RangeError(f"node {node} out of range [0, {a.shape[1]})")
    return a[:, node].mean(axis=(1, 2))


@dataclass
class Discretization:
    edges: np.ndarray
    representatives: np.ndarray
    probs: np.ndarray
    degenerate: bool = False


def discretize_concept(summaries, bins: int) -> Discretization:
    """Equal-frequency bins over observed summaries; representative = bin mean."""
    s = np.asarray(summaries, dtype=np.float64).reshape(-1)
    if bins < 2:
        raise ContractError(f"bins must be ≥ 2, got {bins}")
    if len(s) < bins:
        raise ContractError(f"need at least {bins} summaries, got {len(s)}")
    srt = np.sort(s, kind="stable")
    if srt[0] == srt[-1]:
        return Discretization(np.array([srt[0], srt[-1]]), np.array([srt[0]]), np.array([1.0]), True)
    chunks = np.array_split(srt, bins)
    reps = np.array([c.mean() for c in chunks])
    probs = np.array([len(c) for c in chunks], dtype=np.float64) / len(s)
    inner = [(chunks[i][-1] + chunks[i + 1][0]) / 2 for i in range(bins - 1)]
    return Discretization(np.array([srt[0], *inner, srt[-1]]), reps, probs)


# ---------------------------------------------------------------------------
# causal effects


def resolve_classes(model, clean_inputs, class_policy="predicted") -> np.ndarray:
    """Per-sample class whose probability the effect is measured on."""
    n = len(clean_inputs)
    if class_policy == "predicted":
        probs = output_probs(model, clean_inputs, CHUNK)
        return probs.argmax(axis=1)
    try:
        c = int(class_policy)
    except (TypeError, ValueError) as exc:
        raise ContractError(f"class_policy must be 'predicted' or a class id, got {class_policy!r}") from exc
    return np.full(n, c, dtype=np.int64)


class _ConceptProbe:
    """Caches bottleneck activations so each do-value costs one decoder pass."""

    def __init__(self, aug: AugmentedNetwork, inputs: np.ndarray, node: int, classes: np.ndarray):
        self.aug = aug
        self.node = node
        self.classes = np.asarray(classes)
        self.rows = np.arange(len(inputs))
        with no_grad():
            self.z = [aug.bottleneck(inputs[s:s + CHUNK]).data for s in range(0, len(inputs), CHUNK)]

    def _mean_prob(self, transform) -> float:
        vals = []
        with no_grad():
            for z in self.z:
                logits = self.aug.from_bottleneck(Tensor._wrap(transform(z)))
                vals.append(probs_from_logits(logits.data, self.aug.head))
        p = np.concatenate(vals)
        return float(np.mean(p[self.rows, self.classes]))

    def idle(self) -> float:
        return self._mean_prob(lambda z: z)

    def do(self, value: float) -> float:
        hook = _do_hook(self.node, value)
        return self._mean_prob(lambda z: hook(Tensor._wrap(z)).data)

    def summaries(self) -> np.ndarray:
        return np.concatenate([z[:, self.node].mean(axis=(1, 2)) for z in self.z])


def _baseline(probe: _ConceptProbe, baseline: str) -> float:
    if baseline == "zero-fill":
        return probe.do(0.0)
    if baseline == "clean":
        return probe.idle()
    raise ContractError(f"baseline must be one of {BASELINES}, got {baseline!r}")


def causal_effect(aug: AugmentedNetwork, inputs, target: Concept, do_value: float,
                  class_policy="predicted", *, baseline: str = "zero-fill",
                  clean_inputs=None, classes=None) -> float:
    """Mean policy-class probability under do(value) minus the baseline's.

    ``inputs`` are already transformed for the evidence regime. The policy
    class comes from ``clean_inputs`` (default: ``inputs``) unless
    ``classes`` is given explicitly.
    """
    x = np.asarray(inputs.data if isinstance(inputs, Tensor) else inputs, dtype=np.float64)
    if len(x) == 0:
        raise ContractError("causal_effect needs a nonempty input set")
    _check_concept(aug, target)
    if classes is None:
        classes = resolve_classes(aug, x if clean_inputs is None else clean_inputs, class_policy)
    probe = _ConceptProbe(aug, x, target.node, classes)
    return probe.do(float(do_value)) - _baseline(probe, baseline)


@dataclass(frozen=True)
class Condition:
    """Evidence regime under which effects are measured."""

    tag: str = "Z0"
    fraction: float = 0.10
    seed: int = 0
    attack: AttackConfig | None = None

    def __post_init__(self):
        if self.tag not in ("Z0", "PWM", "Attack"):
            raise ContractError(f"condition tag must be Z0, PWM or Attack, got {self.tag!r}")
        if self.tag == "PWM" and not 0.0 < self.fraction < 1.0:
            raise ContractError(f"PWM fraction must lie in (0, 1), got {self.fraction}")
        if self.tag == "Attack" and self.attack is None:
            raise ContractError("Attack condition needs an AttackConfig")

    @property
    def label(self) -> str:
        if self.tag == "Z0":
            return "Z0"
        if self.tag == "PWM":
            return f"PWM({self.fraction:.2f})"
        return self.attack.label

    def describe(self) -> dict:
        if self.tag == "Z0":
            return {"tag": "Z0"}
        if self.tag == "PWM":
            return {"tag": "PWM", "fraction": self.fraction, "seed": self.seed, "fill": 0.0}
        return {"tag": "Attack", **self.attack.to_dict()}


Z0 = Condition("Z0")


def PWM(fraction: float = 0.10, seed: int = 0) -> Condition:
    return Condition("PWM", fraction, seed)


def AttackCondition(cfg: AttackConfig) -> Condition:
    return Condition("Attack", attack=cfg)


def pixel_mask(x, fraction: float = 0.10, fill: float = 0.0, rng_seed: int = 0, region=None) -> np.ndarray:
    """Fill ``round(fraction·H·W)`` random pixels per image (or exactly ``region``).

    Pixels are sampled without replacement, independently per image, from one
    generator seeded with ``rng_seed``; all channels of a chosen pixel are filled.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if region is not None:
        return _apply_region(x, region, fill)
    if not 0.0 < fraction < 1.0:
        raise ContractError(f"fraction must lie in (0, 1), got {fraction}")
    single = x.ndim == 3
    batch = x[None] if single else x
    if batch.ndim != 4:
        raise ContractError(f"pixel_mask expects C×H×W or N×C×H×W, got {x.shape}")
    n, _, h, w = batch.shape
    m = int(round(fraction * h * w))
    rng = np.random.default_rng(rng_seed)
    out = batch.copy()
    for i in range(n):
        idx = rng.choice(h * w, size=m, replace=False)
        out[i].reshape(out.shape[1], -1)[:, idx] = fill
    return out[0] if single else out


def transform_inputs(aug: AugmentedNetwork, data: Dataset, condition: Condition) -> np.ndarray:
    """Inputs under ``condition``; adversarial examples are crafted against the host network."""
    if condition.tag == "Z0":
        return data.images
    if condition.tag == "PWM":
        return pixel_mask(data.images, condition.fraction, 0.0, condition.seed)
    return run_attack(aug.host, data.images, data.labels, condition.attack).adversarials


@dataclass
class ExpectedCE:
    value: float
    discretization: Discretization
    baseline_prob: float
    effects: np.ndarray
    n_samples: int


def _expected_from_probe(probe: _ConceptProbe, bins: int, baseline: str) -> ExpectedCE:
    disc = discretize_concept(probe.summaries(), bins)
    base = _baseline(probe, baseline)
    effects = np.array([probe.do(float(v)) - base for v in disc.representatives])
    value = float(np.sum(disc.probs * effects))
    return ExpectedCE(value, disc, base, effects, len(probe.rows))


def expected_causal_effect_details(aug: AugmentedNetwork, condition: Condition, target: Concept,
                                   bins: int = 8, class_policy="predicted", dataset: Dataset | None = None,
                                   *, baseline: str = "zero-fill", inputs=None) -> ExpectedCE:
    if dataset is None or len(dataset) == 0:
        raise ContractError("expected_causal_effect needs a nonempty dataset")
    _check_concept(aug, target)
    classes = resolve_classes(aug, dataset.images, class_policy)
    x = transform_inputs(aug, dataset, condition) if inputs is None else inputs
    return _expected_from_probe(_ConceptProbe(aug, x, target.node, classes), bins, baseline)


def expected_causal_effect(aug: AugmentedNetwork, condition: Condition, target: Concept, bins: int = 8,
                           class_policy="predicted", dataset: Dataset | None = None, *,
                           baseline: str = "zero-fill") -> float:
    """Sum over concept bins of P(bin | condition) × CE(bin representative)."""
    return expected_causal_effect_details(aug, condition, target, bins, class_policy, dataset,
                                          baseline=baseline).value


# ---------------------------------------------------------------------------
# reports


@dataclass
class CERow:
    level: int
    node: int
    condition: str
    expected_ce: float
    n_samples: int
    class_policy: str


@dataclass
class CEReport:
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    HEADER = ("level", "node", "condition", "expected_ce", "n", "policy")

    def value(self, level: int, node: int, condition: str) -> float:
        for r in self.rows:
            if (r.level, r.node, r.condition) == (level, node, condition):
                return r.expected_ce
        raise KeyError((level, node, condition))

    def to_tsv(self) -> str:
        buf = io.StringIO()
        for key in sorted(self.metadata):
            buf.write(f"# {key}: {json.dumps(self.metadata[key], sort_keys=True)}\n")
        buf.write("\t".join(self.HEADER) + "\n")
        for r in self.rows:
            buf.write(f"{r.level}\t{r.node}\t{r.condition}\t{r.expected_ce:.5e}\t{r.n_samples}\t{r.class_policy}\n")
        return buf.getvalue()

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_tsv().encode("utf-8"))
        return path

    @classmethod
    def from_tsv(cls, text: str) -> "CEReport":
        meta, rows = {}, []
        lines = text.splitlines()
        body = [ln for ln in lines if not ln.startswith("#")]
        for ln in lines:
            if ln.startswith("# "):
                key, _, val = ln[2:].partition(": ")
                meta[key] = json.loads(val)
        if not body or tuple(body[0].split("\t")) != cls.HEADER:
            raise FormatError("CE table: missing or malformed header row")
        for i, ln in enumerate(body[1:], start=2):
            parts = ln.split("\t")
            if len(parts) != len(cls.HEADER):
                raise FormatError(f"CE table: row {i} has {len(parts)} fields")
            rows.append(CERow(int(parts[0]), int(parts[1]), parts[2], float(parts[3]), int(parts[4]), parts[5]))
        return cls(rows, meta)


@dataclass
class CEConfig:
    bins: int = 8
    class_policy: str | int = "predicted"
    baseline: str = "zero-fill"


def ce_report(aug: AugmentedNetwork, dataset: Dataset, targets: Sequence, conditions: Sequence[Condition],
              cfg: CEConfig | None = None) -> CEReport:
    """One row per target × condition."""
    cfg = cfg or CEConfig()
    targets = [t if isinstance(t, Concept) else Concept(*t) for t in targets]
    for t in targets:
        _check_concept(aug, t)
    if len(dataset) == 0:
        raise ContractError("ce_report needs a nonempty dataset")
    classes = resolve_classes(aug, dataset.images, cfg.class_policy)
    report = CEReport(metadata={
        "level_convention": LEVEL_CONVENTION,
        "discretization": {"method": "equal-frequency", "bins": cfg.bins, "representative": "bin mean"},
        "baseline": cfg.baseline,
        "class_policy": str(cfg.class_policy),
        "probability_estimator": "mean policy-class output probability over the evaluation set",
        "do_operator": "additive shift of the channel to the target spatial mean; 0 zero-fills",
        "lambdas": {"shallow": aug.ae.lambdas[0], "deep": aug.ae.lambdas[1], "interpretability": aug.ae.lambdas[2]},
        "interpretability_loss": "mean L1 of bottleneck activations",
        "conditions": {c.label: c.describe() for c in conditions},
        "attack_target_model": "host network",
        "seeds": {"autoencoder": aug.ae.seed, "host": aug.host.seed},
        "degenerate_bins": [],
    })
    for cond in conditions:
        x = transform_inputs(aug, dataset, cond)
        for t in targets:
            res = _expected_from_probe(_ConceptProbe(aug, x, t.node, classes), cfg.bins, cfg.baseline)
            if res.discretization.degenerate:
                report.metadata["degenerate_bins"].append([t.level, t.node, cond.label])
            report.rows.append(CERow(t.level, t.node, cond.label, res.value, res.n_samples, str(cfg.class_policy)))
    return report


def attack_ce_sweep(aug: AugmentedNetwork, dataset: Dataset, targets: Sequence, configs: Sequence[AttackConfig],
                    cfg: CEConfig | None = None) -> CEReport:
    """Expected-CE per attack kind; metadata names the most negative attack per target."""
    conds = [AttackCondition(c) for c in configs]
    report = ce_report(aug, dataset, targets, conds, cfg)
    most_negative = {}
    for r in report.rows:
        key = f"{r.level},{r.node}"
        if key not in most_negative or r.expected_ce < report.value(r.level, r.node, most_negative[key]):
            most_negative[key] = r.condition
    report.metadata["most_negative_attack"] = most_negative
    return report
