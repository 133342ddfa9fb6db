"""Gradient-based L∞ adversarial perturbations (FGSM, BIM, PGD) and JSMA.

Every attack takes a model exposing ``forward(x) -> logits`` and ``head``
(``"categorical"`` or ``"binary"``); both :class:`~causal_probe.nets.Network`
and :class:`~causal_probe.concept_ae.AugmentedNetwork` qualify.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, RangeError
from .nets import classification_loss, output_probs, predict_from_probs
from .tensor import Tensor

KINDS = ("FGSM", "BIM", "PGD", "JSMA")
CHUNK = 500  # fixed evaluation chunk so per-sample results never depend on batch size


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "FGSM"
    epsilon: float = 0.3
    steps: int = 10
    step_size: float | None = None
    theta: float = 1.0
    gamma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"attack kind must be one of {KINDS}, got {self.kind!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ContractError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.steps < 1:
            raise ContractError(f"steps must be ≥ 1, got {self.steps}")
        if self.step_size is not None and not 0.0 <= self.step_size <= self.epsilon:
            raise ContractError(f"step_size {self.step_size} must lie in [0, epsilon={self.epsilon}]")
        if not 0.0 < self.gamma <= 1.0:
            raise ContractError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.theta == 0.0:
            raise ContractError("theta must be nonzero")

    @property
    def alpha(self) -> float:
        """Per-step size; defaults to min(ε, 2.5·ε/steps)."""
        if self.step_size is not None:
            return self.step_size
        return min(self.epsilon, 2.5 * self.epsilon / self.steps)

    @property
    def label(self) -> str:
        if self.kind == "JSMA":
            return f"JSMA(theta={self.theta:g},gamma={self.gamma:g})"
        if self.kind == "FGSM":
            return f"FGSM({self.epsilon:g})"
        return f"{self.kind}({self.epsilon:g},{self.steps})"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["step_size"] = self.alpha
        return d


@dataclass
class AdversarialBatch:
    originals: np.ndarray
    adversarials: np.ndarray
    success: np.ndarray
    config: dict = field(default_factory=dict)

    def linf(self) -> np.ndarray:
        return np.abs(self.adversarials - self.originals).reshape(len(self.originals), -1).max(axis=1)


def _model_params(model):
    if hasattr(model, "ae"):
        return list(model.host.params.values()) + list(model.ae.params.values())
    return list(model.params.values())


@contextlib.contextmanager
def frozen(model):
    """Temporarily stop parameters from requiring gradients."""
    params = _model_params(model)
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield model
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def _loss_name(model) -> str:
    return "binary-ce" if model.head == "binary" else "categorical-ce"


def input_gradient(model, x: np.ndarray, y) -> np.ndarray:
    """d(summed training loss)/d(input), evaluated in fixed chunks."""
    out = np.empty_like(x)
    y = np.asarray(y)
    with frozen(model):
        for s in range(0, len(x), CHUNK):
            xt = Tensor(x[s:s + CHUNK], requires_grad=True)
            classification_loss(model.forward(xt), y[s:s + CHUNK], _loss_name(model), "sum").backward()
            out[s:s + CHUNK] = xt.grad
    return out


def _untargeted_success(model, adv, y) -> np.ndarray:
    pred = predict_from_probs(output_probs(model, adv, CHUNK), model.head)
    y = np.asarray(y)
    return (pred != y).any(axis=1) if pred.ndim == 2 else pred != y


def _check_x(x) -> np.ndarray:
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim != 4:
        raise ContractError(f"attacks expect N×C×H×W inputs, got {x.shape}")
    return x


def fgsm(net, x, y_true, epsilon: float) -> AdversarialBatch:
    x = _check_x(x)
    adv = np.clip(x + epsilon * np.sign(input_gradient(net, x, y_true)), 0.0, 1.0)
    cfg = AttackConfig("FGSM", epsilon, 1).to_dict()
    return AdversarialBatch(x, adv, _untargeted_success(net, adv, y_true), cfg)


def _iterate(net, x, start, y, epsilon, step_size, steps):
    lo, hi = x - epsilon, x + epsilon
    cur = start
    for _ in range(steps):
        cur = np.clip(cur + step_size * np.sign(input_gradient(net, cur, y)), 0.0, 1.0)
        cur = np.minimum(np.maximum(cur, lo), hi)
    return cur


def bim(net, x, y_true, epsilon: float, step_size: float, steps: int) -> AdversarialBatch:
    cfg = AttackConfig("BIM", epsilon, steps, step_size)
    x = _check_x(x)
    adv = _iterate(net, x, x, y_true, epsilon, cfg.alpha, steps)
    return AdversarialBatch(x, adv, _untargeted_success(net, adv, y_true), cfg.to_dict())


def pgd(net, x, y_true, epsilon: float, step_size: float, steps: int, seed: int = 0) -> AdversarialBatch:
    """BIM from a uniform random start; sample ``i`` draws from ``seed + i``."""
    cfg = AttackConfig("PGD", epsilon, steps, step_size, seed=seed)
    x = _check_x(x)
    noise = np.stack([np.random.default_rng(seed + i).uniform(-epsilon, epsilon, size=x.shape[1:])
                      for i in range(len(x))]) if len(x) else np.zeros_like(x)
    start = np.clip(x + noise, 0.0, 1.0)
    adv = _iterate(net, x, start, y_true, epsilon, cfg.alpha, steps)
    return AdversarialBatch(x, adv, _untargeted_success(net, adv, y_true), cfg.to_dict())


def _prob_jacobian(model, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Output probabilities and their Jacobian ``J[n, c, ...] = dP_c(x_n)/dx_n``."""
    with frozen(model):
        xt = Tensor(x, requires_grad=True)
        logits = model.forward(xt)
        probs = T.sigmoid(logits) if model.head == "binary" else T.exp(T.log_softmax(logits))
        ncls = probs.shape[1]
        jac = np.empty((len(x), ncls) + x.shape[1:])
        for c in range(ncls):
            xt.grad = None
            T.sum(T.pick(probs, np.full(len(x), c))).backward()
            jac[:, c] = xt.grad
    return probs.data, jac


def _best_pair(alpha, beta, allowed, sign, budget_left):
    """Indices of the feature pair (or single feature) with the largest saliency."""
    a = np.where(allowed, alpha, 0.0)
    b = np.where(allowed, beta, 0.0)
    if budget_left >= 2:
        A = a[:, None] + a[None, :]
        Bv = b[:, None] + b[None, :]
        ok = (sign * A > 0) & (sign * Bv < 0) & allowed[:, None] & allowed[None, :]
        np.fill_diagonal(ok, False)
        score = np.where(ok, np.abs(A) * np.abs(Bv), -1.0)
        k = int(np.argmax(score))
        if score.flat[k] < 0:
            return None
        return sorted({k // len(a), k % len(a)})
    ok = (sign * a > 0) & (sign * b < 0) & allowed
    score = np.where(ok, np.abs(a) * np.abs(b), -1.0)
    k = int(np.argmax(score))
    return None if score[k] < 0 else [k]


def jsma(net, x, target_class, theta: float = 1.0, gamma: float = 0.1) -> AdversarialBatch:
    """Targeted Jacobian saliency-map attack on output probabilities.

    Each iteration saturates the feature pair whose joint effect most
    increases the target probability while decreasing the others. Stops on
    reaching the target or after ``ceil(gamma·H·W)`` modified features.
    """
    cfg = AttackConfig("JSMA", theta=theta, gamma=gamma)
    x = _check_x(x)
    n = len(x)
    tgt = np.broadcast_to(np.asarray(target_class, dtype=np.int64), (n,)).copy()
    H, W = x.shape[2], x.shape[3]
    budget = math.ceil(gamma * H * W)
    adv = x.copy()
    flat = adv.reshape(n, -1)
    modified = np.zeros(flat.shape, dtype=bool)
    sign = 1.0 if theta > 0 else -1.0
    active = np.ones(n, dtype=bool)
    while active.any():
        idx = np.flatnonzero(active)
        probs, jac = _prob_jacobian(net, adv[idx])
        if np.any(tgt[idx] >= probs.shape[1]) or np.any(tgt[idx] < 0):
            raise RangeError(f"target class out of range [0, {probs.shape[1]})")
        reached = probs.argmax(axis=1) == tgt[idx]
        for j, i in enumerate(idx):
            used = int(modified[i].sum())
            if reached[j] or used >= budget:
                active[i] = False
                continue
            J = jac[j].reshape(probs.shape[1], -1)
            alpha = J[tgt[i]]
            beta = J.sum(axis=0) - alpha
            room = flat[i] < 1.0 if sign > 0 else flat[i] > 0.0
            pick = _best_pair(alpha, beta, room & ~modified[i], sign, budget - used)
            if pick is None:
                active[i] = False
                continue
            for p in pick:
                flat[i, p] = min(max(flat[i, p] + theta, 0.0), 1.0)
                modified[i, p] = True
    probs = output_probs(net, adv, CHUNK)
    success = probs.argmax(axis=1) == tgt
    out = AdversarialBatch(x, adv, success, cfg.to_dict())
    out.config["target_class"] = tgt.tolist() if n <= 16 else "per-sample"
    return out


def least_likely_class(model, x) -> np.ndarray:
    return output_probs(model, x, CHUNK).argmin(axis=1)


def run_attack(net, x, y_true, cfg: AttackConfig) -> AdversarialBatch:
    if cfg.kind == "FGSM":
        return fgsm(net, x, y_true, cfg.epsilon)
    if cfg.kind == "BIM":
        return bim(net, x, y_true, cfg.epsilon, cfg.alpha, cfg.steps)
    if cfg.kind == "PGD":
        return pgd(net, x, y_true, cfg.epsilon, cfg.alpha, cfg.steps, cfg.seed)
    return jsma(net, x, least_likely_class(net, x), cfg.theta, cfg.gamma)
