"""Adam with bias-corrected moments."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError


@dataclass
class AdamState:
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update.

    ``params`` is a sequence of Tensors; each gets a fresh ``data`` array (the
    old array is left untouched so recorded graphs stay valid). Zero moments
    are created lazily on the first call. Returns ``(params, state)``.
    """
    params = list(params)
    grads = [np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64) for p, g in zip(params, grads)]
    if len(grads) != len(params):
        raise DimensionError(f"adam_step: {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise DimensionError(f"adam_step: grad {g.shape} vs param {p.data.shape}")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        p.data = p.data - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
    return params, state
