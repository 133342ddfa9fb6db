"""Causal effect maps (patch do-interventions) and gradient-weighted CAM."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import tensor as T
from .attacks import fgsm, frozen
from .errors import ContractError, OutputError
from .nets import Activation, Conv, Network, output_probs
from .tensor import Tensor, no_grad

CHUNK = 500

# diverging endpoints (blue, white, red)
_NEG = np.array([33.0, 102.0, 172.0])
_MID = np.array([255.0, 255.0, 255.0])
_POS = np.array([178.0, 24.0, 43.0])


@dataclass
class Heatmap:
    """``values`` are normalized; ``raw`` keeps the unnormalized map."""

    values: np.ndarray
    raw: np.ndarray
    normalization: str
    provenance: str
    config: dict = field(default_factory=dict)


def normalize(raw: np.ndarray, how: str) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if how == "signed-symmetric":
        m = np.abs(raw).max()
        return raw / m if m > 0 else np.zeros_like(raw)
    if how == "minmax":
        lo, hi = raw.min(), raw.max()
        return (raw - lo) / (hi - lo) if hi > lo else np.zeros_like(raw)
    raise ContractError(f"unknown normalization {how!r}")


def _single(x) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim == 4 and len(x) == 1:
        x = x[0]
    if x.ndim != 3:
        raise ContractError(f"expected one C×H×W image, got {x.shape}")
    return x


def bilinear_resize(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of a 2-D array."""
    ih, iw = img.shape
    if (ih, iw) == (h, w):
        return img.copy()

    def coords(n_out, n_in):
        c = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        c = np.clip(c, 0, n_in - 1)
        lo = np.floor(c).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, c - lo

    r0, r1, fr = coords(h, ih)
    c0, c1, fc = coords(w, iw)
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def _cam_layer(net: Network) -> int:
    """Index of the output of the last conv layer (its activation, if one follows)."""
    layers = net.spec.layers
    convs = [i for i, layer in enumerate(layers) if isinstance(layer, Conv)]
    if not convs:
        raise ContractError("CAM needs at least one conv layer")
    i = convs[-1]
    return i + 1 if i + 1 < len(layers) and isinstance(layers[i + 1], Activation) else i


def cam_maps(net, x: np.ndarray, classes) -> np.ndarray:
    """Raw CAM maps ``N×H×W`` for a batch; class scores are logits."""
    net = getattr(net, "host", net)
    x = np.asarray(x, dtype=np.float64)
    classes = np.broadcast_to(np.asarray(classes, dtype=np.int64), (len(x),))
    tap = _cam_layer(net)
    H, W = x.shape[2], x.shape[3]
    out = np.empty((len(x), H, W))
    with frozen(net):
        for s in range(0, len(x), CHUNK):
            with no_grad():
                A = net.run(x[s:s + CHUNK], 0, tap + 1)[0].data
            At = Tensor(A, requires_grad=True)
            T.sum(T.pick(net.run(At, tap + 1)[0], classes[s:s + CHUNK])).backward()
            weights = At.grad.mean(axis=(2, 3))
            maps = np.maximum(np.einsum("nk,nkhw->nhw", weights, A), 0.0)
            for j, m in enumerate(maps):
                out[s + j] = bilinear_resize(m, H, W)
    return out


def compute_cam(net, x, class_id: int) -> Heatmap:
    img = _single(x)
    raw = cam_maps(net, img[None], [class_id])[0]
    return Heatmap(normalize(raw, "minmax"), raw, "minmax", "CAM", {"class_id": int(class_id)})


def patch_origins(size: int, patch: int, stride: int) -> list[int]:
    """Patch start offsets along one axis; the last patch always touches the border."""
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def cem_maps(model, x: np.ndarray, classes, patch: int = 4, stride: int = 2, fill: float = 0.0) -> np.ndarray:
    """Raw CEM maps ``N×H×W``: minus the mean CE of every occluding patch covering each pixel."""
    x = np.asarray(x, dtype=np.float64)
    n, C, H, W = x.shape
    if patch < 1 or stride < 1:
        raise ContractError("patch and stride must be ≥ 1")
    if patch > H or patch > W:
        raise ContractError(f"patch {patch} larger than image {H}×{W}")
    classes = np.broadcast_to(np.asarray(classes, dtype=np.int64), (n,))
    origins = [(i, j) for i in patch_origins(H, patch, stride) for j in patch_origins(W, patch, stride)]
    cover = np.zeros((H, W))
    for i, j in origins:
        cover[i:i + patch, j:j + patch] += 1
    base = output_probs(model, x, CHUNK)[np.arange(n), classes]
    out = np.zeros((n, H, W))
    per_img = max(1, CHUNK // len(origins))
    for s in range(0, n, per_img):
        block = x[s:s + per_img]
        m = len(block)
        batch = np.repeat(block, len(origins), axis=0).reshape(m, len(origins), C, H, W)
        for k, (i, j) in enumerate(origins):
            batch[:, k, :, i:i + patch, j:j + patch] = fill
        probs = output_probs(model, batch.reshape(-1, C, H, W), CHUNK).reshape(m, len(origins), -1)
        for b in range(m):
            ce = probs[b, :, classes[s + b]] - base[s + b]
            acc = np.zeros((H, W))
            for k, (i, j) in enumerate(origins):
                acc[i:i + patch, j:j + patch] += ce[k]
            out[s + b] = -acc / cover
    return out


def compute_cem(model, x, class_id: int, patch: int = 4, stride: int = 2, fill: float = 0.0) -> Heatmap:
    img = _single(x)
    raw = cem_maps(model, img[None], [class_id], patch, stride, fill)[0]
    cfg = {"class_id": int(class_id), "patch": patch, "stride": stride, "fill": fill}
    return Heatmap(normalize(raw, "signed-symmetric"), raw, "signed-symmetric", "CEM", cfg)


def positive_mass_fraction(maps: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Share of each map's positive mass that falls inside its mask."""
    pos = np.maximum(maps, 0.0)
    total = pos.reshape(len(pos), -1).sum(axis=1)
    inside = (pos * masks).reshape(len(pos), -1).sum(axis=1)
    return np.divide(inside, total, out=np.zeros_like(total), where=total > 0)


def adversarial_sensitivity(model, x: np.ndarray, y, classes, epsilon: float = 0.3,
                            patch: int = 4, stride: int = 2) -> dict:
    """Mean L1 distance between normalized clean and FGSM maps, for CEM and CAM."""
    adv = fgsm(getattr(model, "host", model), x, y, epsilon).adversarials
    out = {}
    for name, fn, how in (("cem", lambda v: cem_maps(model, v, classes, patch, stride), "signed-symmetric"),
                          ("cam", lambda v: cam_maps(model, v, classes), "minmax")):
        clean = np.stack([normalize(m, how) for m in fn(x)])
        pert = np.stack([normalize(m, how) for m in fn(adv)])
        out[f"{name}_l1"] = float(np.abs(clean - pert).reshape(len(x), -1).sum(axis=1).mean())
    return out


def colorize(values: np.ndarray, normalization: str) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if normalization == "signed-symmetric":
        v = np.clip(v, -1.0, 1.0)[..., None]
        rgb = np.where(v < 0, _MID + (-v) * (_NEG - _MID), _MID + v * (_POS - _MID))
    else:
        v = np.clip(v, 0.0, 1.0)[..., None]
        rgb = _MID + v * (_POS - _MID)
    return rgb


def render_heatmap(hm: Heatmap, base_image=None, out_path="heatmap.png") -> Path:
    """Write an 8-bit RGB PNG plus a ``.txt`` sidecar with raw range and config."""
    out_path = Path(out_path)
    rgb = colorize(hm.values, hm.normalization)
    if base_image is not None:
        base = np.asarray(base_image.data if isinstance(base_image, Tensor) else base_image, dtype=np.float64)
        base = base.reshape(-1, *base.shape[-2:]).mean(axis=0)
        if base.shape != hm.values.shape:
            raise ContractError(f"base image {base.shape} does not match map {hm.values.shape}")
        rgb = 0.5 * rgb + 0.5 * (np.clip(base, 0.0, 1.0) * 255.0)[..., None]
    pixels = np.rint(np.clip(rgb, 0, 255)).astype(np.uint8)
    sidecar = {
        "provenance": hm.provenance,
        "normalization": hm.normalization,
        "raw_min": float(hm.raw.min()),
        "raw_max": float(hm.raw.max()),
        "config": hm.config,
    }
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(pixels, mode="RGB").save(out_path, format="PNG")
        out_path.with_suffix(".txt").write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    except OSError as exc:
        raise OutputError(f"cannot write heatmap to {out_path}: {exc}") from exc
    return out_path
