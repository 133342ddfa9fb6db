"""Datasets: IDX ingestion and small synthetic generators."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# per-pixel gap between adjacent class means of the "blobs" generator
BLOB_MARGIN = 0.5
BLOB_NOISE = 0.1
BARS_NOISE = 0.1


@dataclass
class Dataset:
    """Images ``N×C×H×W`` in [0, 1] with integer labels or multi-hot rows.

    ``masks`` optionally carries a per-sample boolean ``H×W`` map of the
    pixels that carry the class signal (set by the "bars" generator).
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    masks: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.images.ndim != 4:
            raise ContractError(f"images must be N×C×H×W, got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ContractError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ContractError("pixel values must lie in [0, 1]")
        if self.labels.size:
            if self.multilabel:
                if self.labels.shape[1] != self.num_classes or not np.isin(self.labels, (0, 1)).all():
                    raise ContractError("multi-hot labels must be 0/1 rows of width num_classes")
            elif self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise ContractError(f"labels must lie in [0, {self.num_classes})")

    @property
    def multilabel(self) -> bool:
        return self.labels.ndim == 2

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split,
                       None if self.masks is None else self.masks[idx])

    def head(self, n: int) -> "Dataset":
        return self.subset(np.arange(min(n, len(self))))


def _read_bytes(path) -> bytes:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _read_idx_header(buf: bytes, path, magic: int, ndims: int) -> tuple[int, ...]:
    need = 4 + 4 * ndims
    if len(buf) < need:
        raise FormatError(f"{path}: truncated header at byte offset {len(buf)} (need {need} bytes)")
    (found,) = struct.unpack_from(">I", buf, 0)
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x} at byte offset 0 (expected 0x{magic:08x})")
    return struct.unpack_from(f">{ndims}I", buf, 4)


def load_idx(images_path, labels_path, split: str = "train", num_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    ibuf = _read_bytes(images_path)
    n, rows, cols = _read_idx_header(ibuf, images_path, IDX_IMAGES_MAGIC, 3)
    end = 16 + n * rows * cols
    if len(ibuf) < end:
        raise FormatError(f"{images_path}: truncated pixel data at byte offset {len(ibuf)} (expected {end} bytes)")
    pixels = np.frombuffer(ibuf, dtype=np.uint8, count=n * rows * cols, offset=16)

    lbuf = _read_bytes(labels_path)
    (m,) = _read_idx_header(lbuf, labels_path, IDX_LABELS_MAGIC, 1)
    if m != n:
        raise FormatError(f"{labels_path}: label count {m} at byte offset 4 does not match image count {n}")
    if len(lbuf) < 8 + m:
        raise FormatError(f"{labels_path}: truncated labels at byte offset {len(lbuf)} (expected {8 + m} bytes)")
    labels = np.frombuffer(lbuf, dtype=np.uint8, count=m, offset=8).astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise FormatError(f"{labels_path}: label {labels[bad[0]]} out of range at byte offset {8 + bad[0]}")
    images = pixels.reshape(n, 1, rows, cols).astype(np.float64) / 255.0
    return Dataset(images, labels, num_classes, split)


def write_idx(data: Dataset, images_path, labels_path) -> None:
    """Write single-channel images (quantized to bytes) and integer labels."""
    if data.images.shape[1] != 1 or data.multilabel:
        raise ContractError("IDX export supports single-channel images with integer labels")
    n, _, h, w = data.images.shape
    pixels = np.rint(data.images[:, 0] * 255.0).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + data.labels.astype(np.uint8).tobytes())


def synthetic_dataset(kind: str, n: int, seed: int, *, size: int = 8, num_classes: int = 2,
                      width: int = 2, split: str = "train") -> Dataset:
    """Deterministic toy data.

    ``bars``: ``size×size`` images, class 0 carries one horizontal stripe of
    ``width`` rows at intensity 1, class 1 a vertical one; background is
    uniform noise in ``[0, BARS_NOISE)``. Classes alternate before a seeded
    shuffle, so any even ``n`` is exactly balanced. ``masks`` marks the stripe.

    ``blobs``: class ``c`` has per-pixel mean ``0.25 + BLOB_MARGIN*c/(K-1)``
    (scaled so the extreme classes sit at 0.25 and 0.75) plus Gaussian noise
    of std ``BLOB_NOISE``, clipped to [0, 1].
    """
    if n < 2:
        raise ContractError("synthetic datasets need n ≥ 2")
    rng = np.random.default_rng(seed)
    if kind == "bars":
        labels = np.arange(n) % 2
        labels = labels[rng.permutation(n)]
        images = rng.uniform(0.0, BARS_NOISE, size=(n, 1, size, size))
        masks = np.zeros((n, size, size), dtype=bool)
        pos = rng.integers(0, size - width + 1, size=n)
        for i in range(n):
            if labels[i] == 0:
                masks[i, pos[i]:pos[i] + width, :] = True
            else:
                masks[i, :, pos[i]:pos[i] + width] = True
        images[:, 0][masks] = 1.0
        return Dataset(images, labels, 2, split, masks)
    if kind == "blobs":
        if num_classes < 2:
            raise ContractError("blobs needs at least 2 classes")
        labels = np.arange(n) % num_classes
        labels = labels[rng.permutation(n)]
        means = 0.25 + BLOB_MARGIN * labels / (num_classes - 1)
        images = means[:, None, None, None] + rng.normal(0.0, BLOB_NOISE, size=(n, 1, size, size))
        return Dataset(np.clip(images, 0.0, 1.0), labels, num_classes, split)
    raise ContractError(f"unknown synthetic dataset kind {kind!r}")
