"""Binary containers.

Tensor blob (``CPT1``)::

    b"CPT1" | uint32 rank | rank × uint64 extents | float64 payload

all little-endian. A checkpoint is::

    b"CPCK" | uint32 header_len | UTF-8 JSON header | blobs

where the header lists tensor names in storage order and each blob is
``uint32 name_len | name | CPT1 blob``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

TENSOR_MAGIC = b"CPT1"
CHECKPOINT_MAGIC = b"CPCK"


def tensor_to_bytes(arr) -> bytes:
    a = np.asarray(arr, dtype="<f8", order="C")
    head = TENSOR_MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def tensor_from_bytes(buf, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one blob starting at ``offset``; return ``(array, next_offset)``."""
    buf = memoryview(buf)
    if bytes(buf[offset:offset + 4]) != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic at byte offset {offset}")
    if len(buf) < offset + 8:
        raise FormatError(f"truncated tensor header at byte offset {offset + 4}")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    pos = offset + 8
    if len(buf) < pos + 8 * rank:
        raise FormatError(f"truncated tensor extents at byte offset {pos}")
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    n = int(np.prod(shape, dtype=np.int64)) if rank else 1
    end = pos + 8 * n
    if len(buf) < end:
        raise FormatError(f"truncated tensor payload at byte offset {pos}: need {8 * n} bytes")
    arr = np.frombuffer(buf[pos:end], dtype="<f8").astype(np.float64).reshape(shape)
    return arr, end


def save_container(path, tensors: dict, header: dict) -> Path:
    path = Path(path)
    header = dict(header)
    header["tensors"] = list(tensors)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(hbytes)), hbytes]
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        parts += [struct.pack("<I", len(nb)), nb, tensor_to_bytes(arr)]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))
    return path


def load_container(path) -> tuple[dict, dict]:
    """Return ``(header, tensors)``."""
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic at byte offset 0")
    if len(buf) < 8:
        raise FormatError(f"{path}: truncated header length at byte offset 4")
    (hlen,) = struct.unpack_from("<I", buf, 4)
    try:
        header = json.loads(buf[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header at byte offset 8") from exc
    pos = 8 + hlen
    tensors = {}
    for expected in header.get("tensors", []):
        if len(buf) < pos + 4:
            raise FormatError(f"{path}: truncated blob name at byte offset {pos}")
        (nlen,) = struct.unpack_from("<I", buf, pos)
        name = buf[pos + 4:pos + 4 + nlen].decode("utf-8")
        if name != expected:
            raise FormatError(f"{path}: expected tensor {expected!r}, found {name!r} at byte offset {pos}")
        tensors[name], pos = tensor_from_bytes(buf, pos + 4 + nlen)
    return header, tensors
