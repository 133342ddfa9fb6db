"""Kernel backend selection.

The compiled extension is used when it imports; set
``CAUSAL_PROBE_KERNELS=python`` to force the numpy fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("CAUSAL_PROBE_KERNELS", "").lower() not in ("python", "numpy", "py"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward

__all__ = ["BACKEND", "im2col", "col2im", "maxpool_forward", "maxpool_backward"]
