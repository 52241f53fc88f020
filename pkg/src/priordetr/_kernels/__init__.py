"""Hot kernels: compiled Cython extension with a numpy fallback.

The compiled module is used when it imports cleanly.  Setting the
environment variable ``PRIORDETR_PURE_PYTHON=1`` forces the fallback.
"""
from __future__ import annotations

import os

from . import _fallback as fallback

compiled = None
if os.environ.get("PRIORDETR_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled  # type: ignore[no-redef]
    except ImportError:  # extension not built
        compiled = None

_impl = compiled if compiled is not None else fallback
BACKEND = "cython" if compiled is not None else "numpy"

bilinear_forward = _impl.bilinear_forward
bilinear_backward = _impl.bilinear_backward
linear_sum_assignment = _impl.linear_sum_assignment

__all__ = [
    "BACKEND",
    "bilinear_backward",
    "bilinear_forward",
    "compiled",
    "fallback",
    "linear_sum_assignment",
]
