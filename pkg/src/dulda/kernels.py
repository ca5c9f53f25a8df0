"""Kernel backend selection.

The compiled Cython extension is used when it imports cleanly; otherwise the
numpy fallback is used.  Set ``DULDA_PURE_PYTHON=1`` to force the fallback.
"""

import os

from dulda import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("DULDA_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from dulda import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        _impl = _pykernels

strip_triplets = _impl.strip_triplets
conv2d = _impl.conv2d
conv2d_transpose = _impl.conv2d_transpose
conv2d_weight_grad = _impl.conv2d_weight_grad

__all__ = ["BACKEND", "strip_triplets", "conv2d", "conv2d_transpose",
           "conv2d_weight_grad"]
