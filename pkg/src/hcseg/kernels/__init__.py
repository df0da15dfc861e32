"""Convolution unfolding kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. Set ``HCSEG_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _im2col_py

BACKEND = "python"
if os.environ.get("HCSEG_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _im2col as _impl

        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = _im2col_py
else:
    _impl = _im2col_py

im2col = _impl.im2col
col2im = _impl.col2im

__all__ = ["BACKEND", "im2col", "col2im"]
