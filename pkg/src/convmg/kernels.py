"""Stencil kernel backend, chosen at import.

The compiled extension is used when it was built; otherwise (or when the
environment variable ``CONVMG_PURE_PYTHON`` is set to a non-empty value)
the numpy implementation is used.  ``BACKEND`` names the active one.
"""

import os

from . import _kernels_py

if os.environ.get("CONVMG_PURE_PYTHON"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = "numpy" if _impl is _kernels_py else "cython"

apply_stencil = _impl.apply_stencil
richardson = _impl.richardson

__all__ = ["BACKEND", "apply_stencil", "richardson"]
