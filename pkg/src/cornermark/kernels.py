"""Backend selection for the inference kernels.

The compiled extension is used when importable; setting
``CORNERMARK_PURE_PYTHON=1`` forces the numpy fallback.
"""

import os

from . import _kernels_py
from ._kernels_py import forward_backward_scaled

if os.environ.get("CORNERMARK_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND: str = _impl.BACKEND
forward_backward = _impl.forward_backward
viterbi = _impl.viterbi
logistic_q = _impl.logistic_q

__all__ = ["BACKEND", "forward_backward", "forward_backward_scaled", "logistic_q", "viterbi"]
