"""Hot-kernel backend selection.

The compiled Cython module is used when it imports; otherwise the numpy
fallback is used. ``MASKATTN_BACKEND=python`` forces the fallback and
``MASKATTN_BACKEND=compiled`` makes a missing extension an import error.
"""
import os

from . import _pykernels

_requested = os.environ.get("MASKATTN_BACKEND", "auto").lower()
if _requested not in ("auto", "python", "compiled"):
    raise ImportError(f"MASKATTN_BACKEND must be auto, python or compiled, got {_requested!r}")

_impl = _pykernels
BACKEND = "python"
if _requested != "python":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise
        _impl = _pykernels

softmax_rows = _impl.softmax_rows
softmax_rows_backward = _impl.softmax_rows_backward
gelu = _impl.gelu
gelu_grad = _impl.gelu_grad
im2col = _impl.im2col
col2im = _impl.col2im

__all__ = [
    "BACKEND",
    "softmax_rows",
    "softmax_rows_backward",
    "gelu",
    "gelu_grad",
    "im2col",
    "col2im",
]
