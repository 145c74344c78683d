"""Fused row kernels used by the tensor ops.

The compiled ``_ckernels`` extension is used when it was built and
``ATDFUSE_PURE_PYTHON`` is unset; otherwise the numpy versions in
``_pykernels`` are loaded. ``BACKEND`` names the active implementation.
"""
import os

from . import _pykernels as python_backend

compiled_backend = None
if not os.environ.get("ATDFUSE_PURE_PYTHON"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:
        compiled_backend = None

_impl = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "compiled" if compiled_backend is not None else "python"

softmax_rows = _impl.softmax_rows
softmax_rows_backward = _impl.softmax_rows_backward
gelu = _impl.gelu
gelu_backward = _impl.gelu_backward
layernorm_rows = _impl.layernorm_rows
layernorm_rows_backward = _impl.layernorm_rows_backward

__all__ = [
    "BACKEND",
    "softmax_rows",
    "softmax_rows_backward",
    "gelu",
    "gelu_backward",
    "layernorm_rows",
    "layernorm_rows_backward",
]
