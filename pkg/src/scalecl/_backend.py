"""Pick the compiled kernels when available, else the pure-Python twins."""

import os

if os.environ.get("SCALECL_PURE_PYTHON"):
    from . import _kernels_py as kernels
    BACKEND = "python"
else:
    try:
        from . import _kernels as kernels
        BACKEND = "cython"
    except ImportError:
        from . import _kernels_py as kernels
        BACKEND = "python"

from . import _kernels_py as python_kernels  # noqa: E402

NEVER = python_kernels.NEVER

__all__ = ["BACKEND", "NEVER", "kernels", "python_kernels"]
