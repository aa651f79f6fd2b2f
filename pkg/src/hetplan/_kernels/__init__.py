"""Hot kernels: compiled when the Cython extension is built, pure Python
otherwise. Set ``HETPLAN_PURE_PYTHON=1`` to force the fallback."""

import os

from . import fallback

try:
    from . import _core as compiled
except ImportError:  # extension not built
    compiled = None

if compiled is not None and not os.environ.get("HETPLAN_PURE_PYTHON"):
    BACKEND = "compiled"
    bucket_dp = compiled.bucket_dp
    minimax_enumerate = compiled.minimax_enumerate
else:
    BACKEND = "python"
    bucket_dp = fallback.bucket_dp
    minimax_enumerate = fallback.minimax_enumerate

__all__ = ["BACKEND", "bucket_dp", "compiled", "fallback", "minimax_enumerate"]
