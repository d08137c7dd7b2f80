"""Hot-loop kernel selection: compiled extension when importable, numpy otherwise.

Set ``UKD_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
if not os.environ.get("UKD_PURE_PYTHON"):
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py
    else:
        BACKEND = "cython"
else:
    _impl = _kernels_py

hamming_matrix = _impl.hamming_matrix
rank_order = _impl.rank_order
rank_scores = _impl.rank_scores

__all__ = ["BACKEND", "hamming_matrix", "rank_order", "rank_scores"]
