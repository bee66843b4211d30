"""Hot kernels: compiled Cython extension when built, numpy fallback otherwise.

Set ``FUZZYALIGN_PURE=1`` to force the fallback.
"""
import os

from . import _pykernels

if os.environ.get("FUZZYALIGN_PURE", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

cosine_matrix = _impl.cosine_matrix
rank_desc = _impl.rank_desc
score_ranked = _impl.score_ranked

__all__ = ["BACKEND", "cosine_matrix", "rank_desc", "score_ranked"]
