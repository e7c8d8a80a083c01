"""Top-k ranking with a compiled kernel and a numpy fallback.

The retrieval hot path needs "k best rows by score, ties broken by a
precomputed integer rank" over the whole index. A Cython kernel
(fticir._ranktopk) implements the heap-based selection; when it is not built
(or FTICIR_PURE_RANKING=1 is set) a numpy lexsort produces the identical
ordering. Both paths must agree index-for-index; tests and the benchmark in
benchmarks/ compare them.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import InputError

try:
    from . import _ranktopk as _fast
except ImportError:  # extension not built; pure-python install
    _fast = None

KERNEL = (
    "compiled"
    if _fast is not None and os.environ.get("FTICIR_PURE_RANKING", "") != "1"
    else "numpy"
)


def has_compiled_kernel() -> bool:
    return _fast is not None


def topk_ranked_numpy(scores: np.ndarray, tie_rank: np.ndarray, k: int) -> np.ndarray:
    """Reference implementation via lexsort (score desc, tie_rank asc)."""
    order = np.lexsort((tie_rank, -scores.astype(np.float64, copy=False)))
    return order[: min(k, len(scores))].astype(np.int64, copy=False)


def topk_ranked(
    scores: np.ndarray, tie_rank: np.ndarray, k: int,
    force_numpy: bool = False,
) -> np.ndarray:
    """Indices of the k highest-scoring entries, best first.

    Equal scores resolve toward the smaller tie_rank value. ``k`` larger than
    the candidate count returns the full ordering.
    """
    scores = np.asarray(scores)
    tie_rank = np.asarray(tie_rank)
    if scores.ndim != 1 or tie_rank.shape != scores.shape:
        raise InputError("scores and tie_rank must be equal-length vectors")
    if k < 1:
        raise InputError(f"top-k count must be >= 1, got {k}")
    use_numpy = (
        force_numpy
        or _fast is None
        or os.environ.get("FTICIR_PURE_RANKING", "") == "1"
    )
    if use_numpy:
        return topk_ranked_numpy(scores, tie_rank, k)
    scores64 = np.ascontiguousarray(scores, dtype=np.float64)
    ranks64 = np.ascontiguousarray(tie_rank, dtype=np.int64)
    return _fast.topk_ranked(scores64, ranks64, int(k))
