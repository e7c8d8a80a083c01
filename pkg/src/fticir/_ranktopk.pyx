# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled top-k selection under (score descending, tie-rank ascending).

Keeps a k-element binary heap whose root is the current worst candidate, so a
full scan costs O(N log k) instead of the O(N log N) of a full sort. The
numpy fallback in fticir.ranking must produce byte-identical index output.
"""

import numpy as np


cdef inline bint _worse(double sa, long long ra, double sb, long long rb) nogil:
    """True when (sa, ra) ranks strictly worse than (sb, rb)."""
    if sa != sb:
        return sa < sb
    return ra > rb


cdef void _sift_down(double* hs, long long* hr, long long* hi,
                     Py_ssize_t size, Py_ssize_t pos) nogil:
    cdef Py_ssize_t child, worst
    cdef double ts
    cdef long long tr, ti
    while True:
        child = 2 * pos + 1
        if child >= size:
            return
        worst = pos
        if _worse(hs[child], hr[child], hs[worst], hr[worst]):
            worst = child
        if child + 1 < size and _worse(hs[child + 1], hr[child + 1],
                                       hs[worst], hr[worst]):
            worst = child + 1
        if worst == pos:
            return
        ts = hs[pos]; hs[pos] = hs[worst]; hs[worst] = ts
        tr = hr[pos]; hr[pos] = hr[worst]; hr[worst] = tr
        ti = hi[pos]; hi[pos] = hi[worst]; hi[worst] = ti
        pos = worst


def topk_ranked(double[::1] scores, long long[::1] tie_rank, Py_ssize_t k):
    """Indices of the k best entries, best first.

    Ordering: higher score wins; equal scores break toward lower tie_rank.
    """
    cdef Py_ssize_t n = scores.shape[0]
    if tie_rank.shape[0] != n:
        raise ValueError("scores and tie_rank must have equal length")
    if k > n:
        k = n
    if k <= 0:
        return np.empty(0, dtype=np.int64)

    heap_scores = np.empty(k, dtype=np.float64)
    heap_ranks = np.empty(k, dtype=np.int64)
    heap_idx = np.empty(k, dtype=np.int64)
    cdef double[::1] hs = heap_scores
    cdef long long[::1] hr = heap_ranks
    cdef long long[::1] hi = heap_idx
    cdef Py_ssize_t i, size
    cdef double ts
    cdef long long tr, ti

    with nogil:
        for i in range(k):
            hs[i] = scores[i]
            hr[i] = tie_rank[i]
            hi[i] = i
        for i in range(k // 2 - 1, -1, -1):
            _sift_down(&hs[0], &hr[0], &hi[0], k, i)
        for i in range(k, n):
            # keep the item only if it beats the current worst (the root)
            if _worse(hs[0], hr[0], scores[i], tie_rank[i]):
                hs[0] = scores[i]
                hr[0] = tie_rank[i]
                hi[0] = i
                _sift_down(&hs[0], &hr[0], &hi[0], k, 0)
        # heapsort: repeatedly move the worst to the tail
        size = k
        while size > 1:
            size -= 1
            ts = hs[0]; hs[0] = hs[size]; hs[size] = ts
            tr = hr[0]; hr[0] = hr[size]; hr[size] = tr
            ti = hi[0]; hi[0] = hi[size]; hi[size] = ti
            _sift_down(&hs[0], &hr[0], &hi[0], size, 0)

    return heap_idx
