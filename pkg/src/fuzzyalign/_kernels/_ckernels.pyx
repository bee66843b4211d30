# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: cosine matrix, descending rank, and per-query AP/first hit.

Signatures and results match ``_pykernels``; all loops run without the GIL.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt
from libc.stdlib cimport malloc, free

cnp.import_array()


def cosine_matrix(a, b):
    cdef double[:, ::1] A = np.array(a, dtype=np.float64, order="C")
    cdef double[:, ::1] Bm = np.array(b, dtype=np.float64, order="C")
    cdef Py_ssize_t n = A.shape[0], m = Bm.shape[0], d = A.shape[1]
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] O = out
    cdef Py_ssize_t i, j, k
    cdef double s
    with nogil:
        for i in range(n):
            s = 0.0
            for k in range(d):
                s = s + A[i, k] * A[i, k]
            s = sqrt(s)
            for k in range(d):
                A[i, k] = A[i, k] / s
        for j in range(m):
            s = 0.0
            for k in range(d):
                s = s + Bm[j, k] * Bm[j, k]
            s = sqrt(s)
            for k in range(d):
                Bm[j, k] = Bm[j, k] / s
        for i in range(n):
            for j in range(m):
                s = 0.0
                for k in range(d):
                    s = s + A[i, k] * Bm[j, k]
                O[i, j] = s
    return out


cdef inline bint _before(double si, Py_ssize_t i, double sj, Py_ssize_t j) noexcept nogil:
    # descending score, then ascending index
    return si > sj or (si == sj and i < j)


cdef void _merge_sort(const double* s, Py_ssize_t* idx, Py_ssize_t* tmp, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t width = 1, lo, mid, hi, a, b, k
    cdef Py_ssize_t* src = idx
    cdef Py_ssize_t* dst = tmp
    cdef Py_ssize_t* sw
    while width < n:
        lo = 0
        while lo < n:
            mid = lo + width
            if mid > n:
                mid = n
            hi = lo + 2 * width
            if hi > n:
                hi = n
            a = lo
            b = mid
            k = lo
            while a < mid and b < hi:
                if _before(s[src[b]], src[b], s[src[a]], src[a]):
                    dst[k] = src[b]
                    b += 1
                else:
                    dst[k] = src[a]
                    a += 1
                k += 1
            while a < mid:
                dst[k] = src[a]
                a += 1
                k += 1
            while b < hi:
                dst[k] = src[b]
                b += 1
                k += 1
            lo = hi
        sw = src
        src = dst
        dst = sw
        width *= 2
    if src != idx:
        for k in range(n):
            idx[k] = src[k]


def rank_desc(sim):
    cdef double[:, ::1] S = np.ascontiguousarray(sim, dtype=np.float64)
    cdef Py_ssize_t q = S.shape[0], g = S.shape[1], i, j
    out = np.empty((q, g), dtype=np.intp)
    cdef Py_ssize_t[:, ::1] O = out
    cdef Py_ssize_t* tmp
    if g == 0:
        return out
    tmp = <Py_ssize_t*> malloc(g * sizeof(Py_ssize_t))
    if tmp == NULL:
        raise MemoryError()
    try:
        with nogil:
            for i in range(q):
                for j in range(g):
                    O[i, j] = j
                _merge_sort(&S[i, 0], &O[i, 0], tmp, g)
    finally:
        free(tmp)
    return out


def score_ranked(order, query_ids, gallery_ids):
    cdef Py_ssize_t[:, ::1] Ord = np.ascontiguousarray(order, dtype=np.intp)
    cdef long long[::1] qid = np.ascontiguousarray(query_ids, dtype=np.int64)
    cdef long long[::1] gid = np.ascontiguousarray(gallery_ids, dtype=np.int64)
    cdef Py_ssize_t q = Ord.shape[0], g = Ord.shape[1], i, r
    first_arr = np.full(q, -1, dtype=np.int64)
    ap_arr = np.zeros(q, dtype=np.float64)
    cdef long long[::1] first = first_arr
    cdef double[::1] ap = ap_arr
    cdef long long hits
    cdef double acc
    with nogil:
        for i in range(q):
            hits = 0
            acc = 0.0
            for r in range(g):
                if gid[Ord[i, r]] == qid[i]:
                    hits += 1
                    acc = acc + <double> hits / <double> (r + 1)
                    if hits == 1:
                        first[i] = r
            if hits > 0:
                ap[i] = acc / <double> hits
    return first_arr, ap_arr
