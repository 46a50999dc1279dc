# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled scan kernels: exact top-k / top-n dot products.

Float32 storage, float64 accumulation with a fixed summation order
(4 partial accumulators combined as (a0+a1)+(a2+a3), then the tail), so
results are bit-identical across runs, chunk sizes and thread counts.
The hot loops run with the GIL released; callers parallelize over query
blocks with ordinary Python threads.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef inline double _dot_f32(const float* a, const float* b, Py_ssize_t d) nogil:
    cdef double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0, tail = 0.0
    cdef Py_ssize_t i = 0
    while i + 4 <= d:
        s0 += <double>a[i] * <double>b[i]
        s1 += <double>a[i + 1] * <double>b[i + 1]
        s2 += <double>a[i + 2] * <double>b[i + 2]
        s3 += <double>a[i + 3] * <double>b[i + 3]
        i += 4
    while i < d:
        tail += <double>a[i] * <double>b[i]
        i += 1
    return ((s0 + s1) + (s2 + s3)) + tail


cdef inline void _insert_desc(double* vals, cnp.int64_t* pos, Py_ssize_t used,
                              double v, cnp.int64_t p) nogil:
    # insert (v, p) keeping vals sorted descending; among equal values the
    # earlier (smaller) position stays first, and p always exceeds stored
    # positions because rows are scanned in order
    cdef Py_ssize_t j = used
    while j > 0 and vals[j - 1] < v:
        vals[j] = vals[j - 1]
        pos[j] = pos[j - 1]
        j -= 1
    vals[j] = v
    pos[j] = p


# queries are processed in small sub-blocks so each matrix row loaded from
# memory is reused across the sub-block; per-pair accumulation order is
# unchanged, so results are identical to the one-query-at-a-time scan
DEF QUERY_SUB_BLOCK = 8


def topk_block(const float[:, ::1] queries, const float[:, ::1] rows, Py_ssize_t k):
    """Top-k dot products per query row; see landrec._kern_py.topk_block."""
    cdef Py_ssize_t n_q = queries.shape[0]
    cdef Py_ssize_t n_rows = rows.shape[0]
    cdef Py_ssize_t d = queries.shape[1]
    cdef Py_ssize_t kk = k if k < n_rows else n_rows

    scores = np.empty((n_q, kk), dtype=np.float64)
    positions = np.empty((n_q, kk), dtype=np.int64)
    cdef double[:, ::1] sv = scores
    cdef cnp.int64_t[:, ::1] pv = positions
    if n_q == 0 or kk == 0:
        return scores, positions

    cdef Py_ssize_t q0, qhi, q, i
    cdef Py_ssize_t used[QUERY_SUB_BLOCK]
    cdef double s
    with nogil:
        q0 = 0
        while q0 < n_q:
            qhi = q0 + QUERY_SUB_BLOCK
            if qhi > n_q:
                qhi = n_q
            for q in range(qhi - q0):
                used[q] = 0
            for i in range(n_rows):
                for q in range(q0, qhi):
                    s = _dot_f32(&queries[q, 0], &rows[i, 0], d)
                    if used[q - q0] < kk:
                        _insert_desc(&sv[q, 0], &pv[q, 0], used[q - q0], s, i)
                        used[q - q0] += 1
                    elif s > sv[q, kk - 1]:
                        _insert_desc(&sv[q, 0], &pv[q, 0], kk - 1, s, i)
            q0 = qhi
    return scores, positions


def topn_block(const float[:, ::1] rows, const float[:, ::1] pool, Py_ssize_t n):
    """Top-n dot products per row against the pool, values only, descending."""
    cdef Py_ssize_t n_rows = rows.shape[0]
    cdef Py_ssize_t n_pool = pool.shape[0]
    cdef Py_ssize_t d = rows.shape[1]
    cdef Py_ssize_t nn = n if n < n_pool else n_pool

    top = np.empty((n_rows, nn), dtype=np.float64)
    cdef double[:, ::1] tv = top
    if n_rows == 0 or nn == 0:
        return top

    cdef Py_ssize_t r0, rhi, r, i, j
    cdef Py_ssize_t used[QUERY_SUB_BLOCK]
    cdef double s
    with nogil:
        r0 = 0
        while r0 < n_rows:
            rhi = r0 + QUERY_SUB_BLOCK
            if rhi > n_rows:
                rhi = n_rows
            for r in range(rhi - r0):
                used[r] = 0
            for i in range(n_pool):
                for r in range(r0, rhi):
                    s = _dot_f32(&rows[r, 0], &pool[i, 0], d)
                    if used[r - r0] < nn:
                        j = used[r - r0]
                        used[r - r0] += 1
                    elif s > tv[r, nn - 1]:
                        j = nn - 1
                    else:
                        continue
                    while j > 0 and tv[r, j - 1] < s:
                        tv[r, j] = tv[r, j - 1]
                        j -= 1
                    tv[r, j] = s
            r0 = rhi
    return top
