# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled geometry kernels.

Bit-compatible with the pure-numpy reference in ``_geom.py``: the same
float64 arithmetic, the same tie rules (squared distance, then
lexicographic coordinate, then original index), so both backends return
identical index arrays for identical inputs.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef inline bint _lex_less(const double[:, ::1] x, Py_ssize_t i, Py_ssize_t j) noexcept:
    if x[i, 0] != x[j, 0]:
        return x[i, 0] < x[j, 0]
    if x[i, 1] != x[j, 1]:
        return x[i, 1] < x[j, 1]
    return x[i, 2] < x[j, 2]


def fps(const double[:, ::1] coords, Py_ssize_t n_out, Py_ssize_t start_idx):
    """Farthest point sampling; see _geom.fps for the contract."""
    cdef Py_ssize_t n = coords.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out = np.empty(n_out, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] min_d2_arr = np.full(n, np.inf)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] picked_arr = np.zeros(n, dtype=np.uint8)
    cdef double[::1] min_d2 = min_d2_arr
    cdef cnp.uint8_t[::1] picked = picked_arr
    cdef Py_ssize_t cur = start_idx
    cdef Py_ssize_t t, j, best
    cdef double dx, dy, dz, d2, best_d2, v

    for t in range(n_out):
        out[t] = cur
        picked[cur] = 1
        if t == n_out - 1:
            break
        for j in range(n):
            dx = coords[j, 0] - coords[cur, 0]
            dy = coords[j, 1] - coords[cur, 1]
            dz = coords[j, 2] - coords[cur, 2]
            d2 = (dx * dx + dy * dy) + dz * dz
            if d2 < min_d2[j]:
                min_d2[j] = d2
        best = -1
        best_d2 = -2.0
        for j in range(n):
            v = -1.0 if picked[j] else min_d2[j]
            if v > best_d2:
                best = j
                best_d2 = v
            elif v == best_d2 and _lex_less(coords, j, best):
                best = j
        cur = best
    return out


def ball_query(const double[:, ::1] coords, const cnp.int64_t[::1] centroid_ids,
               double radius, Py_ssize_t k):
    """In-radius neighborhoods; see _geom.ball_query for the contract."""
    cdef Py_ssize_t n = coords.shape[0]
    cdef Py_ssize_t m = centroid_ids.shape[0]
    cdef double r2 = radius * radius
    cdef cnp.ndarray[cnp.int64_t, ndim=2] neighbor_arr = np.empty((m, k), dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] counts_arr = np.empty(m, dtype=np.int64)
    cdef cnp.int64_t[:, ::1] neighbor = neighbor_arr
    cdef cnp.int64_t[::1] counts = counts_arr
    cdef cnp.ndarray[cnp.int64_t, ndim=1] sel_arr = np.empty(max(k - 1, 1), dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] sel_d2_arr = np.empty(max(k - 1, 1), dtype=np.float64)
    cdef cnp.int64_t[::1] sel = sel_arr
    cdef double[::1] sel_d2 = sel_d2_arr
    cdef Py_ssize_t t, j, cid, size, pos, q, tmp_i
    cdef Py_ssize_t cap = k - 1
    cdef double dx, dy, dz, d2
    cdef cnp.int64_t tmp

    for t in range(m):
        cid = centroid_ids[t]
        size = 0
        for j in range(n):
            if j == cid:
                continue
            dx = coords[j, 0] - coords[cid, 0]
            dy = coords[j, 1] - coords[cid, 1]
            dz = coords[j, 2] - coords[cid, 2]
            d2 = (dx * dx + dy * dy) + dz * dz
            if d2 > r2:
                continue
            # insertion position: after every kept entry with key <= (d2, coords, j)
            pos = size
            while pos > 0 and (sel_d2[pos - 1] > d2 or
                               (sel_d2[pos - 1] == d2 and _lex_less(coords, j, sel[pos - 1]))):
                pos -= 1
            if pos >= cap:
                continue
            if size < cap:
                size += 1
            for q in range(size - 1, pos, -1):
                sel[q] = sel[q - 1]
                sel_d2[q] = sel_d2[q - 1]
            sel[pos] = j
            sel_d2[pos] = d2
        # emit selected indices in ascending original-index order
        for q in range(1, size):
            tmp = sel[q]
            tmp_i = q
            while tmp_i > 0 and sel[tmp_i - 1] > tmp:
                sel[tmp_i] = sel[tmp_i - 1]
                tmp_i -= 1
            sel[tmp_i] = tmp
        neighbor[t, 0] = cid
        for q in range(size):
            neighbor[t, 1 + q] = sel[q]
        for q in range(1 + size, k):
            neighbor[t, q] = cid
        counts[t] = 1 + size
    return neighbor_arr, counts_arr


def three_nn(const double[:, ::1] query, const double[:, ::1] ref):
    """Up to three nearest reference points; see _geom.three_nn."""
    cdef Py_ssize_t nq = query.shape[0]
    cdef Py_ssize_t nr = ref.shape[0]
    cdef Py_ssize_t kk = 3 if nr > 3 else nr
    cdef cnp.ndarray[cnp.int64_t, ndim=2] idx_arr = np.empty((nq, kk), dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] d2_arr = np.empty((nq, kk), dtype=np.float64)
    cdef cnp.int64_t[:, ::1] idx = idx_arr
    cdef double[:, ::1] d2_out = d2_arr
    cdef Py_ssize_t i, j, size, pos, q
    cdef double dx, dy, dz, d2

    for i in range(nq):
        size = 0
        for j in range(nr):
            dx = ref[j, 0] - query[i, 0]
            dy = ref[j, 1] - query[i, 1]
            dz = ref[j, 2] - query[i, 2]
            d2 = (dx * dx + dy * dy) + dz * dz
            pos = size
            while pos > 0 and d2_out[i, pos - 1] > d2:
                pos -= 1
            if pos >= kk:
                continue
            if size < kk:
                size += 1
            for q in range(size - 1, pos, -1):
                idx[i, q] = idx[i, q - 1]
                d2_out[i, q] = d2_out[i, q - 1]
            idx[i, pos] = j
            d2_out[i, pos] = d2
    return idx_arr, d2_arr
