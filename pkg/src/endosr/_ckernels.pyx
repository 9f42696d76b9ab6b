# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Signatures mirror ``endosr._pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


def correlate_valid(const double[:, ::1] img, const double[:, ::1] kernel):
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1]
    cdef Py_ssize_t kh = kernel.shape[0], kw = kernel.shape[1]
    if kh > h or kw > w:
        raise ValueError("kernel larger than image")
    cdef Py_ssize_t oh = h - kh + 1, ow = w - kw + 1
    out_arr = np.zeros((oh, ow), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, a, b
    cdef double acc, kv
    with nogil:
        for i in range(oh):
            for a in range(kh):
                for b in range(kw):
                    kv = kernel[a, b]
                    if kv == 0.0:
                        continue
                    for j in range(ow):
                        out[i, j] += kv * img[i + a, j + b]
    return out_arr


def resample_rows(const double[:, ::1] src, const cnp.int64_t[:, ::1] index,
                  const double[:, ::1] weight):
    cdef Py_ssize_t n_out = index.shape[0], taps = index.shape[1]
    cdef Py_ssize_t m = src.shape[1]
    out_arr = np.zeros((n_out, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, k, j, r
    cdef double wv
    with nogil:
        for i in range(n_out):
            for k in range(taps):
                wv = weight[i, k]
                if wv == 0.0:
                    continue
                r = index[i, k]
                for j in range(m):
                    out[i, j] += wv * src[r, j]
    return out_arr


def signed_rank_tail_counts(const double[::1] ranks, double w_obs, double tol=1e-9):
    """Count sign assignments with W >= w_obs, W <= w_obs, |W| >= |w_obs|."""
    cdef Py_ssize_t n = ranks.shape[0]
    if n > 30:
        raise ValueError("exact enumeration limited to n <= 30")
    cdef unsigned long long total = 1ULL << n
    cdef unsigned long long mask, gray, prev_gray = 0, diff
    cdef unsigned long long ge = 0, le = 0, two = 0
    cdef double w = 0.0, aw = fabs(w_obs)
    cdef Py_ssize_t i, bit
    for i in range(n):
        w -= ranks[i]
    with nogil:
        for mask in range(total):
            gray = mask ^ (mask >> 1)
            if mask > 0:
                diff = gray ^ prev_gray
                bit = 0
                while (diff >> bit) != 1:
                    bit += 1
                if gray & diff:
                    w += 2.0 * ranks[bit]
                else:
                    w -= 2.0 * ranks[bit]
            prev_gray = gray
            if w >= w_obs - tol:
                ge += 1
            if w <= w_obs + tol:
                le += 1
            if fabs(w) >= aw - tol:
                two += 1
    return int(ge), int(le), int(two), int(total)
