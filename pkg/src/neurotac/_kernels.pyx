# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled window/encode kernels. Arithmetic order mirrors ``_fallback`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, floor

cnp.import_array()


def window_update(cnp.uint32_t[::1] running, const cnp.int64_t[::1] add_idx,
                  const cnp.int64_t[::1] sub_idx):
    cdef Py_ssize_t i
    with nogil:
        for i in range(sub_idx.shape[0]):
            running[sub_idx[i]] -= 1
        for i in range(add_idx.shape[0]):
            running[add_idx[i]] += 1


def count_histogram(const cnp.uint32_t[::1] counts):
    cdef Py_ssize_t i, n = counts.shape[0]
    cdef cnp.uint32_t m = 0
    with nogil:
        for i in range(n):
            if counts[i] > m:
                m = counts[i]
    # four interleaved sub-histograms break the increment dependency chain
    cdef Py_ssize_t L = m + 1
    sub_arr = np.zeros(4 * L, dtype=np.int64)
    cdef cnp.int64_t[::1] sub = sub_arr
    cdef Py_ssize_t n4 = n - n % 4
    with nogil:
        for i in range(0, n4, 4):
            sub[counts[i]] += 1
            sub[L + counts[i + 1]] += 1
            sub[2 * L + counts[i + 2]] += 1
            sub[3 * L + counts[i + 3]] += 1
        for i in range(n4, n):
            sub[counts[i]] += 1
    return sub_arr.reshape(4, L).sum(axis=0)


def block_means(const cnp.uint32_t[:, ::1] counts, const double[::1] slut, int factor):
    cdef Py_ssize_t h = counts.shape[0], w = counts.shape[1]
    cdef Py_ssize_t oh = h // factor, ow = w // factor
    cdef Py_ssize_t by, r, x, bx, c
    cdef double acc
    out_arr = np.empty((oh, ow), dtype=np.float64)
    rows_arr = np.empty(w, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] rows = rows_arr
    cdef double denom = factor * factor
    with nogil:
        for by in range(oh):
            for x in range(w):
                rows[x] = slut[counts[by * factor, x]]
            for r in range(1, factor):
                for x in range(w):
                    rows[x] = rows[x] + slut[counts[by * factor + r, x]]
            for bx in range(ow):
                acc = rows[bx * factor]
                for c in range(1, factor):
                    acc = acc + rows[bx * factor + c]
                out[by, bx] = acc / denom
    return out_arr


def quantize(const double[:, ::1] values):
    cdef Py_ssize_t h = values.shape[0], w = values.shape[1], i, j
    cdef double v
    out_arr = np.empty((h, w), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] out = out_arr
    with nogil:
        for i in range(h):
            for j in range(w):
                v = floor(values[i, j] + 0.5)
                if v < 0.0:
                    v = 0.0
                elif v > 255.0:
                    v = 255.0
                out[i, j] = <cnp.uint8_t>v
    return out_arr


def dvs_step(const double[::1] log_image, double[::1] ref, cnp.int64_t[::1] last_fire,
             double threshold, cnp.int64_t refractory_us, cnp.int64_t t_us):
    """One camera tick over flattened pixels; see ``_fallback.dvs_step``."""
    cdef Py_ssize_t i, m = 0, n_pix = log_image.shape[0]
    cdef double d, n, p
    cdef bint pending = False
    idx_arr = np.empty(n_pix, dtype=np.int64)
    pol_arr = np.empty(n_pix, dtype=np.int8)
    cnt_arr = np.empty(n_pix, dtype=np.int64)
    cdef cnp.int64_t[::1] idx = idx_arr
    cdef cnp.int8_t[::1] pol = pol_arr
    cdef cnp.int64_t[::1] cnt = cnt_arr
    with nogil:
        for i in range(n_pix):
            d = log_image[i] - ref[i]
            n = floor(fabs(d) / threshold)
            if n >= 1.0 and (refractory_us == 0 or t_us - last_fire[i] >= refractory_us):
                if refractory_us > 0:
                    n = 1.0
                p = 1.0 if d > 0 else -1.0
                ref[i] = ref[i] + n * threshold * p
                last_fire[i] = t_us
                idx[m] = i
                pol[m] = <cnp.int8_t>p
                cnt[m] = <cnp.int64_t>n
                m += 1
            if not pending and fabs(log_image[i] - ref[i]) >= threshold:
                pending = True
    return idx_arr[:m], pol_arr[:m], cnt_arr[:m], pending
