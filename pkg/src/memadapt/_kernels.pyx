# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the memory hot path.

Same surface as `_purepy`: softmax_rows, cross_attention, bank_write,
bank_read. Row sums use Kahan compensation so attention rows stay within
1e-12 of 1 even for wide banks. Inputs are const memoryviews so read-only
arrays (frozen bank rows) are accepted.
"""

import numpy as np

from libc.math cimport exp, sqrt

NAME = "compiled"


cdef inline void _softmax_row(double[:, ::1] out, Py_ssize_t i, Py_ssize_t m) noexcept nogil:
    cdef Py_ssize_t j
    cdef double mx, s, c, y, t, v
    mx = out[i, 0]
    for j in range(1, m):
        if out[i, j] > mx:
            mx = out[i, j]
    s = 0.0
    c = 0.0
    for j in range(m):
        v = exp(out[i, j] - mx)
        out[i, j] = v
        y = v - c
        t = s + y
        c = (t - s) - y
        s = t
    for j in range(m):
        out[i, j] /= s


def softmax_rows(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t m = x.shape[1]
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(n):
            for j in range(m):
                out[i, j] = x[i, j]
            _softmax_row(out, i, m)
    return out_arr


def cross_attention(const double[:, ::1] queries, const double[:, ::1] items):
    cdef Py_ssize_t n = queries.shape[0]
    cdef Py_ssize_t d = queries.shape[1]
    cdef Py_ssize_t m = items.shape[0]
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, k
    cdef double acc
    with nogil:
        for i in range(n):
            for j in range(m):
                acc = 0.0
                for k in range(d):
                    acc += queries[i, k] * items[j, k]
                out[i, j] = acc
            _softmax_row(out, i, m)
    return out_arr


def bank_write(const double[:, ::1] bank, const double[:, ::1] keys,
               const double[:, ::1] values, double eps):
    cdef Py_ssize_t n_items = bank.shape[0]
    cdef Py_ssize_t dim = bank.shape[1]
    cdef Py_ssize_t n_feat = keys.shape[0]
    attn_arr = cross_attention(keys, bank)
    cdef const double[:, ::1] attn = attn_arr
    out_arr = np.empty((n_items, dim), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    degen_arr = np.zeros(n_items, dtype=np.uint8)
    cdef unsigned char[::1] degen = degen_arr
    cdef Py_ssize_t i, j, c
    cdef double w, norm
    with nogil:
        for j in range(n_items):
            for c in range(dim):
                out[j, c] = bank[j, c]
            for i in range(n_feat):
                w = attn[i, j]
                for c in range(dim):
                    out[j, c] += w * values[i, c]
            norm = 0.0
            for c in range(dim):
                norm += out[j, c] * out[j, c]
            norm = sqrt(norm)
            if norm <= eps:
                # keep the old row on exact cancellation, caller logs it
                for c in range(dim):
                    out[j, c] = bank[j, c]
                degen[j] = 1
            else:
                for c in range(dim):
                    out[j, c] /= norm
    return out_arr, np.nonzero(degen_arr)[0].astype(np.int64)


def bank_read(const double[:, ::1] bank, const double[:, ::1] queries):
    cdef Py_ssize_t n_items = bank.shape[0]
    cdef Py_ssize_t dim = bank.shape[1]
    cdef Py_ssize_t n_q = queries.shape[0]
    attn_arr = cross_attention(queries, bank)
    cdef const double[:, ::1] attn = attn_arr
    pos_arr = np.zeros((n_q, dim), dtype=np.float64)
    cdef double[:, ::1] pos = pos_arr
    cdef Py_ssize_t i, j, c
    cdef double w
    with nogil:
        for i in range(n_q):
            for j in range(n_items):
                w = attn[i, j]
                for c in range(dim):
                    pos[i, c] += w * bank[j, c]
    return attn_arr, pos_arr
