# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel backend.

Same frozen ascending-index accumulation order as the pure-Python fallback;
compiled with -ffp-contract=off so both backends are bit-identical.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, log, sin, sqrt, M_PI
from libc.stdint cimport uint64_t

cnp.import_array()

NAME = "cython"

cdef double TWO_PI = 2.0 * M_PI
cdef double U53 = 2.0 ** -53


def matmul(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] c = out_arr
    cdef Py_ssize_t i, j, kk
    cdef double acc
    with nogil:
        for i in range(m):
            for j in range(n):
                acc = 0.0
                for kk in range(k):
                    acc += a[i, kk] * b[kk, j]
                c[i, j] = acc
    return out_arr


def matvec_t(double[:, ::1] w, double[::1] v):
    cdef Py_ssize_t rows = w.shape[0], cols = w.shape[1]
    out_arr = np.zeros(cols, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double vi
    with nogil:
        for i in range(rows):
            vi = v[i]
            for j in range(cols):
                out[j] += w[i, j] * vi
    return out_arr


def ksum(double[::1] x):
    cdef Py_ssize_t n = x.size
    cdef Py_ssize_t i
    cdef double acc = 0.0
    with nogil:
        for i in range(n):
            acc += x[i]
    return acc


def dot(double[::1] a, double[::1] b):
    cdef Py_ssize_t n = a.size
    cdef Py_ssize_t i
    cdef double acc = 0.0
    with nogil:
        for i in range(n):
            acc += a[i] * b[i]
    return acc


def conv_forward(double[:, :, ::1] image, double[:, :, :, ::1] kernel, Py_ssize_t stride):
    cdef Py_ssize_t c = image.shape[0], h = image.shape[1], w = image.shape[2]
    cdef Py_ssize_t n_k = kernel.shape[0], ks = kernel.shape[2]
    cdef Py_ssize_t oh = (h - ks) // stride + 1
    cdef Py_ssize_t ow = (w - ks) // stride + 1
    out_arr = np.empty((n_k, oh, ow), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t f, oi, oj, ci, ki, kj
    cdef double acc
    with nogil:
        for f in range(n_k):
            for oi in range(oh):
                for oj in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(ks):
                            for kj in range(ks):
                                acc += kernel[f, ci, ki, kj] * image[ci, oi * stride + ki, oj * stride + kj]
                    out[f, oi, oj] = acc
    return out_arr


def conv_backward_kernel(double[:, :, ::1] image, double[:, :, ::1] dout, Py_ssize_t ks, Py_ssize_t stride):
    cdef Py_ssize_t c = image.shape[0]
    cdef Py_ssize_t n_k = dout.shape[0], oh = dout.shape[1], ow = dout.shape[2]
    dk_arr = np.empty((n_k, c, ks, ks), dtype=np.float64)
    cdef double[:, :, :, ::1] dk = dk_arr
    cdef Py_ssize_t f, ci, ki, kj, oi, oj
    cdef double acc
    with nogil:
        for f in range(n_k):
            for ci in range(c):
                for ki in range(ks):
                    for kj in range(ks):
                        acc = 0.0
                        for oi in range(oh):
                            for oj in range(ow):
                                acc += dout[f, oi, oj] * image[ci, oi * stride + ki, oj * stride + kj]
                        dk[f, ci, ki, kj] = acc
    return dk_arr


cdef uint64_t _rotl(uint64_t x, int k) nogil:
    return (x << k) | (x >> (64 - k))


cdef uint64_t _xoshiro_next(uint64_t* s) nogil:
    cdef uint64_t result = _rotl(s[1] * 5u, 7) * 9u
    cdef uint64_t t = s[1] << 17
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return result


def seed_state(seed):
    cdef uint64_t x = <uint64_t> (seed & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t z
    out_arr = np.empty(4, dtype=np.uint64)
    cdef uint64_t[::1] out = out_arr
    cdef int i
    for i in range(4):
        x += <uint64_t> 0x9E3779B97F4A7C15
        z = x
        z = (z ^ (z >> 30)) * <uint64_t> 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * <uint64_t> 0x94D049BB133111EB
        out[i] = z ^ (z >> 31)
    return out_arr


def next_uint64(uint64_t[::1] state):
    cdef uint64_t s[4]
    cdef int i
    for i in range(4):
        s[i] = state[i]
    cdef uint64_t result = _xoshiro_next(s)
    for i in range(4):
        state[i] = s[i]
    return result


def gauss_fill(uint64_t[::1] state, Py_ssize_t n, double mu, double sigma):
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef uint64_t s[4]
    cdef int i
    for i in range(4):
        s[i] = state[i]
    cdef Py_ssize_t j = 0
    cdef double u1, u2, r, a
    with nogil:
        while j < n:
            u1 = <double> ((_xoshiro_next(s) >> 11) + 1u) * U53
            u2 = <double> ((_xoshiro_next(s) >> 11) + 1u) * U53
            r = sqrt(-2.0 * log(u1))
            a = TWO_PI * u2
            out[j] = mu + sigma * (r * cos(a))
            if j + 1 < n:
                out[j + 1] = mu + sigma * (r * sin(a))
            j += 2
    for i in range(4):
        state[i] = s[i]
    return out_arr
