"""Pure-Python kernel backend.

Every reduction here accumulates in a frozen ascending-index order so results
are bit-identical to the compiled backend (and to a naive scalar loop). Only
the loop over the reduction axis runs in Python; the per-step arithmetic is
vectorised with numpy, which performs the same IEEE-754 operations per element
as the scalar code.
"""

from __future__ import annotations

import math

import numpy as np

NAME = "python"

_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_MASK64 = 0xFFFFFFFFFFFFFFFF
_TWO_PI = 2.0 * math.pi
_U53 = 2.0 ** -53


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """c[i,j] = sum_k a[i,k]*b[k,j], accumulated in ascending k."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    c = np.zeros((m, n), dtype=np.float64)
    for kk in range(k):
        c += a[:, kk : kk + 1] * b[kk : kk + 1, :]
    return c


def matvec_t(w: np.ndarray, v: np.ndarray) -> np.ndarray:
    """out[j] = sum_i w[i,j]*v[i], accumulated in ascending i."""
    rows, cols = w.shape
    out = np.zeros(cols, dtype=np.float64)
    for i in range(rows):
        out += w[i, :] * v[i]
    return out


def ksum(x: np.ndarray) -> float:
    """Sum of a flat array in ascending index order."""
    if x.size == 0:
        return 0.0
    # ufunc accumulate is a strict sequential left fold, so the final prefix
    # equals the scalar ascending-order chain bit for bit.
    return float(np.add.accumulate(x)[-1])


def dot(a: np.ndarray, b: np.ndarray) -> float:
    """sum_i a[i]*b[i] in ascending i."""
    return ksum(a * b)


def conv_forward(image: np.ndarray, kernel: np.ndarray, stride: int) -> np.ndarray:
    """Valid cross-correlation with square kernels, no bias.

    image: (c, h, w); kernel: (n_k, c, ks, ks); returns (n_k, h', w') with
    h' = (h - ks)//stride + 1. Per output element the sum runs over
    (ci, ki, kj) in ascending nest order.
    """
    c, h, w = image.shape
    n_k, c2, ks, _ = kernel.shape
    assert c == c2
    oh = (h - ks) // stride + 1
    ow = (w - ks) // stride + 1
    out = np.zeros((n_k, oh, ow), dtype=np.float64)
    for f in range(n_k):
        for ci in range(c):
            for ki in range(ks):
                for kj in range(ks):
                    view = image[ci, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride]
                    out[f] += kernel[f, ci, ki, kj] * view
    return out


def conv_backward_kernel(image: np.ndarray, dout: np.ndarray, ks: int, stride: int) -> np.ndarray:
    """Gradient of conv_forward w.r.t. the kernel.

    dk[f,ci,ki,kj] = sum over output cells (raster order) of
    dout[f,oi,oj] * image[ci, oi*stride+ki, oj*stride+kj].
    """
    c = image.shape[0]
    n_k, oh, ow = dout.shape
    dk = np.empty((n_k, c, ks, ks), dtype=np.float64)
    for f in range(n_k):
        for ci in range(c):
            for ki in range(ks):
                for kj in range(ks):
                    view = image[ci, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride]
                    dk[f, ci, ki, kj] = ksum((dout[f] * view).ravel())
    return dk


def _splitmix64(x: int) -> tuple[int, int]:
    x = (x + _SPLITMIX_GAMMA) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x, z ^ (z >> 31)


def seed_state(seed: int) -> np.ndarray:
    """Expand a 64-bit seed into the 256-bit generator state via splitmix64."""
    x = seed & _MASK64
    out = np.empty(4, dtype=np.uint64)
    for i in range(4):
        x, z = _splitmix64(x)
        out[i] = z
    return out


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


def next_uint64(state: np.ndarray) -> int:
    """Advance the xoshiro256** state in place and return the next output."""
    s0, s1, s2, s3 = (int(state[0]), int(state[1]), int(state[2]), int(state[3]))
    result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
    t = (s1 << 17) & _MASK64
    s2 ^= s0
    s3 ^= s1
    s1 ^= s2
    s0 ^= s3
    s2 ^= t
    s3 = _rotl(s3, 45)
    state[0] = s0
    state[1] = s1
    state[2] = s2
    state[3] = s3
    return result


def gauss_fill(state: np.ndarray, n: int, mu: float, sigma: float) -> np.ndarray:
    """n normal samples via Box-Muller over pairs of 64-bit outputs.

    Uniforms map a 64-bit draw to (0, 1] via ((x >> 11) + 1) * 2^-53, which
    keeps log() finite. Each pair of draws yields a (cos, sin) pair of
    normals; for odd n the trailing sin variate is discarded.
    """
    out = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        u1 = ((next_uint64(state) >> 11) + 1) * _U53
        u2 = ((next_uint64(state) >> 11) + 1) * _U53
        r = math.sqrt(-2.0 * math.log(u1))
        a = _TWO_PI * u2
        out[i] = mu + sigma * (r * math.cos(a))
        if i + 1 < n:
            out[i + 1] = mu + sigma * (r * math.sin(a))
        i += 2
    return out
