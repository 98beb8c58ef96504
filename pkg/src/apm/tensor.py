"""Dense float64 tensors, seeded randomness, and the elementary operations.

All reductions run through the kernel backend in a frozen ascending-index
order, so every result is bit-for-bit reproducible across runs, worker
counts, and backends. Elementwise arithmetic uses numpy directly: each output
element is a single correctly-rounded IEEE operation, identical in C and
Python.

The module also hosts the operation counter used by the analytical cost
model's instrumented oracle. Counted sites are the *forward* primitives
(matmul, bias add, activations, convolution); backward passes are charged
wholesale by the gradient code at the frozen 2x-forward convention.
"""

from __future__ import annotations

import math
import threading
from typing import Sequence

import numpy as np

from apm._backend import backend_name, kernels
from apm.errors import DegenerateInputError, DimensionError

__all__ = [
    "Tensor",
    "SeededRng",
    "matmul",
    "relu",
    "relu_grad",
    "concat",
    "split",
    "gaussian",
    "cosine_similarity",
    "backend_name",
    "OpCounter",
    "count_flops",
    "active_counter",
]


def _as_f64(values) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64)
    return np.ascontiguousarray(a)


class Tensor:
    """A dense row-major float64 array with an explicit shape.

    Immutable by convention: operations return fresh tensors and never write
    to their inputs.
    """

    __slots__ = ("shape", "_a")

    def __init__(self, values, shape: Sequence[int] | None = None):
        a = _as_f64(values)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if math.prod(shape) != a.size:
                raise DimensionError(
                    f"shape {shape} needs {math.prod(shape)} elements, data has {a.size}"
                )
            a = a.reshape(shape)
        self._a = a
        self.shape = a.shape

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "Tensor":
        return cls(np.zeros(tuple(shape), dtype=np.float64))

    @classmethod
    def wrap(cls, a: np.ndarray) -> "Tensor":
        """Adopt an existing float64 array without copying."""
        t = object.__new__(cls)
        t._a = a
        t.shape = a.shape
        return t

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the payload."""
        return self._a.reshape(-1)

    @property
    def size(self) -> int:
        return self._a.size

    def nd(self) -> np.ndarray:
        """The underlying ndarray (shared storage; treat as read-only)."""
        return self._a

    def tolist(self):
        return self._a.tolist()

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)})"


class SeededRng:
    """xoshiro256** seeded through splitmix64.

    The stream is a pure function of the 64-bit seed and is identical across
    backends and platforms (golden vectors are pinned in the test suite).
    State is single-owner: share the values it produces, not the generator.
    """

    __slots__ = ("seed", "state")

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.state = kernels.seed_state(self.seed)

    def next_uint64(self) -> int:
        return int(kernels.next_uint64(self.state))

    def fill_gaussian(self, n: int, mu: float = 0.0, sigma: float = 1.0) -> np.ndarray:
        if sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {sigma}")
        return kernels.gauss_fill(self.state, int(n), float(mu), float(sigma))

    def __repr__(self):
        return f"SeededRng(seed={self.seed})"


# ---------------------------------------------------------------------------
# Operation counter (instrumented oracle for the analytical cost model).

class OpCounter:
    """Thread-safe flop tally. Conventions: MAC=2, bias/activation=1/element."""

    __slots__ = ("flops", "_lock")

    def __init__(self):
        self.flops = 0
        self._lock = threading.Lock()

    def add(self, n: int) -> None:
        with self._lock:
            self.flops += int(n)


_active_counter: OpCounter | None = None


class count_flops:
    """Context manager activating an OpCounter for the enclosed region."""

    def __enter__(self) -> OpCounter:
        global _active_counter
        self._prev = _active_counter
        self.counter = OpCounter()
        _active_counter = self.counter
        return self.counter

    def __exit__(self, *exc):
        global _active_counter
        _active_counter = self._prev
        return False


def active_counter() -> OpCounter | None:
    return _active_counter


def _count(n: int) -> None:
    c = _active_counter
    if c is not None:
        c.add(n)


def charge(n: int) -> None:
    """Add a convention-level cost (e.g. a backward pass charged at 2x forward)."""
    _count(n)


# ---------------------------------------------------------------------------
# ndarray-level primitives (hot path; the Tensor ops below delegate here).

def mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Counted matrix product on raw 2-D arrays."""
    _count(2 * a.shape[0] * a.shape[1] * b.shape[1])
    return kernels.matmul(a, b)


def bias_add(z: np.ndarray, b: np.ndarray) -> np.ndarray:
    _count(z.size)
    return z + b


def relu_nd(x: np.ndarray) -> np.ndarray:
    _count(x.size)
    return np.maximum(x, 0.0)


def relu_grad_nd(x: np.ndarray) -> np.ndarray:
    # Backward-only; charged by the gradient code, not here.
    return (x > 0.0).astype(np.float64)


def logistic_nd(x: np.ndarray) -> np.ndarray:
    """Counted elementwise 1/(1+exp(-x)), two-branch form so exp never overflows."""
    _count(x.size)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def conv2d_nd(image: np.ndarray, kernel: np.ndarray, stride: int) -> np.ndarray:
    """Counted valid cross-correlation, no bias. image (c,h,w), kernel (n_k,c,ks,ks)."""
    c, h, w = image.shape
    n_k, _, ks, _ = kernel.shape
    oh = (h - ks) // stride + 1
    ow = (w - ks) // stride + 1
    _count(2 * n_k * oh * ow * c * ks * ks)
    return kernels.conv_forward(image, kernel, stride)


def ksum(x: np.ndarray) -> float:
    """Ascending-index sum of a flat array (uncounted utility)."""
    return kernels.ksum(np.ascontiguousarray(x.reshape(-1)))


def vdot(a: np.ndarray, b: np.ndarray) -> float:
    """Ascending-index dot product of flat arrays (uncounted utility)."""
    return kernels.dot(
        np.ascontiguousarray(a.reshape(-1)), np.ascontiguousarray(b.reshape(-1))
    )


# ---------------------------------------------------------------------------
# Public Tensor operations.

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """c[i][j] = sum_k a[i][k]*b[k][j], accumulated in ascending k."""
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes do not chain: {tuple(a.shape)} x {tuple(b.shape)}")
    return Tensor.wrap(mm(a.nd(), b.nd()))


def relu(x: Tensor) -> Tensor:
    return Tensor.wrap(relu_nd(x.nd()))


def relu_grad(x: Tensor) -> Tensor:
    """1 where x > 0 else 0; the subgradient at exactly 0 is 0."""
    return Tensor.wrap(relu_grad_nd(x.nd()))


def concat(a: Tensor, b: Tensor) -> Tensor:
    """a's entries followed by b's entries, as a flat vector."""
    return Tensor.wrap(np.concatenate([a.data, b.data]))


def split(t: Tensor, p: int) -> tuple[Tensor, Tensor]:
    """Inverse of concat: the first p entries and the rest, copied."""
    flat = t.data
    if not 0 <= p <= flat.size:
        raise DimensionError(f"split point {p} outside 0..{flat.size}")
    return Tensor(flat[:p].copy()), Tensor(flat[p:].copy())


def gaussian(rng: SeededRng, n: int, mu: float, sigma: float) -> Tensor:
    """n N(mu, sigma^2) samples via Box-Muller over the seeded stream."""
    return Tensor.wrap(rng.fill_gaussian(n, mu, sigma))


def cosine_similarity(a: Tensor | np.ndarray, b: Tensor | np.ndarray) -> float:
    av = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64).reshape(-1)
    bv = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64).reshape(-1)
    if av.size != bv.size:
        raise DimensionError(f"cosine_similarity lengths differ: {av.size} vs {bv.size}")
    na = math.sqrt(vdot(av, av))
    nb = math.sqrt(vdot(bv, bv))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine_similarity of a zero-norm vector")
    c = vdot(av, bv) / (na * nb)
    return min(1.0, max(-1.0, c))


def tensors_equal(a: Tensor, b: Tensor) -> bool:
    """Bitwise equality of shape and payload."""
    return tuple(a.shape) == tuple(b.shape) and np.array_equal(a.data, b.data)
