"""Trigger-column construction, the positional field, and unfold/fold.

A strided convolution summarizes the whole image into one flat column T.
Unfolding stacks a copy of T with each grid location's sinusoidal encoding,
yielding mutually independent location queries; folding strips the positional
suffixes back off. Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from apm import tensor
from apm.errors import DimensionError, FoldError
from apm.tensor import Tensor

__all__ = [
    "EncoderConfig",
    "TriggerColumn",
    "PositionalField",
    "LocationQuery",
    "encode_trigger",
    "positional_encoding",
    "build_field",
    "query_at",
    "unfold",
    "fold",
    "interpolate_latents",
    "extract_patches",
]


@dataclass(frozen=True)
class EncoderConfig:
    """Geometry of the patchify convolution and positional encoding.

    kernel_size equals stride (non-overlapping patches, zero padding), so the
    trigger column length is d = num_kernels * (h/s) * (w/s). field_height /
    field_width let the positional field be generated at a larger resolution
    than the patch grid; by default they match it.
    """

    image_height: int
    image_width: int
    channels: int
    kernel_size: int
    stride: int
    num_kernels: int = 1
    positional_dim: int = 32
    inject_patch: bool = False
    field_height: int = 0
    field_width: int = 0

    def __post_init__(self):
        if self.kernel_size != self.stride:
            raise DimensionError(
                f"kernel_size {self.kernel_size} must equal stride {self.stride} (patchify)"
            )
        if self.image_height % self.stride or self.image_width % self.stride:
            raise DimensionError(
                f"image {self.image_height}x{self.image_width} not divisible by stride {self.stride}"
            )
        if self.num_kernels < 1:
            raise DimensionError("num_kernels must be >= 1")
        if self.positional_dim < 4 or self.positional_dim % 4:
            raise DimensionError(f"positional_dim {self.positional_dim} must be a multiple of 4")
        if self.field_height == 0:
            object.__setattr__(self, "field_height", self.grid_height)
        if self.field_width == 0:
            object.__setattr__(self, "field_width", self.grid_width)
        if self.field_height < self.grid_height or self.field_width < self.grid_width:
            raise DimensionError("positional field cannot be smaller than the patch grid")

    @property
    def grid_height(self) -> int:
        return self.image_height // self.stride

    @property
    def grid_width(self) -> int:
        return self.image_width // self.stride

    @property
    def trigger_dim(self) -> int:
        return self.num_kernels * self.grid_height * self.grid_width

    @property
    def patch_dim(self) -> int:
        return self.channels * self.kernel_size * self.kernel_size if self.inject_patch else 0

    @property
    def query_dim(self) -> int:
        return self.trigger_dim + self.positional_dim + self.patch_dim


@dataclass(frozen=True)
class TriggerColumn:
    """The flat d-dimensional column summarizing one image."""

    values: Tensor

    def __post_init__(self):
        if len(self.values.shape) != 1:
            raise DimensionError(f"trigger column must be flat, got shape {self.values.shape}")

    @property
    def dim(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class PositionalField:
    """Deterministic per-location encodings for an H x W grid, row-major."""

    grid_height: int
    grid_width: int
    encodings: Tensor  # (H*W, d_p)

    @property
    def positional_dim(self) -> int:
        return self.encodings.shape[1]

    def at(self, i: int, j: int) -> np.ndarray:
        return self.encodings.nd()[i * self.grid_width + j]


@dataclass(frozen=True)
class LocationQuery:
    """(T | p_ij [| patch]) plus the grid indices it was generated for."""

    values: Tensor
    position: tuple[int, int]
    trigger_dim: int
    positional_dim: int
    local_patch: Tensor | None = None


def positional_encoding(i: int, j: int, d_p: int) -> Tensor:
    """Sinusoidal 2-D encoding: first half encodes column j, second half row i.

    Each half alternates sin/cos at frequencies 10000^(-4m/d_p),
    m = 0 .. d_p/4 - 1.
    """
    if d_p < 4 or d_p % 4:
        raise DimensionError(f"positional dim {d_p} must be a multiple of 4")
    out = np.empty(d_p, dtype=np.float64)
    half = d_p // 2
    for axis, pos in ((0, j), (1, i)):
        base = axis * half
        for m in range(d_p // 4):
            freq = 10000.0 ** (-4.0 * m / d_p)
            angle = pos * freq
            out[base + 2 * m] = math.sin(angle)
            out[base + 2 * m + 1] = math.cos(angle)
    return Tensor.wrap(out)


def build_field(height: int, width: int, d_p: int) -> PositionalField:
    """Materialize the positional encodings for every cell, raster order."""
    enc = np.empty((height * width, d_p), dtype=np.float64)
    for i in range(height):
        for j in range(width):
            enc[i * width + j] = positional_encoding(i, j, d_p).nd()
    return PositionalField(height, width, Tensor.wrap(enc))


def field_for(cfg: EncoderConfig) -> PositionalField:
    return build_field(cfg.field_height, cfg.field_width, cfg.positional_dim)


def encode_trigger(image: Tensor, kernel: Tensor, cfg: EncoderConfig) -> TriggerColumn:
    """Run the patchify convolution and flatten kernel-major, then row-major."""
    expect_img = (cfg.channels, cfg.image_height, cfg.image_width)
    if tuple(image.shape) != expect_img:
        raise DimensionError(f"image shape {tuple(image.shape)} != config {expect_img}")
    expect_k = (cfg.num_kernels, cfg.channels, cfg.kernel_size, cfg.kernel_size)
    if tuple(kernel.shape) != expect_k:
        raise DimensionError(f"kernel shape {tuple(kernel.shape)} != config {expect_k}")
    fmap = tensor.conv2d_nd(image.nd(), kernel.nd(), cfg.stride)
    return TriggerColumn(Tensor.wrap(fmap.reshape(-1)))


def extract_patches(image: Tensor, cfg: EncoderConfig) -> np.ndarray:
    """Per-cell local patches, raster order, each flattened (c, k, k) row-major."""
    img = image.nd()
    k, s = cfg.kernel_size, cfg.stride
    out = np.empty((cfg.grid_height * cfg.grid_width, cfg.channels * k * k), dtype=np.float64)
    for i in range(cfg.grid_height):
        for j in range(cfg.grid_width):
            out[i * cfg.grid_width + j] = img[:, i * s : i * s + k, j * s : j * s + k].reshape(-1)
    return out


def query_at(
    T: TriggerColumn,
    pos_field: PositionalField,
    i: int,
    j: int,
    patches: np.ndarray | None = None,
) -> LocationQuery:
    """Build the single query for grid cell (i, j)."""
    parts = [T.values.data, pos_field.at(i, j)]
    patch = None
    if patches is not None:
        patch = Tensor(patches[i * pos_field.grid_width + j].copy())
        parts.append(patch.data)
    vals = Tensor.wrap(np.concatenate(parts))
    return LocationQuery(vals, (i, j), T.dim, pos_field.positional_dim, patch)


def unfold(
    T: TriggerColumn,
    pos_field: PositionalField,
    patches: np.ndarray | None = None,
    fire_height: int | None = None,
    fire_width: int | None = None,
) -> Iterator[LocationQuery]:
    """Yield location queries lazily, in raster order.

    Each query is an independent value; consuming one does not require
    producing any other. fire_height/fire_width restrict firing to the
    upper-left sub-grid when the field is oversampled.
    """
    fh = pos_field.grid_height if fire_height is None else fire_height
    fw = pos_field.grid_width if fire_width is None else fire_width
    for i in range(fh):
        for j in range(fw):
            yield query_at(T, pos_field, i, j, patches)


def fold(queries: Sequence[LocationQuery] | Iterator[LocationQuery]) -> TriggerColumn:
    """Strip positional suffixes; all queries must share the leading T bitwise."""
    first_t: np.ndarray | None = None
    for q in queries:
        lead = q.values.data[: q.trigger_dim]
        if first_t is None:
            first_t = lead.copy()
        elif not np.array_equal(first_t, lead):
            raise FoldError(f"query at {q.position} disagrees in leading {q.trigger_dim} entries")
    if first_t is None:
        raise FoldError("fold of an empty query sequence")
    return TriggerColumn(Tensor.wrap(first_t))


def interpolate_latents(v1: TriggerColumn, v2: TriggerColumn, n: int) -> list[TriggerColumn]:
    """n+1 columns evenly spaced from v1 to v2: element k = v1 + k*(v2-v1)/n.

    Endpoints are returned as exact copies of v1 and v2.
    """
    if n < 1:
        raise ValueError(f"interpolation steps must be >= 1, got {n}")
    if v1.dim != v2.dim:
        raise DimensionError(f"latent dims differ: {v1.dim} vs {v2.dim}")
    a, b = v1.values.data, v2.values.data
    step = (b - a) / n
    out = [TriggerColumn(Tensor(a.copy()))]
    for k in range(1, n):
        out.append(TriggerColumn(Tensor.wrap(a + k * step)))
    out.append(TriggerColumn(Tensor(b.copy())))
    return out
