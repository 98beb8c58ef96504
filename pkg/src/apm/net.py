"""The shared decoder MLP, feature head, and RGB head with trigger skip.

Parameters are read-only during forward passes and may be shared freely
across concurrent column workers; every forward is a pure function of
(params, query). ForwardTrace objects register with a live-trace gauge so
tests can verify the constant-memory asynchronous processing contract.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from apm import tensor
from apm.encoder import LocationQuery, PositionalField, TriggerColumn
from apm.errors import DimensionError
from apm.tensor import SeededRng, Tensor

__all__ = [
    "ArchSpec",
    "ApmParams",
    "ForwardTrace",
    "RgbTrace",
    "init_params",
    "zeros_params",
    "forward_column",
    "forward_query_values",
    "rgb_column",
    "rgb_forward",
    "forward_grid",
    "count_params",
    "trace_gauge",
    "INIT_SIGMA",
]

INIT_SIGMA = 0.01


@dataclass(frozen=True)
class ArchSpec:
    """Shapes of every learnable tensor.

    input_dim is the query length (trigger + positional [+ patch]); the
    feature head maps the last decoder width to the teacher dimension. The
    RGB head, when present, consumes (query | feature). conv_* give the
    patchify kernel shape so parameters can be initialized from these shapes
    alone.
    """

    input_dim: int
    decoder_widths: tuple[int, ...]
    feature_dim: int
    conv_kernels: int = 1
    conv_channels: int = 3
    conv_size: int = 4
    rgb_hidden: tuple[int, ...] | None = None
    rgb_output: int = 3

    def __post_init__(self):
        object.__setattr__(self, "decoder_widths", tuple(self.decoder_widths))
        if self.rgb_hidden is not None:
            object.__setattr__(self, "rgb_hidden", tuple(self.rgb_hidden))
        if len(self.decoder_widths) < 1:
            raise DimensionError("decoder needs at least one layer")
        dims = (self.input_dim, self.feature_dim, *self.decoder_widths)
        if any(d < 1 for d in dims):
            raise DimensionError(f"non-positive dimension in arch spec: {dims}")

    @property
    def rgb_input_dim(self) -> int:
        return self.input_dim + self.feature_dim

    def layer_dims(self) -> list[tuple[int, int]]:
        """(in, out) per decoder layer, then the feature head."""
        dims = []
        prev = self.input_dim
        for w in self.decoder_widths:
            dims.append((prev, w))
            prev = w
        dims.append((prev, self.feature_dim))
        return dims

    def rgb_layer_dims(self) -> list[tuple[int, int]]:
        if self.rgb_hidden is None:
            return []
        dims = []
        prev = self.rgb_input_dim
        for w in self.rgb_hidden:
            dims.append((prev, w))
            prev = w
        dims.append((prev, self.rgb_output))
        return dims


@dataclass
class ApmParams:
    """All learnable tensors: conv kernel, decoder layers, heads."""

    spec: ArchSpec
    conv_kernel: np.ndarray
    decoder: list[tuple[np.ndarray, np.ndarray]]
    feature_head: tuple[np.ndarray, np.ndarray]
    rgb_head: list[tuple[np.ndarray, np.ndarray]] | None = None

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Stable (name, array) pairs; the order is the init and storage order."""
        out = [("conv_kernel", self.conv_kernel)]
        for i, (w, b) in enumerate(self.decoder):
            out.append((f"decoder.{i}.weight", w))
            out.append((f"decoder.{i}.bias", b))
        out.append(("feature_head.weight", self.feature_head[0]))
        out.append(("feature_head.bias", self.feature_head[1]))
        if self.rgb_head is not None:
            for i, (w, b) in enumerate(self.rgb_head):
                out.append((f"rgb_head.{i}.weight", w))
                out.append((f"rgb_head.{i}.bias", b))
        return out

    def clone(self) -> "ApmParams":
        return ApmParams(
            self.spec,
            self.conv_kernel.copy(),
            [(w.copy(), b.copy()) for w, b in self.decoder],
            (self.feature_head[0].copy(), self.feature_head[1].copy()),
            None if self.rgb_head is None else [(w.copy(), b.copy()) for w, b in self.rgb_head],
        )


class _TraceGauge:
    """Counts live forward traces; peak is the memory-contract witness."""

    def __init__(self):
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0

    def acquire(self):
        with self._lock:
            self.current += 1
            if self.current > self.peak:
                self.peak = self.current

    def release(self):
        with self._lock:
            self.current -= 1

    def reset(self):
        with self._lock:
            self.current = 0
            self.peak = 0


trace_gauge = _TraceGauge()


@dataclass
class ForwardTrace:
    """Per-layer pre-activations and activations of one column firing."""

    query: np.ndarray
    zs: list[np.ndarray]         # pre-activations of hidden layers
    acts: list[np.ndarray]       # post-relu activations (inputs to layers 1..L and head)
    feature: np.ndarray
    flops: int
    _released: bool = False

    def release(self):
        if not self._released:
            self._released = True
            trace_gauge.release()

    def float_count(self) -> int:
        n = self.query.size + self.feature.size
        n += sum(z.size for z in self.zs)
        n += sum(a.size for a in self.acts)
        return n


@dataclass
class RgbTrace:
    rgb_in: np.ndarray
    zs: list[np.ndarray]
    acts: list[np.ndarray]       # post-relu hidden activations
    out: np.ndarray              # post-logistic
    flops: int


def zeros_params(spec: ArchSpec) -> ApmParams:
    """All-zero parameters in the spec's shapes (template for loaders)."""
    z = lambda *shape: np.zeros(shape, dtype=np.float64)
    decoder = []
    prev = spec.input_dim
    for w in spec.decoder_widths:
        decoder.append((z(w, prev), z(w)))
        prev = w
    head = (z(spec.feature_dim, prev), z(spec.feature_dim))
    rgb = None
    if spec.rgb_hidden is not None:
        rgb = []
        prev = spec.rgb_input_dim
        for w in (*spec.rgb_hidden, spec.rgb_output):
            rgb.append((z(w, prev), z(w)))
            prev = w
    conv = z(spec.conv_kernels, spec.conv_channels, spec.conv_size, spec.conv_size)
    return ApmParams(spec, conv, decoder, head, rgb)


def init_params(spec: ArchSpec, seed: int) -> ApmParams:
    """Draw every weight matrix i.i.d. from N(0, INIT_SIGMA^2); biases start at 0.

    One continuous stream per seed, consumed in named_arrays() order, so the
    result is a pure function of (spec, seed). Zero biases keep the initial
    output near the origin, which is what lets a handful of adaptation steps
    dominate the feature direction.
    """
    rng = SeededRng(seed)

    def draw(*shape):
        n = int(np.prod(shape))
        return rng.fill_gaussian(n, 0.0, INIT_SIGMA).reshape(shape)

    conv = draw(spec.conv_kernels, spec.conv_channels, spec.conv_size, spec.conv_size)
    decoder = []
    prev = spec.input_dim
    for w in spec.decoder_widths:
        decoder.append((draw(w, prev), np.zeros(w, dtype=np.float64)))
        prev = w
    head = (draw(spec.feature_dim, prev), np.zeros(spec.feature_dim, dtype=np.float64))
    rgb = None
    if spec.rgb_hidden is not None:
        rgb = []
        prev = spec.rgb_input_dim
        for w in (*spec.rgb_hidden, spec.rgb_output):
            rgb.append((draw(w, prev), np.zeros(w, dtype=np.float64)))
            prev = w
    return ApmParams(spec, conv, decoder, head, rgb)


def forward_query_values(params: ApmParams, qv: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    """Fire one query (raw values) through decoder + feature head."""
    spec = params.spec
    if qv.size != spec.input_dim:
        raise DimensionError(f"query length {qv.size} != arch input {spec.input_dim}")
    trace_gauge.acquire()
    flops = 0
    a = qv
    zs: list[np.ndarray] = []
    acts: list[np.ndarray] = []
    for w, b in params.decoder:
        z = tensor.bias_add(tensor.mm(w, a[:, None])[:, 0], b)
        a = tensor.relu_nd(z)
        flops += 2 * w.shape[0] * w.shape[1] + 2 * w.shape[0]
        zs.append(z)
        acts.append(a)
    w, b = params.feature_head
    f = tensor.bias_add(tensor.mm(w, a[:, None])[:, 0], b)
    flops += 2 * w.shape[0] * w.shape[1] + w.shape[0]
    return f, ForwardTrace(qv, zs, acts, f, flops)


def forward_column(params: ApmParams, q: LocationQuery) -> tuple[Tensor, ForwardTrace]:
    """Fire one location query; pure in (params, q), independent of any other column."""
    f, trace = forward_query_values(params, q.values.data)
    return Tensor.wrap(f), trace


def rgb_forward(params: ApmParams, qv: np.ndarray, f: np.ndarray) -> tuple[np.ndarray, RgbTrace]:
    """RGB head on (query | feature); output squashed to (0, 1)."""
    spec = params.spec
    if params.rgb_head is None:
        raise DimensionError("arch spec has no RGB head")
    rin = np.concatenate([qv, f])
    if rin.size != spec.rgb_input_dim:
        raise DimensionError(f"rgb input {rin.size} != expected {spec.rgb_input_dim}")
    flops = 0
    a = rin
    zs: list[np.ndarray] = []
    acts: list[np.ndarray] = []
    last = len(params.rgb_head) - 1
    for li, (w, b) in enumerate(params.rgb_head):
        z = tensor.bias_add(tensor.mm(w, a[:, None])[:, 0], b)
        zs.append(z)
        flops += 2 * w.shape[0] * w.shape[1] + 2 * w.shape[0]
        if li < last:
            a = tensor.relu_nd(z)
            acts.append(a)
        else:
            a = tensor.logistic_nd(z)
    return a, RgbTrace(rin, zs, acts, a, flops)


def rgb_column(params: ApmParams, q: LocationQuery, f_ij: Tensor) -> Tensor:
    out, _ = rgb_forward(params, q.values.data, f_ij.data)
    return Tensor.wrap(out)


def forward_grid(
    params: ApmParams,
    T: TriggerColumn,
    pos_field: PositionalField,
    patches: np.ndarray | None = None,
    fire_height: int | None = None,
    fire_width: int | None = None,
) -> np.ndarray:
    """Fire every grid cell and gather the (H, W, d_c) feature grid.

    Columns are independent, so the result does not depend on firing order;
    this implementation walks raster order one trace at a time.
    """
    from apm.encoder import query_at  # local to avoid cycle at import time

    fh = pos_field.grid_height if fire_height is None else fire_height
    fw = pos_field.grid_width if fire_width is None else fire_width
    grid = np.empty((fh, fw, params.spec.feature_dim), dtype=np.float64)
    for i in range(fh):
        for j in range(fw):
            q = query_at(T, pos_field, i, j, patches)
            f, trace = forward_column(params, q)
            grid[i, j] = f.data
            trace.release()
    return grid


def render_rgb_grid(
    params: ApmParams,
    T: TriggerColumn,
    pos_field: PositionalField,
    patches: np.ndarray | None = None,
) -> np.ndarray:
    """Decode the (H, W, 3) image the net associates with a trigger column."""
    from apm.encoder import query_at

    fh, fw = pos_field.grid_height, pos_field.grid_width
    out = np.empty((fh, fw, 3), dtype=np.float64)
    for i in range(fh):
        for j in range(fw):
            q = query_at(T, pos_field, i, j, patches)
            f, trace = forward_column(params, q)
            rgb, _ = rgb_forward(params, q.values.data, f.data)
            out[i, j] = rgb
            trace.release()
    return out


def count_params(spec: ArchSpec) -> int:
    """Exact number of scalar parameters (weights + biases)."""
    n = spec.conv_kernels * spec.conv_channels * spec.conv_size * spec.conv_size
    for i, o in spec.layer_dims():
        n += i * o + o
    for i, o in spec.rgb_layer_dims():
        n += i * o + o
    return n
