"""Reverse-mode gradients for the column pipeline, an independent
finite-difference oracle, and the Adam optimizer.

Per-column backward passes are pure and may run concurrently; accumulation
into shared gradient buffers happens in raster order so results are bitwise
reproducible at any worker count. The cost counter charges each backward at
the frozen convention of twice the traced forward cost.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from apm import tensor
from apm._backend import kernels
from apm.encoder import EncoderConfig
from apm.errors import DimensionError, OptimizerError
from apm.net import ApmParams, ForwardTrace, RgbTrace

__all__ = [
    "Gradients",
    "ColumnGrads",
    "AdamState",
    "zeros_like_params",
    "column_backward",
    "backward_column",
    "trigger_kernel_grad",
    "finite_difference",
    "accumulate",
    "add_into",
    "adam_step",
    "ADAM_BETA1",
    "ADAM_BETA2",
    "ADAM_EPS",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class Gradients:
    """One tensor per parameter tensor, same shapes and naming."""

    conv_kernel: np.ndarray
    decoder: list[tuple[np.ndarray, np.ndarray]]
    feature_head: tuple[np.ndarray, np.ndarray]
    rgb_head: list[tuple[np.ndarray, np.ndarray]] | None = None

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
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

    def clone(self) -> "Gradients":
        return Gradients(
            self.conv_kernel.copy(),
            [(w.copy(), b.copy()) for w, b in self.decoder],
            (self.feature_head[0].copy(), self.feature_head[1].copy()),
            None if self.rgb_head is None else [(w.copy(), b.copy()) for w, b in self.rgb_head],
        )


@dataclass
class ColumnGrads:
    """One column's contribution: MLP gradients plus the query gradient.

    The leading trigger_dim entries of d_query are this column's share of the
    trigger gradient; the engine accumulates them across columns and collapses
    the total onto the conv kernel once per pass.
    """

    decoder: list[tuple[np.ndarray, np.ndarray]]
    feature_head: tuple[np.ndarray, np.ndarray]
    rgb_head: list[tuple[np.ndarray, np.ndarray]] | None
    d_query: np.ndarray


def zeros_like_params(params: ApmParams) -> Gradients:
    return Gradients(
        np.zeros_like(params.conv_kernel),
        [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.decoder],
        (np.zeros_like(params.feature_head[0]), np.zeros_like(params.feature_head[1])),
        None
        if params.rgb_head is None
        else [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.rgb_head],
    )


def _check_trace(params: ApmParams, trace: ForwardTrace) -> None:
    if trace.query.size != params.spec.input_dim or len(trace.zs) != len(params.decoder):
        raise DimensionError(
            f"trace (query {trace.query.size}, {len(trace.zs)} layers) does not match "
            f"params (input {params.spec.input_dim}, {len(params.decoder)} layers)"
        )


def column_backward(
    params: ApmParams,
    trace: ForwardTrace,
    upstream: np.ndarray,
    rgb_trace: RgbTrace | None = None,
    upstream_rgb: np.ndarray | None = None,
) -> ColumnGrads:
    """Exact reverse-mode gradients of <upstream, f> (+ <upstream_rgb, rgb>) for one column."""
    _check_trace(params, trace)
    spec = params.spec
    charged = trace.flops + (rgb_trace.flops if rgb_trace is not None else 0)
    tensor.charge(2 * charged)

    rgb_grads = None
    df = np.asarray(upstream, dtype=np.float64)
    d_query = np.zeros(spec.input_dim, dtype=np.float64)
    if rgb_trace is not None:
        s = rgb_trace.out
        da = np.asarray(upstream_rgb, dtype=np.float64) * (s * (1.0 - s))
        rgb_grads = [None] * len(params.rgb_head)
        for li in range(len(params.rgb_head) - 1, -1, -1):
            w, _ = params.rgb_head[li]
            dz = da if li == len(params.rgb_head) - 1 else da * tensor.relu_grad_nd(rgb_trace.zs[li])
            src = rgb_trace.rgb_in if li == 0 else rgb_trace.acts[li - 1]
            rgb_grads[li] = (np.outer(dz, src), dz.copy())
            da = kernels.matvec_t(w, dz)
        # (query | feature) gradient splits between the query and the head path
        d_query += da[: spec.input_dim]
        df = df + da[spec.input_dim :]

    w, _ = params.feature_head
    fh_grads = (np.outer(df, trace.acts[-1]), df.copy())
    da = kernels.matvec_t(w, df)
    dec_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params.decoder)
    for li in range(len(params.decoder) - 1, -1, -1):
        w, _ = params.decoder[li]
        dz = da * tensor.relu_grad_nd(trace.zs[li])
        src = trace.query if li == 0 else trace.acts[li - 1]
        dec_grads[li] = (np.outer(dz, src), dz.copy())
        da = kernels.matvec_t(w, dz)
    d_query += da
    return ColumnGrads(dec_grads, fh_grads, rgb_grads, d_query)


def trigger_kernel_grad(image: np.ndarray, d_trigger: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """Collapse the accumulated trigger gradient onto the conv kernel."""
    dmap = d_trigger.reshape(cfg.num_kernels, cfg.grid_height, cfg.grid_width)
    tensor.charge(
        2 * (2 * cfg.num_kernels * cfg.grid_height * cfg.grid_width
             * cfg.channels * cfg.kernel_size * cfg.kernel_size)
    )
    return kernels.conv_backward_kernel(
        np.ascontiguousarray(image), np.ascontiguousarray(dmap), cfg.kernel_size, cfg.stride
    )


def backward_column(
    params: ApmParams,
    trace: ForwardTrace,
    upstream: np.ndarray,
    rgb_trace: RgbTrace | None = None,
    upstream_rgb: np.ndarray | None = None,
    image: np.ndarray | None = None,
    enc: EncoderConfig | None = None,
) -> Gradients:
    """Full parameter-shaped gradients for a single column.

    When (image, enc) are supplied the trigger gradient is pushed through the
    convolution; otherwise the conv slot is zero (the engines accumulate
    trigger gradients across columns and collapse them once per pass).
    """
    col = column_backward(params, trace, upstream, rgb_trace, upstream_rgb)
    if image is not None and enc is not None:
        conv = trigger_kernel_grad(image, col.d_query[: enc.trigger_dim], enc)
    else:
        conv = np.zeros_like(params.conv_kernel)
    return Gradients(conv, col.decoder, col.feature_head, col.rgb_head)


def add_into(total: Gradients, delta: Gradients | ColumnGrads) -> None:
    """total += delta elementwise, in place; ColumnGrads leaves conv untouched."""
    if isinstance(delta, Gradients):
        total.conv_kernel += delta.conv_kernel
    for (tw, tb), (dw, db) in zip(total.decoder, delta.decoder):
        tw += dw
        tb += db
    fw, fb = total.feature_head
    fw += delta.feature_head[0]
    fb += delta.feature_head[1]
    if total.rgb_head is not None and delta.rgb_head is not None:
        for (tw, tb), (dw, db) in zip(total.rgb_head, delta.rgb_head):
            tw += dw
            tb += db


def accumulate(total: Gradients, delta: Gradients) -> Gradients:
    """Elementwise sum, returned as a new Gradients."""
    for (_, a), (_, b) in zip(total.named_arrays(), delta.named_arrays()):
        if a.shape != b.shape:
            raise DimensionError(f"gradient shapes differ: {a.shape} vs {b.shape}")
    out = total.clone()
    add_into(out, delta)
    return out


@dataclass
class AdamState:
    """First/second moment estimates per parameter tensor plus the step count."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def init(cls, params: ApmParams) -> "AdamState":
        m = {name: np.zeros_like(a) for name, a in params.named_arrays()}
        v = {name: np.zeros_like(a) for name, a in params.named_arrays()}
        return cls(m, v)


def adam_step(
    params: ApmParams, grads: Gradients, state: AdamState, lr: float
) -> tuple[ApmParams, AdamState]:
    """One bias-corrected Adam update; returns fresh params and state.

    lr=0 is the identity on parameters (the step counter still advances).
    """
    if lr < 0:
        raise OptimizerError(f"learning rate must be >= 0, got {lr}")
    for name, g in grads.named_arrays():
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient in {name}; step aborted")
    t = state.t + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_params = params.clone()
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    grad_map = dict(grads.named_arrays())
    for name, p in new_params.named_arrays():
        g = grad_map[name]
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        new_m[name] = m
        new_v[name] = v
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new_params, AdamState(new_m, new_v, t, state.beta1, state.beta2, state.eps)


def gradient_check(
    model,
    seed: int,
    eps: float = 1e-5,
    per_tensor: int = 10,
    subgrid: tuple[int, int] = (2, 2),
    corrupt: bool = False,
) -> float:
    """Compare reverse-mode gradients against central differences.

    Builds a deterministic fixture from the seed: parameters drawn at
    1/sqrt(fan_in) scale (so signals are O(1) and difference quotients are
    well-conditioned), a random image, and per-cell feature targets on a
    small sub-grid. The loss sums per-cell MSEs, so the trigger gradient
    flows through every conv weight. Seeds whose pre-activations land within
    10*eps of a relu kink are deterministically re-derived.

    Returns the max relative error over a coordinate sample covering every
    parameter tensor (all conv entries, per_tensor entries elsewhere).
    Checking every coordinate exhaustively is only feasible for tiny specs;
    pass per_tensor=0 for that.

    The relative-error denominator is floored at the oracle's resolution
    limit: a central difference of a loss L at step eps carries absolute
    rounding noise of roughly ulp(L)/eps, so coordinates whose gradients sit
    below noise/rtol cannot be graded on relative accuracy and are graded
    against the floor instead (the standard mixed-tolerance gradient check).

    corrupt=True deliberately damages one analytical entry (detector
    self-test for the CLI).
    """
    from apm.encoder import encode_trigger, field_for, query_at
    from apm.net import forward_column, init_params
    from apm.tensor import SeededRng, Tensor, vdot

    enc, spec = model.encoder, model.arch
    d_c = spec.feature_dim
    gh, gw = subgrid
    if gh > enc.grid_height or gw > enc.grid_width:
        raise DimensionError(f"subgrid {subgrid} exceeds the patch grid")
    pos_field = field_for(enc)

    def build(fixture_seed: int):
        rng = SeededRng(fixture_seed)
        params = init_params(spec, fixture_seed)
        for name, a in params.named_arrays():
            fan_in = a.shape[1] if a.ndim == 2 else max(1, a.size // max(1, a.shape[0]))
            sigma = 0.1 if a.ndim == 1 else (2.0 / fan_in) ** 0.5
            a[...] = rng.fill_gaussian(a.size, 0.0, sigma).reshape(a.shape)
        image = rng.fill_gaussian(
            enc.channels * enc.image_height * enc.image_width, 0.0, 1.0
        ).reshape(enc.channels, enc.image_height, enc.image_width)
        targets = rng.fill_gaussian(gh * gw * d_c, 0.0, 1.0).reshape(gh, gw, d_c)
        return params, image, targets

    def min_abs_z(params, image):
        T = encode_trigger(Tensor.wrap(image), Tensor.wrap(params.conv_kernel), enc)
        worst = np.inf
        for i in range(gh):
            for j in range(gw):
                _, trace = forward_column(params, query_at(T, pos_field, i, j))
                worst = min(worst, min(np.abs(z).min() for z in trace.zs))
                trace.release()
        return worst

    fixture_seed = seed
    for _ in range(50):
        params, image, targets = build(fixture_seed)
        if min_abs_z(params, image) > 10.0 * eps:
            break
        fixture_seed += 7919
    else:
        raise RuntimeError("could not find a kink-free gradient-check fixture")

    def loss_fn(p: ApmParams) -> float:
        T = encode_trigger(Tensor.wrap(image), Tensor.wrap(p.conv_kernel), enc)
        total = 0.0
        for i in range(gh):
            for j in range(gw):
                f, trace = forward_column(p, query_at(T, pos_field, i, j))
                trace.release()
                diff = f.data - targets[i, j]
                total += vdot(diff, diff) / d_c
        return total

    # analytical gradient via the engine path: per-column backward, trigger
    # gradients accumulated in raster order, collapsed once onto the kernel
    T = encode_trigger(Tensor.wrap(image), Tensor.wrap(params.conv_kernel), enc)
    total = zeros_like_params(params)
    d_trigger = np.zeros(enc.trigger_dim, dtype=np.float64)
    for i in range(gh):
        for j in range(gw):
            f, trace = forward_column(params, query_at(T, pos_field, i, j))
            diff = f.data - targets[i, j]
            cg = column_backward(params, trace, (2.0 / d_c) * diff)
            trace.release()
            add_into(total, cg)
            d_trigger += cg.d_query[: enc.trigger_dim]
    total.conv_kernel += trigger_kernel_grad(image, d_trigger, enc)
    if corrupt:
        total.decoder[0][0][0, 0] += 1e-3

    coords: dict[str, list[int]] = {}
    for name, a in params.named_arrays():
        if name == "conv_kernel" or per_tensor <= 0 or a.size <= per_tensor:
            coords[name] = list(range(a.size))
        else:
            coords[name] = sorted(set(np.linspace(0, a.size - 1, per_tensor).astype(int)))
    fd = finite_difference(loss_fn, params, eps, coords)

    rtol = 1e-6
    fd_noise = 2.0 * abs(loss_fn(params)) * np.finfo(np.float64).eps / eps
    floor = max(1e-10, fd_noise / rtol)
    worst = 0.0
    fd_map = dict(fd.named_arrays())
    for name, ga in total.named_arrays():
        gflat = ga.reshape(-1)
        fflat = fd_map[name].reshape(-1)
        for idx in coords[name]:
            a, f = gflat[idx], fflat[idx]
            rel = abs(a - f) / max(abs(a), abs(f), floor)
            worst = max(worst, rel)
    return worst


def finite_difference(loss_fn, params: ApmParams, eps: float, coords=None) -> Gradients:
    """Central differences (L(p+eps*e) - L(p-eps*e)) / (2 eps) per scalar.

    coords, when given, maps tensor names to flat index lists and restricts
    the oracle to those entries (everything else is left at zero). The oracle
    only ever calls loss_fn; it shares nothing with the reverse-mode path.
    """
    if eps <= 0:
        raise ValueError(f"finite-difference step must be > 0, got {eps}")
    work = params.clone()
    out = zeros_like_params(params)
    out_map = dict(out.named_arrays())
    for name, arr in work.named_arrays():
        flat = arr.reshape(-1)
        gflat = out_map[name].reshape(-1)
        if coords is None:
            idxs = range(flat.size)
        else:
            idxs = coords.get(name, ())
        for idx in idxs:
            orig = flat[idx]
            flat[idx] = orig + eps
            lp = loss_fn(work)
            flat[idx] = orig - eps
            lm = loss_fn(work)
            flat[idx] = orig
            gflat[idx] = (lp - lm) / (2.0 * eps)
    return out
