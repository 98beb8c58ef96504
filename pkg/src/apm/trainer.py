"""Self-supervised distillation training over a dataset of teacher outputs.

Per sample: encode the trigger column, fire all columns, regress each
location's feature onto the teacher grid and/or its RGB output onto the
pixels, and update with Adam. Updates are taken either once per image
(raster-accumulated gradients, the stable default) or after every column
(the literal serial variant).

Checkpoint writes are quantization barriers: training continues from the
reloaded f32 state, so a resumed run replays bit-for-bit what the
uninterrupted run produced.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from apm.config import ModelConfig
from apm.encoder import encode_trigger, extract_patches, field_for, query_at
from apm.errors import DimensionError, TrainingDivergedError
from apm.grad import (
    AdamState,
    adam_step,
    add_into,
    column_backward,
    trigger_kernel_grad,
    zeros_like_params,
)
from apm.net import forward_column, init_params, rgb_forward
from apm.teacher_io import bind_checkpoint, load_checkpoint, normalize_image, save_checkpoint
from apm.tensor import Tensor, vdot
from apm.ttt import RunningAverage, raster_results, ttt_loss

__all__ = [
    "TrainConfig",
    "TrainSample",
    "grid_loss",
    "rgb_loss",
    "patch_mean_pixels",
    "train",
    "load_manifest",
]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    lr: float = 1e-4
    seed: int = 42
    w_grid: float = 1.0
    w_rgb: float = 1.0
    w_cls: float = 0.0
    granularity: str = "per-image"  # or "per-column"
    workers: int = 1
    normalize: bool = True

    def __post_init__(self):
        ws = (self.w_grid, self.w_rgb, self.w_cls)
        if any(w < 0 for w in ws) or all(w == 0 for w in ws):
            raise ValueError(f"loss weights must be >= 0 with at least one > 0, got {ws}")
        if self.granularity not in ("per-image", "per-column"):
            raise ValueError(f"granularity must be per-image or per-column, got {self.granularity!r}")
        if self.granularity == "per-column" and self.w_cls > 0:
            raise ValueError("the averaged-token loss needs whole-image gradients; "
                             "use per-image granularity with w_cls > 0")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")


@dataclass
class TrainSample:
    """One image with whatever teacher signals exist for it. Pixels in [0, 1]."""

    image: Tensor                       # (3, h, w)
    grid: np.ndarray | None = None      # (H, W, d_c)
    cls: np.ndarray | None = None       # (d_c,)


def grid_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Sum over locations of the per-location feature MSE."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"grid shapes differ: {pred.shape} vs {target.shape}")
    d = (pred - target).reshape(-1)
    return vdot(d, d) / pred.shape[-1]


def rgb_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Sum over locations of the per-location MSE on [0, 1] pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"pixel grid shapes differ: {pred.shape} vs {target.shape}")
    d = (pred - target).reshape(-1)
    return vdot(d, d) / 3.0


def patch_mean_pixels(image: Tensor, model: ModelConfig) -> np.ndarray:
    """Per-cell mean of the [0, 1] pixels under each patch: the RGB targets."""
    enc = model.encoder
    img = image.nd()
    s = enc.stride
    out = np.empty((enc.grid_height, enc.grid_width, 3), dtype=np.float64)
    for i in range(enc.grid_height):
        for j in range(enc.grid_width):
            out[i, j] = img[:, i * s : i * s + s, j * s : j * s + s].mean(axis=(1, 2))
    return out


def load_manifest(path: str) -> list[TrainSample]:
    """Tab-separated lines: image path, optional grid path, optional cls path.

    Empty fields or "-" mean absent; relative paths resolve against the
    manifest's directory.
    """
    from apm.teacher_io import read_ppm, read_tensor

    base = os.path.dirname(os.path.abspath(path))

    def resolve(p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(base, p)

    samples = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = (line.split("\t") + ["", ""])[:3]
            img_p, grid_p, cls_p = (p.strip() for p in parts)
            if not img_p:
                raise ValueError(f"{path}:{ln}: missing image path")
            image = read_ppm(resolve(img_p))
            grid = read_tensor(resolve(grid_p)).nd() if grid_p and grid_p != "-" else None
            cls = read_tensor(resolve(cls_p)).data if cls_p and cls_p != "-" else None
            samples.append(TrainSample(image, grid, cls))
    return samples


def _sample_pass(params, model, cfg, img_norm, rgb_targets, sample, f_avg_ctx):
    """Forward+backward every column of one sample; returns grads and losses.

    f_avg_ctx is (f_avg, cls, weight) when the averaged-token term is active.
    """
    enc = model.encoder
    spec = model.arch
    d_c = spec.feature_dim
    pos_field = field_for(enc)
    patches = extract_patches(Tensor.wrap(img_norm), enc) if enc.inject_patch else None
    T = encode_trigger(Tensor.wrap(img_norm), Tensor.wrap(params.conv_kernel), enc)
    cells = [(i, j) for i in range(enc.grid_height) for j in range(enc.grid_width)]
    use_grid = cfg.w_grid > 0 and sample.grid is not None
    use_rgb = cfg.w_rgb > 0 and params.rgb_head is not None

    def fire(cell):
        i, j = cell
        q = query_at(T, pos_field, i, j, patches)
        f, trace = forward_column(params, q)
        upstream = np.zeros(d_c, dtype=np.float64)
        l_grid = l_rgb = 0.0
        if use_grid:
            diff = f.data - sample.grid[i, j]
            l_grid = vdot(diff, diff) / d_c
            upstream += cfg.w_grid * (2.0 / d_c) * diff
        if f_avg_ctx is not None:
            f_avg, cls_vec, hw = f_avg_ctx
            upstream += cfg.w_cls * (2.0 / (d_c * hw)) * (f_avg - cls_vec)
        rgb_trace = None
        upstream_rgb = None
        if use_rgb:
            rgb, rgb_trace = rgb_forward(params, q.values.data, f.data)
            rdiff = rgb - rgb_targets[i, j]
            l_rgb = vdot(rdiff, rdiff) / 3.0
            upstream_rgb = cfg.w_rgb * (2.0 / 3.0) * rdiff
        if not (np.isfinite(l_grid) and np.isfinite(l_rgb)):
            trace.release()
            return f.data, l_grid, l_rgb, None
        cg = column_backward(params, trace, upstream, rgb_trace, upstream_rgb)
        trace.release()
        return f.data, l_grid, l_rgb, cg

    total = zeros_like_params(params)
    d_trigger = np.zeros(enc.trigger_dim, dtype=np.float64)
    sum_grid = sum_rgb = 0.0
    ra = RunningAverage()
    for f_vals, l_grid, l_rgb, cg in raster_results(cells, fire, cfg.workers):
        ra = ra.update(f_vals)
        sum_grid += l_grid
        sum_rgb += l_rgb
        if cg is not None:
            add_into(total, cg)
            d_trigger += cg.d_query[: enc.trigger_dim]
    total.conv_kernel += trigger_kernel_grad(img_norm, d_trigger, enc)
    return total, sum_grid, sum_rgb, ra.value


def _per_column_visit(params, adam, model, cfg, img_norm, rgb_targets, sample):
    """Literal serial variant: one Adam step after every column.

    The trigger column is re-encoded before each column so gradients stay
    exact with respect to the current parameters.
    """
    enc = model.encoder
    spec = model.arch
    d_c = spec.feature_dim
    pos_field = field_for(enc)
    patches = extract_patches(Tensor.wrap(img_norm), enc) if enc.inject_patch else None
    use_grid = cfg.w_grid > 0 and sample.grid is not None
    use_rgb = cfg.w_rgb > 0 and params.rgb_head is not None
    sum_grid = sum_rgb = 0.0
    for i in range(enc.grid_height):
        for j in range(enc.grid_width):
            T = encode_trigger(Tensor.wrap(img_norm), Tensor.wrap(params.conv_kernel), enc)
            q = query_at(T, pos_field, i, j, patches)
            f, trace = forward_column(params, q)
            upstream = np.zeros(d_c, dtype=np.float64)
            if use_grid:
                diff = f.data - sample.grid[i, j]
                sum_grid += vdot(diff, diff) / d_c
                upstream += cfg.w_grid * (2.0 / d_c) * diff
            rgb_trace = None
            upstream_rgb = None
            if use_rgb:
                rgb, rgb_trace = rgb_forward(params, q.values.data, f.data)
                rdiff = rgb - rgb_targets[i, j]
                sum_rgb += vdot(rdiff, rdiff) / 3.0
                upstream_rgb = cfg.w_rgb * (2.0 / 3.0) * rdiff
            cg = column_backward(params, trace, upstream, rgb_trace, upstream_rgb)
            trace.release()
            grads = zeros_like_params(params)
            add_into(grads, cg)
            grads.conv_kernel += trigger_kernel_grad(img_norm, cg.d_query[: enc.trigger_dim], enc)
            params, adam = adam_step(params, grads, adam, cfg.lr)
    return params, adam, sum_grid, sum_rgb


def _features_only(params, model, cfg, img_norm):
    """First pass for the averaged-token term: just the feature mean."""
    enc = model.encoder
    pos_field = field_for(enc)
    patches = extract_patches(Tensor.wrap(img_norm), enc) if enc.inject_patch else None
    T = encode_trigger(Tensor.wrap(img_norm), Tensor.wrap(params.conv_kernel), enc)
    ra = RunningAverage()
    for i in range(enc.grid_height):
        for j in range(enc.grid_width):
            q = query_at(T, pos_field, i, j, patches)
            f, trace = forward_column(params, q)
            trace.release()
            ra = ra.update(f.data)
    return ra.value


def train(
    dataset: list[TrainSample],
    cfg: TrainConfig,
    model: ModelConfig,
    ckpt_path: str | None = None,
    ckpt_every: int = 0,
    resume_from: str | None = None,
):
    """Run the distillation loop; returns (params, history).

    history holds one record per sample visit with the pre-update component
    losses. ckpt_every is a barrier cadence in sample visits. On a
    non-finite loss the last good state is checkpointed (when a path is
    configured) and TrainingDivergedError is raised.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    spec = model.arch
    if cfg.w_rgb > 0 and spec.rgb_hidden is None:
        raise DimensionError("w_rgb > 0 but the arch spec has no RGB head")
    for si, sample in enumerate(dataset):
        has_any = (
            (cfg.w_grid > 0 and sample.grid is not None)
            or (cfg.w_cls > 0 and sample.cls is not None)
            or (cfg.w_rgb > 0 and spec.rgb_hidden is not None)
        )
        if not has_any:
            raise ValueError(f"sample {si} has no active loss term under this config")
        if sample.grid is not None:
            want = (model.encoder.grid_height, model.encoder.grid_width, spec.feature_dim)
            if sample.grid.shape != want:
                raise DimensionError(f"sample {si} grid {sample.grid.shape} != {want}")

    if resume_from is not None:
        raw, step = load_checkpoint(resume_from)
        params, adam, _ = bind_checkpoint(raw, step, spec)
    else:
        params = init_params(spec, cfg.seed)
        adam = AdamState.init(params)
    history: list[dict] = []

    def barrier():
        nonlocal params, adam
        save_checkpoint(ckpt_path, params, adam)
        raw, step = load_checkpoint(ckpt_path)
        params, adam, _ = bind_checkpoint(raw, step, spec)

    for _ in range(cfg.epochs):
        for sample in dataset:
            img_norm = (
                normalize_image(sample.image).nd() if cfg.normalize else sample.image.nd()
            )
            img_norm = np.ascontiguousarray(img_norm, dtype=np.float64)
            rgb_targets = (
                patch_mean_pixels(sample.image, model)
                if cfg.w_rgb > 0 and spec.rgb_hidden is not None
                else None
            )

            if cfg.granularity == "per-image":
                f_avg_ctx = None
                l_cls = 0.0
                if cfg.w_cls > 0 and sample.cls is not None:
                    f_avg = _features_only(params, model, cfg, img_norm)
                    hw = model.encoder.grid_height * model.encoder.grid_width
                    f_avg_ctx = (f_avg, np.asarray(sample.cls, np.float64), hw)
                    l_cls = ttt_loss(f_avg, sample.cls)
                grads, l_grid, l_rgb, _ = _sample_pass(
                    params, model, cfg, img_norm, rgb_targets, sample, f_avg_ctx
                )
                total_loss = cfg.w_grid * l_grid + cfg.w_rgb * l_rgb + cfg.w_cls * l_cls
                if not np.isfinite(total_loss):
                    if ckpt_path:
                        save_checkpoint(ckpt_path, params, adam)
                    raise TrainingDivergedError(f"non-finite loss {total_loss} at step {adam.t}")
                params, adam = adam_step(params, grads, adam, cfg.lr)
                history.append(
                    {"step": adam.t, "total": total_loss, "grid": l_grid, "rgb": l_rgb, "cls": l_cls}
                )
            else:
                params, adam, l_grid, l_rgb = _per_column_visit(
                    params, adam, model, cfg, img_norm, rgb_targets, sample
                )
                total_loss = cfg.w_grid * l_grid + cfg.w_rgb * l_rgb
                if not np.isfinite(total_loss):
                    if ckpt_path:
                        save_checkpoint(ckpt_path, params, adam)
                    raise TrainingDivergedError(f"non-finite loss {total_loss} at step {adam.t}")
                history.append(
                    {"step": adam.t, "total": total_loss, "grid": l_grid, "rgb": l_rgb, "cls": 0.0}
                )

            if ckpt_path and ckpt_every > 0 and len(history) % ckpt_every == 0:
                barrier()
    if ckpt_path:
        save_checkpoint(ckpt_path, params, adam)
    return params, history
