"""Analytical flop, parameter, and peak-memory accounting.

Conventions (frozen): a multiply-accumulate is 2 flops, a bias or activation
is 1 flop per element, and a backward pass costs twice its forward. The
instrumented counter inside the tensor ops uses the same table, so analytical
totals must match instrumented runs exactly, integer for integer. Optimizer
updates, loss evaluation, and the running average are outside the model.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

from apm.config import ModelConfig
from apm.encoder import EncoderConfig
from apm.net import ArchSpec, count_params

__all__ = [
    "CostReport",
    "flops_per_column",
    "rgb_flops_per_column",
    "conv_flops",
    "trace_floats",
    "ttt_run_cost",
    "sweep_patches",
    "write_sweep_csv",
    "SWEEP_HEADER",
]

SWEEP_HEADER = ("n_patches", "flops", "peak_live_floats")


def flops_per_column(spec: ArchSpec) -> int:
    """Firing one query through decoder + feature head."""
    total = 0
    dims = spec.layer_dims()
    for i, o in dims[:-1]:
        total += 2 * i * o + 2 * o  # matmul + bias + relu
    i, o = dims[-1]
    total += 2 * i * o + o          # feature head: matmul + bias, no activation
    return total


def rgb_flops_per_column(spec: ArchSpec) -> int:
    """The RGB head on (query | feature); final squashing counts as activation."""
    total = 0
    for i, o in spec.rgb_layer_dims():
        total += 2 * i * o + 2 * o
    return total


def conv_flops(enc: EncoderConfig) -> int:
    """The patchify convolution over the whole image (no bias)."""
    out_cells = enc.num_kernels * enc.grid_height * enc.grid_width
    return 2 * out_cells * enc.channels * enc.kernel_size * enc.kernel_size


def trace_floats(spec: ArchSpec) -> int:
    """Live floats held by one column's forward trace."""
    n = spec.input_dim + spec.feature_dim
    for w in spec.decoder_widths:
        n += 2 * w  # pre-activation + activation
    return n


def _fixed_floats(model: ModelConfig) -> int:
    """State alive regardless of grid size or worker count."""
    enc, spec = model.encoder, model.arch
    p = count_params(spec)
    n = p            # parameters
    n += 2 * p       # Adam moments
    n += p           # gradient accumulator
    n += enc.channels * enc.image_height * enc.image_width  # image
    n += enc.trigger_dim                                    # trigger column + its gradient
    n += enc.trigger_dim
    n += enc.field_height * enc.field_width * enc.positional_dim  # positional table
    n += spec.feature_dim                                   # running average
    return n


@dataclass(frozen=True)
class CostReport:
    """Exact operation counts for one configuration."""

    flops_conv: int
    flops_per_column: int
    params: int
    grid_height: int
    grid_width: int
    t_max: int
    teacher_flops: int
    trace_floats: int
    fixed_floats: int
    column_grads_floats: int

    @property
    def flops_forward_per_iteration(self) -> int:
        return self.flops_conv + self.grid_height * self.grid_width * self.flops_per_column

    @property
    def flops_backward_per_iteration(self) -> int:
        return 2 * self.flops_forward_per_iteration

    @property
    def flops_per_iteration(self) -> int:
        return self.flops_forward_per_iteration + self.flops_backward_per_iteration

    @property
    def flops_total_run(self) -> int:
        return self.teacher_flops + self.t_max * self.flops_per_iteration

    def flops_total(self, n_columns: int) -> int:
        """Forward cost of the convolution plus n independent column firings."""
        return self.flops_conv + n_columns * self.flops_per_column

    def peak_live_floats(self, worker_count: int = 1) -> int:
        """k workers hold k traces (plus per-column gradients); the rest is fixed."""
        return worker_count * (self.trace_floats + self.column_grads_floats) + self.fixed_floats


def ttt_run_cost(
    model: ModelConfig, grid_height: int, grid_width: int, t_max: int, teacher_flops: int
) -> CostReport:
    """Cost of a full adaptation run: the teacher once, then t_max iterations.

    Each iteration re-encodes the trigger, fires grid_height x grid_width
    columns, and backpropagates at the 2x-forward convention.
    """
    spec = model.arch
    return CostReport(
        flops_conv=conv_flops(model.encoder),
        flops_per_column=flops_per_column(spec),
        params=count_params(spec),
        grid_height=grid_height,
        grid_width=grid_width,
        t_max=t_max,
        teacher_flops=teacher_flops,
        trace_floats=trace_floats(spec),
        fixed_floats=_fixed_floats(model),
        column_grads_floats=count_params(spec),
    )


def sweep_patches(model: ModelConfig, max_patches: int, worker_count: int = 1):
    """(n, flops, peak_live_floats) rows for n = 1..max_patches.

    Flops grow linearly with slope flops_per_column; the peak live float
    count does not depend on n at all (one trace per worker at a time).
    """
    if max_patches < 1:
        raise ValueError(f"max_patches must be >= 1, got {max_patches}")
    report = ttt_run_cost(model, model.encoder.grid_height, model.encoder.grid_width, 1, 0)
    peak = report.peak_live_floats(worker_count)
    return [(n, report.flops_total(n), peak) for n in range(1, max_patches + 1)]


def write_sweep_csv(path: str, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_HEADER)
        writer.writerows(rows)
