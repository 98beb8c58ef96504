"""One-sample test-time training.

Weights are freshly drawn per sample, the teacher token is read exactly once,
and each iteration fires every column in raster order while maintaining a
constant-memory running average of the fired features. Column forwards and
backwards may run on worker threads; running-average and gradient commits
always happen in raster order, so reports are bitwise reproducible at any
worker count.
"""

from __future__ import annotations

from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from apm.config import ModelConfig
from apm.encoder import encode_trigger, extract_patches, field_for, query_at
from apm.errors import DegenerateInputError, DimensionError, OptimizerError
from apm.grad import AdamState, adam_step, add_into, column_backward, trigger_kernel_grad, zeros_like_params
from apm.net import ApmParams, forward_column, init_params
from apm.teacher_io import DistilledBundle, normalize_image
from apm.tensor import Tensor, cosine_similarity, vdot

__all__ = [
    "RunningAverage",
    "TttConfig",
    "ClassBank",
    "TttReport",
    "update_running_average",
    "ttt_loss",
    "classify",
    "run_ttt",
    "raster_results",
]


class RunningAverage:
    """Streaming mean: value <- (n*value + x) / (n+1), exactly that recurrence."""

    __slots__ = ("n", "_value")

    def __init__(self, n: int = 0, value: np.ndarray | None = None):
        self.n = n
        self._value = value

    @property
    def value(self) -> np.ndarray:
        if self.n == 0:
            raise DegenerateInputError("running average read before any update")
        return self._value

    def update(self, x: np.ndarray) -> "RunningAverage":
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if self.n == 0:
            return RunningAverage(1, x.copy())
        if x.size != self._value.size:
            raise DimensionError(f"running average dim {self._value.size}, update dim {x.size}")
        return RunningAverage(self.n + 1, (self.n * self._value + x) / (self.n + 1))


def update_running_average(ra: RunningAverage, f_ij: np.ndarray | Tensor) -> RunningAverage:
    return ra.update(f_ij.data if isinstance(f_ij, Tensor) else f_ij)


def ttt_loss(f_avg: np.ndarray | Tensor, f_cls: np.ndarray | Tensor) -> float:
    """Mean squared error between the averaged feature and the target token."""
    a = f_avg.data if isinstance(f_avg, Tensor) else np.asarray(f_avg, np.float64).reshape(-1)
    b = f_cls.data if isinstance(f_cls, Tensor) else np.asarray(f_cls, np.float64).reshape(-1)
    if a.size != b.size:
        raise DimensionError(f"loss dims differ: {a.size} vs {b.size}")
    d = a - b
    return vdot(d, d) / a.size


@dataclass(frozen=True)
class ClassBank:
    """Per-class text embeddings and their labels."""

    embeddings: np.ndarray  # (n_classes, d_c)
    names: tuple[str, ...]

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "names", tuple(self.names))
        if emb.ndim != 2 or emb.shape[0] != len(self.names):
            raise DimensionError(
                f"class bank has {emb.shape[0] if emb.ndim == 2 else '?'} rows "
                f"but {len(self.names)} names"
            )
        norms = np.sqrt((emb * emb).sum(axis=1))
        if np.any(norms == 0):
            raise DegenerateInputError("class bank contains a zero-norm embedding")

    @property
    def n_classes(self) -> int:
        return self.embeddings.shape[0]


def classify(f_avg: np.ndarray | Tensor, bank: ClassBank) -> tuple[int, np.ndarray]:
    """Cosine scores against every class row; argmax with lowest-index ties."""
    v = f_avg.data if isinstance(f_avg, Tensor) else np.asarray(f_avg, np.float64).reshape(-1)
    if v.size != bank.embeddings.shape[1]:
        raise DimensionError(
            f"feature dim {v.size} != bank dim {bank.embeddings.shape[1]}"
        )
    scores = np.array([cosine_similarity(v, row) for row in bank.embeddings])
    return int(np.argmax(scores)), scores


@dataclass(frozen=True)
class TttConfig:
    iterations: int = 20
    lr: float = 1e-4
    seed: int = 42
    reinit_per_sample: bool = True
    workers: int = 1
    loss_mode: str = "cls"  # "cls": every column targets the token; "grid": per-location targets
    normalize: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.loss_mode not in ("cls", "grid"):
            raise ValueError(f"loss_mode must be cls or grid, got {self.loss_mode!r}")


@dataclass
class TttReport:
    """Per-iteration traces plus the final prediction."""

    losses: list[float] = field(default_factory=list)          # token loss on f_avg
    column_losses: list[float] = field(default_factory=list)   # summed per-column objective
    final_favg: np.ndarray | None = None
    predicted_index: int | None = None
    predicted_name: str | None = None
    scores: np.ndarray | None = None
    iterations_run: int = 0
    aborted: bool = False
    final_params: ApmParams | None = None


def raster_results(cells, fn, workers: int):
    """Apply fn to cells, yielding results in input order.

    With workers > 1, at most `workers` tasks are in flight, so at most that
    many forward traces are ever live at once.
    """
    if workers <= 1:
        for cell in cells:
            yield fn(cell)
        return
    with ThreadPoolExecutor(max_workers=workers) as ex:
        pending: deque = deque()
        it = iter(cells)
        for cell in it:
            pending.append(ex.submit(fn, cell))
            if len(pending) >= workers:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


def run_ttt(
    image: Tensor,
    bundle: DistilledBundle,
    cfg: TttConfig,
    model: ModelConfig,
    params: ApmParams | None = None,
) -> TttReport:
    """Adapt freshly drawn weights to one sample and classify it.

    The teacher token is read from the bundle once, before the loop, and never
    recomputed. Each iteration re-encodes the trigger column (the kernel
    learns too), fires all columns in raster order, backpropagates the summed
    per-column loss, collapses the location gradients onto the conv kernel,
    and takes one Adam step.
    """
    enc, spec = model.encoder, model.arch
    d_c = spec.feature_dim
    if bundle.d_c != d_c:
        raise DimensionError(f"bundle d_c {bundle.d_c} != arch feature dim {d_c}")

    # the one and only teacher consultation
    target = np.array(bundle.cls, dtype=np.float64).reshape(-1)
    target.flags.writeable = False

    grid_targets = None
    fh, fw = enc.grid_height, enc.grid_width
    if cfg.loss_mode == "grid":
        if bundle.grid is None:
            raise DimensionError("loss_mode=grid but the bundle has no feature grid")
        grid_targets = np.asarray(bundle.grid, dtype=np.float64)
        if grid_targets.shape != (fh, fw, d_c):
            raise DimensionError(
                f"bundle grid {grid_targets.shape} != expected {(fh, fw, d_c)}"
            )

    if params is None or cfg.reinit_per_sample:
        params = init_params(spec, cfg.seed)
    adam = AdamState.init(params)

    img = normalize_image(image).nd() if cfg.normalize else image.nd()
    img = np.ascontiguousarray(img, dtype=np.float64)
    pos_field = field_for(enc)
    patches = extract_patches(Tensor.wrap(img), enc) if enc.inject_patch else None
    cells = [(i, j) for i in range(fh) for j in range(fw)]

    report = TttReport()
    for _ in range(cfg.iterations):
        T = encode_trigger(Tensor.wrap(img), Tensor.wrap(params.conv_kernel), enc)
        frozen = params  # bind for worker closures

        def fire(cell: tuple[int, int]):
            i, j = cell
            q = query_at(T, pos_field, i, j, patches)
            f, trace = forward_column(frozen, q)
            tgt = target if grid_targets is None else grid_targets[i, j]
            diff = f.data - tgt
            col_loss = vdot(diff, diff) / d_c
            if not np.isfinite(col_loss):
                trace.release()
                return f.data, col_loss, None
            cg = column_backward(frozen, trace, (2.0 / d_c) * diff)
            trace.release()
            return f.data, col_loss, cg

        ra = RunningAverage()
        col_loss_sum = 0.0
        diverged = False
        total = zeros_like_params(params)
        d_trigger = np.zeros(enc.trigger_dim, dtype=np.float64)
        for f_vals, col_loss, cg in raster_results(cells, fire, cfg.workers):
            ra = ra.update(f_vals)
            col_loss_sum += col_loss
            if cg is None:
                diverged = True
                continue
            add_into(total, cg)
            d_trigger += cg.d_query[: enc.trigger_dim]
        total.conv_kernel += trigger_kernel_grad(img, d_trigger, enc)

        token_loss = ttt_loss(ra.value, target)
        report.losses.append(token_loss)
        report.column_losses.append(col_loss_sum)
        report.final_favg = ra.value.copy()
        if diverged or not (np.isfinite(token_loss) and np.isfinite(col_loss_sum)):
            report.aborted = True
            break
        try:
            params, adam = adam_step(params, total, adam, cfg.lr)
        except OptimizerError:
            report.aborted = True
            break
        report.iterations_run += 1

    report.final_params = params
    if bundle.bank is not None and report.final_favg is not None:
        try:
            idx, scores = classify(report.final_favg, bundle.bank)
        except DegenerateInputError:
            idx, scores = None, None
        report.predicted_index = idx
        report.scores = scores
        if idx is not None:
            report.predicted_name = bundle.bank.names[idx]
    return report
