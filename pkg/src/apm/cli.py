"""Command-line surface: adaptation runs, training, decoding, profiling,
gradient checking, and synthetic teacher bundles.

Every command is deterministic given its flags: summaries carry the full
config and no timestamps, so identical invocations produce identical files.
APM_SEED overrides the built-in default seed of 42; an explicit --seed wins
over both.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from apm._backend import backend_name
from apm.config import resolve_model
from apm.errors import ApmError
from apm.tensor import SeededRng, Tensor

DEFAULT_SEED = 42


def _default_seed() -> int:
    return int(os.environ.get("APM_SEED", DEFAULT_SEED))


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 1


def _need_file(path: str, flag: str) -> None:
    if not os.path.isfile(path):
        raise ApmError(f"{flag} {path}: no such file")


def _need_dir(path: str, flag: str) -> None:
    if not os.path.isdir(path):
        raise ApmError(f"{flag} {path}: no such directory")


def _write_summary(path: str, summary: dict) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_loss_csv(path: str, losses, column_losses=None) -> None:
    with open(path, "w") as fh:
        if column_losses is None:
            fh.write("iteration,loss\n")
            for i, l in enumerate(losses):
                fh.write(f"{i},{l!r}\n")
        else:
            fh.write("iteration,token_loss,column_loss\n")
            for i, (a, b) in enumerate(zip(losses, column_losses)):
                fh.write(f"{i},{a!r},{b!r}\n")


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise ApmError(f"--grid {text!r}: expected HxW, e.g. 8x8")


# ---------------------------------------------------------------------------

def cmd_ttt(args) -> int:
    from apm.teacher_io import load_bundle, read_ppm
    from apm.ttt import TttConfig, run_ttt

    if args.iters < 1:
        raise ApmError(f"--iters must be >= 1, got {args.iters}")
    _need_file(args.image, "--image")
    _need_dir(args.bundle, "--bundle")
    model = resolve_model(args.arch)
    bundle = load_bundle(args.bundle)
    image = read_ppm(args.image)
    cfg = TttConfig(
        iterations=args.iters,
        lr=args.lr,
        seed=args.seed,
        reinit_per_sample=not args.no_reinit,
        workers=args.workers,
        loss_mode=args.loss_mode,
    )
    report = run_ttt(image, bundle, cfg, model)
    summary = {
        "command": "ttt",
        "backend": backend_name(),
        "config": {
            "image": args.image,
            "bundle": args.bundle,
            "arch": args.arch,
            "iters": args.iters,
            "lr": args.lr,
            "seed": args.seed,
            "workers": args.workers,
            "loss_mode": args.loss_mode,
            "reinit_per_sample": not args.no_reinit,
        },
        "losses": report.losses,
        "column_losses": report.column_losses,
        "iterations_run": report.iterations_run,
        "aborted": report.aborted,
        "prediction": {
            "index": report.predicted_index,
            "name": report.predicted_name,
        },
        "scores": None if report.scores is None else list(report.scores),
        "outputs": {"summary": args.out, "losses_csv": args.out + ".losses.csv"},
    }
    _write_summary(args.out, summary)
    _write_loss_csv(args.out + ".losses.csv", report.losses, report.column_losses)
    if report.predicted_name is not None:
        print(report.predicted_name)
    else:
        print("(no class bank in bundle; no prediction)")
    return 0


def cmd_train(args) -> int:
    from apm.trainer import TrainConfig, load_manifest, train

    _need_file(args.manifest, "--manifest")
    model = resolve_model(args.arch)
    dataset = load_manifest(args.manifest)
    if not dataset:
        raise ApmError(f"--manifest {args.manifest}: lists no samples")
    cfg = TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        seed=args.seed,
        w_grid=args.w_grid,
        w_rgb=args.w_rgb,
        w_cls=args.w_cls,
        granularity=args.granularity,
        workers=args.workers,
    )
    params, history = train(
        dataset,
        cfg,
        model,
        ckpt_path=args.ckpt_out,
        ckpt_every=args.ckpt_every,
        resume_from=args.resume,
    )
    summary = {
        "command": "train",
        "backend": backend_name(),
        "config": {
            "manifest": args.manifest,
            "arch": args.arch,
            "epochs": args.epochs,
            "lr": args.lr,
            "seed": args.seed,
            "w_grid": args.w_grid,
            "w_rgb": args.w_rgb,
            "w_cls": args.w_cls,
            "granularity": args.granularity,
            "workers": args.workers,
            "ckpt_every": args.ckpt_every,
            "resume": args.resume,
        },
        "steps": history[-1]["step"] if history else 0,
        "history": history,
        "final": history[-1] if history else None,
        "outputs": {"checkpoint": args.ckpt_out, "summary": args.out},
    }
    if args.out:
        _write_summary(args.out, summary)
    if history:
        final = history[-1]
        print(
            f"trained {len(history)} visits, {summary['steps']} steps; "
            f"final total={final['total']:.6g} rgb={final['rgb']:.6g} grid={final['grid']:.6g}"
        )
    else:
        print("trained 0 visits (no epochs)")
    return 0


def _load_ckpt_model(args):
    from apm.teacher_io import bind_checkpoint, load_checkpoint

    _need_file(args.ckpt, "--ckpt")
    model = resolve_model(args.arch)
    raw, step = load_checkpoint(args.ckpt)
    params, _, _ = bind_checkpoint(raw, step, model.arch)
    return model, params


def cmd_reconstruct(args) -> int:
    from apm.encoder import encode_trigger, field_for
    from apm.net import render_rgb_grid
    from apm.teacher_io import normalize_image, read_ppm, write_ppm

    _need_file(args.image, "--image")
    model, params = _load_ckpt_model(args)
    if params.rgb_head is None:
        raise ApmError(f"--arch {args.arch}: spec has no RGB head, nothing to decode")
    image = read_ppm(args.image)
    enc = model.encoder
    norm = normalize_image(image)
    T = encode_trigger(norm, Tensor.wrap(params.conv_kernel), enc)
    grid = render_rgb_grid(params, T, field_for(enc))  # (H, W, 3)
    write_ppm(args.out, np.ascontiguousarray(grid.transpose(2, 0, 1)))
    print(f"wrote {args.out} ({grid.shape[0]}x{grid.shape[1]})")
    return 0


def cmd_interpolate(args) -> int:
    from apm.encoder import encode_trigger, field_for, interpolate_latents
    from apm.net import render_rgb_grid
    from apm.teacher_io import normalize_image, read_ppm, write_ppm

    if args.steps < 1:
        raise ApmError(f"--steps must be >= 1, got {args.steps}")
    _need_file(args.image_a, "--image-a")
    _need_file(args.image_b, "--image-b")
    model, params = _load_ckpt_model(args)
    if params.rgb_head is None:
        raise ApmError(f"--arch {args.arch}: spec has no RGB head, nothing to decode")
    os.makedirs(args.outdir, exist_ok=True)
    enc = model.encoder
    kernel = Tensor.wrap(params.conv_kernel)
    va = encode_trigger(normalize_image(read_ppm(args.image_a)), kernel, enc)
    vb = encode_trigger(normalize_image(read_ppm(args.image_b)), kernel, enc)
    pos_field = field_for(enc)
    paths = []
    for k, latent in enumerate(interpolate_latents(va, vb, args.steps)):
        grid = render_rgb_grid(params, latent, pos_field)
        path = os.path.join(args.outdir, f"frame_{k:03d}.ppm")
        write_ppm(path, np.ascontiguousarray(grid.transpose(2, 0, 1)))
        paths.append(path)
    print(f"wrote {len(paths)} frames to {args.outdir}")
    return 0


def cmd_profile(args) -> int:
    from apm.profiler import sweep_patches, ttt_run_cost, write_sweep_csv

    model = resolve_model(args.arch)
    if args.grid:
        gh, gw = _parse_grid(args.grid)
    else:
        gh, gw = model.encoder.grid_height, model.encoder.grid_width
    report = ttt_run_cost(model, gh, gw, args.iters, args.teacher_flops)
    print(f"params                {report.params}")
    print(f"flops_conv            {report.flops_conv}")
    print(f"flops_per_column      {report.flops_per_column}")
    print(f"grid                  {gh}x{gw}")
    print(f"forward/iteration     {report.flops_forward_per_iteration}")
    print(f"backward/iteration    {report.flops_backward_per_iteration}")
    print(f"teacher (t=1 only)    {report.teacher_flops}")
    print(f"total ({args.iters} iterations) {report.flops_total_run}")
    print(f"trace floats          {report.trace_floats}")
    print(f"peak live floats (1w) {report.peak_live_floats(1)}")
    if args.sweep_max:
        rows = sweep_patches(model, args.sweep_max)
        write_sweep_csv(args.out_csv, rows)
        print(f"wrote sweep csv {args.out_csv} ({len(rows)} rows)")
    return 0


def cmd_gradcheck(args) -> int:
    from apm.grad import gradient_check

    if args.eps <= 0:
        raise ApmError(f"--eps must be > 0, got {args.eps}")
    model = resolve_model(args.arch)
    corrupt = os.environ.get("APM_TEST_CORRUPT_GRAD", "") == "1"
    worst = gradient_check(
        model, args.seed, eps=args.eps, per_tensor=args.samples, corrupt=corrupt
    )
    print(f"max relative error {worst:.3e} (threshold 1e-06)")
    return 0 if worst <= 1e-6 else 1


def cmd_make_bundle(args) -> int:
    from apm.teacher_io import DistilledBundle, save_bundle

    if args.classes < 1:
        raise ApmError(f"--classes must be >= 1, got {args.classes}")
    if args.dc < args.classes:
        raise ApmError(
            f"--dc {args.dc} must be >= --classes {args.classes} for an orthonormal bank"
        )
    if not 0 <= args.target_class < args.classes:
        raise ApmError(f"--target-class {args.target_class} outside 0..{args.classes - 1}")
    rng = SeededRng(args.seed)
    # Gram-Schmidt on gaussian rows: an exactly orthonormal class bank
    bank = np.empty((args.classes, args.dc), dtype=np.float64)
    for r in range(args.classes):
        v = rng.fill_gaussian(args.dc, 0.0, 1.0)
        for prev in range(r):
            v = v - np.dot(bank[prev], v) * bank[prev]
        bank[r] = v / np.sqrt(np.dot(v, v))
    cls = bank[args.target_class].copy()
    if args.noise > 0:
        cls = cls + rng.fill_gaussian(args.dc, 0.0, args.noise)
    grid = None
    if args.grid:
        gh, gw = _parse_grid(args.grid)
        grid = np.tile(cls, (gh, gw, 1))
    names = tuple(f"class_{i}" for i in range(args.classes))
    bundle = DistilledBundle(cls, args.dc, "synthetic", grid, bank, names)
    save_bundle(args.outdir, bundle)
    print(f"wrote bundle {args.outdir} ({args.classes} classes, d_c={args.dc})")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="apm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp, arch_default="desk"):
        sp.add_argument("--arch", default=arch_default,
                        help="preset name (desk, desk-rgb, full) or JSON file")
        sp.add_argument("--seed", type=int, default=_default_seed())

    sp = sub.add_parser("ttt", help="test-time-train on one image and classify it")
    sp.add_argument("--image", required=True)
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--iters", type=int, default=20)
    sp.add_argument("--lr", type=float, default=1e-4)
    sp.add_argument("--out", default="ttt_summary.json")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--loss-mode", choices=("cls", "grid"), default="cls")
    sp.add_argument("--no-reinit", action="store_true")
    add_common(sp)
    sp.set_defaults(func=cmd_ttt)

    sp = sub.add_parser("train", help="self-supervised distillation training")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--epochs", type=int, default=1)
    sp.add_argument("--lr", type=float, default=1e-4)
    sp.add_argument("--ckpt-out", required=True)
    sp.add_argument("--ckpt-every", type=int, default=0)
    sp.add_argument("--resume", default=None)
    sp.add_argument("--w-grid", type=float, default=1.0)
    sp.add_argument("--w-rgb", type=float, default=1.0)
    sp.add_argument("--w-cls", type=float, default=0.0)
    sp.add_argument("--granularity", choices=("per-image", "per-column"), default="per-image")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--out", default=None, help="summary JSON path")
    add_common(sp, arch_default="desk-rgb")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("reconstruct", help="decode the RGB grid for an image")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True)
    add_common(sp, arch_default="desk-rgb")
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("interpolate", help="decode frames between two images' latents")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--image-a", required=True)
    sp.add_argument("--image-b", required=True)
    sp.add_argument("--steps", type=int, required=True)
    sp.add_argument("--outdir", required=True)
    add_common(sp, arch_default="desk-rgb")
    sp.set_defaults(func=cmd_interpolate)

    sp = sub.add_parser("profile", help="analytical cost report and patch sweep")
    sp.add_argument("--grid", default=None, help="HxW, defaults to the arch patch grid")
    sp.add_argument("--iters", type=int, default=20)
    sp.add_argument("--teacher-flops", type=int, default=0)
    sp.add_argument("--sweep-max", type=int, default=0)
    sp.add_argument("--out-csv", default="sweep.csv")
    add_common(sp)
    sp.set_defaults(func=cmd_profile)

    sp = sub.add_parser("gradcheck", help="reverse-mode vs finite differences")
    sp.add_argument("--eps", type=float, default=1e-5)
    sp.add_argument("--samples", type=int, default=10, help="entries checked per tensor")
    add_common(sp)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("make-bundle", help="synthetic teacher bundle for self-contained runs")
    sp.add_argument("--classes", type=int, default=10)
    sp.add_argument("--dc", type=int, default=16)
    sp.add_argument("--target-class", type=int, default=0)
    sp.add_argument("--noise", type=float, default=0.0)
    sp.add_argument("--grid", default=None, help="also write a HxW feature grid")
    sp.add_argument("--outdir", required=True)
    sp.add_argument("--seed", type=int, default=_default_seed())
    sp.set_defaults(func=cmd_make_bundle)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ApmError as e:
        return _fail(str(e))
    except ValueError as e:
        return _fail(str(e))
    except OSError as e:
        return _fail(str(e))


if __name__ == "__main__":
    sys.exit(main())
