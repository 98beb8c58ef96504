"""Paired encoder geometry + architecture shapes, presets, and JSON I/O."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

from apm.encoder import EncoderConfig
from apm.errors import DimensionError
from apm.net import ArchSpec

__all__ = ["ModelConfig", "PRESETS", "resolve_model", "save_model_config"]


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    arch: ArchSpec

    def __post_init__(self):
        e, a = self.encoder, self.arch
        if a.input_dim != e.query_dim:
            raise DimensionError(
                f"arch input {a.input_dim} != encoder query dim {e.query_dim} "
                f"(trigger {e.trigger_dim} + positional {e.positional_dim} + patch {e.patch_dim})"
            )
        if (a.conv_kernels, a.conv_channels, a.conv_size) != (
            e.num_kernels,
            e.channels,
            e.kernel_size,
        ):
            raise DimensionError(
                f"arch conv shape ({a.conv_kernels},{a.conv_channels},{a.conv_size}) "
                f"!= encoder ({e.num_kernels},{e.channels},{e.kernel_size})"
            )

    def to_dict(self) -> dict:
        d = {"encoder": asdict(self.encoder), "arch": asdict(self.arch)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        enc = EncoderConfig(**d["encoder"])
        arch_d = dict(d["arch"])
        for key in ("decoder_widths", "rgb_hidden"):
            if arch_d.get(key) is not None:
                arch_d[key] = tuple(arch_d[key])
        return cls(enc, ArchSpec(**arch_d))


def _desk(num_kernels: int = 1, rgb: tuple[int, ...] | None = None, inject_patch: bool = False) -> ModelConfig:
    enc = EncoderConfig(
        image_height=32,
        image_width=32,
        channels=3,
        kernel_size=4,
        stride=4,
        num_kernels=num_kernels,
        positional_dim=32,
        inject_patch=inject_patch,
    )
    arch = ArchSpec(
        input_dim=enc.query_dim,
        decoder_widths=(128, 128, 128, 64, 32),
        feature_dim=16,
        conv_kernels=enc.num_kernels,
        conv_channels=enc.channels,
        conv_size=enc.kernel_size,
        rgb_hidden=rgb,
    )
    return ModelConfig(enc, arch)


def _full(d_c: int = 768) -> ModelConfig:
    # 448px crops, 14px patches -> 32x32 grid, single kernel: trigger dim 1024
    enc = EncoderConfig(
        image_height=448,
        image_width=448,
        channels=3,
        kernel_size=14,
        stride=14,
        num_kernels=1,
        positional_dim=1024,
    )
    arch = ArchSpec(
        input_dim=enc.query_dim,
        decoder_widths=(4096, 4096, 4096, 2048, 1024),
        feature_dim=d_c,
        conv_kernels=1,
        conv_channels=3,
        conv_size=14,
        rgb_hidden=(256, 256),
    )
    return ModelConfig(enc, arch)


PRESETS = {
    "desk": lambda: _desk(),
    "desk-rgb": lambda: _desk(num_kernels=3, rgb=(64, 64)),
    "full": lambda: _full(),
}


def resolve_model(spec: str) -> ModelConfig:
    """Accept a preset name or a path to a JSON model description."""
    if spec in PRESETS:
        return PRESETS[spec]()
    if os.path.isfile(spec):
        with open(spec, "rb") as fh:
            return ModelConfig.from_dict(json.loads(fh.read()))
    raise ValueError(f"unknown arch {spec!r}: not a preset ({', '.join(PRESETS)}) or a file")


def save_model_config(path: str, model: ModelConfig) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=2, sort_keys=True)
