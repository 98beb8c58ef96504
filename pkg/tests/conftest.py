import numpy as np
import pytest

from apm.config import ModelConfig, resolve_model
from apm.encoder import EncoderConfig
from apm.net import ArchSpec
from apm.tensor import SeededRng


@pytest.fixture
def tiny_model() -> ModelConfig:
    """Small enough for exhaustive finite differences: 61 + 59 params."""
    enc = EncoderConfig(4, 4, 3, 2, 2, num_kernels=2, positional_dim=4)
    arch = ArchSpec(
        input_dim=enc.query_dim,
        decoder_widths=(5, 4),
        feature_dim=3,
        conv_kernels=2,
        conv_channels=3,
        conv_size=2,
        rgb_hidden=(6,),
    )
    return ModelConfig(enc, arch)


@pytest.fixture
def desk_model() -> ModelConfig:
    return resolve_model("desk")


@pytest.fixture
def desk_rgb_model() -> ModelConfig:
    return resolve_model("desk-rgb")


def rand_image(seed: int, c: int = 3, h: int = 32, w: int = 32) -> np.ndarray:
    """Deterministic [0,1] image."""
    rng = SeededRng(seed)
    return np.clip(rng.fill_gaussian(c * h * w, 0.5, 0.2).reshape(c, h, w), 0.0, 1.0)


def orthonormal_bank(n: int, dc: int, seed: int) -> np.ndarray:
    """Gram-Schmidt on gaussian rows; exactly orthonormal."""
    rng = SeededRng(seed)
    bank = np.empty((n, dc), dtype=np.float64)
    for r in range(n):
        v = rng.fill_gaussian(dc, 0.0, 1.0)
        for p in range(r):
            v = v - np.dot(bank[p], v) * bank[p]
        bank[r] = v / np.sqrt(np.dot(v, v))
    return bank
