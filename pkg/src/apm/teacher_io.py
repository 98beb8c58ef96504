"""Bit-exact file formats: tensor files, teacher bundles, checkpoints, PPM.

All formats are little-endian. Tensor payloads are stored as 32-bit floats
(teacher embeddings are f32 at the source; computation stays 64-bit in
memory). Writes go to a temp file and are renamed into place, so readers
never observe partial files.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from apm.errors import (
    BadMagicError,
    BundleError,
    DimensionError,
    IncompatibleCheckpointError,
    TruncatedFileError,
    UnsupportedFormatError,
    VersionMismatchError,
)
from apm.tensor import Tensor

__all__ = [
    "TENSOR_MAGIC",
    "CHECKPOINT_MAGIC",
    "TENSOR_VERSION",
    "IMAGENET_MEAN",
    "IMAGENET_STD",
    "write_tensor",
    "read_tensor",
    "tensor_to_bytes",
    "read_ppm",
    "write_ppm",
    "normalize_image",
    "denormalize_image",
    "DistilledBundle",
    "load_bundle",
    "save_bundle",
    "save_checkpoint",
    "load_checkpoint",
    "bind_checkpoint",
]

TENSOR_MAGIC = b"APMT"
CHECKPOINT_MAGIC = b"APMC"
TENSOR_VERSION = 1
STEP_ENTRY = "step"

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def _atomic_write(path: str, payload: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    a = t.nd() if isinstance(t, Tensor) else np.asarray(t)
    dims = a.shape if a.ndim else (1,)
    if any(d < 0 or d >= 2**32 for d in dims):
        raise DimensionError(f"dims {dims} do not fit u32")
    header = TENSOR_MAGIC + struct.pack("<II", TENSOR_VERSION, len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims)
    return header + np.ascontiguousarray(a, dtype="<f4").tobytes()


def _tensor_from_stream(buf: bytes, off: int, where: str) -> tuple[Tensor, int]:
    if len(buf) - off < 4:
        raise TruncatedFileError(f"{where}: missing magic")
    if buf[off : off + 4] != TENSOR_MAGIC:
        raise BadMagicError(f"{where}: magic {buf[off:off + 4]!r} != {TENSOR_MAGIC!r}")
    off += 4
    if len(buf) - off < 8:
        raise TruncatedFileError(f"{where}: truncated header")
    version, ndims = struct.unpack_from("<II", buf, off)
    off += 8
    if version != TENSOR_VERSION:
        raise VersionMismatchError(f"{where}: version {version}, expected {TENSOR_VERSION}")
    if len(buf) - off < 4 * ndims:
        raise TruncatedFileError(f"{where}: truncated dims")
    dims = struct.unpack_from(f"<{ndims}I", buf, off)
    off += 4 * ndims
    count = int(np.prod(dims)) if dims else 1
    nbytes = 4 * count
    if len(buf) - off < nbytes:
        raise TruncatedFileError(
            f"{where}: payload needs {nbytes} bytes, {len(buf) - off} available"
        )
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(np.float64)
    off += nbytes
    return Tensor(data, shape=dims), off


def write_tensor(path: str, t: Tensor | np.ndarray) -> None:
    _atomic_write(path, tensor_to_bytes(t))


def read_tensor(path: str) -> Tensor:
    with open(path, "rb") as fh:
        buf = fh.read()
    t, off = _tensor_from_stream(buf, 0, path)
    if off != len(buf):
        raise TruncatedFileError(f"{path}: {len(buf) - off} trailing bytes")
    return t


# ---------------------------------------------------------------------------
# PPM (binary P6, 8-bit)

def read_ppm(path: str) -> Tensor:
    """P6 file -> Tensor (3, h, w) with values byte/255 in [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()

    pos = 0

    def token() -> bytes:
        nonlocal pos
        while pos < len(buf):
            ch = buf[pos : pos + 1]
            if ch == b"#":
                while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedFileError(f"{path}: truncated header")
        return buf[start:pos]

    magic = token()
    if magic != b"P6":
        raise UnsupportedFormatError(f"{path}: magic {magic!r}, only binary P6 supported")
    w, h, maxval = int(token()), int(token()), int(token())
    if maxval != 255:
        raise UnsupportedFormatError(f"{path}: maxval {maxval}, only 255 supported")
    pos += 1  # single whitespace after maxval
    need = 3 * w * h
    if len(buf) - pos < need:
        raise TruncatedFileError(f"{path}: payload needs {need} bytes, {len(buf) - pos} available")
    raw = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    interleaved = raw.reshape(h, w, 3).astype(np.float64) / 255.0
    return Tensor(np.ascontiguousarray(interleaved.transpose(2, 0, 1)))


def write_ppm(path: str, pixels: Tensor | np.ndarray) -> None:
    """Tensor (3, h, w) in [0, 1] -> P6 file; rounds to the nearest byte."""
    a = pixels.nd() if isinstance(pixels, Tensor) else np.asarray(pixels, dtype=np.float64)
    if a.ndim != 3 or a.shape[0] != 3:
        raise DimensionError(f"expected (3, h, w) pixels, got {a.shape}")
    clipped = np.clip(a, 0.0, 1.0)
    raw = np.floor(clipped * 255.0 + 0.5).astype(np.uint8)
    h, w = a.shape[1], a.shape[2]
    header = f"P6\n{w} {h}\n255\n".encode()
    _atomic_write(path, header + raw.transpose(1, 2, 0).tobytes())


def normalize_image(pixels: Tensor) -> Tensor:
    """Per-channel (x - mean) / std with the standard image statistics."""
    a = pixels.nd()
    mean = np.array(IMAGENET_MEAN, dtype=np.float64).reshape(3, 1, 1)
    std = np.array(IMAGENET_STD, dtype=np.float64).reshape(3, 1, 1)
    return Tensor.wrap((a - mean) / std)


def denormalize_image(pixels: Tensor) -> Tensor:
    a = pixels.nd()
    mean = np.array(IMAGENET_MEAN, dtype=np.float64).reshape(3, 1, 1)
    std = np.array(IMAGENET_STD, dtype=np.float64).reshape(3, 1, 1)
    return Tensor.wrap(a * std + mean)


# ---------------------------------------------------------------------------
# Distilled teacher bundles

@dataclass
class DistilledBundle:
    """Precomputed teacher outputs: token, optional grid, optional class bank."""

    cls: np.ndarray                       # (d_c,)
    d_c: int
    teacher: str = "synthetic"
    grid: np.ndarray | None = None        # (H, W, d_c)
    class_embeddings: np.ndarray | None = None  # (n_classes, d_c)
    class_names: tuple[str, ...] | None = None

    @property
    def bank(self):
        if self.class_embeddings is None:
            return None
        from apm.ttt import ClassBank

        return ClassBank(self.class_embeddings, self.class_names)


def save_bundle(outdir: str, bundle: DistilledBundle) -> None:
    os.makedirs(outdir, exist_ok=True)
    write_tensor(os.path.join(outdir, "cls.apmt"), bundle.cls.reshape(1, -1))
    if bundle.grid is not None:
        write_tensor(os.path.join(outdir, "grid.apmt"), bundle.grid)
    if bundle.class_embeddings is not None:
        write_tensor(os.path.join(outdir, "classes.apmt"), bundle.class_embeddings)
        _atomic_write(
            os.path.join(outdir, "classes.json"),
            json.dumps(list(bundle.class_names), indent=0).encode(),
        )
    meta = {"d_c": bundle.d_c, "teacher": bundle.teacher}
    _atomic_write(os.path.join(outdir, "meta.json"), json.dumps(meta, sort_keys=True).encode())


def load_bundle(bundle_dir: str) -> DistilledBundle:
    """Read and cross-validate a bundle directory."""
    meta_path = os.path.join(bundle_dir, "meta.json")
    if not os.path.isfile(meta_path):
        raise BundleError(f"{bundle_dir}: missing meta.json")
    with open(meta_path, "rb") as fh:
        meta = json.loads(fh.read())
    d_c = int(meta["d_c"])
    teacher = str(meta.get("teacher", "unknown"))

    cls_t = read_tensor(os.path.join(bundle_dir, "cls.apmt"))
    cls = cls_t.data
    if cls.size != d_c:
        raise BundleError(f"{bundle_dir}: cls has {cls.size} entries, meta says d_c={d_c}")

    grid = None
    grid_path = os.path.join(bundle_dir, "grid.apmt")
    if os.path.isfile(grid_path):
        g = read_tensor(grid_path)
        if len(g.shape) != 3 or g.shape[2] != d_c:
            raise BundleError(f"{grid_path}: shape {tuple(g.shape)} not (H, W, {d_c})")
        grid = g.nd()

    class_embeddings = None
    class_names = None
    classes_path = os.path.join(bundle_dir, "classes.apmt")
    if os.path.isfile(classes_path):
        ce = read_tensor(classes_path)
        if len(ce.shape) != 2 or ce.shape[1] != d_c:
            raise BundleError(f"{classes_path}: shape {tuple(ce.shape)} not (n, {d_c})")
        names_path = os.path.join(bundle_dir, "classes.json")
        if not os.path.isfile(names_path):
            raise BundleError(f"{bundle_dir}: classes.apmt present but classes.json missing")
        with open(names_path, "rb") as fh:
            names = json.loads(fh.read())
        if len(names) != ce.shape[0]:
            raise BundleError(
                f"{bundle_dir}: {ce.shape[0]} class rows but {len(names)} labels"
            )
        class_embeddings = ce.nd()
        class_names = tuple(str(n) for n in names)

    return DistilledBundle(cls.copy(), d_c, teacher, grid, class_embeddings, class_names)


# ---------------------------------------------------------------------------
# Checkpoints

def _step_to_limbs(step: int) -> np.ndarray:
    """u64 -> four 16-bit limbs (little-limb first); each is f32-exact."""
    if step < 0 or step >= 2**64:
        raise ValueError(f"step {step} outside u64 range")
    return np.array([(step >> (16 * i)) & 0xFFFF for i in range(4)], dtype=np.float64)


def _limbs_to_step(limbs: np.ndarray) -> int:
    return sum(int(limbs[i]) << (16 * i) for i in range(4))


def save_checkpoint(path: str, params, adam, step: int | None = None) -> None:
    """All parameter and Adam-moment tensors plus the step counter.

    Layout: "APMC", u32 entry count, then per entry a u16 name length, the
    UTF-8 name, and an embedded tensor file. The step counter is the entry
    named "step", stored as four 16-bit limbs so any u64 round-trips exactly.
    """
    if step is None:
        step = adam.t
    entries: list[tuple[str, np.ndarray]] = list(params.named_arrays())
    entries += [(f"adam.m.{name}", a) for name, a in adam.m.items()]
    entries += [(f"adam.v.{name}", a) for name, a in adam.v.items()]
    entries.append((STEP_ENTRY, _step_to_limbs(step)))
    blob = bytearray(CHECKPOINT_MAGIC)
    blob += struct.pack("<I", len(entries))
    for name, arr in entries:
        nb = name.encode()
        blob += struct.pack("<H", len(nb)) + nb + tensor_to_bytes(arr)
    _atomic_write(path, bytes(blob))


def load_checkpoint(path: str) -> tuple[dict[str, Tensor], int]:
    """Raw name -> tensor map plus the decoded step counter."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4 or buf[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint file")
    if len(buf) < 8:
        raise TruncatedFileError(f"{path}: truncated entry count")
    (count,) = struct.unpack_from("<I", buf, 4)
    off = 8
    out: dict[str, Tensor] = {}
    for _ in range(count):
        if len(buf) - off < 2:
            raise TruncatedFileError(f"{path}: truncated entry name length")
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        if len(buf) - off < nlen:
            raise TruncatedFileError(f"{path}: truncated entry name")
        name = buf[off : off + nlen].decode()
        off += nlen
        t, off = _tensor_from_stream(buf, off, f"{path}:{name}")
        out[name] = t
    if off != len(buf):
        raise TruncatedFileError(f"{path}: {len(buf) - off} trailing bytes")
    if STEP_ENTRY not in out:
        raise IncompatibleCheckpointError(f"{path}: missing step counter entry")
    step = _limbs_to_step(out[STEP_ENTRY].data)
    return out, step


def bind_checkpoint(raw: dict[str, Tensor], step: int, spec):
    """Marry raw checkpoint tensors to an architecture.

    Raises IncompatibleCheckpointError on unknown, missing, or wrongly shaped
    tensor names.
    """
    from apm.grad import AdamState
    from apm.net import ApmParams, zeros_params

    template = zeros_params(spec)
    expected = {name: a.shape for name, a in template.named_arrays()}
    all_expected = set(expected)
    all_expected |= {f"adam.m.{n}" for n in expected}
    all_expected |= {f"adam.v.{n}" for n in expected}
    all_expected.add(STEP_ENTRY)
    unknown = set(raw) - all_expected
    if unknown:
        raise IncompatibleCheckpointError(f"unknown tensor name(s): {sorted(unknown)}")
    missing = all_expected - set(raw)
    if missing:
        raise IncompatibleCheckpointError(f"missing tensor name(s): {sorted(missing)}")

    def take(name, shape):
        t = raw[name]
        if tuple(t.shape) != tuple(shape):
            raise IncompatibleCheckpointError(
                f"{name}: shape {tuple(t.shape)} != expected {tuple(shape)}"
            )
        return t.nd().copy()

    params = ApmParams(
        spec,
        take("conv_kernel", template.conv_kernel.shape),
        [
            (take(f"decoder.{i}.weight", w.shape), take(f"decoder.{i}.bias", b.shape))
            for i, (w, b) in enumerate(template.decoder)
        ],
        (
            take("feature_head.weight", template.feature_head[0].shape),
            take("feature_head.bias", template.feature_head[1].shape),
        ),
        None
        if template.rgb_head is None
        else [
            (take(f"rgb_head.{i}.weight", w.shape), take(f"rgb_head.{i}.bias", b.shape))
            for i, (w, b) in enumerate(template.rgb_head)
        ],
    )
    adam = AdamState(
        {n: take(f"adam.m.{n}", s) for n, s in expected.items()},
        {n: take(f"adam.v.{n}", s) for n, s in expected.items()},
        t=step,
    )
    return params, adam, step
