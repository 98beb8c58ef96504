import os
import struct

import numpy as np
import pytest

from apm.errors import (
    BadMagicError,
    BundleError,
    IncompatibleCheckpointError,
    TruncatedFileError,
    UnsupportedFormatError,
    VersionMismatchError,
)
from apm.grad import AdamState
from apm.net import init_params
from apm.teacher_io import (
    DistilledBundle,
    bind_checkpoint,
    denormalize_image,
    load_bundle,
    load_checkpoint,
    normalize_image,
    read_ppm,
    read_tensor,
    save_bundle,
    save_checkpoint,
    tensor_to_bytes,
    write_ppm,
    write_tensor,
)
from apm.tensor import SeededRng, Tensor

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "golden")


class TestTensorFile:
    def test_round_trip(self, tmp_path):
        p = str(tmp_path / "t.apmt")
        write_tensor(p, Tensor([1.0, 2.0, 3.0]))
        assert read_tensor(p).tolist() == [1.0, 2.0, 3.0]

    def test_round_trip_is_f32_exact(self, tmp_path):
        p = str(tmp_path / "t.apmt")
        a = SeededRng(1).fill_gaussian(64, 0, 1).reshape(8, 8)
        write_tensor(p, Tensor(a))
        back = read_tensor(p)
        assert np.array_equal(back.nd(), a.astype(np.float32).astype(np.float64))

    def test_bad_magic(self, tmp_path):
        p = str(tmp_path / "bad.apmt")
        with open(p, "wb") as fh:
            fh.write(b"XXXX" + b"\0" * 20)
        with pytest.raises(BadMagicError):
            read_tensor(p)

    def test_version_mismatch(self, tmp_path):
        p = str(tmp_path / "v9.apmt")
        with open(p, "wb") as fh:
            fh.write(b"APMT" + struct.pack("<II", 9, 1) + struct.pack("<I", 1) + b"\0" * 4)
        with pytest.raises(VersionMismatchError):
            read_tensor(p)

    def test_truncated_payload(self, tmp_path):
        p = str(tmp_path / "t.apmt")
        write_tensor(p, Tensor([1.0, 2.0, 3.0]))
        blob = open(p, "rb").read()
        with open(p, "wb") as fh:
            fh.write(blob[:-2])
        with pytest.raises(TruncatedFileError):
            read_tensor(p)

    def test_trailing_bytes_rejected(self, tmp_path):
        p = str(tmp_path / "t.apmt")
        write_tensor(p, Tensor([1.0]))
        with open(p, "ab") as fh:
            fh.write(b"\0\0")
        with pytest.raises(TruncatedFileError):
            read_tensor(p)

    def test_2x3_file_size_is_44_bytes(self, tmp_path):
        p = str(tmp_path / "t.apmt")
        write_tensor(p, Tensor(np.arange(6.0).reshape(2, 3)))
        # 4 magic + 4 version + 4 ndims + 8 dims + 24 payload
        assert os.path.getsize(p) == 44

    def test_golden_bytes_pinned(self):
        """Endianness and layout pin: stored fixture must parse and re-serialize
        to identical bytes."""
        p = os.path.join(GOLDEN_DIR, "vec_1x3.apmt")
        t = read_tensor(p)
        assert tuple(t.shape) == (1, 3)
        assert t.data.tolist() == [1.5, -2.0, 3.25]
        assert tensor_to_bytes(t) == open(p, "rb").read()


class TestPpm:
    def test_white_pixel(self, tmp_path):
        p = str(tmp_path / "w.ppm")
        with open(p, "wb") as fh:
            fh.write(b"P6\n1 1\n255\n\xff\xff\xff")
        t = read_ppm(p)
        assert t.nd().shape == (3, 1, 1)
        assert t.data.tolist() == [1.0, 1.0, 1.0]

    def test_round_trip_byte_identical(self, tmp_path):
        rng = SeededRng(4)
        raw = (np.abs(rng.fill_gaussian(3 * 6 * 5, 0, 1)) * 255 % 256).astype(np.uint8)
        src = str(tmp_path / "src.ppm")
        with open(src, "wb") as fh:
            fh.write(b"P6\n5 6\n255\n" + raw.tobytes())
        dst = str(tmp_path / "dst.ppm")
        write_ppm(dst, read_ppm(src))
        assert open(src, "rb").read() == open(dst, "rb").read()

    def test_gradient_hand_values(self, tmp_path):
        p = str(tmp_path / "g.ppm")
        payload = bytes([0, 0, 0, 51, 51, 51, 102, 102, 102, 255, 255, 255])
        with open(p, "wb") as fh:
            fh.write(b"P6\n2 2\n255\n" + payload)
        t = read_ppm(p).nd()
        assert t[0, 0, 0] == 0.0
        assert t[0, 0, 1] == 51 / 255
        assert t[0, 1, 0] == 102 / 255
        assert t[0, 1, 1] == 1.0

    def test_comments_in_header(self, tmp_path):
        p = str(tmp_path / "c.ppm")
        with open(p, "wb") as fh:
            fh.write(b"P6\n# a comment\n1 1\n# again\n255\n\x00\x80\xff")
        t = read_ppm(p)
        assert t.data.tolist() == [0.0, 128 / 255, 1.0]

    def test_non_p6_rejected(self, tmp_path):
        p = str(tmp_path / "p3.ppm")
        with open(p, "wb") as fh:
            fh.write(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(UnsupportedFormatError):
            read_ppm(p)

    def test_wrong_maxval_rejected(self, tmp_path):
        p = str(tmp_path / "m.ppm")
        with open(p, "wb") as fh:
            fh.write(b"P6\n1 1\n65535\n\0\0\0\0\0\0")
        with pytest.raises(UnsupportedFormatError):
            read_ppm(p)

    def test_truncated_pixels(self, tmp_path):
        p = str(tmp_path / "t.ppm")
        with open(p, "wb") as fh:
            fh.write(b"P6\n2 2\n255\n\xff")
        with pytest.raises(TruncatedFileError):
            read_ppm(p)

    def test_write_quantization_error_bound(self, tmp_path):
        rng = SeededRng(5)
        img = np.clip(rng.fill_gaussian(3 * 4 * 4, 0.5, 0.3).reshape(3, 4, 4), 0, 1)
        p = str(tmp_path / "q.ppm")
        write_ppm(p, Tensor(img))
        back = read_ppm(p).nd()
        assert np.max(np.abs(back - img)) <= 1.0 / 510 + 1e-12


class TestNormalize:
    def test_mean_maps_to_zero(self):
        px = np.array([0.485, 0.456, 0.406]).reshape(3, 1, 1)
        out = normalize_image(Tensor(px)).nd()
        assert np.allclose(out, 0.0, atol=1e-15)

    def test_one_sigma(self):
        px = np.zeros((3, 1, 1))
        px[0, 0, 0] = 0.714
        out = normalize_image(Tensor(px)).nd()
        assert out[0, 0, 0] == pytest.approx((0.714 - 0.485) / 0.229, abs=1e-12)
        assert out[0, 0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_inverse(self):
        rng = SeededRng(6)
        img = np.clip(rng.fill_gaussian(3 * 8, 0.5, 0.2).reshape(3, 4, 2), 0, 1)
        back = denormalize_image(normalize_image(Tensor(img))).nd()
        assert np.max(np.abs(back - img)) < 1e-12


class TestBundle:
    def test_round_trip(self, tmp_path):
        rng = SeededRng(7)
        cls = rng.fill_gaussian(8, 0, 1)
        grid = rng.fill_gaussian(2 * 3 * 8, 0, 1).reshape(2, 3, 8)
        bank = rng.fill_gaussian(4 * 8, 0, 1).reshape(4, 8)
        d = str(tmp_path / "b")
        save_bundle(d, DistilledBundle(cls, 8, "synthetic", grid, bank, ("a", "b", "c", "d")))
        back = load_bundle(d)
        assert back.d_c == 8
        assert np.array_equal(back.cls, cls.astype(np.float32).astype(np.float64))
        assert back.grid.shape == (2, 3, 8)
        assert back.class_names == ("a", "b", "c", "d")
        assert back.bank is not None

    def test_missing_meta(self, tmp_path):
        with pytest.raises(BundleError):
            load_bundle(str(tmp_path))

    def test_label_count_mismatch(self, tmp_path):
        rng = SeededRng(8)
        d = str(tmp_path / "b")
        save_bundle(
            d,
            DistilledBundle(
                rng.fill_gaussian(4, 0, 1), 4, "synthetic", None,
                rng.fill_gaussian(12, 0, 1).reshape(3, 4), ("x", "y", "z"),
            ),
        )
        with open(os.path.join(d, "classes.json"), "w") as fh:
            fh.write('["x", "y"]')
        with pytest.raises(BundleError):
            load_bundle(d)

    def test_dim_inconsistency(self, tmp_path):
        rng = SeededRng(9)
        d = str(tmp_path / "b")
        save_bundle(d, DistilledBundle(rng.fill_gaussian(4, 0, 1), 4))
        write_tensor(os.path.join(d, "grid.apmt"), Tensor(np.zeros((2, 2, 5))))
        with pytest.raises(BundleError):
            load_bundle(d)


class TestCheckpoint:
    def test_round_trip_bitwise_at_f32(self, tiny_model, tmp_path):
        params = init_params(tiny_model.arch, 3)
        adam = AdamState.init(params)
        rng = SeededRng(10)
        for name in adam.m:
            adam.m[name][...] = rng.fill_gaussian(adam.m[name].size, 0, 1).reshape(adam.m[name].shape)
        p = str(tmp_path / "c.apmc")
        save_checkpoint(p, params, adam, step=7)
        raw, step = load_checkpoint(p)
        assert step == 7
        params2, adam2, _ = bind_checkpoint(raw, step, tiny_model.arch)
        for (n1, a), (n2, b) in zip(params.named_arrays(), params2.named_arrays()):
            assert np.array_equal(a.astype(np.float32).astype(np.float64), b), n1
        for name in adam.m:
            assert np.array_equal(
                adam.m[name].astype(np.float32).astype(np.float64), adam2.m[name]
            )
        assert adam2.t == 7
        # a second save of the loaded state is byte-identical (quantization fixpoint)
        p2 = str(tmp_path / "c2.apmc")
        save_checkpoint(p2, params2, adam2, step=7)
        raw2, _ = load_checkpoint(p2)
        params3, _, _ = bind_checkpoint(raw2, 7, tiny_model.arch)
        for (_, a), (_, b) in zip(params2.named_arrays(), params3.named_arrays()):
            assert np.array_equal(a, b)

    def test_entry_count_is_3p_plus_1(self, tiny_model, tmp_path):
        params = init_params(tiny_model.arch, 1)
        adam = AdamState.init(params)
        p = str(tmp_path / "c.apmc")
        save_checkpoint(p, params, adam)
        raw, _ = load_checkpoint(p)
        n_param_tensors = len(params.named_arrays())
        assert len(raw) == 3 * n_param_tensors + 1

    def test_step_limbs_round_trip_large(self, tiny_model, tmp_path):
        params = init_params(tiny_model.arch, 1)
        adam = AdamState.init(params)
        p = str(tmp_path / "c.apmc")
        big = (1 << 40) + 12345
        save_checkpoint(p, params, adam, step=big)
        _, step = load_checkpoint(p)
        assert step == big

    def test_truncated(self, tiny_model, tmp_path):
        params = init_params(tiny_model.arch, 1)
        p = str(tmp_path / "c.apmc")
        save_checkpoint(p, params, AdamState.init(params))
        blob = open(p, "rb").read()
        with open(p, "wb") as fh:
            fh.write(blob[: len(blob) // 2])
        with pytest.raises(TruncatedFileError):
            load_checkpoint(p)

    def test_unknown_tensor_name(self, tiny_model, desk_model, tmp_path):
        params = init_params(tiny_model.arch, 1)
        p = str(tmp_path / "c.apmc")
        save_checkpoint(p, params, AdamState.init(params))
        raw, step = load_checkpoint(p)
        with pytest.raises(IncompatibleCheckpointError):
            bind_checkpoint(raw, step, desk_model.arch)

    def test_bad_magic(self, tmp_path):
        p = str(tmp_path / "c.apmc")
        with open(p, "wb") as fh:
            fh.write(b"NOPE\0\0\0\0")
        with pytest.raises(BadMagicError):
            load_checkpoint(p)
