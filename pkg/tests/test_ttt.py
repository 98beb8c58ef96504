import hashlib
import math
import os

import numpy as np
import pytest

from apm.config import ModelConfig
from apm.encoder import EncoderConfig
from apm.errors import DegenerateInputError, DimensionError
from apm.net import ArchSpec, init_params, trace_gauge
from apm.teacher_io import DistilledBundle, load_bundle, save_bundle
from apm.tensor import SeededRng, Tensor
from apm.ttt import (
    ClassBank,
    RunningAverage,
    TttConfig,
    classify,
    run_ttt,
    ttt_loss,
    update_running_average,
)
from conftest import orthonormal_bank, rand_image


class TestRunningAverage:
    def test_first_sample(self):
        ra = RunningAverage().update(np.array([2.0, 4.0]))
        assert ra.n == 1
        assert ra.value.tolist() == [2.0, 4.0]

    def test_mean_of_two(self):
        ra = RunningAverage()
        for x in ([2.0], [4.0]):
            ra = update_running_average(ra, np.array(x))
        assert ra.value.tolist() == [3.0]

    def test_streaming_matches_batch_mean(self):
        rng = SeededRng(1000)
        vecs = [rng.fill_gaussian(16, 0, 1) for _ in range(1000)]
        ra = RunningAverage()
        for v in vecs:
            ra = ra.update(v)
        batch = np.array([math.fsum(v[k] for v in vecs) / len(vecs) for k in range(16)])
        rel = np.abs(ra.value - batch) / np.maximum(np.abs(batch), 1e-30)
        assert rel.max() < 1e-12

    def test_empty_read_raises(self):
        with pytest.raises(DegenerateInputError):
            RunningAverage().value

    def test_dim_mismatch(self):
        ra = RunningAverage().update(np.zeros(3))
        with pytest.raises(DimensionError):
            ra.update(np.zeros(4))


class TestTttLoss:
    def test_zero_iff_equal(self):
        x = SeededRng(1).fill_gaussian(8, 0, 1)
        assert ttt_loss(x, x) == 0.0

    def test_three_four_five(self):
        assert ttt_loss(np.array([0.0, 0.0]), np.array([3.0, 4.0])) == 12.5

    def test_symmetric(self):
        a = SeededRng(2).fill_gaussian(6, 0, 1)
        b = SeededRng(3).fill_gaussian(6, 0, 1)
        assert ttt_loss(a, b) == ttt_loss(b, a)

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            ttt_loss(np.zeros(3), np.zeros(4))


class TestClassify:
    def test_exact_row(self):
        bank = ClassBank(np.eye(5), tuple(f"c{i}" for i in range(5)))
        idx, scores = classify(np.eye(5)[3], bank)
        assert idx == 3
        assert scores[3] == pytest.approx(1.0, abs=1e-15)

    def test_scale_invariance(self):
        bank = ClassBank(orthonormal_bank(4, 8, 1), tuple("abcd"))
        v = SeededRng(2).fill_gaussian(8, 0, 1)
        i1, s1 = classify(v, bank)
        i2, s2 = classify(7.5 * v, bank)
        assert i1 == i2
        assert np.allclose(s1, s2, rtol=0, atol=1e-12)

    def test_unit_geometry(self):
        bank = ClassBank(np.array([[1.0, 0.0], [0.0, 1.0]]), ("a", "b"))
        idx, scores = classify(np.array([0.6, 0.8]), bank)
        assert idx == 1
        assert scores.tolist() == pytest.approx([0.6, 0.8], abs=1e-15)

    def test_tie_break_lowest_index(self):
        bank = ClassBank(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), ("a", "b", "c"))
        idx, _ = classify(np.array([2.0, 0.0]), bank)
        assert idx == 0

    def test_duplicates_after_argmax_harmless(self):
        base = orthonormal_bank(3, 8, 4)
        v = base[1] * 2.0
        i1, _ = classify(v, ClassBank(base, ("a", "b", "c")))
        dup = np.vstack([base, base[0]])
        i2, _ = classify(v, ClassBank(dup, ("a", "b", "c", "a2")))
        assert i1 == i2 == 1

    def test_zero_norm_raises(self):
        bank = ClassBank(np.eye(3), ("a", "b", "c"))
        with pytest.raises(DegenerateInputError):
            classify(np.zeros(3), bank)

    def test_bank_validation(self):
        with pytest.raises(DimensionError):
            ClassBank(np.eye(3), ("a", "b"))
        with pytest.raises(DegenerateInputError):
            ClassBank(np.array([[1.0, 0.0], [0.0, 0.0]]), ("a", "b"))


def one_cell_model() -> ModelConfig:
    enc = EncoderConfig(4, 4, 3, 4, 4, num_kernels=4, positional_dim=4)
    arch = ArchSpec(enc.query_dim, (6,), 3, conv_kernels=4, conv_channels=3, conv_size=4)
    return ModelConfig(enc, arch)


class TestRunTtt:
    def test_fixed_point_single_cell(self):
        """Target equal to the net's own first output: zero loss, no movement."""
        from apm.encoder import encode_trigger, field_for, query_at
        from apm.net import forward_column
        from apm.teacher_io import normalize_image

        model = one_cell_model()
        image = Tensor(rand_image(21, 3, 4, 4))
        seed = 5
        params0 = init_params(model.arch, seed)
        norm = normalize_image(image)
        T = encode_trigger(norm, Tensor.wrap(params0.conv_kernel), model.encoder)
        f, trace = forward_column(params0, query_at(T, field_for(model.encoder), 0, 0))
        trace.release()

        bundle = DistilledBundle(f.data.copy(), 3)
        rep = run_ttt(image, bundle, TttConfig(iterations=1, seed=seed), model)
        assert rep.losses == [0.0]
        for (_, a), (_, b) in zip(params0.named_arrays(), rep.final_params.named_arrays()):
            assert np.array_equal(a, b)

    def test_bitwise_determinism(self, desk_model):
        image = Tensor(rand_image(31))
        bundle = DistilledBundle(SeededRng(8).fill_gaussian(16, 0, 1), 16)
        cfg = TttConfig(iterations=4, seed=42)
        r1 = run_ttt(image, bundle, cfg, desk_model)
        r2 = run_ttt(image, bundle, cfg, desk_model)
        assert r1.losses == r2.losses
        assert r1.column_losses == r2.column_losses
        assert np.array_equal(r1.final_favg, r2.final_favg)
        for (_, a), (_, b) in zip(r1.final_params.named_arrays(), r2.final_params.named_arrays()):
            assert np.array_equal(a, b)

    def test_worker_count_invariance(self, desk_model):
        image = Tensor(rand_image(32))
        bundle = DistilledBundle(SeededRng(9).fill_gaussian(16, 0, 1), 16)
        r1 = run_ttt(image, bundle, TttConfig(iterations=3, workers=1), desk_model)
        r4 = run_ttt(image, bundle, TttConfig(iterations=3, workers=4), desk_model)
        assert r1.losses == r4.losses
        for (_, a), (_, b) in zip(r1.final_params.named_arrays(), r4.final_params.named_arrays()):
            assert np.array_equal(a, b)

    def test_trace_memory_bounded_by_workers(self, desk_model):
        image = Tensor(rand_image(33))
        bundle = DistilledBundle(SeededRng(10).fill_gaussian(16, 0, 1), 16)
        for workers in (1, 3):
            trace_gauge.reset()
            run_ttt(image, bundle, TttConfig(iterations=1, workers=workers), desk_model)
            assert trace_gauge.peak <= workers
            assert trace_gauge.current == 0
        trace_gauge.reset()
        run_ttt(image, bundle, TttConfig(iterations=1, workers=1), desk_model)
        assert trace_gauge.peak == 1

    def test_teacher_consulted_once(self, desk_model, tmp_path):
        image = Tensor(rand_image(34))
        bank = orthonormal_bank(4, 16, 11)
        cls = bank[2] + SeededRng(12).fill_gaussian(16, 0, 0.005)
        bundle_dir = str(tmp_path / "bundle")
        save_bundle(
            bundle_dir,
            DistilledBundle(cls, 16, "synthetic", None, bank, tuple("abcd")),
        )
        bundle = load_bundle(bundle_dir)
        hashes_before = {
            f: hashlib.sha256(open(os.path.join(bundle_dir, f), "rb").read()).hexdigest()
            for f in sorted(os.listdir(bundle_dir))
        }
        cls_bytes_before = bundle.cls.tobytes()
        rep = run_ttt(image, bundle, TttConfig(iterations=5), desk_model)
        hashes_after = {
            f: hashlib.sha256(open(os.path.join(bundle_dir, f), "rb").read()).hexdigest()
            for f in sorted(os.listdir(bundle_dir))
        }
        assert hashes_before == hashes_after
        assert bundle.cls.tobytes() == cls_bytes_before
        assert rep.predicted_index is not None

    def test_grid_target_mode(self, desk_model):
        image = Tensor(rand_image(35))
        rng = SeededRng(13)
        grid = rng.fill_gaussian(8 * 8 * 16, 0, 0.3).reshape(8, 8, 16)
        cls = grid.reshape(-1, 16).mean(axis=0)
        bundle = DistilledBundle(cls, 16, "synthetic", grid)
        rep = run_ttt(image, bundle, TttConfig(iterations=30, loss_mode="grid"), desk_model)
        assert all(np.isfinite(l) for l in rep.losses)
        assert rep.column_losses[-1] < rep.column_losses[0]

    def test_grid_mode_requires_grid(self, desk_model):
        bundle = DistilledBundle(np.ones(16), 16)
        with pytest.raises(DimensionError):
            run_ttt(Tensor(rand_image(36)), bundle, TttConfig(loss_mode="grid"), desk_model)

    def test_dc_mismatch(self, desk_model):
        bundle = DistilledBundle(np.ones(8), 8)
        with pytest.raises(DimensionError):
            run_ttt(Tensor(rand_image(37)), bundle, TttConfig(), desk_model)

    def test_abort_on_non_finite(self, desk_model):
        target = np.full(16, np.inf)
        bundle = DistilledBundle(target, 16)
        rep = run_ttt(Tensor(rand_image(38)), bundle, TttConfig(iterations=5), desk_model)
        assert rep.aborted
        assert rep.iterations_run == 0
        assert len(rep.losses) == 1

    def test_loss_decreases(self, desk_model):
        image = Tensor(rand_image(39))
        bundle = DistilledBundle(SeededRng(14).fill_gaussian(16, 0, 0.5), 16)
        rep = run_ttt(image, bundle, TttConfig(iterations=200), desk_model)
        assert rep.losses[-1] < rep.losses[0] / 50.0

    def test_reinit_flag(self, desk_model):
        image = Tensor(rand_image(40))
        bundle = DistilledBundle(SeededRng(15).fill_gaussian(16, 0, 0.3), 16)
        p0 = init_params(desk_model.arch, 42)
        # reinit off + explicit params: adaptation continues from them
        r = run_ttt(
            image, bundle, TttConfig(iterations=2, reinit_per_sample=False), desk_model, params=p0
        )
        r2 = run_ttt(
            image,
            bundle,
            TttConfig(iterations=2, reinit_per_sample=False),
            desk_model,
            params=r.final_params,
        )
        assert r2.losses[0] < r.losses[0]

    def test_patch_injection_model(self):
        enc = EncoderConfig(8, 8, 3, 4, 4, num_kernels=1, positional_dim=8, inject_patch=True)
        arch = ArchSpec(enc.query_dim, (10, 8), 4, conv_kernels=1, conv_channels=3, conv_size=4)
        model = ModelConfig(enc, arch)
        assert arch.input_dim == 4 + 8 + 48
        bundle = DistilledBundle(SeededRng(16).fill_gaussian(4, 0, 0.3), 4)
        rep = run_ttt(Tensor(rand_image(41, 3, 8, 8)), bundle, TttConfig(iterations=10), model)
        assert rep.iterations_run == 10
        assert rep.losses[-1] < rep.losses[0]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TttConfig(iterations=0)
        with pytest.raises(ValueError):
            TttConfig(lr=0.0)
        with pytest.raises(ValueError):
            TttConfig(loss_mode="nope")
