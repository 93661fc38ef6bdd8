from __future__ import annotations

import numpy as np
import pytest
import torch

from stmt import CheckpointError
from stmt.nets import (
    ModelHandle,
    NetSpec,
    ParamVector,
    build_model,
    ema_update,
    forward,
    load_checkpoint,
    save_checkpoint,
)


def expected_param_count(spec: NetSpec) -> int:
    """Layer-by-layer arithmetic, independent of torch."""

    def ch(i):
        return min(spec.base_channels * 2**i, spec.max_channels)

    def res_block(cin, cout):
        n = 27 * cin * cout + cout  # conv1
        n += 2 * cout  # instance norm affine
        n += 27 * cout * cout + cout  # conv2
        n += 2 * cout
        if cin != cout:
            n += cin * cout + cout  # 1x1x1 skip projection
        return n

    def stage(cin, cout):
        return res_block(cin, cout) + (spec.blocks_per_scale - 1) * res_block(cout, cout)

    total = stage(spec.in_channels, ch(0))
    for i in range(1, spec.num_scales + 1):
        total += 27 * ch(i - 1) * ch(i) + ch(i)  # strided conv
        total += 2 * ch(i)  # norm
        total += stage(ch(i), ch(i))
    for i in range(spec.num_scales, 0, -1):
        total += 8 * ch(i) * ch(i - 1) + ch(i - 1)  # transposed conv, kernel 2
        total += stage(2 * ch(i - 1), ch(i - 1))
    total += ch(0) * spec.num_classes + spec.num_classes  # head
    return total


SMALL = NetSpec(num_classes=3, base_channels=4, num_scales=2)


class TestBuild:
    def test_same_seed_identical_parameters(self):
        a = build_model(SMALL, seed=5)
        b = build_model(SMALL, seed=5)
        assert a.parameters_vector().equal(b.parameters_vector())

    def test_different_seed_differs(self):
        a = build_model(SMALL, seed=5)
        b = build_model(SMALL, seed=6)
        assert not a.parameters_vector().equal(b.parameters_vector())

    def test_param_count_matches_arithmetic_full_profile(self):
        spec = NetSpec(num_classes=15, base_channels=16, num_scales=5)
        model = build_model(spec, 0)
        count = sum(p.numel() for p in model.module.parameters())
        assert count == expected_param_count(spec)

    @pytest.mark.parametrize("spec", [
        SMALL,
        NetSpec(num_classes=2, base_channels=8, num_scales=3),
        NetSpec(num_classes=5, base_channels=8, num_scales=3, blocks_per_scale=2),
        NetSpec(num_classes=2, base_channels=4, num_scales=1),
    ])
    def test_param_count_matches_arithmetic(self, spec):
        model = build_model(spec, 0)
        count = sum(p.numel() for p in model.module.parameters())
        assert count == expected_param_count(spec)

    def test_degenerate_depth_builds_and_runs(self):
        spec = NetSpec(num_classes=2, base_channels=4, num_scales=1)
        model = build_model(spec, 0)
        out = forward(model, np.zeros((6, 6, 6), dtype=np.float32))
        assert out.shape == (2, 6, 6, 6)

    def test_invalid_spec_rejected(self):
        with pytest.raises(ValueError):
            NetSpec(num_classes=1)
        with pytest.raises(ValueError):
            NetSpec(num_scales=0)


class TestForward:
    def test_zero_head_gives_uniform_softmax(self):
        model = build_model(SMALL, 0)
        with torch.no_grad():
            model.module.head.weight.zero_()
            model.module.head.bias.zero_()
        logits = forward(model, np.random.default_rng(0).normal(size=(8, 8, 8)).astype(np.float32))
        probs = np.exp(logits) / np.exp(logits).sum(axis=0, keepdims=True)
        np.testing.assert_allclose(probs, 1.0 / 3.0, atol=1e-6)

    @pytest.mark.parametrize("shape", [(8, 8, 8), (24, 24, 24), (11, 9, 13), (5, 16, 7)])
    def test_output_shape_equals_input_shape(self, shape):
        model = build_model(SMALL, 1)
        data = np.random.default_rng(1).normal(size=shape).astype(np.float32)
        out = forward(model, data)
        assert out.shape == (3, *shape)
        assert np.isfinite(out).all()

    def test_nonfinite_input_rejected(self):
        model = build_model(SMALL, 0)
        bad = np.zeros((8, 8, 8), dtype=np.float32)
        bad[0, 0, 0] = np.inf
        with pytest.raises(ValueError):
            forward(model, bad)

    def test_eval_forward_is_bitwise_deterministic(self):
        model = build_model(SMALL, 3)
        data = np.random.default_rng(3).normal(size=(12, 12, 12)).astype(np.float32)
        a = forward(model, data)
        b = forward(model, data)
        assert a.tobytes() == b.tobytes()

    def test_translation_moves_argmax_region(self):
        spec = NetSpec(num_classes=3, base_channels=8, num_scales=3)
        model = build_model(spec, 42)

        def blob(center, shape=(32, 32, 32)):
            zz, yy, xx = np.indices(shape, dtype=np.float64)
            d2 = (zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2
            return (np.exp(-d2 / 18.0) * 3.0).astype(np.float32)

        shift = 8  # one full downsampling stride
        a1 = np.argmax(forward(model, blob((12, 12, 12))), axis=0)
        a2 = np.argmax(forward(model, blob((12, 12, 20))), axis=0)
        rolled = np.roll(a1, shift, axis=2)
        interior = (slice(4, 28), slice(4, 28), slice(12, 28))
        agreement = float((a2[interior] == rolled[interior]).mean())
        assert agreement >= 0.90


def pv(arrays: dict[str, np.ndarray]) -> ParamVector:
    return ParamVector({k: torch.from_numpy(np.asarray(v, dtype=np.float64)) for k, v in arrays.items()})


class TestEma:
    def test_alpha_one_keeps_teacher(self):
        t = pv({"w": [1.0, 2.0], "b": [[3.0]]})
        s = pv({"w": [9.0, 9.0], "b": [[9.0]]})
        assert ema_update(t, s, 1.0).equal(t)

    def test_alpha_zero_copies_student(self):
        t = pv({"w": [1.0, 2.0]})
        s = pv({"w": [9.0, 8.0]})
        assert ema_update(t, s, 0.0).equal(s)

    @pytest.mark.parametrize("alpha", [0.0, 0.5, 0.99, 1.0])
    @pytest.mark.parametrize("n", [1, 10, 100])
    def test_closed_form_geometric_series(self, alpha, n):
        theta0 = np.array([0.3, -1.7, 2.5], dtype=np.float64)
        theta = np.array([1.1, 0.4, -0.9], dtype=np.float64)
        teacher = pv({"w": theta0})
        student = pv({"w": theta})
        for _ in range(n):
            teacher = ema_update(teacher, student, alpha)
        expected = theta0 * alpha**n + theta * (1.0 - alpha**n)
        got = dict(teacher.items())["w"].numpy()
        np.testing.assert_allclose(got, expected, atol=1e-6)

    def test_fixpoint(self):
        t = pv({"w": [0.5, -0.25]})
        assert ema_update(t, t, 0.77).equal(t)

    def test_linearity(self):
        t = pv({"w": [1.0, 2.0]})
        s = pv({"w": [3.0, 6.0]})
        out = ema_update(t, s, 0.25)
        np.testing.assert_allclose(dict(out.items())["w"].numpy(), [2.5, 5.0])

    def test_misaligned_rejected(self):
        with pytest.raises(ValueError):
            ema_update(pv({"w": [1.0]}), pv({"v": [1.0]}), 0.5)
        with pytest.raises(ValueError):
            ema_update(pv({"w": [1.0]}), pv({"w": [1.0, 2.0]}), 0.5)

    def test_invalid_decay_rejected(self):
        t = pv({"w": [1.0]})
        with pytest.raises(ValueError):
            ema_update(t, t, 1.5)


class TestCheckpoints:
    def test_round_trip_bit_exact(self, tmp_path):
        model = build_model(SMALL, 11)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.spec == model.spec
        assert loaded.seed == model.seed
        assert loaded.parameters_vector().equal(model.parameters_vector())

    def test_save_is_deterministic(self, tmp_path):
        model = build_model(SMALL, 11)
        save_checkpoint(model, tmp_path / "a.ckpt")
        save_checkpoint(model, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_truncation_fuzz_raises_not_crashes(self, tmp_path, rng):
        model = build_model(SMALL, 2)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        raw = path.read_bytes()
        for cut in [0, 3, 10, len(raw) // 2, len(raw) - 5]:
            bad = tmp_path / f"cut_{cut}.ckpt"
            bad.write_bytes(raw[:cut])
            with pytest.raises(CheckpointError):
                load_checkpoint(bad)

    def test_trailing_garbage_rejected(self, tmp_path):
        model = build_model(SMALL, 2)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        (tmp_path / "fat.ckpt").write_bytes(path.read_bytes() + b"extra")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "fat.ckpt")

    def test_cross_spec_load_rejected(self, tmp_path):
        model = build_model(SMALL, 2)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        other = NetSpec(num_classes=5, base_channels=4, num_scales=2)
        with pytest.raises(CheckpointError, match="spec"):
            load_checkpoint(path, expected_spec=other)

    def test_not_a_checkpoint_rejected(self, tmp_path):
        (tmp_path / "junk.ckpt").write_bytes(b"hello world\nnot a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "junk.ckpt")


class TestModelHandle:
    def test_mode_switching(self):
        model = build_model(SMALL, 0)
        assert model.module.training
        model.set_mode("eval")
        assert not model.module.training
        with pytest.raises(ValueError):
            model.set_mode("sleep")

    def test_load_parameters_round_trip(self):
        a = build_model(SMALL, 1)
        b = build_model(SMALL, 2)
        b.load_parameters(a.parameters_vector())
        assert b.parameters_vector().equal(a.parameters_vector())
