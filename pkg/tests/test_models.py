"""Model assembly: decomposition exactness, feature non-negativity,
checkpoint round trips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradleak.container import ContainerError
from gradleak.models import ModelSpec, build_model, forward_trace, load_checkpoint, save_checkpoint
from gradleak.tensor import ShapeError, Tensor


def small_spec(arch="mlp-small", k=10):
    return ModelSpec(arch=arch, input_shape=(1, 12, 12), num_classes=k)


class TestBuild:
    def test_deterministic_by_seed(self):
        a = build_model(small_spec(), seed=0)
        b = build_model(small_spec(), seed=0)
        for name in a.params:
            assert a.params[name].data.tobytes() == b.params[name].data.tobytes()
        c = build_model(small_spec(), seed=1)
        assert a.params["head.w"].data.tobytes() != c.params["head.w"].data.tobytes()

    def test_conv_small_head_shape_consistent_with_forward(self):
        spec = ModelSpec("conv-small", input_shape=(1, 28, 28), num_classes=10)
        model = build_model(spec, seed=0)
        assert model.head_weight.shape == (spec.feature_dim, 10)
        logits = model.predict(np.zeros((2, 1, 28, 28), dtype=np.float32))
        assert logits.shape == (2, 10)

    def test_zero_classes_rejected(self):
        with pytest.raises(ValueError, match="num_classes"):
            ModelSpec("mlp-small", num_classes=0)

    def test_unknown_architecture_rejected(self):
        with pytest.raises(ValueError, match="unknown architecture"):
            ModelSpec("transformer-xl")

    @pytest.mark.parametrize("arch", ["mlp-small", "conv-small", "conv-med"])
    def test_all_archs_forward(self, arch):
        spec = ModelSpec(arch, input_shape=(1, 28, 28), num_classes=7)
        model = build_model(spec, seed=3)
        out = model.predict(np.random.default_rng(0).random((3, 1, 28, 28)).astype(np.float32))
        assert out.shape == (3, 7)


class TestDecomposition:
    def test_forward_equals_head_of_features(self):
        model = build_model(small_spec("conv-small"), seed=1)
        x = Tensor(np.random.default_rng(1).random((4, 1, 12, 12)).astype(np.float32))
        full = model.forward(x).data
        split = model.head_logits(model.features(x)).data
        np.testing.assert_array_equal(full, split)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=15, deadline=None)
    def test_features_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        model = build_model(small_spec("mlp-small"), seed=seed % 1000)
        x = Tensor(rng.normal(size=(2, 1, 12, 12)).astype(np.float32))
        assert model.features(x).data.min() >= 0.0

    def test_head_is_only_parameter_after_features(self):
        model = build_model(small_spec("conv-small"), seed=2)
        x = Tensor(np.random.default_rng(2).random((2, 1, 12, 12)).astype(np.float32))
        before = model.features(x).data.copy()
        model.params["head.w"].data[:] = 0.0
        np.testing.assert_array_equal(model.features(x).data, before)

    def test_head_bias_flag_adds_parameter(self):
        spec = ModelSpec("mlp-small", input_shape=(1, 8, 8), num_classes=4, head_bias=True)
        model = build_model(spec, seed=0)
        assert "head.b" in model.params
        assert model.predict(np.zeros((1, 1, 8, 8), dtype=np.float32)).shape == (1, 4)


class TestForwardTrace:
    def test_zero_weight_head_gives_uniform_probabilities(self):
        model = build_model(small_spec(k=8), seed=0)
        model.params["head.w"].data[:] = 0.0
        trace = forward_trace(model, np.random.default_rng(0).random((5, 1, 12, 12)).astype(np.float32),
                              np.arange(5))
        np.testing.assert_allclose(trace.probs, 1.0 / 8, atol=1e-7)

    def test_single_sample_loss_is_its_cross_entropy(self):
        from gradleak.tensor import softmax

        model = build_model(small_spec(), seed=4)
        x = np.random.default_rng(4).random((1, 1, 12, 12)).astype(np.float32)
        trace = forward_trace(model, x, [3])
        p = softmax(model.predict(x).astype(np.float64))[0]
        assert trace.loss.item() == pytest.approx(-np.log(p[3]), rel=1e-5)

    def test_probability_rows_sum_to_one(self):
        model = build_model(small_spec(), seed=5)
        trace = forward_trace(model, np.random.default_rng(5).random((6, 1, 12, 12)).astype(np.float32),
                              np.zeros(6, dtype=np.int64))
        np.testing.assert_allclose(trace.probs.sum(axis=1), 1.0, atol=1e-6)

    def test_logits_equal_features_times_head(self):
        model = build_model(small_spec("conv-small"), seed=6)
        trace = forward_trace(model, np.random.default_rng(6).random((3, 1, 12, 12)).astype(np.float32),
                              [0, 1, 2])
        np.testing.assert_allclose(trace.logits.data,
                                   trace.features.data @ model.head_weight.data, atol=1e-5)

    def test_wrong_batch_shape_rejected(self):
        model = build_model(small_spec(), seed=0)
        with pytest.raises(ShapeError, match="expects batches"):
            forward_trace(model, np.zeros((2, 1, 9, 9), dtype=np.float32), [0, 1])

    def test_label_count_mismatch_rejected(self):
        model = build_model(small_spec(), seed=0)
        with pytest.raises(ShapeError, match="labels"):
            forward_trace(model, np.zeros((2, 1, 12, 12), dtype=np.float32), [0])


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        model = build_model(small_spec("conv-small"), seed=7)
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(model, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_file_names_missing_parameter(self, tmp_path):
        model = build_model(small_spec(), seed=8)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(ContainerError, match="parameter"):
            load_checkpoint(path)

    def test_version_mismatch_rejected(self, tmp_path):
        model = build_model(small_spec(), seed=8)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99  # bump the little-endian version field
        path.write_bytes(bytes(raw))
        with pytest.raises(ContainerError, match="version"):
            load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ContainerError, match="magic"):
            load_checkpoint(path)

    def test_loaded_model_predicts_identically(self, tmp_path):
        model = build_model(small_spec("conv-small"), seed=9)
        x = np.random.default_rng(9).random((8, 1, 12, 12)).astype(np.float32)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        reloaded = load_checkpoint(path)
        np.testing.assert_array_equal(model.predict(x), reloaded.predict(x))
        assert reloaded.spec.to_dict() == model.spec.to_dict()
