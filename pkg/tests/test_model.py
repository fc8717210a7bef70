"""Encoder tests: values on hand-built parameters, gradients against FD."""

import numpy as np
import pytest

from xmodal import autodiff as ad
from xmodal import model
from xmodal.autodiff import ShapeError, Tape, Tensor
from xmodal.model import ModelDims, ModelParams, lstm_step

TEST_DIMS = ModelDims(vocab_size=10, embed_dim=8, hidden_dim=16, feature_dim=12)
FD_TOL = 1e-4
FD_STEP = 1e-5


def tracked_zeros(dims):
    return ModelParams.zeros(dims).as_tracked(None)


class TestLstmStep:
    def test_zero_params_give_zero_state(self):
        p = tracked_zeros(TEST_DIMS)
        x = Tensor.const(np.random.default_rng(0).normal(size=(3, 8)))
        h0 = c0 = Tensor.const(np.zeros((3, 16)))
        h, c = lstm_step(x, h0, c0, p)
        np.testing.assert_array_equal(h.data, np.zeros((3, 16)))
        np.testing.assert_array_equal(c.data, np.zeros((3, 16)))

    def test_forget_bias_alone_keeps_zero_cell(self):
        params = ModelParams.zeros(TEST_DIMS)
        params.tensors["lstm.b_f"][:] = 1.0
        p = ModelParams(TEST_DIMS, params.tensors).as_tracked(None)
        x = Tensor.const(np.zeros((1, 8)))
        h0 = c0 = Tensor.const(np.zeros((1, 16)))
        h, c = lstm_step(x, h0, c0, p)
        np.testing.assert_array_equal(c.data, np.zeros((1, 16)))
        np.testing.assert_array_equal(h.data, np.zeros((1, 16)))

    def test_hand_computed_single_unit(self):
        # e = h = 1, every weight 1, biases 0, x = 0.5, h0 = c0 = 0:
        # all gate preactivations are 0.5
        dims = ModelDims(vocab_size=1, embed_dim=1, hidden_dim=1, feature_dim=1)
        tensors = {n: np.ones(s) for n, s in model.param_shapes(dims).items()}
        for g in model.GATES:
            tensors[f"lstm.b_{g}"] = np.zeros((1, 1))
        p = ModelParams(dims, tensors).as_tracked(None)
        x = Tensor.const([[0.5]])
        zero = Tensor.const([[0.0]])
        h, c = lstm_step(x, zero, zero, p)
        sig = 1 / (1 + np.exp(-0.5))
        c_want = sig * np.tanh(0.5)
        h_want = sig * np.tanh(c_want)
        np.testing.assert_allclose(c.data, [[c_want]], atol=1e-15)
        np.testing.assert_allclose(h.data, [[h_want]], atol=1e-15)

    def test_three_step_gradients_match_fd(self):
        rng = np.random.default_rng(5)
        dims = ModelDims(vocab_size=3, embed_dim=4, hidden_dim=5, feature_dim=3)
        shapes = model.param_shapes(dims)
        names = [n for n in shapes if n.startswith("lstm.")]
        xs = [rng.normal(size=(2, 4)) for _ in range(3)]

        def build(*leaves):
            p = dict(zip(names, leaves))
            h = c = Tensor.const(np.zeros((2, 5)))
            for x in xs:
                h, c = lstm_step(Tensor.const(x), h, c, p)
            return ad.reduce_sum(h)

        point = [rng.uniform(-0.5, 0.5, shapes[n]) for n in names]
        assert ad.finite_diff_check(build, point, FD_STEP) < FD_TOL

    def test_dimension_mismatch_rejected(self):
        p = tracked_zeros(TEST_DIMS)
        x = Tensor.const(np.zeros((2, 5)))  # wrong embed dim
        h0 = c0 = Tensor.const(np.zeros((2, 16)))
        with pytest.raises(ShapeError):
            lstm_step(x, h0, c0, p)


class TestEncodeText:
    def test_all_padding_zero_params_gives_zero_vector(self):
        params = ModelParams.zeros(TEST_DIMS)
        ids = np.zeros((1, 5), dtype=np.int64)
        out = model.encode_text_batch(ids, params.as_tracked(None))
        np.testing.assert_array_equal(out.data, np.zeros((1, 16)))

    def test_output_nonnegative(self):
        rng = np.random.default_rng(1)
        params = ModelParams.init(TEST_DIMS, rng)
        ids = rng.integers(0, 11, size=(4, 7))
        out = model.encode_text_batch(ids, params.as_tracked(None))
        assert np.all(out.data >= 0)

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        params = ModelParams.init(TEST_DIMS, rng)
        ids = rng.integers(0, 11, size=(3, 6))
        a = model.encode_text_batch(ids, params.as_tracked(None)).data
        b = model.encode_text_batch(ids, params.as_tracked(None)).data
        np.testing.assert_array_equal(a, b)

    def test_padding_region_irrelevant_when_padding_row_and_biases_zero(self):
        # with zero biases the padding steps only decay the state through
        # fixed gates, identically for both sequences
        rng = np.random.default_rng(3)
        dims = ModelDims(vocab_size=4, embed_dim=3, hidden_dim=4, feature_dim=2)
        params = ModelParams.init(dims, rng)
        for g in model.GATES:
            params.tensors[f"lstm.b_{g}"][:] = 0.0
        params.tensors["embedding"][0] = 0.0
        p = params.as_tracked(None)
        a = model.encode_text_batch(np.array([[1, 2, 0, 0, 0]]), p).data
        b = model.encode_text_batch(np.array([[1, 2, 0, 0, 0]]), p).data
        np.testing.assert_array_equal(a, b)
        # two-step toy, hand-walked: state after [1, 2] is the same tensor
        # the 5-step run sees at t=2, then both see identical zero inputs
        h2 = model.encode_text_batch(np.array([[1, 2]]), p).data
        assert h2.shape == (1, 4)

    def test_nonzero_bias_makes_padding_matter(self):
        rng = np.random.default_rng(4)
        dims = ModelDims(vocab_size=4, embed_dim=3, hidden_dim=4, feature_dim=2)
        params = ModelParams.init(dims, rng)  # forget bias is 1
        p = params.as_tracked(None)
        short = model.encode_text_batch(np.array([[1, 2]]), p).data
        padded = model.encode_text_batch(np.array([[1, 2, 0, 0, 0]]), p).data
        assert not np.allclose(short, padded)

    def test_out_of_range_index_rejected(self):
        params = ModelParams.zeros(TEST_DIMS)
        with pytest.raises(ShapeError, match="out of range"):
            model.encode_text_batch(np.array([[99]]), params.as_tracked(None))

    def test_gradients_wrt_all_params_match_fd(self):
        rng = np.random.default_rng(6)
        dims = ModelDims(vocab_size=6, embed_dim=4, hidden_dim=5, feature_dim=3)
        shapes = model.param_shapes(dims)
        names = [n for n in shapes if not n.startswith("image.")]
        ids = rng.integers(0, 7, size=(2, 4))
        w = rng.normal(size=(2, 5))  # fixed mixing weights make the loss scalar

        def build(*leaves):
            p = dict(zip(names, leaves))
            out = model.encode_text_batch(ids, p)
            return ad.reduce_sum(ad.mul(out, Tensor.const(w)))

        point = [rng.uniform(-0.4, 0.4, shapes[n]) for n in names]
        assert ad.finite_diff_check(build, point, FD_STEP) < FD_TOL


class TestEncodeImage:
    def test_zero_everything_gives_zero(self):
        params = ModelParams.zeros(TEST_DIMS)
        out = model.encode_image_batch(np.zeros((2, 12)), params.as_tracked(None))
        np.testing.assert_array_equal(out.data, np.zeros((2, 16)))

    def test_output_nonnegative(self):
        rng = np.random.default_rng(7)
        params = ModelParams.init(TEST_DIMS, rng)
        out = model.encode_image_batch(rng.normal(size=(5, 12)), params.as_tracked(None))
        assert np.all(out.data >= 0)

    def test_hand_computed_two_by_two(self):
        dims = ModelDims(vocab_size=1, embed_dim=1, hidden_dim=2, feature_dim=2)
        tensors = {n: np.zeros(s) for n, s in model.param_shapes(dims).items()}
        tensors["image.w1"] = np.array([[1.0, -1.0], [2.0, 0.5]])
        tensors["image.b1"] = np.array([[0.5, -0.25]])
        tensors["image.w2"] = np.array([[1.0, 2.0], [3.0, -1.0]])
        tensors["image.b2"] = np.array([[-10.0, 0.5]])
        params = ModelParams(dims, tensors)
        f = np.array([1.0, 2.0])
        # layer 1: f @ w1 + b1 = [5.5, -0.25] -> relu -> [5.5, 0]
        # layer 2: [5.5, 0] @ w2 + b2 = [-4.5, 11.5] -> abs -> [4.5, 11.5]
        out = model.encode_image(f, params)
        np.testing.assert_allclose(out, [4.5, 11.5], atol=1e-12)

    def test_identity_activation(self):
        dims = ModelDims(vocab_size=1, embed_dim=1, hidden_dim=2, feature_dim=2)
        tensors = {n: np.zeros(s) for n, s in model.param_shapes(dims).items()}
        tensors["image.w1"] = np.array([[1.0, -1.0], [2.0, 0.5]])
        tensors["image.b1"] = np.array([[0.5, -0.25]])
        tensors["image.w2"] = np.array([[1.0, 2.0], [3.0, -1.0]])
        tensors["image.b2"] = np.array([[-10.0, 0.5]])
        params = ModelParams(dims, tensors)
        f = np.array([1.0, 2.0])
        # hidden stays [5.5, -0.25]; layer 2 gives [-5.25, 11.75]
        out = model.encode_image(f, params, activation="identity")
        np.testing.assert_allclose(out, [5.25, 11.75], atol=1e-12)

    def test_feature_dim_mismatch_rejected(self):
        params = ModelParams.zeros(TEST_DIMS)
        with pytest.raises(ShapeError):
            model.encode_image_batch(np.zeros((2, 5)), params.as_tracked(None))

    def test_gradients_wrt_image_params_match_fd(self):
        rng = np.random.default_rng(8)
        dims = ModelDims(vocab_size=2, embed_dim=3, hidden_dim=6, feature_dim=4)
        shapes = model.param_shapes(dims)
        names = [n for n in shapes if n.startswith("image.")]
        feats = rng.normal(size=(3, 4))
        w = rng.normal(size=(3, 6))

        def build(*leaves):
            p = dict(zip(names, leaves))
            out = model.encode_image_batch(feats, p)
            return ad.reduce_sum(ad.mul(out, Tensor.const(w)))

        point = [rng.uniform(-0.5, 0.5, shapes[n]) for n in names]
        assert ad.finite_diff_check(build, point, FD_STEP) < FD_TOL


class TestModelParams:
    def test_init_seeded_and_in_range(self):
        a = ModelParams.init(TEST_DIMS, np.random.default_rng(9))
        b = ModelParams.init(TEST_DIMS, np.random.default_rng(9))
        for name in a.tensors:
            np.testing.assert_array_equal(a.tensors[name], b.tensors[name])
        assert np.all(np.abs(a.tensors["image.w1"]) <= 0.08)
        np.testing.assert_array_equal(a.tensors["lstm.b_f"], np.ones((1, 16)))
        np.testing.assert_array_equal(a.tensors["embedding"][0], np.zeros(8))

    def test_shape_validation(self):
        tensors = {n: np.zeros(s) for n, s in model.param_shapes(TEST_DIMS).items()}
        tensors["image.w1"] = np.zeros((3, 3))
        with pytest.raises(ValueError, match="image.w1"):
            ModelParams(TEST_DIMS, tensors)
