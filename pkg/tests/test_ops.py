"""Unit checks for the low-level forward/backward op pairs."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import fd_check
from scriptid import ops
from scriptid.errors import ConfigurationError, InvalidInputError, ShapeError


class TestConv:
    def test_table_sizes(self, rng):
        x = rng.normal(size=(2, 3, 32, 32))
        k = rng.normal(size=(96, 3, 5, 5)) * 0.05
        y, _ = ops.conv2d_forward(x, k, np.zeros(96))
        assert y.shape == (2, 96, 28, 28)

    def test_zero_input_zero_bias_gives_zero(self, rng):
        x = np.zeros((2, 3, 8, 8))
        k = rng.normal(size=(4, 3, 3, 3))
        y, _ = ops.conv2d_forward(x, k, np.zeros(4))
        assert np.all(y == 0)

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(1, 1, 3, 3))
        k = np.ones((1, 1, 1, 1))
        y, _ = ops.conv2d_forward(x, k, np.zeros(1))
        assert np.allclose(y, x)

    def test_hand_computed_cross_correlation(self):
        x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
        k = np.array([[[[1.0, 0.0], [0.0, -1.0]]]])
        y, _ = ops.conv2d_forward(x, k, np.array([0.5]))
        # y[i,j] = x[i,j] - x[i+1,j+1] + 0.5 = -4 + 0.5 everywhere
        assert np.allclose(y, -3.5)

    def test_channel_mismatch_raises(self, rng):
        with pytest.raises(ShapeError):
            ops.conv2d_forward(rng.normal(size=(1, 2, 8, 8)),
                               rng.normal(size=(4, 3, 3, 3)), np.zeros(4))

    def test_too_small_input_raises(self, rng):
        with pytest.raises(ShapeError):
            ops.conv2d_forward(rng.normal(size=(1, 1, 2, 2)),
                               rng.normal(size=(1, 1, 5, 5)), np.zeros(1))

    def test_gradients_match_finite_differences(self, rng):
        x = rng.normal(size=(2, 3, 7, 7))
        k = rng.normal(size=(4, 3, 3, 3)) * 0.3
        b = rng.normal(size=4) * 0.1
        probe = rng.normal(size=(2, 4, 5, 5))

        def loss():
            y, _ = ops.conv2d_forward(x, k, b)
            return float((y * probe).sum())

        y, cache = ops.conv2d_forward(x, k, b)
        dx, dk, db = ops.conv2d_backward(probe, cache)
        worst, where = fd_check(loss, [("x", x), ("k", k), ("b", b)],
                                {"x": dx, "k": dk, "b": db}, rng, per_tensor=6)
        assert worst < 1e-6, where

    def test_padded_conv_gradients(self, rng):
        x = rng.normal(size=(2, 2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3)) * 0.3
        b = np.zeros(3)
        probe = rng.normal(size=(2, 3, 5, 5))

        def loss():
            y, _ = ops.conv2d_forward(x, k, b, stride=1, pad=1)
            return float((y * probe).sum())

        _, cache = ops.conv2d_forward(x, k, b, stride=1, pad=1)
        dx, dk, db = ops.conv2d_backward(probe, cache)
        worst, where = fd_check(loss, [("x", x), ("k", k)], {"x": dx, "k": dk},
                                rng, per_tensor=6)
        assert worst < 1e-6, where


class TestMaxPool:
    @pytest.mark.parametrize("size,expected", [(28, 15), (15, 8), (13, 7), (5, 3)])
    def test_ceil_mode_sizes(self, rng, size, expected):
        x = rng.normal(size=(1, 2, size, size))
        y, _ = ops.maxpool_ceil_forward(x, 3, 2, 1)
        assert y.shape[-1] == expected

    def test_constant_field_stays_constant(self):
        x = np.full((1, 1, 13, 13), 2.5)
        y, _ = ops.maxpool_ceil_forward(x, 3, 2, 1)
        assert np.all(y == 2.5)

    def test_padding_never_wins_over_real_pixels(self):
        x = -np.ones((1, 1, 5, 5)) * 7.0
        y, _ = ops.maxpool_ceil_forward(x, 3, 2, 1)
        assert np.all(y == -7.0)

    def test_gradient_routes_to_argmax(self):
        x = np.zeros((1, 1, 4, 4))
        x[0, 0, 1, 2] = 5.0
        y, cache = ops.maxpool_ceil_forward(x, 3, 2, 1)
        gy = np.ones_like(y)
        dx = ops.maxpool_ceil_backward(gy, cache)
        # the lone max may be claimed by several overlapping windows
        assert dx[0, 0, 1, 2] > 0
        assert dx.sum() == gy.size

    def test_gradients_match_finite_differences(self, rng):
        # distinct values avoid ties, where max is not differentiable
        x = rng.permutation(13 * 13 * 2).astype(np.float64).reshape(1, 2, 13, 13)
        probe = rng.normal(size=(1, 2, 7, 7))

        def loss():
            y, _ = ops.maxpool_ceil_forward(x, 3, 2, 1)
            return float((y * probe).sum())

        _, cache = ops.maxpool_ceil_forward(x, 3, 2, 1)
        dx = ops.maxpool_ceil_backward(probe, cache)
        worst, where = fd_check(loss, [("x", x)], {"x": dx}, rng, per_tensor=20)
        assert worst < 1e-6, where


class TestBatchNorm:
    def _params(self, c, dtype=np.float64):
        return dict(gamma=np.ones(c, dtype), beta=np.zeros(c, dtype),
                    running_mean=np.zeros(c, dtype), running_var=np.ones(c, dtype),
                    eps=1e-5, momentum=0.1)

    def test_normalized_batch_is_nearly_identity(self, rng):
        x = rng.normal(size=(64, 3, 4, 4))
        x -= x.mean(axis=(0, 2, 3), keepdims=True)
        x /= x.std(axis=(0, 2, 3), keepdims=True)
        y, _ = ops.batchnorm_forward(x, **self._params(3), mode="train")
        assert np.abs(y - x).max() <= 10 * 1e-5

    def test_zero_gamma_collapses_to_beta(self, rng):
        p = self._params(3)
        p["gamma"] = np.zeros(3)
        p["beta"] = np.full(3, 0.7)
        y, _ = ops.batchnorm_forward(rng.normal(size=(8, 3, 2, 2)), **p, mode="train")
        assert np.allclose(y, 0.7)

    def test_eval_mode_is_deterministic_and_ignores_batch(self, rng):
        p = self._params(3)
        p["running_mean"] = rng.normal(size=3)
        p["running_var"] = rng.uniform(0.5, 2.0, size=3)
        x1 = rng.normal(size=(4, 3, 2, 2))
        y1, _ = ops.batchnorm_forward(x1, **p, mode="eval")
        y2, _ = ops.batchnorm_forward(x1, **p, mode="eval")
        assert np.array_equal(y1, y2)

    def test_batch_of_one_in_train_mode_rejected(self, rng):
        with pytest.raises(ConfigurationError):
            ops.batchnorm_forward(rng.normal(size=(1, 3, 2, 2)),
                                  **self._params(3), mode="train")

    def test_running_stats_update(self, rng):
        p = self._params(2)
        x = rng.normal(loc=3.0, scale=2.0, size=(256, 2, 4, 4))
        ops.batchnorm_forward(x, **p, mode="train")
        # r = 0.9*r + 0.1*batch
        assert np.allclose(p["running_mean"], 0.1 * x.mean(axis=(0, 2, 3)), atol=1e-6)
        assert p["running_var"].mean() > 1.0  # pulled toward var ~4

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_gradients_match_finite_differences(self, rng, mode):
        p = self._params(3)
        p["running_mean"] = rng.normal(size=3) * 0.3
        p["running_var"] = rng.uniform(0.5, 1.5, size=3)
        x = rng.normal(size=(5, 3, 4, 4))
        probe = rng.normal(size=(5, 3, 4, 4))

        def loss():
            y, _ = ops.batchnorm_forward(x, **p, mode=mode, update_running=False)
            return float((y * probe).sum())

        _, cache = ops.batchnorm_forward(x, **p, mode=mode, update_running=False)
        dx, dgamma, dbeta = ops.batchnorm_backward(probe, cache)
        worst, where = fd_check(
            loss, [("x", x), ("gamma", p["gamma"]), ("beta", p["beta"])],
            {"x": dx, "gamma": dgamma, "beta": dbeta}, rng, per_tensor=8)
        assert worst < 1e-6, where

    def test_2d_input_path(self, rng):
        x = rng.normal(size=(16, 5))
        y, cache = ops.batchnorm_forward(x, **self._params(5), mode="train")
        assert y.shape == x.shape
        assert np.allclose(y.mean(axis=0), 0, atol=1e-10)


class TestSoftmax:
    def test_closed_form(self):
        p = ops.softmax(np.log(np.array([1.0, 3.0])))
        assert np.allclose(p, [0.25, 0.75])

    def test_uniform(self):
        assert np.allclose(ops.softmax(np.zeros(4)), 0.25)

    @given(shift=st.floats(-50, 50))
    @settings(max_examples=30, deadline=None)
    def test_shift_invariance(self, shift):
        x = np.array([0.3, -1.2, 2.0, 0.0])
        assert np.abs(ops.softmax(x + shift) - ops.softmax(x)).max() < 1e-9

    def test_masked_entries_are_exact_zero_and_rest_normalizes(self, rng):
        x = rng.normal(size=(3, 5))
        mask = np.array([[1, 1, 0, 1, 0]] * 3, dtype=bool)
        p = ops.softmax(x, mask=mask)
        assert np.all(p[:, 2] == 0) and np.all(p[:, 4] == 0)
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_all_masked_rejected(self, rng):
        with pytest.raises(InvalidInputError):
            ops.softmax(rng.normal(size=(2, 3)), mask=np.zeros((2, 3), dtype=bool))

    def test_mask_exclusion_equals_minus_inf_form(self, rng):
        x = rng.normal(size=7)
        mask = np.array([1, 0, 1, 1, 0, 1, 1], dtype=bool)
        p = ops.softmax(x, mask=mask)
        xm = np.where(mask, x, -np.inf)
        e = np.exp(xm - xm.max())
        assert np.allclose(p, e / e.sum(), atol=1e-12)

    def test_backward_matches_finite_differences(self, rng):
        x = rng.normal(size=6)
        probe = rng.normal(size=6)

        def loss():
            return float((ops.softmax(x) * probe).sum())

        p = ops.softmax(x)
        dx = ops.softmax_backward(probe, p)
        worst, where = fd_check(loss, [("x", x)], {"x": dx}, rng, per_tensor=6)
        assert worst < 1e-7, where


class TestSmallOps:
    def test_relu(self, rng):
        x = rng.normal(size=(4, 4))
        y, cache = ops.relu_forward(x)
        assert (y >= 0).all()
        gy = rng.normal(size=(4, 4))
        dx = ops.relu_backward(gy.copy(), cache)
        assert np.array_equal(dx, gy * (x > 0))

    def test_dropout_train_scaling_and_eval_identity(self, rng):
        x = np.ones((2000, 10))
        y, keep = ops.dropout_forward(x, 0.5, "train", rng)
        kept = y != 0
        assert abs(kept.mean() - 0.5) < 0.05
        assert np.allclose(y[kept], 2.0)
        y2, keep2 = ops.dropout_forward(x, 0.5, "eval", rng)
        assert keep2 is None and y2 is x

    def test_linear_shapes_and_grads(self, rng):
        x = rng.normal(size=(5, 4))
        w = rng.normal(size=(3, 4))
        b = rng.normal(size=3)
        probe = rng.normal(size=(5, 3))

        def loss():
            y, _ = ops.linear_forward(x, w, b)
            return float((y * probe).sum())

        _, cache = ops.linear_forward(x, w, b)
        dx, dw, db = ops.linear_backward(probe, cache)
        worst, where = fd_check(loss, [("x", x), ("w", w), ("b", b)],
                                {"x": dx, "w": dw, "b": db}, rng, per_tensor=6)
        assert worst < 1e-7, where

    def test_sigmoid_saturation_is_finite(self):
        y = ops.sigmoid(np.array([-1e9, -100.0, 0.0, 100.0, 1e9]))
        assert np.all(np.isfinite(y))
        assert y[0] < 1e-20 and y[-1] >= 1 - 1e-15 and y[2] == 0.5
