import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cdum.errors import DimensionError, NumericError
from cdum.nn import (AffineLayer, HuberConfig, OptimizerState, activate, adam_step, affine_backward, affine_forward,
                     gradient_check, huber, huber_loss, lr_reduce_on_plateau, sigmoid, softmax)
from cdum.oracles import central_difference

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


class TestAffineForward:
    def test_identity_layer(self):
        layer = AffineLayer(np.eye(2), np.zeros((1, 2)), "none")
        np.testing.assert_array_equal(affine_forward(np.array([[1.0, 2.0]]), layer), [[1.0, 2.0]])

    def test_zero_softmax_head_is_uniform(self):
        layer = AffineLayer.zeros(3, 3, "softmax")
        np.testing.assert_allclose(affine_forward(np.zeros((1, 3)), layer), [[1 / 3, 1 / 3, 1 / 3]], rtol=0, atol=1e-15)

    def test_relu_clamps_negative(self):
        layer = AffineLayer(np.array([[1.0]]), np.zeros((1, 1)), "relu")
        assert affine_forward(np.array([[-1.0]]), layer)[0, 0] == 0.0

    def test_shape_mismatch_names_both_shapes(self):
        layer = AffineLayer.zeros(3, 2, "none")
        with pytest.raises(DimensionError, match=r"\(1, 4\).*\(3, 2\)"):
            affine_forward(np.zeros((1, 4)), layer)

    def test_glorot_bounds(self):
        layer = AffineLayer.init(30, 20, "relu", np.random.default_rng(0))
        limit = np.sqrt(6 / 50)
        assert np.abs(layer.weight).max() <= limit
        assert np.all(layer.bias == 0)


class TestAffineBackward:
    def test_scalar_linear(self):
        layer = AffineLayer(np.array([[2.0]]), np.zeros((1, 1)), "none")
        dx, dw, db = affine_backward(np.array([[3.0]]), layer, np.array([[1.0]]))
        assert dx[0, 0] == 2.0 and dw[0, 0] == 3.0 and db[0, 0] == 1.0

    def test_dead_relu_passes_nothing(self):
        layer = AffineLayer(np.array([[1.0]]), np.zeros((1, 1)), "relu")
        dx, dw, db = affine_backward(np.array([[-1.0]]), layer, np.array([[5.0]]))
        assert dx[0, 0] == 0.0 and dw[0, 0] == 0.0 and db[0, 0] == 0.0

    def test_sigmoid_at_zero_scales_by_quarter(self):
        layer = AffineLayer(np.array([[1.0]]), np.zeros((1, 1)), "sigmoid")
        dx, _, db = affine_backward(np.array([[0.0]]), layer, np.array([[2.0]]))
        assert dx[0, 0] == 0.5 and db[0, 0] == 0.5

    @pytest.mark.parametrize("activation", ["none", "relu", "sigmoid", "softmax"])
    def test_matches_central_difference(self, activation):
        rng = np.random.default_rng(3)
        layer = AffineLayer.init(4, 3, activation, rng)
        layer.bias += 0.3
        x = rng.normal(size=(5, 4))
        up = rng.normal(size=(5, 3))
        dx, dw, _ = affine_backward(x, layer, up)
        num_x = central_difference(lambda v: float(np.sum(affine_forward(v, layer) * up)), x, 1e-6)
        np.testing.assert_allclose(dx, num_x, rtol=1e-6, atol=1e-8)

        def f_w(w):
            return float(np.sum(affine_forward(x, AffineLayer(w, layer.bias, activation)) * up))
        np.testing.assert_allclose(dw, central_difference(f_w, layer.weight.copy(), 1e-6), rtol=1e-6, atol=1e-8)


class TestActivations:
    @given(arrays(np.float64, (4, 5), elements=finite))
    def test_softmax_rows_on_simplex(self, z):
        p = softmax(z)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(p >= 0) and np.all(p <= 1)

    @given(arrays(np.float64, 20, elements=st.floats(-30, 30)))
    def test_sigmoid_open_interval(self, z):
        s = sigmoid(z)
        assert np.all(s > 0) and np.all(s < 1)

    def test_sigmoid_extremes_do_not_overflow(self):
        with np.errstate(over="raise"):
            s = sigmoid(np.array([-1000.0, 1000.0]))
        assert s[0] == 0.0 and s[1] == 1.0

    @given(arrays(np.float64, 10, elements=finite))
    def test_relu_non_negative(self, z):
        assert np.all(activate(z, "relu") >= 0)


class TestHuber:
    @pytest.mark.parametrize("r, loss, grad", [(0.0, 0.0, 0.0), (0.5, 0.125, 0.5), (2.0, 1.5, 1.0),
                                               (-2.0, 1.5, -1.0)])
    def test_reference_values(self, r, loss, grad):
        assert huber_loss(r, 0.0) == (loss, grad)

    @pytest.mark.parametrize("delta", [0.1, 1.0, 3.7])
    def test_branch_continuity(self, delta):
        eps = 1e-13
        for sign in (1.0, -1.0):
            inner, g_in = huber(np.array([sign * (delta - eps)]), delta)
            outer, g_out = huber(np.array([sign * (delta + eps)]), delta)
            assert abs(inner[0] - 0.5 * delta ** 2) < 1e-12
            assert abs(outer[0] - 0.5 * delta ** 2) < 1e-12
            assert abs(g_in[0] - g_out[0]) < 1e-12

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            huber_loss(float("nan"), 0.0)

    def test_delta_must_be_positive(self):
        with pytest.raises(ValueError):
            HuberConfig(delta=0.0)

    @given(st.floats(-100, 100), st.floats(0.01, 10))
    def test_gradient_is_derivative(self, r, delta):
        if abs(abs(r) - delta) < 1e-4:
            return
        _, g = huber(np.array([r]), delta)
        h = 1e-6
        num = (huber(np.array([r + h]), delta)[0][0] - huber(np.array([r - h]), delta)[0][0]) / (2 * h)
        assert abs(g[0] - num) < 1e-5 * max(1.0, abs(num))


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        params = {"w": np.zeros(1)}
        adam_step(params, {"w": np.ones(1)}, OptimizerState(learning_rate=1e-3))
        assert abs(params["w"][0] + 1e-3) < 1e-10

    def test_zero_gradient_is_stationary(self):
        params = {"w": np.array([1.5, -2.0])}
        state = OptimizerState()
        for _ in range(3):
            adam_step(params, {"w": np.zeros(2)}, state)
        np.testing.assert_array_equal(params["w"], [1.5, -2.0])

    def test_deterministic(self):
        results = []
        for _ in range(2):
            params = {"w": np.array([0.3, 0.1])}
            state = OptimizerState()
            for g in ([1.0, -2.0], [0.5, 0.5]):
                adam_step(params, {"w": np.array(g)}, state)
            results.append(params["w"].copy())
        np.testing.assert_array_equal(results[0], results[1])

    def test_non_finite_gradient_names_block(self):
        with pytest.raises(NumericError, match="tower1.head.W"):
            adam_step({"tower1.head.W": np.zeros(2)}, {"tower1.head.W": np.array([0.0, np.inf])}, OptimizerState())


class TestPlateau:
    def run(self, losses):
        state = OptimizerState(learning_rate=1e-3)
        rates = []
        for v in losses:
            lr_reduce_on_plateau(state, v)
            rates.append(state.learning_rate)
        return state, rates

    def test_improving_keeps_rate(self):
        _, rates = self.run([1.0, 0.9, 0.8])
        assert rates == [1e-3] * 3

    def test_two_stale_evaluations_reduce(self):
        _, rates = self.run([1.0, 1.1, 1.2])
        assert rates[:2] == [1e-3, 1e-3]
        assert rates[2] == pytest.approx(6e-4, rel=1e-15)

    def test_improvement_resets_counter(self):
        state, rates = self.run([1.0, 1.1, 0.5])
        assert rates == [1e-3] * 3 and state.stale_evaluations == 0

    def test_tiny_gain_is_not_improvement(self):
        state, _ = self.run([1.0, 1.0 - 1e-12])
        assert state.stale_evaluations == 1


class TestGradientCheck:
    def test_quadratic(self):
        params = {"w": np.array([3.0])}
        err = gradient_check(lambda: (float(params["w"][0] ** 2), {"w": 2 * params["w"]}), params, 1,
                             np.random.default_rng(0))
        assert err < 1e-8

    def test_corrupted_gradient_reports_half(self):
        params = {"w": np.array([3.0, -1.0])}
        err = gradient_check(lambda: (float(np.sum(params["w"] ** 2)), {"w": 4 * params["w"]}), params, 5,
                             np.random.default_rng(0))
        assert err == pytest.approx(0.5, abs=1e-6)

    def test_params_restored(self):
        params = {"w": np.array([0.7, 0.2])}
        before = params["w"].copy()
        gradient_check(lambda: (float(np.sum(np.sin(params["w"]))), {"w": np.cos(params["w"])}), params, 4,
                       np.random.default_rng(1))
        np.testing.assert_array_equal(params["w"], before)
