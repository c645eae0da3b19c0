from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scalestf import grad as G
from scalestf.checks import kernel_checks
from scalestf.errors import DimensionError, EmptyMaskWarning, NumericalError
from scalestf.grad import Tape, grad_check


def const(x):
    return Tape(grad=False).constant(x)


class TestMatmul:
    def test_identity(self):
        out = G.matmul(const(np.eye(2)), const([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.value, [[1, 2], [3, 4]])

    def test_zero_row(self):
        out = G.matmul(const([[1.0, 0.0], [0.0, 0.0]]), const([[0.0], [5.0]]))
        np.testing.assert_array_equal(out.value, [[0], [0]])

    def test_triple_loop_oracle(self, rng):
        a, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 2))
        ref = np.zeros((4, 2))
        for i in range(4):
            for j in range(2):
                for k in range(3):
                    ref[i, j] += a[i, k] * b[k, j]
        assert np.abs(G.matmul(const(a), const(b)).value - ref).max() < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            G.matmul(const(np.ones((2, 3))), const(np.ones((2, 3))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(G.softmax_rows(const([[0.0, 0.0, 0.0]])).value, [[1 / 3] * 3])

    def test_no_overflow(self):
        out = G.softmax_rows(const([[1000.0, 0.0]])).value
        assert np.all(np.isfinite(out))
        assert out[0, 0] == 1.0 and out[0, 1] < 1e-300

    def test_exp_normalize_oracle(self):
        x = np.array([1.0, 2.0, 3.0])
        ref = np.exp(x) / np.exp(x).sum()
        assert np.abs(G.softmax_rows(const(x[None])).value[0] - ref).max() < 1e-12

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1), st.floats(0.1, 50.0))
    @settings(max_examples=60, deadline=None)
    def test_rows_stochastic_and_positive(self, p, q, seed, scale):
        x = np.random.default_rng(seed).standard_normal((p, q)) * scale
        out = G.softmax_rows(const(x)).value
        assert np.abs(out.sum(axis=1) - 1).max() < 1e-9
        assert np.all(out > 0)


class TestLayerNorm:
    def test_constant_row(self):
        out = G.layer_norm(const(np.full((1, 4), 3.0)), const(np.ones(4)), const(np.zeros(4))).value
        assert np.abs(out).max() < 1e-2

    def test_two_point_row(self):
        out = G.layer_norm(const([[-1.0, 1.0]]), const(np.ones(2)), const(np.zeros(2))).value
        assert abs(out[0, 0] + 1) < 1e-4 and abs(out[0, 1] - 1) < 1e-4

    def test_gamma_zero(self, rng):
        out = G.layer_norm(const(rng.standard_normal((3, 5))), const(np.zeros(5)), const(np.full(5, 5.0))).value
        np.testing.assert_array_equal(out, 5.0)


class TestActivation:
    def test_relu(self):
        np.testing.assert_array_equal(G.activation(const([-2.0, 0.0, 3.0]), "relu").value, [0, 0, 3])

    def test_tanh_sigmoid_at_zero(self):
        assert G.activation(const(0.0), "tanh").value == 0.0
        assert G.activation(const(0.0), "sigmoid").value == 0.5

    def test_relu_derivative_at_zero_is_zero(self):
        tape = Tape()
        x = tape.param("x", np.array([0.0, 1.0, -1.0]))
        g = tape.backward(G.total(G.activation(x, "relu")))["x"]
        np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            G.activation(const([1.0]), "gelu")


class TestL1:
    def test_hand_sum(self):
        assert G.l1_loss(const([1.0, 2.0]), np.zeros(2)).value == 1.5

    def test_identity(self, rng):
        x = rng.standard_normal(7)
        assert G.l1_loss(const(x), x).value == 0.0

    def test_masked_mean(self):
        assert G.l1_loss(const([1.0, 2.0, 3.0]), np.zeros(3), np.array([1.0, 0.0, 1.0])).value == 2.0

    def test_empty_mask_warns(self):
        with pytest.warns(EmptyMaskWarning):
            assert G.l1_loss(const([1.0, 2.0]), np.zeros(2), np.zeros(2)).value == 0.0

    @given(st.integers(1, 40), st.integers(0, 2**31 - 1))
    @settings(max_examples=50, deadline=None)
    def test_mask_equals_subset(self, n, seed):
        r = np.random.default_rng(seed)
        pred, target = r.standard_normal(n), r.standard_normal(n)
        mask = r.random(n) < 0.5
        if not mask.any():
            mask[0] = True
        masked = G.l1_loss(const(pred), target, mask.astype(float)).value
        subset = G.l1_loss(const(pred[mask]), target[mask]).value
        assert abs(masked - subset) < 1e-12


class TestTape:
    def test_backward_is_repeatable_bitwise(self, rng):
        tape = Tape()
        w = tape.param("w", rng.standard_normal((3, 4)))
        x = tape.constant(rng.standard_normal((5, 3)))
        loss = G.total(G.activation(G.matmul(x, w), "tanh"))
        g1 = tape.backward(loss)["w"]
        g2 = tape.backward(loss)["w"]
        assert g1.tobytes() == g2.tobytes()

    def test_unused_param_gets_zero(self):
        tape = Tape()
        a = tape.param("a", np.ones(2))
        tape.param("b", np.ones(3))
        grads = tape.backward(G.total(a))
        np.testing.assert_array_equal(grads["b"], np.zeros(3))

    def test_duplicate_registration_rejected(self):
        tape = Tape()
        tape.param("a", np.ones(2))
        with pytest.raises(ValueError):
            tape.param("a", np.ones(2))

    def test_non_scalar_loss(self):
        tape = Tape()
        a = tape.param("a", np.ones(2))
        with pytest.raises(DimensionError):
            tape.backward(a)

    def test_non_finite_detected(self):
        tape = Tape()
        a = tape.param("a", np.array([1e308]))
        with pytest.raises(NumericalError), warnings.catch_warnings():
            warnings.simplefilter("ignore")
            G.mul(a, a)

    def test_no_grad_records_nothing(self, rng):
        tape = Tape(grad=False)
        w = tape.param("w", rng.standard_normal((2, 2)))
        G.matmul(w, w)
        assert tape.records == []


class TestGradCheck:
    def test_linear_exact(self):
        assert grad_check(lambda p: G.scale(G.total(p["t"]), 3.0), {"t": np.array([0.7])}) < 1e-10

    def test_square(self):
        err = grad_check(lambda p: G.total(G.mul(p["t"], p["t"])), {"t": np.array([2.0])})
        assert err < 1e-8

    def test_eps_range(self):
        with pytest.raises(ValueError):
            grad_check(lambda p: G.total(p["t"]), {"t": np.ones(1)}, eps=1e-2)

    def test_detects_wrong_adjoint(self):
        # a kernel whose adjoint is off by a factor of two must be flagged
        def bad_square(v):
            return v.tape._emit("bad", (v,), v.value ** 2, lambda g: (g * v.value,))

        err = grad_check(lambda p: G.total(bad_square(p["t"])), {"t": np.array([1.5, -0.5])})
        assert err > 0.1

    @pytest.mark.parametrize("seed", range(20))
    def test_every_kernel(self, seed):
        errs = kernel_checks(seed)
        worst = max(errs, key=errs.get)
        assert errs[worst] < 1e-4, worst
