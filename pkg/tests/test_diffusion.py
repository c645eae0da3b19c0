from __future__ import annotations

import warnings

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from scalestf.diffusion import (
    DiffusivityMatrix,
    EnergyParams,
    denoise_closed_form,
    denoise_first_order,
    denoise_gradient,
    denoise_gradient_descent,
    diffusion_step,
    diffusion_step_per_node,
    dirichlet_energy,
    lambda_max,
    safe_step,
    smoothness,
)
from scalestf.errors import DimensionError
from scalestf.graphs import community_graph, graph_laplacian, path_graph


def random_symmetric(seed: int, n: int) -> np.ndarray:
    r = np.random.default_rng(seed)
    f = r.random((n, n)) * (r.random((n, n)) < 0.5)
    f = np.triu(f, 1)
    return f + f.T


def brute_energy(h, h_prev, f, rho):
    n = h.shape[0]
    smooth = sum(f[i, j] * np.sum((h[j] - h[i]) ** 2) for i in range(n) for j in range(n))
    return np.sum((h - h_prev) ** 2) + rho * smooth


class TestEnergy:
    def test_identical_rows(self, rng):
        h = np.tile(rng.standard_normal(3), (5, 1))
        assert dirichlet_energy(h, h, rng.random((5, 5)), 2.0)[0] == pytest.approx(0.0, abs=1e-12)

    def test_k2_hand_sum(self):
        h = np.array([[0.0], [1.0]])
        energy, smooth = dirichlet_energy(h, h, np.array([[0.0, 1.0], [1.0, 0.0]]), 1.0)
        assert energy == pytest.approx(2.0) and smooth == pytest.approx(2.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_double_loop_oracle(self, seed):
        r = np.random.default_rng(seed)
        h, hp = r.standard_normal((7, 3)), r.standard_normal((7, 3))
        f = r.random((7, 7))  # asymmetric on purpose
        assert abs(dirichlet_energy(h, hp, f, 0.7)[0] - brute_energy(h, hp, f, 0.7)) < 1e-10

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            dirichlet_energy(np.zeros((3, 2)), np.zeros((3, 1)), np.zeros((3, 3)), 1.0)

    def test_params_validation(self):
        with pytest.raises(ValueError):
            EnergyParams(rho=-1.0)
        with pytest.raises(ValueError):
            DiffusivityMatrix(-np.ones((2, 2)))
        with pytest.raises(ValueError):
            DiffusivityMatrix(np.array([[0.0, 1.0], [0.0, 0.0]]), symmetric=True)


class TestDiffusionStep:
    def test_zero_delta(self, rng):
        h = rng.standard_normal((4, 2))
        np.testing.assert_array_equal(diffusion_step(h, rng.random((4, 4)), 0.0), h)

    def test_hand_example(self):
        out = diffusion_step(np.array([[1.0], [0.0]]), np.array([[0.0, 1.0], [1.0, 0.0]]), 0.25)
        np.testing.assert_allclose(out[:, 0], [0.75, 0.25])

    def test_row_constant(self, rng):
        h = np.tile(rng.standard_normal(3), (6, 1))
        np.testing.assert_allclose(diffusion_step(h, rng.random((6, 6)), 0.3), h, atol=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_matrix_vs_per_node(self, seed):
        r = np.random.default_rng(seed)
        h, f = r.standard_normal((9, 4)), r.random((9, 9))
        assert np.abs(diffusion_step(h, f, 0.1) - diffusion_step_per_node(h, f, 0.1)).max() < 1e-12

    @given(st.integers(2, 32), st.integers(0, 2**31 - 1), st.integers(1, 4))
    @settings(max_examples=40, deadline=None)
    def test_energy_descent_with_safe_step(self, n, seed, d):
        f = random_symmetric(seed, n)
        h = np.random.default_rng(seed + 1).standard_normal((n, d))
        nxt = diffusion_step(h, f, safe_step(f))
        before = smoothness(h, f)
        assert smoothness(nxt, f) <= before + 1e-10 * max(1.0, before)

    def test_lambda_max_matches_eigvalsh(self):
        lap = DiffusivityMatrix(random_symmetric(3, 20)).laplacian
        assert lambda_max(lap) == pytest.approx(np.linalg.eigvalsh(lap).max(), rel=1e-6)


class TestDenoising:
    def test_beta_zero(self, rng):
        x = rng.standard_normal(3)
        lap = graph_laplacian(path_graph(3))
        np.testing.assert_array_equal(denoise_closed_form(x, lap, 0.0), x)
        np.testing.assert_array_equal(denoise_first_order(x, lap, 0.0), x)

    def test_path_closed_form(self):
        out = denoise_closed_form(np.array([1.0, 0.0, 0.0]), graph_laplacian(path_graph(3)), 1.0)
        np.testing.assert_allclose(out, [0.625, 0.25, 0.125], atol=1e-12)

    def test_path_first_order(self):
        out = denoise_first_order(np.array([1.0, 0.0, 0.0]), graph_laplacian(path_graph(3)), 0.1)
        np.testing.assert_allclose(out, [0.9, 0.1, 0.0], atol=1e-12)

    def test_constant_unchanged(self):
        lap = graph_laplacian(community_graph(2, 4, 0.8, 0.2, 1))
        np.testing.assert_allclose(denoise_closed_form(np.full(8, 2.5), lap, 3.0), 2.5, atol=1e-12)

    def test_first_order_warns_outside_validity(self):
        with pytest.warns(UserWarning):
            denoise_first_order(np.ones(3), graph_laplacian(path_graph(3)), 1.0)

    def test_first_order_ratio_under_halving(self, rng):
        lap = graph_laplacian(community_graph(2, 6, 0.7, 0.2, 4))
        x = rng.standard_normal((12, 2))
        beta = 0.05 / np.linalg.eigvalsh(lap).max()
        gap = [np.linalg.norm(denoise_first_order(x, lap, b) - denoise_closed_form(x, lap, b)) for b in (beta, beta / 2)]
        assert 3.2 <= gap[0] / gap[1] <= 4.8

    @pytest.mark.parametrize("seed", range(10))
    def test_optimality_and_descent(self, seed):
        g = community_graph(2, 8, 0.6, 0.15, seed)
        lap = graph_laplacian(g)
        x0 = np.random.default_rng(seed).standard_normal((16, 2))
        exact = denoise_closed_form(x0, lap, 0.5)
        assert np.linalg.norm(denoise_gradient(exact, x0, lap, 0.5)) < 1e-8
        assert np.abs(denoise_gradient_descent(x0, lap, 0.5, 500) - exact).max() < 1e-6

    @given(st.floats(0.0, 20.0), st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_output_is_smoother(self, beta, seed):
        lap = graph_laplacian(community_graph(2, 5, 0.6, 0.2, seed))
        x = np.random.default_rng(seed).standard_normal(10)
        y = denoise_closed_form(x, lap, beta)
        assert y @ lap @ y <= x @ lap @ x + 1e-10

    def test_conjugate_gradient_path(self, rng):
        # above the direct-solve threshold the sparse CG branch is used
        n = 2100
        g = community_graph(21, 100, 0.05, 0.0005, 2)
        lap = g.laplacian
        x0 = rng.standard_normal((n, 1))
        out = denoise_closed_form(x0, lap, 0.3)
        resid = (sp.identity(n) + 0.3 * lap) @ out - x0
        assert np.linalg.norm(resid) / np.linalg.norm(x0) < 1e-8

    def test_negative_beta(self):
        with pytest.raises(ValueError):
            denoise_closed_form(np.ones(3), graph_laplacian(path_graph(3)), -0.1)
