"""Euler graph diffusion, regularized Dirichlet energy and Laplacian denoising."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceError, DimensionError

DIRECT_SOLVE_MAX_N = 2000
SOLVE_TOL = 1e-10


@dataclass
class DiffusivityMatrix:
    f: np.ndarray
    symmetric: bool = False

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=np.float64)
        if self.f.ndim != 2 or self.f.shape[0] != self.f.shape[1]:
            raise DimensionError("diffusivity must be square")
        if np.any(self.f < 0):
            raise ValueError("diffusivity entries must be nonnegative")
        if self.symmetric and np.abs(self.f - self.f.T).max(initial=0.0) >= 1e-12:
            raise ValueError("diffusivity flagged symmetric but is not")

    @property
    def laplacian(self) -> np.ndarray:
        """``diag(F·1) - F``."""
        return np.diag(self.f.sum(axis=1)) - self.f


@dataclass
class EnergyParams:
    rho: float = 1.0
    step: float = 0.1

    def __post_init__(self):
        if self.rho < 0 or self.step <= 0:
            raise ValueError("need rho >= 0 and step > 0")


def _f(f) -> np.ndarray:
    return f.f if isinstance(f, DiffusivityMatrix) else np.asarray(f, dtype=np.float64)


def smoothness(h: np.ndarray, f) -> float:
    """Σ_ij F_ij ‖h_j − h_i‖², via the Laplacian identity (no N×N×d tensor)."""
    f = _f(f)
    h = np.asarray(h, dtype=np.float64)
    sq = (h * h).sum(axis=1)
    return float(f.sum(axis=1) @ sq + f.sum(axis=0) @ sq - 2.0 * np.sum(h * (f @ h)))


def dirichlet_energy(h, h_prev, f, rho: float) -> tuple[float, float]:
    """Returns ``(energy, smoothness_term)``."""
    h = np.asarray(h, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if h.shape != h_prev.shape:
        raise DimensionError("h and h_prev must share a shape")
    smooth = smoothness(h, f)
    return float(np.sum((h - h_prev) ** 2)) + rho * smooth, smooth


def diffusion_step(h, f, delta: float) -> np.ndarray:
    if delta < 0:
        raise ValueError("delta must be >= 0")
    f = _f(f)
    h = np.asarray(h, dtype=np.float64)
    return h - delta * f.sum(axis=1, keepdims=True) * h + delta * (f @ h)


def diffusion_step_per_node(h, f, delta: float) -> np.ndarray:
    """Same update written node by node; reference form for tests."""
    f = _f(f)
    h = np.asarray(h, dtype=np.float64)
    out = h.copy()
    for i in range(h.shape[0]):
        acc = np.zeros(h.shape[1])
        for j in range(h.shape[0]):
            acc += f[i, j] * (h[j] - h[i])
        out[i] = h[i] + delta * acc
    return out


def lambda_max(m, iters: int = 100, seed: int = 0) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(m.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = m @ v
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 0.0
        lam = float(v @ w)
        v = w / nrm
    return lam


def safe_step(f, safety: float = 0.95) -> float:
    lam = lambda_max(DiffusivityMatrix(_f(f)).laplacian)
    return safety / lam if lam > 0 else 1.0


def _solve(lap, x0: np.ndarray, beta: float) -> np.ndarray:
    n = x0.shape[0]
    if n <= DIRECT_SOLVE_MAX_N:
        dense = lap.toarray() if sp.issparse(lap) else np.asarray(lap, dtype=np.float64)
        m = np.eye(n) + beta * dense
        return sla.cho_solve(sla.cho_factor(m), x0)
    m = sp.identity(n, format="csr") + beta * sp.csr_matrix(lap)
    out = np.empty_like(x0)
    for c in range(x0.shape[1]):
        b = x0[:, c]
        sol, info = spla.cg(m, b, rtol=SOLVE_TOL, atol=0.0, maxiter=10 * n)
        res = float(np.linalg.norm(m @ sol - b) / max(np.linalg.norm(b), 1e-300))
        if info != 0 or res > 1e-8:
            raise ConvergenceError("conjugate gradient did not converge", res)
        out[:, c] = sol
    return out


def denoise_closed_form(x0, lap, beta: float) -> np.ndarray:
    """Minimizer ``(I + βL)^{-1} X⁰`` of ‖X − X⁰‖² + β tr(XᵀLX)."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    x0 = np.asarray(x0, dtype=np.float64)
    vec = x0.ndim == 1
    x = x0[:, None] if vec else x0
    out = x.copy() if beta == 0 else _solve(lap, x, beta)
    return out[:, 0] if vec else out


def denoise_first_order(x0, lap, beta: float) -> np.ndarray:
    """First-order expansion ``(I − βL) X⁰``."""
    x0 = np.asarray(x0, dtype=np.float64)
    lap_x = lap @ x0
    if beta > 0:
        dense = lap.toarray() if sp.issparse(lap) else lap
        lam = lambda_max(np.asarray(dense)) if x0.shape[0] <= DIRECT_SOLVE_MAX_N else None
        if lam is not None and beta * lam >= 1:
            warnings.warn(f"beta·λ_max = {beta * lam:.3g} >= 1; first-order approximation unreliable", stacklevel=2)
    return x0 - beta * np.asarray(lap_x)


def denoise_objective(x, x0, lap, beta: float) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.sum((x - x0) ** 2) + beta * np.sum(x * (lap @ x)))


def denoise_gradient(x, x0, lap, beta: float) -> np.ndarray:
    return 2.0 * beta * np.asarray(lap @ x) + 2.0 * (np.asarray(x) - x0)


def denoise_gradient_descent(x0, lap, beta: float, steps: int = 500, lr: float | None = None) -> np.ndarray:
    """Plain gradient descent on the denoising objective from X⁰.

    The default step is the reciprocal of the gradient's Lipschitz constant
    ``2(1 + βλ_max)``; the slowest mode then contracts by
    ``βλ_max / (1 + βλ_max)`` per step.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    dense = lap.toarray() if sp.issparse(lap) else np.asarray(lap)
    if lr is None:
        lam = float(np.linalg.eigvalsh(dense).max()) if x0.shape[0] <= 256 else lambda_max(dense)
        lr = 0.5 / (1.0 + beta * lam)
    x = x0.copy()
    for _ in range(steps):
        x = x - lr * denoise_gradient(x, x0, dense, beta)
    return x
