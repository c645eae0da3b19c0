"""Graph topologies, shift operators, the GP-VAR simulator and POD modes."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DataError, DimensionError, InstabilityError
from .data import SpatiotemporalSeries

DIVERGENCE_LIMIT = 1e6

# Lag (rows) by propagation order (columns).  Companion spectral radius stays
# below one on the default 600-node community graph even for gains of 1.5.
DEFAULT_PSI = (
    (0.24, 0.28, 0.10),
    (0.10, 0.10, 0.04),
    (0.00, 0.04, 0.00),
)
LARGE_PSI_SCALE = 1.25


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected weighted graph.  ``edges`` holds (i, j, w) with i <= j;
    i == j only for self-loops."""

    n: int
    edges: tuple[tuple[int, int, float], ...]

    def __post_init__(self):
        if self.n < 1:
            raise DimensionError("graph needs at least one node")
        for i, j, w in self.edges:
            if not (0 <= i <= j < self.n):
                raise DimensionError(f"bad edge ({i}, {j})")
            if w < 0:
                raise ValueError("edge weights must be nonnegative")

    @classmethod
    def from_edges(cls, n: int, edges) -> "Graph":
        return cls(n, tuple((int(min(i, j)), int(max(i, j)), float(w)) for i, j, w in edges))

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        if not self.edges:
            return sp.csr_matrix((self.n, self.n))
        i, j, w = (np.array(c) for c in zip(*self.edges))
        off = i != j
        rows = np.concatenate([i, j[off]])
        cols = np.concatenate([j, i[off]])
        vals = np.concatenate([w, w[off]])
        a = sp.coo_matrix((vals, (rows, cols)), shape=(self.n, self.n)).tocsr()
        a.sum_duplicates()
        return a

    @cached_property
    def degree(self) -> np.ndarray:
        return np.asarray(self.adjacency.sum(axis=1)).ravel()

    @cached_property
    def laplacian(self) -> sp.csr_matrix:
        return (sp.diags(self.degree) - self.adjacency).tocsr()

    @cached_property
    def shift(self) -> sp.csr_matrix:
        d = self.degree
        if np.any(d <= 0):
            raise DataError("normalized shift undefined: graph has a zero-degree node without self-loop")
        s = 1.0 / np.sqrt(d)
        return (sp.diags(s) @ self.adjacency @ sp.diags(s)).tocsr()

    @property
    def n_edges(self) -> int:
        return len(self.edges)


def community_graph(n_communities: int, nodes_per_community: int, p_in: float, p_out: float, seed: int) -> Graph:
    """Stochastic block model with unit weights; isolated nodes get a self-loop."""
    n = n_communities * nodes_per_community
    if n < 1:
        raise DimensionError("community graph needs at least one node")
    for p in (p_in, p_out):
        if not 0.0 <= p <= 1.0:
            raise ValueError("edge probabilities must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    block = np.repeat(np.arange(n_communities), nodes_per_community)
    iu, ju = np.triu_indices(n, 1)
    prob = np.where(block[iu] == block[ju], p_in, p_out)
    keep = rng.random(iu.size) < prob
    iu, ju = iu[keep], ju[keep]
    deg = np.bincount(iu, minlength=n) + np.bincount(ju, minlength=n)
    lonely = np.flatnonzero(deg == 0)
    edges = [(int(a), int(b), 1.0) for a, b in zip(iu, ju)]
    edges += [(int(k), int(k), 1.0) for k in lonely]
    edges.sort()
    return Graph(n, tuple(edges))


def path_graph(n: int) -> Graph:
    return Graph.from_edges(n, [(k, k + 1, 1.0) for k in range(n - 1)])


def graph_laplacian(g: Graph, kind: str = "unnormalized") -> np.ndarray:
    """Dense ``D - A`` (``unnormalized``) or ``D^-1/2 A D^-1/2`` (``sym_normalized_shift``)."""
    if kind == "unnormalized":
        return g.laplacian.toarray()
    if kind == "sym_normalized_shift":
        return g.shift.toarray()
    raise ValueError(f"unknown operator kind {kind!r}")


# ---------------------------------------------------------------- GP-VAR


@dataclass
class GpvarConfig:
    psi: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_PSI))
    noise_std: float = 0.4
    nonlinearity: str = "tanh"
    region_gains: np.ndarray | None = None
    gain_range: tuple[float, float] = (0.5, 1.5)
    exo: np.ndarray | None = None
    steps: int = 30_000
    seed: int = 0
    burn_in: int = 100
    operator: str = "sym_normalized_shift"

    def __post_init__(self):
        self.psi = np.atleast_2d(np.asarray(self.psi, dtype=np.float64))
        if self.p_lags < 1:
            raise ValueError("p_lags must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    @property
    def p_lags(self) -> int:
        return self.psi.shape[0]

    @property
    def l_order(self) -> int:
        return self.psi.shape[1] - 1

    @classmethod
    def large(cls, **kw) -> "GpvarConfig":
        """Harder variant: stronger coupling, noisier observations."""
        kw.setdefault("psi", np.array(DEFAULT_PSI) * LARGE_PSI_SCALE)
        kw.setdefault("noise_std", 0.75)
        return cls(**kw)


_XI = {
    "tanh": np.tanh,
    "relu": lambda h: np.maximum(h, 0.0),
    "sigmoid": lambda h: 0.5 * (1.0 + np.tanh(0.5 * h)),
    "identity": lambda h: h,
}


def _operator(g: Graph, kind: str) -> sp.csr_matrix:
    if kind == "sym_normalized_shift":
        return g.shift
    if kind == "unnormalized":
        return g.laplacian
    raise ValueError(f"unknown operator kind {kind!r}")


def region_gains(g: Graph, cfg: GpvarConfig) -> np.ndarray:
    if cfg.region_gains is not None:
        e = np.asarray(cfg.region_gains, dtype=np.float64)
        if e.shape != (g.n,):
            raise DimensionError("region_gains must have one entry per node")
        return e
    lo, hi = cfg.gain_range
    return np.random.default_rng([cfg.seed, 1]).uniform(lo, hi, g.n)


def gpvar_generate(g: Graph, cfg: GpvarConfig) -> SpatiotemporalSeries:
    """Simulate the graph polynomial VAR recurrence and return N × steps × 1.

    The exogenous series, when given as N × (burn_in + steps), enters the
    concatenated lag input additively (a single channel under scalar weights).
    """
    if cfg.nonlinearity not in _XI:
        raise ValueError(f"unknown nonlinearity {cfg.nonlinearity!r}")
    xi = _XI[cfg.nonlinearity]
    s = _operator(g, cfg.operator)
    e = region_gains(g, cfg)
    n, p_lags, l_order = g.n, cfg.p_lags, cfg.l_order
    total = cfg.burn_in + cfg.steps
    u = None
    if cfg.exo is not None:
        u = np.asarray(cfg.exo, dtype=np.float64).reshape(n, -1)
        if u.shape[1] != total:
            raise DimensionError(f"exogenous input must cover {total} steps")
    noise_rng = np.random.default_rng([cfg.seed, 2])
    x = np.zeros((total + p_lags, n))
    psi = cfg.psi
    for t in range(p_lags, total + p_lags):
        lags = x[t - p_lags:t][::-1]  # lags[p-1] = X_{t-p}
        if u is not None:
            tau = t - p_lags
            ulag = np.zeros((p_lags, n))
            for p in range(1, min(p_lags, tau) + 1):
                ulag[p - 1] = u[:, tau - p]
            lags = lags + ulag
        y = psi.T @ lags  # y[l] = sum_p psi[p, l] X_{t-p}
        h = y[l_order]
        for level in range(l_order - 1, -1, -1):
            h = y[level] + s @ h
        xt = e * xi(h)
        if cfg.noise_std > 0:
            xt = xt + cfg.noise_std * noise_rng.standard_normal(n)
        if not np.all(np.abs(xt) <= DIVERGENCE_LIMIT):
            raise InstabilityError(f"GP-VAR diverged at step {t - p_lags}")
        x[t] = xt
    data = x[p_lags + cfg.burn_in:].T[:, :, None].copy()
    return SpatiotemporalSeries(data)


def companion_radius(g: Graph, cfg: GpvarConfig) -> float:
    """Spectral radius of the recurrence linearized at zero (dense; small graphs)."""
    s = _operator(g, cfg.operator).toarray()
    e = np.diag(region_gains(g, cfg))
    n, p_lags = g.n, cfg.p_lags
    powers = [np.eye(n)]
    for _ in range(cfg.l_order):
        powers.append(powers[-1] @ s)
    comp = np.zeros((n * p_lags, n * p_lags))
    for p in range(p_lags):
        comp[:n, p * n:(p + 1) * n] = e @ sum(cfg.psi[p, l] * powers[l] for l in range(cfg.l_order + 1))
    comp[n:, :-n] = np.eye(n * (p_lags - 1))
    return float(np.abs(np.linalg.eigvals(comp)).max())


# ---------------------------------------------------------------- POD


@dataclass
class PodBasis:
    modes: np.ndarray  # N × r, orthonormal columns
    singular_values: np.ndarray

    @property
    def rank(self) -> int:
        return self.modes.shape[1]

    def project(self, x: np.ndarray) -> np.ndarray:
        """Mode coefficients α_k(t) for an N × T state matrix."""
        return self.modes.T @ x

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        return self.modes @ self.project(x)


def _state_matrix(x) -> np.ndarray:
    if isinstance(x, SpatiotemporalSeries):
        d = x.data
        return d.reshape(d.shape[0], -1)
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(x.shape[0], -1)


def pod_basis(x, r: int) -> PodBasis:
    """Top-r left singular directions of the N × T node-state matrix.

    Uses Lanczos (``svds``) when r is well below the smaller dimension and a
    dense SVD otherwise.
    """
    m = _state_matrix(x)
    kmax = min(m.shape)
    if not 1 <= r <= kmax:
        raise DimensionError(f"rank {r} out of range [1, {kmax}]")
    if r < kmax - 1 and kmax > 64:
        u, s, _ = spla.svds(m, k=r, random_state=0)
        order = np.argsort(s)[::-1]
        u, s = u[:, order], s[order]
    else:
        u, s, _ = np.linalg.svd(m, full_matrices=False)
        u, s = u[:, :r], s[:r]
    return PodBasis(u, s)


def reconstruction_error(x, basis: PodBasis) -> float:
    m = _state_matrix(x)
    return float(np.linalg.norm(m - basis.reconstruct(m)) ** 2)
