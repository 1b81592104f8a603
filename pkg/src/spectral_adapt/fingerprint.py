"""20-dimensional spectral fingerprints: extremal-eigenvalue moments plus
Rayleigh-quotient smoothness of randomly projected features."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .graph import LaplacianOperator, SparseGraph, build_laplacian, k_hop_subgraph

logger = logging.getLogger(__name__)

SIGNAL_DIM = 16
STRUCT_DIM = 4
FINGERPRINT_DIM = STRUCT_DIM + SIGNAL_DIM
DENSE_LIMIT = 2048
DEFAULT_W = 6
RAYLEIGH_EPS = 1e-12


@dataclass(frozen=True)
class SpectralFingerprint:
    f_struct: np.ndarray
    f_signal: np.ndarray

    @property
    def combined(self) -> np.ndarray:
        return np.concatenate([self.f_struct, self.f_signal])

    def to_list(self) -> list[float]:
        return [float(x) for x in self.combined]


@dataclass(frozen=True)
class ProjectionMatrix:
    matrix: np.ndarray
    seed: int

    @property
    def feature_dim(self) -> int:
        return self.matrix.shape[0]


def moments(values) -> np.ndarray:
    """[mean, population variance, skewness, excess kurtosis].

    Skewness and kurtosis are reported as 0 for a degenerate (constant)
    sample.
    """
    x = np.asarray(values, dtype=np.float64)
    mean = x.mean()
    centred = x - mean
    var = np.mean(centred**2)
    if var <= 1e-24 * max(1.0, mean * mean):
        return np.array([mean, 0.0, 0.0, 0.0])
    skew = np.mean(centred**3) / var**1.5
    kurt = np.mean(centred**4) / var**2 - 3.0
    return np.array([mean, var, skew, kurt])


def select_extremal(sorted_values: np.ndarray, w: int) -> np.ndarray:
    """The ``w`` smallest and ``w`` largest entries, each value counted once."""
    if w < 1:
        raise ValueError("w must be at least 1")
    n = sorted_values.size
    if 2 * w >= n:
        return sorted_values
    return np.concatenate([sorted_values[:w], sorted_values[-w:]])


def eigen_moments_exact(lap: LaplacianOperator, w: int = DEFAULT_W, limit: int = DENSE_LIMIT) -> np.ndarray:
    if lap.num_nodes > limit:
        raise ValueError(f"dense eigendecomposition limited to {limit} nodes, got {lap.num_nodes}")
    eigs = np.linalg.eigvalsh(lap.dense())
    return moments(select_extremal(eigs, w))


def lanczos(matvec, v0: np.ndarray, steps: int, breakdown_tol: float = 1e-10, return_basis: bool = False):
    """Lanczos tridiagonalisation with full reorthogonalisation.

    Returns ``(alpha, beta)``; stops early on breakdown. With
    ``return_basis`` also returns the orthonormal basis (rows) and the norm
    of the final residual (0 after a breakdown).
    """
    n = v0.size
    steps = min(steps, n)
    basis = np.zeros((steps, n))
    alpha, beta = [], []
    residual = 0.0
    q = v0 / np.linalg.norm(v0)
    for j in range(steps):
        basis[j] = q
        r = matvec(q)
        a = float(q @ r)
        alpha.append(a)
        r = r - basis[: j + 1].T @ (basis[: j + 1] @ r)
        r = r - basis[: j + 1].T @ (basis[: j + 1] @ r)
        b = float(np.linalg.norm(r))
        if b < breakdown_tol:
            logger.debug("Lanczos breakdown after %d steps", j + 1)
            break
        if j == steps - 1:
            residual = b
            break
        beta.append(b)
        q = r / b
    alpha, beta = np.array(alpha), np.array(beta)
    if return_basis:
        return alpha, beta, basis[: alpha.size], residual
    return alpha, beta


def ritz_quadrature(alpha: np.ndarray, beta: np.ndarray):
    """Ritz values and Gauss quadrature weights of a Lanczos tridiagonal."""
    nodes, vecs = _tridiagonal_eigh(alpha, beta)
    return nodes, vecs[0] ** 2


def _tridiagonal_eigh(alpha, beta):
    if alpha.size == 1:
        return alpha.copy(), np.ones((1, 1))
    return scipy.linalg.eigh_tridiagonal(alpha, beta)


def quantiles_from_measure(nodes: np.ndarray, weights: np.ndarray, levels: np.ndarray) -> np.ndarray:
    order = np.argsort(nodes, kind="stable")
    nodes, weights = nodes[order], weights[order]
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    idx = np.searchsorted(cdf, levels, side="left")
    return nodes[np.minimum(idx, nodes.size - 1)]


@dataclass
class RitzSample:
    """Pooled Ritz pairs from several Lanczos runs."""

    values: np.ndarray
    weights: np.ndarray
    vectors: np.ndarray
    residuals: np.ndarray


def collect_ritz(lap: LaplacianOperator, num_probes: int, steps: int, seed: int) -> RitzSample:
    n = lap.num_nodes
    rng = np.random.default_rng(seed)
    mat = lap.matrix
    vals, wts, vecs, res = [], [], [], []
    for _ in range(num_probes):
        probe = rng.choice([-1.0, 1.0], size=n)
        alpha, beta, basis, residual = lanczos(lambda v: mat @ v, probe, steps, return_basis=True)
        nodes, s = _tridiagonal_eigh(alpha, beta)
        vals.append(nodes)
        wts.append(s[0] ** 2)
        vecs.append((basis.T @ s).T)
        res.append(residual * np.abs(s[-1]))
    return RitzSample(
        values=np.concatenate(vals),
        weights=np.concatenate(wts) / num_probes,
        vectors=np.concatenate(vecs),
        residuals=np.concatenate(res),
    )


def converged_clusters(sample: RitzSample, tol: float = 1e-4, rank_tol: float = 0.05):
    """Group converged Ritz values into distinct eigenvalues with multiplicities.

    Ritz pairs with residual below ``tol`` are exact to that precision;
    values closer than ``tol`` are merged and the multiplicity is the
    numerical rank of their stacked Ritz vectors (several probes see
    different directions of a repeated eigenspace).
    """
    conv = sample.residuals <= tol
    order = np.argsort(sample.values[conv], kind="stable")
    values = sample.values[conv][order]
    vectors = sample.vectors[conv][order]
    if values.size == 0:
        return np.empty(0), np.empty(0, dtype=int)
    starts = np.flatnonzero(np.r_[True, np.diff(values) > tol])
    ends = np.r_[starts[1:], values.size]
    centers, mult = [], []
    for a, b in zip(starts, ends):
        sv = np.linalg.svd(vectors[a:b], compute_uv=False)
        centers.append(values[a:b].mean())
        mult.append(int(np.sum(sv > rank_tol * sv[0])))
    return np.array(centers), np.array(mult)


def _trusted_bounds(sample: RitzSample, centers: np.ndarray, tol: float):
    """Range within which no eigenvalue can have been missed.

    An unconverged Ritz value pins an eigenvalue to within its residual;
    if that interval holds no converged cluster, an eigenvalue is unaccounted
    for there and the walk from either end must stop before it.
    """
    loose = sample.residuals > tol
    vals, res = sample.values[loose], sample.residuals[loose]
    if vals.size == 0 or centers.size == 0:
        return np.inf, -np.inf
    covered = (np.abs(vals[:, None] - centers[None, :]) <= (res + tol)[:, None]).any(axis=1)
    if covered.all():
        return np.inf, -np.inf
    return float(np.min(vals[~covered] - res[~covered])), float(np.max(vals[~covered] + res[~covered]))


def extremal_eigenvalue_estimate(sample: RitzSample, n: int, w: int, tol: float = 1e-4) -> np.ndarray:
    """Estimated ``w`` smallest and ``w`` largest eigenvalues (all when 2w >= n).

    Converged clusters are expanded by multiplicity from each end of the
    spectrum; ranks they cannot reach are filled with quantiles of the
    pooled Gauss-quadrature spectral measure.
    """
    ranks = np.arange(n)
    if 2 * w < n:
        ranks = np.concatenate([ranks[:w], ranks[-w:]])
    estimate = quantiles_from_measure(sample.values, sample.weights, (ranks + 0.5) / n)
    centers, mult = converged_clusters(sample, tol)
    if centers.size == 0:
        return estimate
    low_stop, high_stop = _trusted_bounds(sample, centers, tol)
    k = estimate.size if 2 * w >= n else w

    low = np.repeat(centers, mult)[: k]
    low = low[low < low_stop]
    if 2 * w >= n and low.size >= n:
        return low[:n]
    high = np.repeat(centers, mult)[::-1][: k]
    high = high[high > high_stop][::-1]
    # lower ranks first, then upper ranks overwrite from the top
    estimate[: low.size] = low[: estimate.size]
    if high.size:
        estimate[estimate.size - high.size :] = high[-estimate.size :]
    return estimate


def eigen_moments_stochastic(
    lap: LaplacianOperator,
    w: int = DEFAULT_W,
    num_probes: int = 64,
    lanczos_steps: int = 40,
    seed: int = 0,
) -> np.ndarray:
    """Moments of extremal eigenvalues estimated with randomly started Lanczos.

    Rademacher probes start the Lanczos runs. Extremal Ritz values converge
    first, so the ends of the spectrum are read off converged Ritz pairs
    (with multiplicities from Ritz-vector rank); anything unresolved falls
    back to quantiles of the probe-averaged Ritz measure.
    """
    if num_probes < 1:
        raise ValueError("num_probes must be at least 1")
    if w < 1:
        raise ValueError("w must be at least 1")
    sample = collect_ritz(lap, num_probes, lanczos_steps, seed)
    return moments(extremal_eigenvalue_estimate(sample, lap.num_nodes, w))


def make_projection(feature_dim: int, seed: int) -> ProjectionMatrix:
    if feature_dim < 1:
        raise ValueError("feature_dim must be positive")
    rng = np.random.default_rng(seed)
    matrix = rng.normal(0.0, 1.0 / np.sqrt(feature_dim), size=(feature_dim, SIGNAL_DIM))
    matrix.setflags(write=False)
    return ProjectionMatrix(matrix=matrix, seed=seed)


def rayleigh_quotient(lap: LaplacianOperator, x) -> float:
    if lap.rescaled:
        raise ValueError("Rayleigh quotient expects the unrescaled Laplacian")
    x = np.asarray(x, dtype=np.float64)
    denom = float(x @ x)
    if denom < RAYLEIGH_EPS:
        return 0.0
    return float(x @ (lap.matrix @ x)) / denom


def signal_fingerprint(lap: LaplacianOperator, features: np.ndarray, proj: ProjectionMatrix) -> np.ndarray:
    if features.shape[1] != proj.feature_dim:
        raise ValueError(
            f"projection expects {proj.feature_dim} features, got {features.shape[1]}"
        )
    projected = features @ proj.matrix
    values = np.array([rayleigh_quotient(lap, projected[:, j]) for j in range(SIGNAL_DIM)])
    return np.clip(values / 2.0, 0.0, 1.0)


def compute_fingerprint(
    graph: SparseGraph,
    proj: ProjectionMatrix,
    mode: str = "exact",
    w: int = DEFAULT_W,
    seed: int = 0,
    lap: LaplacianOperator | None = None,
    num_probes: int = 64,
    lanczos_steps: int = 40,
) -> SpectralFingerprint:
    if graph.num_nodes == 0:
        raise ValueError("graph is empty")
    if lap is None:
        lap = build_laplacian(graph, estimate=False)
    if mode == "exact" and graph.num_nodes > DENSE_LIMIT:
        logger.info("N=%d above dense limit; using stochastic moments", graph.num_nodes)
        mode = "stochastic"
    if mode == "exact":
        f_struct = eigen_moments_exact(lap, w)
    elif mode == "stochastic":
        f_struct = eigen_moments_stochastic(lap, w, num_probes, lanczos_steps, seed)
    else:
        raise ValueError(f"unknown fingerprint mode {mode!r}")
    f_signal = signal_fingerprint(lap, graph.features, proj)
    return SpectralFingerprint(f_struct=f_struct, f_signal=f_signal)


def node_fingerprints(graph: SparseGraph, proj: ProjectionMatrix, hops: int = 2, w: int = DEFAULT_W) -> np.ndarray:
    """One exact fingerprint per node, computed on its ``hops``-hop subgraph."""
    out = np.empty((graph.num_nodes, FINGERPRINT_DIM))
    for node in range(graph.num_nodes):
        sub = k_hop_subgraph(graph, node, hops)
        out[node] = compute_fingerprint(sub, proj, "exact", w).combined
    return out
