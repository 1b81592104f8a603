"""Graph containers, Laplacian construction, subgraphs, synthetic data and splits."""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

LAMBDA_SAFETY = 1.01


@dataclass(frozen=True)
class SparseGraph:
    """Undirected attributed graph stored as a symmetric CSR adjacency.

    Use :meth:`from_edges` to build one; it symmetrizes, deduplicates and
    drops self-loops so that the invariants below always hold.
    """

    num_nodes: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.row_offsets.shape != (self.num_nodes + 1,):
            raise ValueError("row_offsets must have num_nodes + 1 entries")
        if self.features.ndim != 2 or self.features.shape[0] != self.num_nodes:
            raise ValueError(
                f"features must have {self.num_nodes} rows, got shape {self.features.shape}"
            )
        if self.labels is not None and self.labels.shape != (self.num_nodes,):
            raise ValueError(
                f"labels must have length {self.num_nodes}, got {self.labels.shape}"
            )

    @classmethod
    def from_edges(cls, num_nodes, edges, features, labels=None) -> "SparseGraph":
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
            raise ValueError("edge endpoint out of range")
        keep = edges[:, 0] != edges[:, 1]
        u, v = edges[keep, 0], edges[keep, 1]
        rows = np.concatenate([u, v])
        cols = np.concatenate([v, u])
        adj = sp.csr_matrix(
            (np.ones(rows.size), (rows, cols)), shape=(num_nodes, num_nodes)
        )
        adj.sum_duplicates()
        adj.sort_indices()
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 1:
            features = features.reshape(num_nodes, -1)
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
        return cls(
            num_nodes=int(num_nodes),
            row_offsets=adj.indptr.astype(np.int64),
            col_indices=adj.indices.astype(np.int64),
            features=features,
            labels=labels,
        )

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        """Number of undirected edges."""
        return self.col_indices.size // 2

    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(self.col_indices.size)
        return sp.csr_matrix(
            (data, self.col_indices, self.row_offsets),
            shape=(self.num_nodes, self.num_nodes),
        )

    def degrees(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def neighbors(self, node: int) -> np.ndarray:
        return self.col_indices[self.row_offsets[node] : self.row_offsets[node + 1]]

    def edge_list(self) -> np.ndarray:
        """Undirected edges as (u, v) rows with u < v, in CSR order."""
        rows = np.repeat(np.arange(self.num_nodes), self.degrees())
        mask = rows < self.col_indices
        return np.stack([rows[mask], self.col_indices[mask]], axis=1)

    def permute(self, perm) -> "SparseGraph":
        """Relabel nodes so that new node ``i`` is old node ``perm[i]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        edges = inv[self.edge_list()]
        labels = None if self.labels is None else self.labels[perm]
        return SparseGraph.from_edges(self.num_nodes, edges, self.features[perm], labels)


@dataclass(frozen=True)
class LaplacianOperator:
    """Sparse normalized Laplacian, or its rescaled form when ``rescaled``."""

    matrix: sp.csr_matrix
    lambda_max: float
    rescaled: bool = False

    @property
    def num_nodes(self) -> int:
        return self.matrix.shape[0]

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


def build_laplacian(
    graph: SparseGraph, tol: float = 1e-6, max_iters: int = 10000, estimate: bool = True
) -> LaplacianOperator:
    """L = I - D^-1/2 A D^-1/2, with degree-0 nodes treated as degree 1.

    With ``estimate=False`` the eigenvalue bound is set to 2.0 instead of
    being estimated (callers that never rescale skip the power iteration).
    """
    adj = graph.adjacency()
    deg = graph.degrees().astype(np.float64)
    deg[deg == 0] = 1.0
    d_inv_sqrt = sp.diags(1.0 / np.sqrt(deg))
    lap = sp.identity(graph.num_nodes, format="csr") - d_inv_sqrt @ adj @ d_inv_sqrt
    lap = sp.csr_matrix(lap)
    lap.sort_indices()
    op = LaplacianOperator(matrix=lap, lambda_max=2.0)
    lam = estimate_lambda_max(op, tol=tol, max_iters=max_iters) if estimate else 2.0
    return LaplacianOperator(matrix=lap, lambda_max=lam)


def estimate_lambda_max(lap: LaplacianOperator, tol: float = 1e-6, max_iters: int = 10000) -> float:
    """Largest eigenvalue of L by power iteration with a Rayleigh-quotient estimate.

    Stops once the eigen-residual ``||Lv - rho v||`` drops below
    ``tol * rho``. Returns 2.0 (the universal bound) when that does not
    happen within ``max_iters``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = lap.num_nodes
    if n == 0:
        return 0.0
    mat = lap.matrix
    rng = np.random.default_rng(0)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    for _ in range(max_iters):
        w = mat @ v
        rho = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        if np.linalg.norm(w - rho * v) <= tol * rho:
            return float(min(rho, 2.0))
        v = w / norm
    logger.warning("power iteration did not converge in %d iterations; using 2.0", max_iters)
    return 2.0


def effective_lambda_max(lambda_max: float) -> float:
    """Safety-inflated eigenvalue bound actually used for rescaling."""
    return min(LAMBDA_SAFETY * lambda_max, 2.0)


def rescale_laplacian(lap: LaplacianOperator) -> LaplacianOperator:
    """(2 / lambda_max) L - I using the safety-inflated bound."""
    if lap.rescaled:
        raise ValueError("Laplacian is already rescaled")
    if lap.lambda_max <= 0:
        raise ValueError(f"lambda_max must be positive, got {lap.lambda_max}")
    lam = effective_lambda_max(lap.lambda_max)
    n = lap.num_nodes
    mat = sp.csr_matrix((2.0 / lam) * lap.matrix - sp.identity(n, format="csr"))
    mat.sort_indices()
    return LaplacianOperator(matrix=mat, lambda_max=lam, rescaled=True)


def k_hop_subgraph(graph: SparseGraph, center: int, k: int) -> SparseGraph:
    """Induced subgraph on the radius-``k`` ball; the center becomes node 0."""
    if not 0 <= center < graph.num_nodes:
        raise IndexError(f"center {center} out of range for {graph.num_nodes} nodes")
    if k < 0:
        raise ValueError("k must be non-negative")
    nodes = bfs_ball(graph, center, k)
    others = np.sort(np.array([u for u in nodes if u != center], dtype=np.int64))
    order = np.concatenate([[center], others]).astype(np.int64)
    local = {int(u): i for i, u in enumerate(order)}
    edges = []
    for u in order:
        lu = local[int(u)]
        for v in graph.neighbors(u):
            lv = local.get(int(v))
            if lv is not None and lu < lv:
                edges.append((lu, lv))
    labels = None if graph.labels is None else graph.labels[order]
    return SparseGraph.from_edges(order.size, edges, graph.features[order], labels)


def bfs_ball(graph: SparseGraph, center: int, k: int) -> set[int]:
    seen = {int(center)}
    frontier = deque([(int(center), 0)])
    while frontier:
        u, dist = frontier.popleft()
        if dist == k:
            continue
        for v in graph.neighbors(u):
            v = int(v)
            if v not in seen:
                seen.add(v)
                frontier.append((v, dist + 1))
    return seen


def generate_csbm_anomaly_graph(
    n: int,
    anomaly_rate: float,
    p_in: float,
    p_out: float,
    feature_dim: int,
    signal_strength: float,
    seed: int,
    fixed_count: bool = True,
    communities: int = 1,
    community_scale: float = 0.0,
    p_cross: float | None = None,
) -> SparseGraph:
    """Contextual SBM with camouflaged anomalies.

    Normal-normal and anomaly-normal pairs connect with ``p_in``,
    anomaly-anomaly pairs with ``p_out``. Normal features are centred at
    their class mean, anomalous ones at that mean shifted by
    ``signal_strength`` along a random unit direction; both get unit
    Gaussian noise.

    With ``communities > 1`` every node is also assigned to a block; the
    class mean becomes a per-block mean drawn from
    ``N(0, community_scale^2 I)`` and pairs in different blocks connect
    with ``p_cross`` (default ``p_in``) instead of ``p_in``.
    """
    if n < 1:
        raise ValueError("n must be positive")
    if not 0.0 < anomaly_rate < 0.5:
        raise ValueError("anomaly_rate must lie in (0, 0.5)")
    if not 0.0 <= p_out <= p_in <= 1.0:
        raise ValueError("require 0 <= p_out <= p_in <= 1")
    if p_cross is None:
        p_cross = p_in
    if not 0.0 <= p_cross <= 1.0:
        raise ValueError("p_cross must lie in [0, 1]")
    if feature_dim < 1 or communities < 1:
        raise ValueError("feature_dim and communities must be positive")
    rng = np.random.default_rng(seed)

    labels = np.zeros(n, dtype=np.int64)
    if fixed_count:
        n_anom = int(round(n * anomaly_rate))
        labels[rng.permutation(n)[:n_anom]] = 1
    else:
        labels[rng.random(n) < anomaly_rate] = 1
    block = rng.permutation(np.arange(n) % communities)

    edges = []
    for u in range(n - 1):
        v = np.arange(u + 1, n)
        both = (labels[u] == 1) & (labels[v] == 1)
        prob = np.where(block[v] == block[u], p_in, p_cross)
        prob = np.where(both, p_out, prob)
        hit = rng.random(v.size) < prob
        if hit.any():
            edges.append(np.stack([np.full(hit.sum(), u), v[hit]], axis=1))
    edges = np.concatenate(edges) if edges else np.empty((0, 2), dtype=np.int64)

    direction = rng.standard_normal(feature_dim)
    direction /= np.linalg.norm(direction)
    means = community_scale * rng.standard_normal((communities, feature_dim))
    features = means[block] + rng.standard_normal((n, feature_dim))
    features[labels == 1] += signal_strength * direction
    return SparseGraph.from_edges(n, edges, features, labels)


def _parse_error(path, lineno, msg):
    return ValueError(f"{path}:{lineno}: {msg}")


def read_edges(path) -> np.ndarray:
    edges = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 2:
                raise _parse_error(path, lineno, f"expected 'u v', got {text!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise _parse_error(path, lineno, f"non-integer node id in {text!r}") from None
            if u < 0 or v < 0:
                raise _parse_error(path, lineno, "negative node id")
            edges.append((u, v))
    return np.array(edges, dtype=np.int64).reshape(-1, 2)


def read_features(path) -> np.ndarray:
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text:
                continue
            try:
                row = [float(x) for x in text.split(",")]
            except ValueError:
                raise _parse_error(path, lineno, "non-numeric feature value") from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise _parse_error(path, lineno, f"expected {width} columns, got {len(row)}")
            rows.append(row)
    if not rows:
        raise ValueError(f"{path}: no feature rows")
    return np.array(rows, dtype=np.float64)


def read_labels(path) -> np.ndarray:
    labels = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text:
                continue
            if text not in ("0", "1"):
                raise _parse_error(path, lineno, f"label must be 0 or 1, got {text!r}")
            labels.append(int(text))
    return np.array(labels, dtype=np.int64)


def load_graph(edge_path, feature_path, label_path=None) -> SparseGraph:
    edges = read_edges(edge_path)
    features = read_features(feature_path)
    n = features.shape[0]
    if edges.size and edges.max() + 1 > n:
        raise ValueError(
            f"feature row count {n} does not cover node id {int(edges.max())} "
            f"referenced in {edge_path}"
        )
    labels = None
    if label_path is not None:
        labels = read_labels(label_path)
        if labels.size != n:
            raise ValueError(f"{label_path}: {labels.size} labels for {n} feature rows")
    return SparseGraph.from_edges(n, edges, features, labels)


def save_graph(graph: SparseGraph, out_dir) -> dict[str, Path]:
    """Write the edge/feature/label files that :func:`load_graph` reads."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "edges": out_dir / "edges.txt",
        "features": out_dir / "features.csv",
        "labels": out_dir / "labels.txt",
    }
    with open(paths["edges"], "w") as fh:
        fh.write(f"# {graph.num_nodes} nodes, {graph.num_edges} undirected edges\n")
        for u, v in graph.edge_list():
            fh.write(f"{u} {v}\n")
    with open(paths["features"], "w") as fh:
        for row in graph.features:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    if graph.labels is not None:
        with open(paths["labels"], "w") as fh:
            fh.writelines(f"{int(y)}\n" for y in graph.labels)
    else:
        del paths["labels"]
    return paths


TRAIN, VALIDATION, TEST = 0, 1, 2


@dataclass(frozen=True)
class SplitAssignment:
    roles: np.ndarray
    seed: int
    train_ratio: float = field(default=0.4)

    @property
    def train(self) -> np.ndarray:
        return np.flatnonzero(self.roles == TRAIN)

    @property
    def validation(self) -> np.ndarray:
        return np.flatnonzero(self.roles == VALIDATION)

    @property
    def test(self) -> np.ndarray:
        return np.flatnonzero(self.roles == TEST)


def make_splits(graph: SparseGraph, train_ratio: float, seed: int) -> SplitAssignment:
    """Stratified train/validation/test split with a 1:2 validation:test ratio.

    Per class, ``ceil(train_ratio * size)`` nodes (at least one) go to
    training and the remainder is divided one third / two thirds.
    """
    if graph.labels is None:
        raise ValueError("graph has no labels")
    if not 0.0 < train_ratio < 1.0:
        raise ValueError("train_ratio must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    roles = np.empty(graph.num_nodes, dtype=np.int8)
    for cls in np.unique(graph.labels):
        members = np.flatnonzero(graph.labels == cls)
        if members.size < 3:
            raise ValueError(f"class {cls} has only {members.size} labeled nodes; need 3")
        members = rng.permutation(members)
        n_train = max(1, math.ceil(train_ratio * members.size - 1e-9))
        n_train = min(n_train, members.size - 2)
        rest = members.size - n_train
        n_val = max(1, int(round(rest / 3)))
        roles[members[:n_train]] = TRAIN
        roles[members[n_train : n_train + n_val]] = VALIDATION
        roles[members[n_train + n_val :]] = TEST
    return SplitAssignment(roles=roles, seed=seed, train_ratio=train_ratio)
