"""Post-hoc frequency-response analysis of trained filters.

For a node we take its 2-hop subgraph, fingerprint it, run the trained
hypernetwork and turn each head's Chebyshev coefficients into a gain curve
g(lambda) on a fixed grid over [0, 2].
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .fingerprint import ProjectionMatrix, compute_fingerprint
from .graph import (
    SparseGraph,
    build_laplacian,
    effective_lambda_max,
    k_hop_subgraph,
    make_splits,
    rescale_laplacian,
)
from .model import ModelConfig, as_teacher, forward, generate_coefficients, make_inputs, theta_matrix

logger = logging.getLogger(__name__)

GRID_POINTS = 201
HIGH_BAND = (1.5, 2.0)


def lambda_grid(points: int = GRID_POINTS) -> np.ndarray:
    return np.linspace(0.0, 2.0, points)


@dataclass
class ResponseCurve:
    grid: np.ndarray
    values: np.ndarray
    tag: str
    lambda_max: float = 2.0

    def band_gain(self, lo: float = HIGH_BAND[0], hi: float = HIGH_BAND[1]) -> float:
        """Mean gain over grid points with lo <= lambda <= hi."""
        sel = (self.grid >= lo) & (self.grid <= hi)
        return float(self.values[sel].mean())


def chebyshev_polynomials(x: np.ndarray, order: int) -> np.ndarray:
    """Rows T_0(x) .. T_order(x) by the three-term recursion."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty((order + 1,) + x.shape)
    out[0] = 1.0
    if order >= 1:
        out[1] = x
    for k in range(2, order + 1):
        out[k] = 2.0 * x * out[k - 1] - out[k - 2]
    return out


def response_from_coeffs(theta, lambda_max: float = 2.0, tag: str = "head", grid=None) -> ResponseCurve:
    """g(lambda) = sum_k theta_k T_k(2 lambda / lambda_max - 1)."""
    if lambda_max <= 0:
        raise ValueError("lambda_max must be positive")
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    grid = lambda_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    polys = chebyshev_polynomials(2.0 * grid / lambda_max - 1.0, theta.size - 1)
    return ResponseCurve(grid=grid, values=theta @ polys, tag=tag, lambda_max=float(lambda_max))


@dataclass
class NodeAnalysis:
    node: int
    subgraph_size: int
    lambda_max: float
    lambda_max_defaulted: bool
    fingerprint: np.ndarray
    thetas: np.ndarray
    alpha: np.ndarray
    heads: list[ResponseCurve]
    weighted: ResponseCurve

    def to_dict(self) -> dict:
        return {
            "node": self.node,
            "subgraph_size": self.subgraph_size,
            "lambda_max": self.lambda_max,
            "lambda_max_defaulted": self.lambda_max_defaulted,
            "extrapolated": bool(self.lambda_max < 2.0),
            "fingerprint": [float(x) for x in self.fingerprint],
            "thetas": self.thetas.tolist(),
            "alpha": [float(a) for a in self.alpha],
            "lambda": self.weighted.grid.tolist(),
            "heads": [c.values.tolist() for c in self.heads],
            "weighted": self.weighted.values.tolist(),
        }


@dataclass
class ClassAverage:
    normal_mean: ResponseCurve
    normal_std: np.ndarray
    anomaly_mean: ResponseCurve
    anomaly_std: np.ndarray
    normal_nodes: list[int] = field(default_factory=list)
    anomaly_nodes: list[int] = field(default_factory=list)

    def band_gap(self, lo: float = HIGH_BAND[0], hi: float = HIGH_BAND[1]) -> float:
        return self.anomaly_mean.band_gain(lo, hi) - self.normal_mean.band_gain(lo, hi)

    def to_dict(self) -> dict:
        return {
            "lambda": self.normal_mean.grid.tolist(),
            "normal_mean": self.normal_mean.values.tolist(),
            "normal_std": self.normal_std.tolist(),
            "anomaly_mean": self.anomaly_mean.values.tolist(),
            "anomaly_std": self.anomaly_std.tolist(),
            "normal_nodes": self.normal_nodes,
            "anomaly_nodes": self.anomaly_nodes,
            "high_band_gap": self.band_gap(),
        }


def model_config_from_checkpoint(checkpoint: dict) -> ModelConfig:
    cfg = checkpoint["config"]
    return ModelConfig(
        in_dim=int(checkpoint["in_dim"]),
        hidden=cfg["hidden"],
        heads=1 if cfg["single_head"] else cfg["heads"],
        order=cfg["order"],
        fixed_filter=cfg["fixed_filter"],
        identical_heads=cfg["identical_heads"],
    )


def analyze_node(checkpoint: dict, graph: SparseGraph, node: int, hops: int = 2) -> NodeAnalysis:
    if not 0 <= node < graph.num_nodes:
        raise ValueError(f"node {node} out of range for graph with {graph.num_nodes} nodes")
    if graph.num_features != int(checkpoint["in_dim"]):
        raise ValueError(f"checkpoint expects {checkpoint['in_dim']} features, graph has {graph.num_features}")
    mcfg = model_config_from_checkpoint(checkpoint)
    proj = ProjectionMatrix(np.asarray(checkpoint["projection"]), checkpoint.get("projection_seed", 0))
    params = as_teacher(checkpoint["student"])
    w = checkpoint["config"].get("w", 6)

    sub = k_hop_subgraph(graph, node, hops)
    fp = compute_fingerprint(sub, proj, "exact", w).combined
    lap = build_laplacian(sub)
    defaulted = sub.num_nodes == 1
    if defaulted:
        logger.warning("node %d is isolated; using lambda_max = 2", node)
        lap = replace(lap, lambda_max=2.0)
    lam = effective_lambda_max(lap.lambda_max)

    coeffs = generate_coefficients(params, fp, mcfg).data
    thetas = theta_matrix(coeffs, mcfg)
    inputs = make_inputs(rescale_laplacian(lap), sub.features, fp, mcfg.order)
    alpha = forward(params, inputs, mcfg)["alpha"].data.mean(axis=0)

    heads = [response_from_coeffs(thetas[h], lam, tag=f"head_{h + 1}") for h in range(mcfg.heads)]
    weighted_values = sum(a * c.values for a, c in zip(alpha, heads))
    weighted = ResponseCurve(heads[0].grid, weighted_values, "weighted", lam)
    return NodeAnalysis(
        node=node,
        subgraph_size=sub.num_nodes,
        lambda_max=lam,
        lambda_max_defaulted=defaulted,
        fingerprint=fp,
        thetas=thetas,
        alpha=alpha,
        heads=heads,
        weighted=weighted,
    )


def _sample(rng, nodes: np.ndarray, k: int) -> np.ndarray:
    if nodes.size <= k:
        return np.sort(nodes)
    return np.sort(rng.choice(nodes, size=k, replace=False))


def class_average_responses(checkpoint: dict, graph: SparseGraph, samples_per_class: int = 20, seed: int = 0) -> ClassAverage:
    """Average weighted curves of sampled test nodes per class."""
    if graph.labels is None:
        raise ValueError("class averages need node labels")
    if samples_per_class < 1:
        raise ValueError("samples_per_class must be positive")
    splits = make_splits(graph, checkpoint["train_ratio"], checkpoint["split_seed"])
    test = splits.test
    rng = np.random.default_rng(seed)
    result = {}
    for cls, name in ((0, "normal"), (1, "anomaly")):
        pool = test[graph.labels[test] == cls]
        if pool.size == 0:
            raise ValueError(f"no {name} nodes in the test split")
        chosen = _sample(rng, pool, samples_per_class)
        curves = np.stack([analyze_node(checkpoint, graph, int(v)).weighted.values for v in chosen])
        result[name] = (chosen, curves.mean(axis=0), curves.std(axis=0))
    grid = lambda_grid()
    return ClassAverage(
        normal_mean=ResponseCurve(grid, result["normal"][1], "class-average-normal"),
        normal_std=result["normal"][2],
        anomaly_mean=ResponseCurve(grid, result["anomaly"][1], "class-average-anomaly"),
        anomaly_std=result["anomaly"][2],
        normal_nodes=[int(v) for v in result["normal"][0]],
        anomaly_nodes=[int(v) for v in result["anomaly"][0]],
    )


def _csv_text(header: list[str], columns: list[np.ndarray]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in zip(*columns):
        writer.writerow([repr(float(x)) for x in row])
    return buf.getvalue()


def node_csv(result: NodeAnalysis) -> str:
    header = ["lambda"] + [c.tag for c in result.heads] + ["weighted"]
    cols = [result.weighted.grid] + [c.values for c in result.heads] + [result.weighted.values]
    return _csv_text(header, cols)


def class_average_csv(avg: ClassAverage) -> str:
    header = ["lambda", "normal_mean", "normal_std", "anomaly_mean", "anomaly_std"]
    cols = [avg.normal_mean.grid, avg.normal_mean.values, avg.normal_std, avg.anomaly_mean.values, avg.anomaly_std]
    return _csv_text(header, cols)


def to_json(obj) -> str:
    return json.dumps(obj.to_dict(), indent=1, sort_keys=True)
