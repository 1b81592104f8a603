"""Multi-head spectral-adaptive filter network and its EMA teacher.

Parameters live in a flat ``dict[str, Tensor]`` so the same functional
forward pass serves both the student (gradient-tracked tensors) and the
teacher (plain tensors evaluated without a tape).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fingerprint import FINGERPRINT_DIM
from .graph import LaplacianOperator

LOW_PASS = (0.5, -0.5)


@dataclass(frozen=True)
class ModelConfig:
    in_dim: int
    hidden: int = 64
    heads: int = 3
    order: int = 2
    hyper_hidden: int = 64
    attn_hidden: int = 32
    slope: float = 0.01
    fixed_filter: bool = False
    identical_heads: bool = False

    @property
    def num_coeffs(self) -> int:
        return self.order + 1


def low_pass_theta(order: int) -> np.ndarray:
    theta = np.zeros(order + 1)
    theta[: min(2, order + 1)] = LOW_PASS[: order + 1]
    return theta


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh parameter arrays.

    The hypernetwork's output layer starts with tiny weights and a bias equal
    to the low-pass profile for every head, so all filters begin near
    ``theta = [0.5, -0.5, 0, ...]``.
    """
    H, C, d = cfg.heads, cfg.num_coeffs, cfg.hidden
    p = {
        "hyper.w1": _uniform(rng, FINGERPRINT_DIM, (FINGERPRINT_DIM, cfg.hyper_hidden)),
        "hyper.b1": np.zeros(cfg.hyper_hidden),
        "hyper.w2": rng.normal(0.0, 0.01, size=(cfg.hyper_hidden, H * C)),
        "hyper.b2": np.tile(low_pass_theta(cfg.order), H),
    }
    for h in range(H):
        p[f"head{h}.w"] = _uniform(rng, cfg.in_dim, (cfg.in_dim, d))
        p[f"head{h}.b"] = _uniform(rng, cfg.in_dim, (d,))
    p["attn.w1"] = _uniform(rng, d, (d, cfg.attn_hidden))
    p["attn.b1"] = _uniform(rng, d, (cfg.attn_hidden,))
    p["attn.w2"] = _uniform(rng, cfg.attn_hidden, (cfg.attn_hidden, 1))
    p["attn.b2"] = _uniform(rng, cfg.attn_hidden, (1,))
    p["cls.w"] = _uniform(rng, d, (d, 2))
    p["cls.b"] = _uniform(rng, d, (2,))
    for h in range(H):
        p[f"proj{h}.w"] = _uniform(rng, d, (d, d))
    if cfg.identical_heads:
        w2 = p["hyper.w2"]
        for h in range(1, H):
            w2[:, h * C : (h + 1) * C] = w2[:, :C]
            for key in ("w", "b"):
                p[f"head{h}.{key}"] = p[f"head0.{key}"].copy()
            p[f"proj{h}.w"] = p["proj0.w"].copy()
    return p


def hypernetwork_names() -> tuple[str, ...]:
    return ("hyper.w1", "hyper.b1", "hyper.w2", "hyper.b2")


def as_student(arrays: dict) -> dict[str, Tensor]:
    return {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in arrays.items()}


def as_teacher(arrays: dict) -> dict[str, Tensor]:
    return {k: Tensor(v.copy(), name=k) for k, v in arrays.items()}


def to_arrays(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in params.items()}


@dataclass
class GraphInputs:
    """Static per-graph quantities reused by every forward pass."""

    lap: LaplacianOperator
    features: np.ndarray
    fingerprint: np.ndarray
    basis: list[np.ndarray]

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]


def chebyshev_basis(lap_rescaled: LaplacianOperator, features, order: int) -> list:
    """[T_0(L~) X, ..., T_K(L~) X] via the three-term recursion."""
    if not lap_rescaled.rescaled:
        raise ValueError("chebyshev_basis expects a rescaled Laplacian")
    x = ad.as_tensor(features)
    terms = [x]
    if order >= 1:
        terms.append(ad.sparse_const_matmul(lap_rescaled.matrix, x))
    for _ in range(2, order + 1):
        nxt = ad.sparse_const_matmul(lap_rescaled.matrix, terms[-1])
        terms.append(ad.sub(ad.scalar_mul(nxt, 2.0), terms[-2]))
    return terms


def make_inputs(lap_rescaled: LaplacianOperator, features: np.ndarray, fingerprint: np.ndarray, order: int) -> GraphInputs:
    fingerprint = np.atleast_2d(np.asarray(fingerprint, dtype=np.float64))
    if fingerprint.shape[1] != FINGERPRINT_DIM:
        raise ValueError(f"fingerprint must have {FINGERPRINT_DIM} columns")
    if fingerprint.shape[0] not in (1, features.shape[0]):
        raise ValueError("fingerprint must have one row or one row per node")
    basis = [t.data for t in chebyshev_basis(lap_rescaled, features, order)]
    return GraphInputs(lap_rescaled, np.asarray(features, dtype=np.float64), fingerprint, basis)


def generate_coefficients(params: dict, fingerprint, cfg: ModelConfig) -> Tensor:
    """Hypernetwork map from fingerprints (R x 20) to coefficients (R x H*(K+1)).

    Head ``h`` owns columns ``h*(K+1) .. h*(K+1)+K``.
    """
    if cfg.fixed_filter:
        theta = np.tile(low_pass_theta(cfg.order), cfg.heads)
        return Tensor(np.broadcast_to(theta, (np.atleast_2d(fingerprint).shape[0], theta.size)).copy())
    fp = ad.as_tensor(np.atleast_2d(fingerprint))
    hidden = ad.leaky_relu(fp @ params["hyper.w1"] + params["hyper.b1"], cfg.slope)
    return hidden @ params["hyper.w2"] + params["hyper.b2"]


def head_theta(coeffs: Tensor, h: int, cfg: ModelConfig) -> list[Tensor]:
    C = cfg.num_coeffs
    return [coeffs[:, h * C + k : h * C + k + 1] for k in range(C)]


def filter_response(basis: list, thetas: list) -> Tensor:
    """sum_k theta_k T_k(L~) X; each theta_k is 1x1 (shared) or Nx1 (per node)."""
    out = ad.mul(thetas[0], basis[0])
    for th, term in zip(thetas[1:], basis[1:]):
        out = ad.add(out, ad.mul(th, term))
    return out


def chebyshev_filter(lap_rescaled, features, theta, weight, bias, slope: float = 0.01, basis=None) -> Tensor:
    """LeakyReLU((sum_k theta_k T_k(L~) X) W + B) for one head."""
    if isinstance(theta, Tensor) and theta.data.ndim == 2:
        thetas = [theta[:, k : k + 1] for k in range(theta.shape[1])]
    else:
        theta = ad.as_tensor(theta)
        thetas = [ad.reshape(theta[k], (1, 1)) for k in range(theta.shape[0])]
    if basis is None:
        basis = chebyshev_basis(lap_rescaled, features, len(thetas) - 1)
    filtered = filter_response(basis, thetas)
    return ad.leaky_relu(filtered @ weight + bias, slope)


def attention_logits(params: dict, z: Tensor, cfg: ModelConfig) -> Tensor:
    hidden = ad.leaky_relu(z @ params["attn.w1"] + params["attn.b1"], cfg.slope)
    return hidden @ params["attn.w2"] + params["attn.b2"]


def fuse_heads(heads: list, params: dict, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Per-node softmax attention over heads; returns (fused N x d, alpha N x H)."""
    scores = ad.concat([attention_logits(params, z, cfg) for z in heads], axis=1)
    alpha = ad.softmax(scores, axis=1)
    fused = ad.mul(alpha[:, 0:1], heads[0])
    for h in range(1, len(heads)):
        fused = ad.add(fused, ad.mul(alpha[:, h : h + 1], heads[h]))
    return fused, alpha


def forward(params: dict, inputs: GraphInputs, cfg: ModelConfig) -> dict:
    coeffs = generate_coefficients(params, inputs.fingerprint, cfg)
    basis = [Tensor(b) for b in inputs.basis]
    heads = []
    for h in range(cfg.heads):
        filtered = filter_response(basis, head_theta(coeffs, h, cfg))
        z = ad.leaky_relu(filtered @ params[f"head{h}.w"] + params[f"head{h}.b"], cfg.slope)
        heads.append(z)
    fused, alpha = fuse_heads(heads, params, cfg)
    logits = fused @ params["cls.w"] + params["cls.b"]
    return {"coeffs": coeffs, "heads": heads, "fused": fused, "alpha": alpha, "logits": logits}


def theta_matrix(coeffs: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Reshape one row of hypernetwork output to H x (K+1)."""
    return np.asarray(coeffs).reshape(-1)[: cfg.heads * cfg.num_coeffs].reshape(cfg.heads, cfg.num_coeffs)


def ema_update(teacher: dict[str, Tensor], student: dict[str, Tensor], momentum: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, in place."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    if momentum == 1.0:
        return
    for name, t in teacher.items():
        t.data = momentum * t.data + (1.0 - momentum) * student[name].data


def teacher_forward(teacher: dict[str, Tensor], inputs: GraphInputs, cfg: ModelConfig) -> dict:
    """Forward pass with teacher parameters; nothing is recorded for gradients."""
    for t in teacher.values():
        if t.requires_grad:
            raise ValueError("teacher parameters must not require gradients")
    return forward(teacher, inputs, cfg)
