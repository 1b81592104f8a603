import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spectral_adapt import autodiff as ad
from spectral_adapt.fingerprint import compute_fingerprint, make_projection
from spectral_adapt.graph import build_laplacian, rescale_laplacian
from spectral_adapt.model import (
    ModelConfig,
    as_student,
    as_teacher,
    chebyshev_basis,
    chebyshev_filter,
    ema_update,
    filter_response,
    forward,
    fuse_heads,
    generate_coefficients,
    init_params,
    low_pass_theta,
    make_inputs,
    teacher_forward,
    theta_matrix,
    to_arrays,
)

from conftest import random_graph


def spectral_filter_oracle(graph, theta, features):
    """U g(Lambda~) U^T X from a dense eigendecomposition of the rescaled Laplacian."""
    lap = rescale_laplacian(build_laplacian(graph))
    evals, evecs = np.linalg.eigh(lap.dense())
    g = np.polynomial.chebyshev.chebval(evals, theta)
    return evecs @ (g[:, None] * (evecs.T @ features))


def setup_model(rng, n=12, f=5, heads=3, order=2, graph_fp=True):
    g = random_graph(rng, n, feature_dim=f, labels=True)
    cfg = ModelConfig(in_dim=f, heads=heads, order=order)
    lap = build_laplacian(g)
    fp = compute_fingerprint(g, make_projection(f, 0)).combined
    inputs = make_inputs(rescale_laplacian(lap), g.features, fp, order)
    params = as_teacher(init_params(cfg, rng))
    return g, cfg, inputs, params


def test_low_pass_theta():
    assert np.array_equal(low_pass_theta(2), [0.5, -0.5, 0.0])
    assert np.array_equal(low_pass_theta(0), [0.5])
    assert np.array_equal(low_pass_theta(4), [0.5, -0.5, 0, 0, 0])


def test_coefficients_shape_and_low_pass_start(rng):
    cfg = ModelConfig(in_dim=4)
    params = as_teacher(init_params(cfg, rng))
    coeffs = generate_coefficients(params, rng.random(20), cfg).data
    assert coeffs.shape == (1, 9)
    theta = theta_matrix(coeffs, cfg)
    assert theta.shape == (3, 3)
    assert np.allclose(theta, np.tile([0.5, -0.5, 0.0], (3, 1)), atol=0.1)


def test_zero_hypernetwork_gives_zero_coefficients(rng):
    cfg = ModelConfig(in_dim=4)
    arrays = init_params(cfg, rng)
    for k in ("hyper.w1", "hyper.b1", "hyper.w2", "hyper.b2"):
        arrays[k] = np.zeros_like(arrays[k])
    coeffs = generate_coefficients(as_teacher(arrays), rng.random(20), cfg).data
    assert np.array_equal(coeffs, np.zeros((1, 9)))


def test_fixed_filter_ignores_hypernetwork(rng):
    cfg = ModelConfig(in_dim=4, heads=1, fixed_filter=True)
    params = as_teacher(init_params(cfg, rng))
    coeffs = generate_coefficients(params, rng.random((7, 20)), cfg).data
    assert np.array_equal(coeffs, np.tile([0.5, -0.5, 0.0], (7, 1)))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=20, max_size=20))
def test_coefficients_finite_and_pure(fp):
    cfg = ModelConfig(in_dim=3)
    params = as_teacher(init_params(cfg, np.random.default_rng(0)))
    a = generate_coefficients(params, np.array(fp), cfg).data
    b = generate_coefficients(params, np.array(fp), cfg).data
    assert np.all(np.isfinite(a))
    assert np.array_equal(a, b)


def test_chebyshev_filter_identity_examples(rng):
    g = random_graph(rng, 10, feature_dim=4)
    lap_r = rescale_laplacian(build_laplacian(g))
    x = np.abs(rng.standard_normal((10, 4)))
    eye = np.eye(4)
    out = chebyshev_filter(lap_r, x, np.array([1.0, 0.0, 0.0]), eye, np.zeros(4)).data
    assert np.allclose(out, x, atol=1e-14)
    out = chebyshev_filter(lap_r, x, np.array([0.0, 1.0, 0.0]), eye, np.zeros(4)).data
    lx = lap_r.matrix @ x
    assert np.allclose(out, np.where(lx > 0, lx, 0.01 * lx), atol=1e-14)


def test_chebyshev_basis_requires_rescaled(rng):
    g = random_graph(rng, 6)
    with pytest.raises(ValueError):
        chebyshev_basis(build_laplacian(g), g.features, 2)


def test_chebyshev_matches_spectral_oracle(rng):
    for _ in range(20):
        g = random_graph(rng, int(rng.integers(2, 65)), feature_dim=3)
        lap_r = rescale_laplacian(build_laplacian(g))
        for _ in range(5):
            order = int(rng.integers(0, 6))
            theta = rng.standard_normal(order + 1)
            basis = chebyshev_basis(lap_r, g.features, order)
            thetas = [ad.Tensor(np.array([[t]])) for t in theta]
            got = filter_response(basis, thetas).data
            want = spectral_filter_oracle(g, theta, g.features)
            assert np.max(np.abs(got - want)) < 1e-8


def test_fuse_single_head_is_identity(rng):
    cfg = ModelConfig(in_dim=3, heads=1)
    params = as_teacher(init_params(cfg, rng))
    z = ad.Tensor(rng.standard_normal((5, 64)))
    fused, alpha = fuse_heads([z], params, cfg)
    assert np.array_equal(alpha.data, np.ones((5, 1)))
    assert np.allclose(fused.data, z.data)


def test_fuse_identical_heads_uniform(rng):
    cfg = ModelConfig(in_dim=3, heads=3)
    params = as_teacher(init_params(cfg, rng))
    z = ad.Tensor(rng.standard_normal((5, 64)))
    fused, alpha = fuse_heads([z, z, z], params, cfg)
    assert np.allclose(alpha.data, 1 / 3, atol=1e-15)
    assert np.allclose(fused.data, z.data, atol=1e-14)


def test_fuse_closed_form_weights():
    cfg = ModelConfig(in_dim=1, heads=3, hidden=2, attn_hidden=1)
    params = {
        "attn.w1": ad.Tensor([[1.0], [0.0]]),
        "attn.b1": ad.Tensor([0.0]),
        "attn.w2": ad.Tensor([[1.0]]),
        "attn.b2": ad.Tensor([0.0]),
    }
    heads = [ad.Tensor([[math.log(2), 0.0]]), ad.Tensor([[0.0, 1.0]]), ad.Tensor([[0.0, 2.0]])]
    _, alpha = fuse_heads(heads, params, cfg)
    assert np.allclose(alpha.data, [[0.5, 0.25, 0.25]], atol=1e-15)


def test_forward_shapes_and_attention_simplex(rng):
    g, cfg, inputs, params = setup_model(rng, n=20)
    out = forward(params, inputs, cfg)
    assert len(out["heads"]) == 3
    assert all(z.shape == (20, 64) for z in out["heads"])
    assert out["logits"].shape == (20, 2)
    alpha = out["alpha"].data
    assert np.all(alpha >= 0)
    assert np.allclose(alpha.sum(axis=1), 1.0, atol=1e-10)
    again = forward(params, inputs, cfg)
    assert np.array_equal(out["logits"].data, again["logits"].data)


def test_forward_per_node_fingerprints(rng):
    g, cfg, inputs, params = setup_model(rng, n=10)
    per_node = make_inputs(inputs.lap, g.features, np.tile(inputs.fingerprint, (10, 1)), cfg.order)
    a = forward(params, inputs, cfg)["logits"].data
    b = forward(params, per_node, cfg)["logits"].data
    assert np.allclose(a, b, atol=1e-12)
    with pytest.raises(ValueError):
        make_inputs(inputs.lap, g.features, np.zeros((3, 20)), cfg.order)


def test_forward_permutation_equivariant(rng):
    for _ in range(5):
        g, cfg, inputs, params = setup_model(rng, n=16)
        perm = rng.permutation(16)
        gp = g.permute(perm)
        fp = compute_fingerprint(gp, make_projection(g.num_features, 0)).combined
        inputs_p = make_inputs(rescale_laplacian(build_laplacian(gp)), gp.features, fp, cfg.order)
        a = forward(params, inputs, cfg)
        b = forward(params, inputs_p, cfg)
        assert np.allclose(a["logits"].data[perm], b["logits"].data, atol=1e-6)
        assert np.allclose(a["alpha"].data[perm], b["alpha"].data, atol=1e-6)


def test_forward_gradients_reach_all_parameters(rng):
    g, cfg, inputs, _ = setup_model(rng)
    student = as_student(init_params(cfg, rng))
    with ad.Tape() as tape:
        out = forward(student, inputs, cfg)
        loss = ad.sum(out["logits"])
    ad.backward(tape, loss)
    for name, p in student.items():
        if name.startswith("proj"):
            # projection heads only feed the diversity loss
            assert p.grad is None
        else:
            assert np.any(p.grad != 0), name


def test_identical_heads_init(rng):
    cfg = ModelConfig(in_dim=4, identical_heads=True)
    p = init_params(cfg, rng)
    for h in (1, 2):
        assert np.array_equal(p[f"head{h}.w"], p["head0.w"])
        assert np.array_equal(p[f"proj{h}.w"], p["proj0.w"])
        assert np.array_equal(p["hyper.w2"][:, 3 * h : 3 * h + 3], p["hyper.w2"][:, :3])


def test_init_scales(rng):
    cfg = ModelConfig(in_dim=16)
    p = init_params(cfg, rng)
    assert np.all(np.abs(p["head0.w"]) <= 1 / 4)
    assert abs(p["hyper.w2"].std() - 0.01) < 0.002


def test_ema_examples():
    t = {"w": ad.Tensor(np.zeros(3))}
    s = {"w": ad.Tensor(np.ones(3), requires_grad=True)}
    ema_update(t, s, 1.0)
    assert np.array_equal(t["w"].data, np.zeros(3))
    ema_update(t, s, 0.99)
    assert np.allclose(t["w"].data, 0.01)
    ema_update(t, s, 0.0)
    assert np.array_equal(t["w"].data, np.ones(3))
    with pytest.raises(ValueError):
        ema_update(t, s, 1.5)


def test_ema_geometric_series_and_contraction(rng):
    xi_t = rng.standard_normal(5)
    xi_s = rng.standard_normal(5)
    t = {"w": ad.Tensor(xi_t.copy())}
    s = {"w": ad.Tensor(xi_s.copy())}
    m = 0.9
    prev = np.linalg.norm(xi_t - xi_s)
    for step in range(1, 30):
        ema_update(t, s, m)
        assert np.allclose(t["w"].data, m**step * xi_t + (1 - m**step) * xi_s, atol=1e-12)
        gap = np.linalg.norm(t["w"].data - xi_s)
        assert gap == pytest.approx(m * prev, rel=1e-9)
        prev = gap


def test_teacher_copy_matches_student_and_records_nothing(rng):
    g, cfg, inputs, _ = setup_model(rng)
    student = as_student(init_params(cfg, rng))
    teacher = as_teacher(to_arrays(student))
    with ad.Tape() as tape:
        t_out = teacher_forward(teacher, inputs, cfg)
    assert tape.records == []
    s_out = forward(student, inputs, cfg)
    for zs, zt in zip(s_out["heads"], t_out["heads"]):
        assert np.array_equal(zs.data, zt.data)
        assert not zt.requires_grad
    with pytest.raises(ValueError):
        teacher_forward(student, inputs, cfg)
