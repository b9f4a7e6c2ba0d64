import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import ortho_group

from cpcm import ConfigError, DataError, NumericalError
from cpcm.alloc import (
    BLInputs,
    black_litterman,
    driver_mv_closed,
    entropy_pool,
    kl_divergence,
    manifold_mv_kkt,
    map_min_norm,
    markowitz_closed,
    mirror_simplex,
    orthonormal_basis,
    post_process,
    principal_angles,
    procrustes_rotation,
    project_budget_span,
    project_simplex,
    scalings_conflict,
    sigma_projection,
    soft_blend,
    transport_basis,
    whiten_coords,
)

import oracles
from conftest import random_spd


# ---------------------------------------------------------------- frames


def test_transport_recovers_exact_rotation(rng):
    B = rng.standard_normal((6, 3))
    U, _ = orthonormal_basis(B)
    Q0 = ortho_group.rvs(3, random_state=1)
    frame = transport_basis(B, U @ Q0)
    np.testing.assert_allclose(frame.U_tilde, U @ Q0, atol=1e-10)
    assert frame.grassmann_dist < 1e-10


def test_transport_without_previous_frame(rng):
    frame = transport_basis(rng.standard_normal((5, 2)))
    np.testing.assert_array_equal(frame.U_tilde, frame.U)
    np.testing.assert_array_equal(frame.rotation, np.eye(2))
    np.testing.assert_allclose(frame.U.T @ frame.U, np.eye(2), atol=1e-10)


@given(st.integers(0, 10_000))
def test_procrustes_never_worse_than_identity(seed):
    r = np.random.default_rng(seed)
    B = r.standard_normal((7, 3))
    prev, _ = orthonormal_basis(B)
    prev = prev @ ortho_group.rvs(3, random_state=seed)
    frame = transport_basis(B + 0.1 * r.standard_normal(B.shape), prev)
    assert np.linalg.norm(frame.U_tilde - prev) <= np.linalg.norm(frame.U - prev) + 1e-12
    np.testing.assert_allclose(frame.rotation @ frame.rotation.T, np.eye(3), atol=1e-10)


def test_qr_sign_convention_and_rank_deficiency(rng):
    B = rng.standard_normal((5, 2))
    U, deficient = orthonormal_basis(B)
    assert not deficient
    assert np.all(np.diag(U.T @ B) > 0)
    frame = transport_basis(np.column_stack([B[:, 0], 2 * B[:, 0]]))
    assert frame.rank == 1 and "rank_deficient" in frame.flags
    with pytest.raises(DataError):
        transport_basis(np.zeros((4, 2)))


def test_rank_change_is_flagged(rng):
    prev, _ = orthonormal_basis(rng.standard_normal((5, 3)))
    frame = transport_basis(rng.standard_normal((5, 2)), prev)
    assert "rank_changed" in frame.flags
    with pytest.raises(DataError):
        transport_basis(rng.standard_normal((5, 2)), np.eye(4)[:, :2])


def test_principal_angles_examples(rng):
    U, _ = orthonormal_basis(rng.standard_normal((6, 2)))
    assert np.abs(principal_angles(U, U)).max() < 1e-14
    e = np.eye(4)
    np.testing.assert_allclose(principal_angles(e[:, :2], e[:, 2:]), np.pi / 2, atol=1e-14)
    V, _ = orthonormal_basis(rng.standard_normal((6, 2)))
    np.testing.assert_allclose(principal_angles(U, V), principal_angles(V, U), atol=1e-12)
    R, s = procrustes_rotation(U, V)
    np.testing.assert_allclose(np.cos(np.sort(principal_angles(U, V))), np.sort(s)[::-1], atol=1e-12)
    np.testing.assert_allclose(R.T @ R, np.eye(2), atol=1e-12)


def test_plane_rotation_angle():
    t = 0.3
    U = np.array([[1.0], [0.0]])
    V = np.array([[np.cos(t)], [np.sin(t)]])
    assert principal_angles(U, V)[0] == pytest.approx(t, abs=1e-14)


def test_budget_span_projection(rng):
    U, _ = orthonormal_basis(rng.standard_normal((6, 3)))
    w = project_budget_span(rng.standard_normal(6), U)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(U @ (U.T @ w), w, atol=1e-12)
    with pytest.raises(DataError):
        project_budget_span(np.ones(2), np.array([[1.0], [-1.0]]) / np.sqrt(2))


def test_sigma_projection_is_sigma_orthogonal(rng):
    S = random_spd(rng, 4)
    basis = rng.standard_normal((4, 2))
    theta = rng.standard_normal(4)
    proj = sigma_projection(theta, basis, S)
    np.testing.assert_allclose(basis.T @ S @ (theta - proj), 0.0, atol=1e-12)
    np.testing.assert_allclose(sigma_projection(proj, basis, S), proj, atol=1e-12)


# ---------------------------------------------------------------- mean-variance


def test_kkt_full_space_symmetric():
    w = manifold_mv_kkt(np.eye(2), [0.1, 0.1], np.eye(2), 1.0)
    np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-14)


def test_kkt_one_dimensional_span_ignores_mu(rng):
    n = 5
    U = np.ones((n, 1)) / np.sqrt(n)
    for _ in range(3):
        w = manifold_mv_kkt(U, rng.standard_normal(n), random_spd(rng, n), 2.0)
        np.testing.assert_allclose(w, 1.0 / n, atol=1e-14)


@given(st.integers(0, 10_000))
def test_kkt_matches_projected_gradient(seed):
    r = np.random.default_rng(seed)
    n, q = 6, 3
    U, _ = orthonormal_basis(r.standard_normal((n, q)))
    S = random_spd(r, n)
    mu = 0.1 * r.standard_normal(n)
    w = manifold_mv_kkt(U, mu, S, 3.0)
    ref = oracles.projected_gradient_span_qp(U, mu, S, 3.0)
    np.testing.assert_allclose(w, ref, atol=1e-6)
    assert w.sum() == pytest.approx(1.0, abs=1e-10)


@given(st.integers(0, 10_000))
def test_kkt_basis_invariance(seed):
    r = np.random.default_rng(seed)
    U, _ = orthonormal_basis(r.standard_normal((8, 4)))
    S = random_spd(r, 8)
    mu = r.standard_normal(8)
    Q = ortho_group.rvs(4, random_state=seed)
    np.testing.assert_allclose(manifold_mv_kkt(U @ Q, mu, S, 1.5), manifold_mv_kkt(U, mu, S, 1.5), atol=1e-8)


def test_kkt_errors(rng):
    U = np.array([[1.0], [-1.0]]) / np.sqrt(2)
    with pytest.raises(DataError):
        manifold_mv_kkt(U, [0.0, 0.0], np.eye(2), 1.0)
    with pytest.raises(ConfigError):
        manifold_mv_kkt(np.eye(2), [0.0, 0.0], np.eye(2), 0.0)
    with pytest.raises(NumericalError):
        manifold_mv_kkt(np.eye(3), np.zeros(3), np.diag([1.0, 0.0, 0.0]), 1.0)


def test_driver_tilt_examples(rng):
    np.testing.assert_allclose(driver_mv_closed([0.1, 0.0], np.eye(2), 1.0), [0.1, 0.0])
    S = random_spd(rng, 3)
    mu = rng.standard_normal(3)
    np.testing.assert_allclose(driver_mv_closed(mu, S, 4.0), 0.5 * driver_mv_closed(mu, S, 2.0), rtol=1e-14)
    phi = driver_mv_closed(mu, S, 2.0)
    np.testing.assert_allclose(S @ (2.0 * phi), mu, atol=1e-10)
    with pytest.raises(NumericalError):
        driver_mv_closed(mu, np.ones((3, 3)), 1.0)


def test_min_norm_map_examples(rng):
    np.testing.assert_allclose(map_min_norm(np.eye(4)[:, :1], [0.7]), [0.7, 0, 0, 0])
    U, _ = orthonormal_basis(rng.standard_normal((5, 2)))
    beta = rng.standard_normal(2)
    np.testing.assert_allclose(map_min_norm(U, beta), U @ beta, atol=1e-12)


def test_min_norm_map_beats_other_solutions(rng):
    B = rng.standard_normal((7, 3))
    beta = rng.standard_normal(3)
    w = map_min_norm(B, beta)
    np.testing.assert_allclose(B.T @ w, beta, atol=1e-10)
    for v in oracles.min_norm_by_nullspace(B, beta, rng):
        np.testing.assert_allclose(B.T @ v, beta, atol=1e-10)
        assert np.linalg.norm(w) <= np.linalg.norm(v) + 1e-12
    with pytest.raises(NumericalError):
        map_min_norm(np.column_stack([B[:, 0], B[:, 0]]), [1.0, 1.0])


def test_markowitz_symmetric_example():
    w = markowitz_closed([0.1, 0.1], np.eye(2), 1.0)
    np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-15)
    # w = (mu - eta 1) / lambda with eta = -0.4
    np.testing.assert_allclose(0.1 - w, -0.4, atol=1e-15)


@given(st.integers(0, 10_000), st.floats(0.1, 20.0))
def test_markowitz_budget_and_qp_oracle(seed, lam):
    r = np.random.default_rng(seed)
    S = random_spd(r, 5)
    mu = r.standard_normal(5)
    w = markowitz_closed(mu, S, lam)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(w, oracles.equality_qp(mu, S, lam), atol=1e-8)


def test_markowitz_equals_full_space_kkt(rng):
    S = random_spd(rng, 4)
    mu = rng.standard_normal(4)
    np.testing.assert_allclose(markowitz_closed(mu, S, 2.0), manifold_mv_kkt(np.eye(4), mu, S, 2.0), atol=1e-10)


# ---------------------------------------------------------------- Black-Litterman


def _bl(rng, omega_scale=1.0, P=None):
    n = 3
    S = random_spd(rng, n) * 0.01
    P = rng.standard_normal((2, n)) if P is None else P
    k = P.shape[0]
    inputs = BLInputs(2.5, np.full(n, 1 / n), 0.05, P, rng.standard_normal(k) * 0.05, np.eye(k) * omega_scale)
    return inputs, S


def test_bl_uninformative_views_return_equilibrium(rng):
    inputs, S = _bl(rng, 1e12)
    pi = inputs.delta * S @ inputs.w_eq
    np.testing.assert_allclose(black_litterman(inputs, S), pi, atol=1e-4)


def test_bl_certain_views_return_views(rng):
    inputs, S = _bl(rng, 1e-12, P=np.eye(3))
    np.testing.assert_allclose(black_litterman(inputs, S), inputs.Q, atol=1e-4)


def test_bl_matches_conjugate_update(rng):
    for _ in range(5):
        inputs, S = _bl(rng, 0.01)
        pi = inputs.delta * S @ inputs.w_eq
        ref = oracles.conjugate_gaussian_update(pi, inputs.tau_bl * S, inputs.P, inputs.Q, inputs.Omega)
        np.testing.assert_allclose(black_litterman(inputs, S), ref, atol=1e-8)


def test_bl_input_validation():
    with pytest.raises(ConfigError):
        BLInputs(1.0, np.ones(2), 0.0, np.eye(2), np.zeros(2), np.eye(2))
    with pytest.raises(ConfigError):
        BLInputs(1.0, np.ones(2), 0.1, np.eye(2), np.zeros(2), -np.eye(2))


# ---------------------------------------------------------------- entropy pooling


def test_entropy_pool_without_views_is_prior(rng):
    p = rng.dirichlet(np.ones(6))
    q = entropy_pool(p, np.zeros((6, 0)), [])
    np.testing.assert_array_equal(q, p)
    assert kl_divergence(q, p) == 0.0


def test_entropy_pool_active_view_is_prior(rng):
    p = rng.dirichlet(np.ones(8))
    v = rng.standard_normal(8)
    np.testing.assert_allclose(entropy_pool(p, v[:, None], [p @ v]), p, atol=1e-8)


def test_entropy_pool_five_scenarios_matches_generic_solver():
    p = np.array([0.1, 0.2, 0.4, 0.2, 0.1])
    v = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    q = entropy_pool(p, v[:, None], [0.5])
    np.testing.assert_allclose(q, oracles.min_kl_slsqp(p, v[:, None], [0.5]), atol=1e-5)
    np.testing.assert_allclose(q, oracles.min_kl_one_view_dual(p, v, 0.5), atol=1e-10)
    assert q @ v == pytest.approx(0.5, abs=1e-10)


def test_entropy_pool_two_views_match_generic_solver(rng):
    p = rng.dirichlet(np.ones(12))
    V = rng.standard_normal((12, 2))
    t = p @ V + np.array([0.2, -0.1])
    q = entropy_pool(p, V, t)
    np.testing.assert_allclose(q @ V, t, atol=1e-10)
    np.testing.assert_allclose(q, oracles.min_kl_slsqp(p, V, t), atol=1e-5)


def test_entropy_pool_kl_budget_is_binding():
    p = np.full(5, 0.2)
    v = np.arange(5.0)
    full = entropy_pool(p, v[:, None], [3.0])
    budget = 0.5 * kl_divergence(full, p)
    q = entropy_pool(p, v[:, None], [3.0], kl_budget=budget)
    assert kl_divergence(q, p) == pytest.approx(budget, rel=1e-8)
    assert p @ v < q @ v < 3.0


def test_entropy_pool_floor_and_errors():
    p = np.full(4, 0.25)
    v = np.arange(4.0)
    q = entropy_pool(p, v[:, None], [2.9], floor=0.01)
    assert q.min() >= 0.01 / (1 + 4 * 0.01) - 1e-15
    assert q.sum() == pytest.approx(1.0)
    with pytest.raises(DataError):
        entropy_pool(p, v[:, None], [5.0])
    with pytest.raises(DataError):
        entropy_pool(p, np.ones((4, 1)), [2.0])
    with pytest.raises(DataError):
        entropy_pool([0.5, 0.6], np.zeros((2, 0)), [])
    with pytest.raises(ConfigError):
        entropy_pool(p, v[:, None], [1.0], floor=0.3)


# ---------------------------------------------------------------- post-processing


def test_post_process_vol_target():
    out = post_process([1.0, 0.0], 0.04 / 252 * np.eye(2), vol_target=0.10)
    assert out.scale == pytest.approx(0.5)
    np.testing.assert_allclose(out.weights, [0.5, 0.0])
    assert not out.flags


def test_post_process_leverage_cap():
    tiny = 1e-12 * np.eye(2)
    out = post_process([2.0, -1.0], tiny, vol_target=0.10, scale_clip=(1.0, 1.0), lev_cap=1.0)
    np.testing.assert_allclose(out.weights, [2 / 3, -1 / 3])
    assert out.flags == ["leverage_capped"]


def test_post_process_within_limits_is_unchanged():
    S = (0.10**2 / 252) * np.eye(2)
    w = np.array([0.6, 0.8])
    out = post_process(w, S / (w @ w), vol_target=0.10)
    np.testing.assert_allclose(out.weights, w, rtol=1e-12)


def test_post_process_zero_variance_and_bad_target():
    out = post_process([1.0, 0.0], np.zeros((2, 2)))
    assert out.flags == ["zero_variance"] and out.scale == 1.0
    with pytest.raises(ConfigError):
        post_process([1.0], np.eye(1), vol_target=0.0)


def test_scalings_conflict_band():
    assert not scalings_conflict(1.0, 1.0)
    assert scalings_conflict(1.5, 4.0)
    assert scalings_conflict(0.5, 0.25)


# ---------------------------------------------------------------- simplex geometry


def test_mirror_zero_target_is_identity():
    step = mirror_simplex([0.3, 0.7], [1.0, -1.0], 0.0)
    np.testing.assert_allclose(step.weights, [0.3, 0.7])
    assert step.eta == 0.0


def test_mirror_symmetric_two_asset_tilt():
    step = mirror_simplex([0.5, 0.5], [0.3, -0.3], 0.2)
    np.testing.assert_allclose(step.weights, [0.6, 0.4], atol=1e-6)
    assert not step.saturated


def test_mirror_saturates_when_target_unreachable():
    step = mirror_simplex([0.2, 0.3, 0.5], [1.0, 1.0, 0.0], 1.5)
    assert step.saturated and np.isinf(step.eta)
    np.testing.assert_allclose(step.weights, [0.4, 0.6, 0.0], atol=1e-7)
    assert step.turnover == pytest.approx(1.0, abs=1e-7)


@given(st.integers(0, 10_000), st.floats(0.01, 0.5))
def test_mirror_hits_turnover_target(seed, target):
    r = np.random.default_rng(seed)
    w_prev = r.dirichlet(np.ones(6))
    signal = r.standard_normal(6)
    step = mirror_simplex(w_prev, signal, target)
    if step.saturated:
        return
    assert np.abs(step.weights - w_prev).sum() == pytest.approx(target, abs=1e-6)
    assert step.weights.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(step.weights, oracles.mirror_bisection(w_prev, signal, target), atol=1e-6)


def test_mirror_rejects_bad_input():
    with pytest.raises(ConfigError):
        mirror_simplex([0.5, 0.5], [1.0, 0.0], -0.1)
    with pytest.raises(DataError):
        mirror_simplex([0.5, 0.5], [np.nan, 0.0], 0.1)


def test_soft_blend_examples():
    raw, pde = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    np.testing.assert_array_equal(soft_blend(raw, pde, 0.0), raw)
    np.testing.assert_array_equal(soft_blend(raw, pde, 1.0), pde)
    np.testing.assert_allclose(soft_blend(raw, pde, 0.5), [0.5, 0.5])
    np.testing.assert_allclose(soft_blend(raw, pde, 0.5, projector=lambda w: 2 * w), [1.0, 1.0])
    with pytest.raises(ConfigError):
        soft_blend(raw, pde, 1.5)
    with pytest.raises(ConfigError):
        soft_blend(raw, pde, 0.5, projector="box")


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8), st.floats(0, 1))
def test_soft_blend_with_simplex_projector_lands_on_simplex(values, lam):
    v = np.array(values)
    w = soft_blend(v, v[::-1], lam, projector="simplex")
    assert w.min() >= 0.0
    assert w.sum() == pytest.approx(1.0, abs=1e-10)
    ref = oracles.simplex_projection_sort_free((1 - lam) * v + lam * v[::-1])
    np.testing.assert_allclose(w, ref, atol=1e-10)


def test_project_simplex_fixed_point(rng):
    w = rng.dirichlet(np.ones(5))
    np.testing.assert_allclose(project_simplex(w), w, atol=1e-15)


# ---------------------------------------------------------------- whitening


def test_whitening_conformal_and_distortion(rng):
    assert whiten_coords(3.0 * np.eye(3), np.ones(3)).distortion == pytest.approx(1.0)
    assert whiten_coords(np.diag([4.0, 1.0]), np.ones(2)).distortion == pytest.approx(2.0)


def test_whitening_preserves_sigma_inner_product(rng):
    U, _ = orthonormal_basis(rng.standard_normal((6, 3)))
    S = U @ np.diag([3.0, 1.0, 0.5]) @ U.T
    u, v = U @ rng.standard_normal(3), U @ rng.standard_normal(3)
    zu, zv = whiten_coords(S, u).z, whiten_coords(S, v).z
    assert zu @ zv == pytest.approx(u @ S @ v, abs=1e-10)
    assert whiten_coords(S, u).U.shape == (6, 3)


def test_whitening_rejects_zero_eigenvalue():
    with pytest.raises(DataError):
        whiten_coords(np.diag([1.0, 0.0]), np.ones(2), rank=2)
    with pytest.raises(DataError):
        whiten_coords(np.zeros((2, 2)), np.ones(2))
