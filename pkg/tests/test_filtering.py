import numpy as np
import pytest
from hypothesis import given, strategies as st

from cpcm import ConfigError, DataError, NumericalError
from cpcm.filtering import (
    FilterConfig,
    GaussianBelief,
    ParticleBelief,
    effective_sample_size,
    ekf_step,
    fit_ar1_model,
    linear_model,
    ou_model,
    particle_moments,
    pf_step,
    run_filter,
    stratified_resample,
)

import oracles


def linear_setup(seed=0, m=2, d=2, T=500, dt=0.1):
    """A stable linear-Gaussian model with simulated observations."""
    r = np.random.default_rng(seed)
    A = -np.diag(r.uniform(0.5, 2.0, m)) + 0.1 * r.standard_normal((m, m))
    Q = np.eye(m) * 0.5
    H = r.standard_normal((d, m))
    R = np.eye(d) * 0.2
    c = r.standard_normal(m) * 0.1
    model = linear_model(A, Q, H, R, dt=dt, drift_offset=c)
    x = np.zeros(m)
    ys = []
    F = np.eye(m) + A * dt
    for _ in range(T):
        x = F @ x + c * dt + r.multivariate_normal(np.zeros(m), Q * dt)
        ys.append(H @ x + r.multivariate_normal(np.zeros(d), R))
    prior = GaussianBelief(np.zeros(m), np.eye(m))
    return model, np.array(ys), prior, (F, c * dt, Q * dt, H, np.zeros(d), R)


def test_ekf_matches_kalman_oracle():
    model, ys, prior, (F, c, Qd, H, d, R) = linear_setup()
    path = run_filter(model, ys, prior, "ekf")
    means, covs = oracles.kalman_filter(F, c, Qd, H, d, R, prior.mean, prior.cov, ys)
    np.testing.assert_allclose(path.means, means, atol=1e-10, rtol=0)
    np.testing.assert_allclose(path.covs, covs, atol=1e-10, rtol=0)


def test_ekf_zero_observation_matrix_is_prediction():
    model = linear_model([[-1.0]], [[0.3]], [[0.0]], [[1.0]], dt=0.5)
    belief = GaussianBelief(np.array([2.0]), np.array([[1.5]]))
    post = ekf_step(model, belief, [10.0])
    assert post.mean[0] == pytest.approx(2.0 + (-2.0) * 0.5)
    assert post.cov[0, 0] == pytest.approx(0.5 * 1.5 * 0.5 + 0.3 * 0.5)


def test_ekf_huge_noise_leaves_prior():
    model = linear_model([[0.0]], [[0.0]], [[1.0]], [[1e12]], dt=1.0)
    belief = GaussianBelief(np.array([0.3]), np.array([[2.0]]))
    post = ekf_step(model, belief, [50.0])
    assert post.mean[0] == pytest.approx(0.3, abs=1e-4)
    assert post.cov[0, 0] == pytest.approx(2.0, abs=1e-4)


def test_ekf_joseph_agrees_with_standard():
    model, ys, prior, _ = linear_setup(T=50)
    a = run_filter(model, ys, prior, "ekf")
    b = run_filter(model, ys, prior, "ekf", FilterConfig(joseph=True))
    np.testing.assert_allclose(a.covs, b.covs, atol=1e-12)


def test_ekf_singular_innovation_raises():
    # two identical sensors with negligible noise: H P H' + R is rank one
    model = linear_model([[0.0]], [[0.0]], [[1.0], [1.0]], 1e-20 * np.eye(2), dt=1.0)
    with pytest.raises(NumericalError):
        ekf_step(model, GaussianBelief(np.zeros(1), np.ones((1, 1))), [0.0, 0.0])


def test_ekf_covariance_stays_psd_over_many_steps():
    r = np.random.default_rng(3)
    model, _, _, _ = linear_setup(seed=3, m=3, d=1)
    belief = GaussianBelief(np.zeros(3), np.eye(3))
    worst = np.inf
    for k in range(10_000):
        belief = ekf_step(model, belief, r.standard_normal(1), k * model.dt)
        assert np.array_equal(belief.cov, belief.cov.T)
        worst = min(worst, np.linalg.eigvalsh(belief.cov).min())
    assert worst >= -1e-8


def test_ekf_nonlinear_uses_jacobians():
    # h(f) = f^2 linearized at the predicted mean
    from cpcm.filtering import StateSpaceModel

    model = StateSpaceModel(
        drift=lambda f, t: np.zeros_like(f), drift_jac=lambda f, t: np.zeros((1, 1)), Q=[[0.0]],
        obs=lambda f, t: f**2, obs_jac=lambda f, t: np.atleast_2d(2 * f), R=[[0.5]], dt=1.0,
    )
    post = ekf_step(model, GaussianBelief(np.array([1.0]), np.array([[0.2]])), [1.5])
    H, P = 2.0, 0.2
    K = P * H / (H * P * H + 0.5)
    assert post.mean[0] == pytest.approx(1.0 + K * 0.5)
    assert post.cov[0, 0] == pytest.approx((1 - K * H) * P)


def test_ess_examples():
    assert effective_sample_size(np.full(8, 1 / 8)) == pytest.approx(8.0)
    assert effective_sample_size(np.eye(8)[2]) == pytest.approx(1.0)


def test_degenerate_weights_trigger_resampling():
    model = linear_model([[0.0]], [[0.01]], [[1.0]], [[1.0]], dt=1.0)
    w = np.zeros(50)
    w[0] = 1.0
    belief = ParticleBelief(np.linspace(-1, 1, 50)[:, None], w, 1.0)
    out = pf_step(model, belief, [0.0], np.random.default_rng(0), FilterConfig(n_particles=50))
    assert out.resampled
    assert out.ess_before_resampling == pytest.approx(1.0, abs=1e-9)
    assert out.weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_pf_all_weights_zero_raises():
    model = linear_model([[0.0]], [[0.0]], [[1.0]], [[1.0]], dt=1.0)
    belief = ParticleBelief(np.zeros((4, 1)), np.zeros(4), 1.0)
    with pytest.raises(NumericalError):
        pf_step(model, belief, [0.0], np.random.default_rng(0))


def test_pf_underflowing_likelihoods_still_normalize():
    model = linear_model([[0.0]], [[0.0]], [[1.0]], [[1e-4]], dt=1.0)
    belief = ParticleBelief(np.linspace(10, 11, 20)[:, None], np.full(20, 0.05), 20.0)
    out = pf_step(model, belief, [0.0], np.random.default_rng(0), FilterConfig(n_particles=20))
    assert np.isfinite(out.weights).all()
    assert out.weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_stratified_resample_counts():
    w = np.array([0.5, 0.25, 0.25, 0.0])
    idx = stratified_resample(w, np.random.default_rng(0))
    counts = np.bincount(idx, minlength=4)
    # one draw per stratum: each count is floor or ceil of N w
    assert np.all(np.abs(counts - 4 * w) < 1.0 + 1e-12)
    assert counts[3] == 0


@given(st.integers(0, 10_000))
def test_particle_moments_are_exchangeable(seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((30, 2))
    w = r.random(30)
    w /= w.sum()
    perm = r.permutation(30)
    m1, c1 = particle_moments(x, w)
    m2, c2 = particle_moments(x[perm], w[perm])
    np.testing.assert_allclose(m1, m2, atol=1e-14)
    np.testing.assert_allclose(c1, c2, atol=1e-14)


def test_pf_tracks_kalman_oracle():
    model, ys, prior, (F, c, Qd, H, d, R) = linear_setup(m=1, d=1, T=200, seed=5)
    cfg = FilterConfig(n_particles=10_000, seed=1)
    path = run_filter(model, ys, prior, "pf", cfg)
    means, covs = oracles.kalman_filter(F, c, Qd, H, d, R, prior.mean, prior.cov, ys)
    for k in range(9, 200, 10):
        # Monte Carlo error of a weighted estimate scales with the effective sample size
        se_mean = np.sqrt(covs[k, 0, 0] / path.ess[k])
        se_var = covs[k, 0, 0] * np.sqrt(2.0 / path.ess[k])
        assert abs(path.means[k, 0] - means[k, 0]) < 3 * se_mean
        assert abs(path.covs[k, 0, 0] - covs[k, 0, 0]) < 3 * se_var
    assert np.all((path.ess >= 1 - 1e-9) & (path.ess <= cfg.n_particles + 1e-9))


def test_pf_and_ekf_agree_on_linear_model():
    model, ys, prior, _ = linear_setup(T=100, seed=2)
    ekf = run_filter(model, ys, prior, "ekf")
    pf = run_filter(model, ys, prior, "pf", FilterConfig(n_particles=10_000))
    assert np.abs(ekf.means - pf.means).max() < 0.05


def test_pf_deterministic_given_seed():
    model, ys, prior, _ = linear_setup(T=30)
    cfg = FilterConfig(n_particles=200, seed=4)
    a, b = run_filter(model, ys, prior, "pf", cfg), run_filter(model, ys, prior, "pf", cfg)
    np.testing.assert_array_equal(a.means, b.means)
    np.testing.assert_array_equal(a.ess, b.ess)
    assert a.resample_count == b.resample_count


def test_empty_observations_give_empty_path():
    model, _, prior, _ = linear_setup(T=1)
    for kind in ("ekf", "pf"):
        path = run_filter(model, np.zeros((0, 2)), prior, kind, FilterConfig(n_particles=10))
        assert path.means.shape == (0, 2)


def test_unknown_filter_kind():
    model, ys, prior, _ = linear_setup(T=3)
    with pytest.raises(ConfigError):
        run_filter(model, ys, prior, "ukf")


def test_posterior_packing_columns():
    model, ys, prior, _ = linear_setup(T=5)
    path = run_filter(model, ys, prior, "pf", FilterConfig(n_particles=50))
    assert path.column_names() == ["mean_0", "mean_1", "cov_0_0", "cov_0_1", "cov_1_1", "ess"]
    assert path.packed().shape == (5, 6)


@pytest.mark.parametrize("kwargs", [{"ess_threshold": 0.0}, {"ess_threshold": 1.5}, {"jitter": -1.0}, {"n_particles": 1}])
def test_filter_config_validation(kwargs):
    with pytest.raises(ConfigError):
        FilterConfig(**kwargs)


def test_linear_model_rejects_singular_noise():
    with pytest.raises(ConfigError):
        linear_model([[0.0]], [[1.0]], [[1.0]], [[0.0]])


def test_ou_model_drift():
    model = ou_model([[2.0]], [1.0], [[0.1]], [[0.1]])
    np.testing.assert_allclose(model.drift(np.array([0.0]), 0.0), [2.0])


def test_fit_ar1_recovers_persistence():
    r = np.random.default_rng(0)
    phi, T = 0.95, 20_000
    f = np.zeros(T)
    for t in range(1, T):
        f[t] = phi * f[t - 1] + r.standard_normal() * np.sqrt(1 - phi**2)
    y = f + 0.5 * r.standard_normal(T)
    model, prior = fit_ar1_model(y)
    kappa = -model.drift_jac(np.zeros(1), 0.0)[0, 0]
    assert 1 - kappa == pytest.approx(phi, abs=0.01)
    assert prior.cov[0, 0] == pytest.approx(1.0, abs=0.1)
    assert model.R[0, 0] == pytest.approx(0.25, abs=0.05)


def test_fit_ar1_rejects_short_or_constant():
    with pytest.raises(DataError):
        fit_ar1_model(np.zeros(5))
    with pytest.raises(DataError):
        fit_ar1_model(np.ones(50))
