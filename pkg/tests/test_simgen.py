import numpy as np
import pytest
from scipy import stats

from covariance import estimate_covariances
from errors import InputValidationError
from models import EigenScenario, EigenSystemSpec, MonteCarloConfig, NoiseFamily, NoiseKind, SolverConfig
from simgen import (
    PRESETS,
    build_covariances,
    draw_covariates,
    eigen_system,
    generate_cohort,
    generate_pairs,
    get_preset,
    log_mean_grid,
    plant_eigenvalues,
    planted_outcome_eigenvalue,
    population_pairs,
    random_orthonormal,
    replicate_seed,
    run_monte_carlo,
    sample_gaussian,
    sample_matrix_gamma,
    sample_mvt,
    sample_noise,
    subject_basis,
)
from solver import objective


def test_random_orthonormal_dim_one():
    assert random_orthonormal(1, 0).shape == (1, 1)
    assert abs(random_orthonormal(1, 0)[0, 0]) == pytest.approx(1.0)


@pytest.mark.parametrize("dim", [2, 5, 20])
def test_random_orthonormal_is_orthogonal(dim):
    Q = random_orthonormal(dim, dim)
    np.testing.assert_allclose(Q.T @ Q, np.eye(dim), atol=1e-12)


def test_random_orthonormal_rejects_zero_dim():
    with pytest.raises(InputValidationError):
        random_orthonormal(0)


def test_random_orthonormal_has_zero_mean():
    rng = np.random.default_rng(0)
    mean = np.mean([random_orthonormal(3, rng) for _ in range(2000)], axis=0)
    assert np.abs(mean).max() < 0.05


def test_log_mean_grid():
    np.testing.assert_allclose(log_mean_grid(4), [1.0, 0.0, -1.0, -2.0])
    np.testing.assert_allclose(log_mean_grid(1), [1.0])


def test_planted_outcome_eigenvalue():
    assert planted_outcome_eigenvalue(3.0, [1.0, -1.0], [1.0, 0.0], 1.0) == pytest.approx(np.e**1)
    assert planted_outcome_eigenvalue(1.0, [0.0, 1.0], [1.0, 1.0], np.e**2) == pytest.approx(np.e**3)
    assert planted_outcome_eigenvalue(2.0, [1.0, -1.0], [1.0, 1.0], 1.0) == pytest.approx(1.0)


def test_plant_eigenvalues_satisfy_model(small_scenario):
    w = np.array([1.0, 1.0])
    lam, omega = plant_eigenvalues(small_scenario, w, 3)
    for c in small_scenario.planted:
        expected = c.alpha * np.log(omega[c.x_index]) + w @ np.asarray(c.beta)
        assert np.log(lam[c.y_index]) == pytest.approx(expected)
    assert np.all(lam > 0) and np.all(omega > 0)


def test_draw_covariates(small_scenario):
    W = draw_covariates(small_scenario, 0)
    assert W.shape == (small_scenario.n, 2)
    np.testing.assert_array_equal(W[:, 0], 1.0)
    assert set(np.unique(W[:, 1])) <= {0.0, 1.0}


def test_build_covariances_identity_basis():
    spec = EigenSystemSpec(Pi=np.eye(2), Upsilon=np.eye(3), common_count_y=2, common_count_x=3)
    Sigma, Delta = build_covariances(spec, [2.0, 1.0], [3.0, 2.0, 1.0])
    np.testing.assert_allclose(Sigma, np.diag([2.0, 1.0]))
    np.testing.assert_allclose(Delta, np.diag([3.0, 2.0, 1.0]))


def test_build_covariances_reconstructs_eigen_system(small_scenario):
    spec = eigen_system(small_scenario)
    lam, omega = np.arange(4, 0, -1.0), np.arange(6, 0, -1.0)
    Sigma, Delta = build_covariances(spec, lam, omega, 0)
    np.testing.assert_allclose(spec.Pi.T @ Sigma @ spec.Pi, np.diag(lam), atol=1e-12)
    np.testing.assert_allclose(spec.Upsilon.T @ Delta @ spec.Upsilon, np.diag(omega), atol=1e-12)


def test_subject_basis_keeps_common_head():
    shared = random_orthonormal(5, 1)
    basis = subject_basis(shared, 2, 4)
    np.testing.assert_allclose(basis[:, :2], shared[:, :2])
    np.testing.assert_allclose(basis.T @ basis, np.eye(5), atol=1e-12)
    assert not np.allclose(np.abs(basis[:, 2:]), np.abs(shared[:, 2:]))
    np.testing.assert_array_equal(subject_basis(shared, 5, 4), shared)


def test_sample_gaussian_covariance():
    cov = np.array([[2.0, 0.5], [0.5, 1.0]])
    X = sample_gaussian(cov, 200000, 0)
    np.testing.assert_allclose(np.cov(X.T), cov, atol=0.03)


def test_sample_gaussian_rank_one():
    cov = np.outer([1.0, 2.0], [1.0, 2.0])
    X = sample_gaussian(cov, 1000, 0)
    np.testing.assert_allclose(X[:, 1], 2 * X[:, 0], atol=1e-8)


def test_sample_mvt_covariance():
    cov = np.array([[1.0, 0.3], [0.3, 2.0]])
    X = sample_mvt(cov, 5, 400000, 1)
    np.testing.assert_allclose(np.cov(X.T), cov, atol=0.06)


def test_sample_mvt_heavy_tails():
    X = sample_mvt(np.eye(2), 3, 100000, 2)
    assert stats.kurtosis(X[:, 0], fisher=False) > 3.0


def test_sample_mvt_large_df_is_gaussian():
    X = sample_mvt(np.eye(2), 1e6, 100000, 3)
    assert stats.kurtosis(X[:, 0], fisher=False) == pytest.approx(3.0, abs=0.1)


def test_sample_mvt_needs_finite_covariance():
    with pytest.raises(InputValidationError):
        sample_mvt(np.eye(2), 2, 10, 0)


def test_sample_matrix_gamma_moments():
    cov = np.array([[4.0, 1.0], [1.0, 1.0]])
    X = sample_matrix_gamma(cov, 1.0, 200000, 0)
    np.testing.assert_allclose(X.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(X.var(axis=0), np.diag(cov), rtol=0.05)
    assert stats.skew(X[:, 0]) == pytest.approx(2.0, abs=0.2)
    assert np.corrcoef(X.T)[0, 1] > 0


def test_sample_noise_dispatch():
    cov = np.eye(2)
    np.testing.assert_array_equal(sample_noise(NoiseFamily(), cov, 5, 0), sample_gaussian(cov, 5, 0))
    np.testing.assert_array_equal(
        sample_noise(NoiseFamily(kind=NoiseKind.MVT, df=4), cov, 5, 0), sample_mvt(cov, 4, 5, 0)
    )


def test_generate_cohort_shapes_and_determinism(small_scenario):
    cohort, truth = generate_cohort(small_scenario)
    again, _ = generate_cohort(small_scenario)
    assert cohort.n == 40
    assert (cohort.p, cohort.q, cohort.r) == (6, 4, 2)
    assert cohort.subjects[0].X.shape == (80, 6)
    assert cohort.subject_ids[0] == "sub-0001"
    np.testing.assert_array_equal(cohort.subjects[3].Y, again.subjects[3].Y)
    assert len(truth.components) == 2
    other, _ = generate_cohort(small_scenario, seed=99)
    assert not np.array_equal(cohort.subjects[0].X, other.subjects[0].X)


def test_generate_pairs_matches_cohort_estimates(small_scenario):
    cohort, _ = generate_cohort(small_scenario)
    pairs, W, _ = generate_pairs(small_scenario)
    np.testing.assert_array_equal(W, cohort.covariates)
    for a, b in zip(pairs, estimate_covariances(cohort)):
        np.testing.assert_array_equal(a.sigma_hat, b.sigma_hat)
        np.testing.assert_array_equal(a.delta_hat, b.delta_hat)


def test_population_objective_vanishes_at_truth(small_scenario):
    pairs, W, truth = population_pairs(small_scenario)
    for c in truth.components:
        assert objective(c.gamma, c.theta, c.alpha, c.beta, pairs, W) <= 1e-12


def test_partial_common_applicability():
    truth = generate_cohort(PRESETS["sim-ii"].model_copy(update={"n": 3}))[1]
    assert [c.gamma_applicable for c in truth.components] == [True, False]
    assert all(c.theta_applicable for c in truth.components)


def test_partial_common_head_diagonalizes_every_subject():
    scenario = PRESETS["sim-ii"].model_copy(update={"n": 3})
    spec = eigen_system(scenario)
    pairs, _, _ = population_pairs(scenario)
    head = spec.Pi[:, :3]
    for pair in pairs:
        projected = head.T @ pair.sigma_hat @ head
        np.testing.assert_allclose(projected, np.diag(np.diag(projected)), atol=1e-10)
    assert spec.common_count_y == 3


def test_get_preset():
    assert get_preset("sim-i-small").p == 10
    with pytest.raises(InputValidationError):
        get_preset("nope")
    with pytest.raises(InputValidationError):
        get_preset("sim-i-large")
    assert get_preset("sim-i-large", long=True).p == 100
    assert PRESETS["sim-ii"].scenario == EigenScenario.PARTIAL_COMMON


def test_replicate_seed_is_stable():
    assert replicate_seed(0, 1) == replicate_seed(0, 1)
    assert replicate_seed(0, 1) != replicate_seed(0, 2)


@pytest.fixture
def quick_config():
    return MonteCarloConfig(solver=SolverConfig(n_restarts=2, max_iter=200))


def test_monte_carlo_rows(small_scenario, quick_config):
    report = run_monte_carlo(small_scenario, quick_config, replicates=2)
    assert len(report.rows) == 2 * 3
    assert {row.component for row in report.rows} == {"C1", "C2"}
    assert [row.coefficient for row in report.rows[:3]] == ["alpha", "beta_1", "beta_2"]
    assert report.n_failed == 0
    assert sum(report.selection_counts.values()) == 2
    for row in report.rows:
        assert row.n_scored == 2
        assert 0 <= row.sim_theta <= 1
        assert row.mse == pytest.approx(row.bias**2 + row.se**2 / 2, rel=1e-9)
        assert row.cp is None


def test_monte_carlo_is_deterministic(small_scenario, quick_config):
    a = run_monte_carlo(small_scenario, quick_config, replicates=2, seed=3)
    b = run_monte_carlo(small_scenario, quick_config, replicates=2, seed=3)
    assert a.model_dump() == b.model_dump()


def test_monte_carlo_streaming_matches(small_scenario, quick_config):
    a = run_monte_carlo(small_scenario, quick_config, replicates=2)
    b = run_monte_carlo(small_scenario, quick_config.model_copy(update={"streaming": True}), replicates=2)
    for x, y in zip(a.rows, b.rows):
        assert x.mean_estimate == pytest.approx(y.mean_estimate, rel=1e-6)


def test_monte_carlo_with_baseline(small_scenario, quick_config):
    config = quick_config.model_copy(update={"baseline": True})
    report = run_monte_carlo(small_scenario, config, replicates=2)
    assert len(report.rows) == 12
    assert {row.method for row in report.rows} == {"cocreg", "cpca-reg"}


def test_monte_carlo_partial_scenario(quick_config):
    scenario = PRESETS["sim-ii"].model_copy(update={"n": 30, "u": 40, "v": 40})
    report = run_monte_carlo(scenario, quick_config, replicates=2)
    c2 = [row for row in report.rows if row.component == "C2"]
    assert all(row.sim_gamma is None for row in c2)
    assert all(row.sim_theta is not None for row in c2)


def test_monte_carlo_needs_two_replicates(small_scenario):
    with pytest.raises(InputValidationError):
        run_monte_carlo(small_scenario, replicates=1)
