import numpy as np
import pytest

from conftest import make_pairs
from covariance import estimate_covariances
from errors import InputValidationError
from inference import (
    asymptotic_covariance,
    asymptotic_covariance_pairs,
    bootstrap,
    bootstrap_pairs,
    percentile_interval,
    refit_coefficients,
)
from models import Cohort, ComponentFit, SubjectDataset
from simgen import generate_pairs
from solver import fit_component, least_squares_coefficients, projected_log_variances


@pytest.fixture
def fitted_cohort(small_cohort, fast_config):
    pairs = estimate_covariances(small_cohort)
    return small_cohort, pairs, fit_component(pairs, small_cohort.covariates, fast_config)


def test_percentile_interval_uses_midpoint_quantiles():
    (lower, upper), = percentile_interval(np.arange(1, 101), 0.9)
    assert lower == pytest.approx(5.5, abs=1e-12)
    assert upper == pytest.approx(95.5, abs=1e-12)


def test_percentile_interval_per_column():
    draws = np.column_stack([np.arange(1, 101), -np.arange(1, 101)])
    intervals = percentile_interval(draws, 0.9)
    assert intervals[1] == pytest.approx((-95.5, -5.5))


def test_refit_is_joint_least_squares(fitted_cohort):
    cohort, pairs, fit = fitted_cohort
    alpha, beta = refit_coefficients(fit.gamma, fit.theta, pairs, cohort.covariates)
    expected_alpha, expected_beta = least_squares_coefficients(fit.gamma, fit.theta, pairs, cohort.covariates)
    assert alpha == pytest.approx(expected_alpha)
    np.testing.assert_allclose(beta, expected_beta)


def test_refit_zero_gradient(fitted_cohort):
    cohort, pairs, fit = fitted_cohort
    W = cohort.covariates
    alpha, beta = refit_coefficients(fit.gamma, fit.theta, pairs, W)
    log_y, log_x = projected_log_variances(fit.gamma, fit.theta, pairs)
    r = log_y - alpha * log_x - W @ beta
    assert abs(np.mean(r * log_x)) <= 1e-10
    np.testing.assert_allclose(W.T @ r / len(r), 0.0, atol=1e-10)


@pytest.mark.parametrize("B, level", [(99, 0.95), (100, 1.0), (100, 0.0)])
def test_bootstrap_rejects_bad_arguments(fitted_cohort, B, level):
    cohort, pairs, fit = fitted_cohort
    with pytest.raises(InputValidationError):
        bootstrap(cohort, fit, B=B, level=level, pairs=pairs)


def test_bootstrap_is_deterministic(fitted_cohort):
    cohort, pairs, fit = fitted_cohort
    a = bootstrap(cohort, fit, B=100, level=0.9, seed=7, pairs=pairs)
    b = bootstrap(cohort, fit, B=100, level=0.9, seed=7)
    assert a.draws.shape == (100, 1 + cohort.r)
    np.testing.assert_array_equal(a.draws, b.draws)
    assert a.intervals == b.intervals
    assert a.n_failed == 0
    np.testing.assert_allclose(a.estimate, np.concatenate([[fit.alpha], fit.beta]))


def test_bootstrap_seed_changes_draws(fitted_cohort):
    cohort, pairs, fit = fitted_cohort
    a = bootstrap_pairs(pairs, cohort.covariates, fit, B=100, seed=1)
    b = bootstrap_pairs(pairs, cohort.covariates, fit, B=100, seed=2)
    assert not np.array_equal(a.draws, b.draws)


def test_bootstrap_parallel_matches_serial(fitted_cohort):
    cohort, pairs, fit = fitted_cohort
    serial = bootstrap_pairs(pairs, cohort.covariates, fit, B=100, seed=4)
    parallel = bootstrap_pairs(pairs, cohort.covariates, fit, B=100, seed=4, n_jobs=2)
    np.testing.assert_allclose(serial.draws, parallel.draws)


def test_bootstrap_intervals_are_ordered(fitted_cohort):
    cohort, pairs, fit = fitted_cohort
    result = bootstrap_pairs(pairs, cohort.covariates, fit, B=200, level=0.95, seed=0)
    for (lower, upper), column in zip(result.intervals, result.draws.T):
        assert lower <= upper
        assert column.min() <= lower and upper <= column.max()


def test_bootstrap_identical_subjects(rng):
    X, Y = rng.standard_normal((20, 2)), rng.standard_normal((20, 2))
    cohort = Cohort(
        subjects=[SubjectDataset(subject_id=f"s{i}", X=X, Y=Y, w=[1.0, 0.0]) for i in range(4)]
    )
    fit = ComponentFit(
        gamma=[1.0, 0.0], theta=[0.0, 1.0], alpha=0.7, beta=[0.2, 0.0], objective=0.0,
        n_iter=1, converged=True, restart_index=0,
    )
    result = bootstrap(cohort, fit, B=100, level=0.95)
    np.testing.assert_array_equal(result.draws, np.tile([0.7, 0.2, 0.0], (100, 1)))
    assert result.intervals == [(0.7, 0.7), (0.2, 0.2), (0.0, 0.0)]


def test_asymptotic_covariance_intercept_only(rng):
    n = 15
    sigmas = [np.diag(rng.uniform(0.5, 2.0, size=2)) for _ in range(n)]
    deltas = [np.diag(rng.uniform(0.5, 2.0, size=3)) for _ in range(n)]
    pairs = make_pairs(sigmas, deltas, v=40, u=30)
    theta = np.array([1.0, 0.0, 0.0])
    result = asymptotic_covariance_pairs(np.array([1.0, 0.0]), theta, pairs, np.ones((n, 1)))
    np.testing.assert_allclose(result.Q_w, [[1.0]])
    assert result.M_n == 40 * n
    log_x = np.log([D[0, 0] for D in deltas])
    assert result.G_x == pytest.approx(np.mean(log_x**2))
    np.testing.assert_allclose(result.cov @ result.block * result.M_n, np.eye(2), atol=1e-8)
    assert np.all(result.standard_errors > 0)


def test_asymptotic_covariance_from_cohort(fitted_cohort):
    cohort, pairs, fit = fitted_cohort
    from_cohort = asymptotic_covariance(fit.gamma, fit.theta, cohort)
    from_pairs = asymptotic_covariance(fit.gamma, fit.theta, cohort, pairs=pairs)
    np.testing.assert_allclose(from_cohort.cov, from_pairs.cov)
    assert from_cohort.cov.shape == (1 + cohort.r, 1 + cohort.r)
    np.testing.assert_allclose(from_cohort.cov, from_cohort.cov.T, atol=1e-15)


def _truth_fit(c):
    return ComponentFit(
        gamma=c.gamma, theta=c.theta, alpha=c.alpha, beta=c.beta, objective=0.0, n_iter=0, converged=True, restart_index=0
    )


def test_bootstrap_interval_narrows_with_more_subjects(small_scenario):
    widths = {}
    for n in (100, 400):
        scenario = small_scenario.model_copy(update={"n": n})
        runs = []
        for seed in range(5):
            pairs, W, truth = generate_pairs(scenario, seed)
            result = bootstrap_pairs(pairs, W, _truth_fit(truth.components[0]), B=200, level=0.95, seed=seed)
            lower, upper = result.intervals[0]
            runs.append(upper - lower)
        widths[n] = np.median(runs)
    assert widths[400] < widths[100]
