"""
Full-size Monte-Carlo studies. These take minutes; run them with
pytest -m slow.

With the preset log-eigenvalue spread (log_sd 0.1) and u = v = 100 the
sampling error in the planted log-variances is as large as their spread, so
the minimum-objective fit is not the planted pair. The recovery checks below
use an informative variant of the same design instead.
"""
import numpy as np
import pytest

from models import MonteCarloConfig, NoiseFamily, NoiseKind, SolverConfig
from simgen import generate_pairs, get_preset, run_monte_carlo
from solver import fit_component, least_squares_coefficients, objective

pytestmark = pytest.mark.slow


def _row(report, component, coefficient="alpha", method="cocreg"):
    (row,) = [
        r
        for r in report.rows
        if r.method == method and r.component == component and r.coefficient == coefficient
    ]
    return row


def informative(name, **update):
    return get_preset(name).model_copy(update={"log_sd": 0.5, "u": 1000, "v": 1000, **update})


@pytest.fixture(scope="module")
def sim_i_informative():
    return run_monte_carlo(informative("sim-i-small"), MonteCarloConfig(n_jobs=-1), replicates=50, seed=0)


@pytest.fixture(scope="module")
def sim_i_small():
    return run_monte_carlo(
        get_preset("sim-i-small"), MonteCarloConfig(baseline=True, n_jobs=-1), replicates=50, seed=0
    )


@pytest.mark.parametrize("component, alpha", [("C1", 3.0), ("C2", 2.0)])
def test_informative_design_recovers_components(sim_i_informative, component, alpha):
    row = _row(sim_i_informative, component)
    assert row.sim_gamma >= 0.9
    assert row.sim_theta >= 0.9
    assert abs(row.bias) < 0.1 * alpha


def test_cpca_reg_finds_outcome_direction_with_attenuated_effect(sim_i_small):
    cpca = _row(sim_i_small, "C1", method="cpca-reg")
    assert cpca.sim_gamma >= 0.99
    assert cpca.bias < -1


@pytest.mark.parametrize("seed", range(5))
def test_fit_is_no_worse_than_planted_pair(seed):
    pairs, W, truth = generate_pairs(get_preset("sim-i-small"), seed=seed)
    fit = fit_component(pairs, W, SolverConfig(seed=seed))
    planted = truth.components[0]
    alpha, beta = least_squares_coefficients(planted.gamma, planted.theta, pairs, W)
    assert fit.objective <= objective(planted.gamma, planted.theta, alpha, beta, pairs, W) + 1e-9


def test_partial_common_outcome_component():
    report = run_monte_carlo(informative("sim-ii"), MonteCarloConfig(n_jobs=-1), replicates=50, seed=0)
    c1, c2 = _row(report, "C1"), _row(report, "C2")
    assert c1.sim_gamma >= 0.9
    assert c1.sim_theta >= 0.9
    assert c2.sim_gamma is None


@pytest.mark.parametrize(
    "preset, noise",
    [("mvt", NoiseFamily(kind=NoiseKind.MVT, df=5)), ("matrix-gamma", NoiseFamily(kind=NoiseKind.MATRIX_GAMMA, shape=1.0))],
)
def test_non_gaussian(preset, noise):
    report = run_monte_carlo(informative(preset, noise=noise), MonteCarloConfig(n_jobs=-1), replicates=50, seed=0)
    c1 = _row(report, "C1")
    assert c1.sim_gamma >= 0.9
    assert c1.sim_theta >= 0.9


def test_coverage_and_mse_trend():
    config = MonteCarloConfig(bootstrap_B=200, n_jobs=-1)
    reports = [
        run_monte_carlo(informative("sim-i-small", n=m), config, replicates=50, seed=0) for m in (50, 100, 200)
    ]
    mse = [_row(r, "C1").mse for r in reports]
    assert mse[0] > mse[1] > mse[2]
    largest = reports[-1]
    assert 0.86 <= _row(largest, "C1").cp <= 1.0
    assert 0.86 <= _row(largest, "C1", "beta_1").cp <= 1.0
    assert np.isfinite(_row(largest, "C1").bias)
