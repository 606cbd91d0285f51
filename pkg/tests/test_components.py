import numpy as np
import pytest

from components import (
    deflate,
    deflate_covariance,
    dfd,
    dfd_side,
    dfd_trace,
    fit_sequence,
    fit_sequence_covariances,
    nu,
    projection_alignment,
    select_count,
)
from covariance import sample_covariance
from errors import InputValidationError, NotPositiveDefiniteError
from models import ComponentFit, SolverConfig
from simgen import eigen_system, population_pairs
from solver import similarity


def test_deflate_removes_basis_direction(rng):
    data = rng.standard_normal((8, 3))
    out = deflate(data, np.array([1.0, 0.0, 0.0]))
    np.testing.assert_allclose(out[:, 0], 0.0)
    np.testing.assert_allclose(out[:, 1:], data[:, 1:])


def test_deflate_by_full_basis_is_zero(rng):
    data = rng.standard_normal((8, 3))
    np.testing.assert_allclose(deflate(data, np.eye(3)), 0.0, atol=1e-14)


def test_deflate_by_empty_basis_copies(rng):
    data = rng.standard_normal((8, 3))
    out = deflate(data, np.zeros((3, 0)))
    np.testing.assert_array_equal(out, data)
    assert out is not data


def test_deflate_rejects_non_orthonormal_basis(rng):
    with pytest.raises(InputValidationError):
        deflate(rng.standard_normal((8, 3)), np.array([[1.0, 1.0], [0.0, 1.0], [0.0, 0.0]]))


def test_deflate_covariance_matches_deflated_data(rng):
    X = rng.standard_normal((30, 4))
    B, _ = np.linalg.qr(rng.standard_normal((4, 2)))
    np.testing.assert_allclose(deflate_covariance(sample_covariance(X), B), sample_covariance(deflate(X, B)), atol=1e-12)


def test_nu_values():
    assert nu(np.diag([2.0, 5.0])) == pytest.approx(1.0)
    assert nu(np.array([[1.0, 0.5], [0.5, 1.0]])) == pytest.approx(4 / 3)
    with pytest.raises(NotPositiveDefiniteError):
        nu(np.array([[1.0, 2.0], [2.0, 1.0]]))


@pytest.mark.parametrize("seed", range(5))
def test_nu_ignores_diagonal_rescaling(seed):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((4, 4))
    A = M @ M.T + np.eye(4)
    D = np.diag(rng.uniform(0.1, 10.0, size=4))
    assert nu(A) > 1
    assert nu(D @ A @ D) == pytest.approx(nu(A), rel=1e-10)


def test_dfd_side_weighted_geometric_mean():
    c = np.sqrt(0.75)
    first = np.array([[1.0, 0.5, 0.0], [0.5, 1.0, 0.0], [0.0, 0.0, 5.0]])
    second = np.array([[1.0, c, 0.0], [c, 1.0, 0.0], [0.0, 0.0, 2.0]])
    basis = np.eye(3)[:, :2]
    expected = np.exp((1 * np.log(4 / 3) + 3 * np.log(4.0)) / 4)
    assert dfd_side(basis, [first, second], [1, 3]) == pytest.approx(expected, rel=1e-10)
    assert dfd_side(basis, [first, second], [1, 1]) == pytest.approx(np.sqrt(16 / 3), rel=1e-10)
    assert dfd_side(basis[:, :1], [first, second], [1, 3]) == pytest.approx(1.0)


def test_dfd_of_generating_bases_is_one(small_scenario):
    pairs, _, _ = population_pairs(small_scenario)
    spec = eigen_system(small_scenario)
    G, T = spec.Pi[:, [1, 3]], spec.Upsilon[:, [0, 2]]
    assert dfd(2, G, T, pairs) == pytest.approx(1.0, abs=1e-8)
    assert [k for k, _ in dfd_trace(G, T, pairs)] == [1, 2]


def test_dfd_rejects_k_outside_bases(small_scenario):
    pairs, _, _ = population_pairs(small_scenario)
    spec = eigen_system(small_scenario)
    with pytest.raises(InputValidationError):
        dfd(3, spec.Pi[:, :2], spec.Upsilon[:, :2], pairs)


@pytest.mark.parametrize(
    "trace, threshold, expected",
    [
        ([(1, 1.2), (2, 1.9), (3, 2.5)], 2.0, 2),
        ([(1, 3.0), (2, 4.0)], 2.0, 0),
        ([(1, 1.0), (2, 1.4)], 1.2, 1),
        ([], 2.0, 0),
    ],
)
def test_select_count(trace, threshold, expected):
    assert select_count(trace, threshold) == expected


def test_covariance_sequence_recovers_planted_component(exact_scenario):
    pairs, W, truth = population_pairs(exact_scenario)
    sequence = fit_sequence_covariances(pairs, W, SolverConfig(n_restarts=5), max_k=2)
    assert len(sequence.components) == 2
    first, second = sequence.components
    planted = truth.components[0]
    assert similarity(first.gamma, planted.gamma) >= 0.999
    assert similarity(first.theta, planted.theta) >= 0.999
    assert first.gamma @ second.gamma == pytest.approx(0.0, abs=1e-8)
    assert first.theta @ second.theta == pytest.approx(0.0, abs=1e-8)
    assert sequence.dfd_trace[0][1] == pytest.approx(1.0, abs=1e-6)
    assert sequence.status == "complete"


def test_data_sequence_shapes_and_orthogonality(small_cohort, fast_config):
    sequence = fit_sequence(small_cohort, fast_config, max_k=2)
    G = np.column_stack([c.gamma for c in sequence.components])
    T = np.column_stack([c.theta for c in sequence.components])
    np.testing.assert_allclose(G.T @ G, np.eye(2), atol=1e-8)
    np.testing.assert_allclose(T.T @ T, np.eye(2), atol=1e-8)
    assert [k for k, _ in sequence.dfd_trace] == [1, 2]
    assert all(value >= 1.0 for _, value in sequence.dfd_trace)
    assert 0 <= sequence.selected_k <= 2


def test_max_k_beyond_dimensions(exact_pairs):
    pairs, W, _ = exact_pairs
    with pytest.raises(InputValidationError):
        fit_sequence_covariances(pairs, W, max_k=4)


def _fit(gamma, theta):
    return ComponentFit(
        gamma=gamma, theta=theta, alpha=1.0, beta=[0.0], objective=0.0, n_iter=1, converged=True, restart_index=0
    )


def test_projection_alignment():
    assert projection_alignment(_fit([1.0, 0.0], [1.0, 1.0])) == pytest.approx(1 / np.sqrt(2))
    assert projection_alignment(_fit([1.0, 0.0], [1.0, 0.0, 0.0])) is None
