"""
Higher-order components by deflation, and the component-count choice by
deviation from diagonality (DfD).
"""
import logging
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from covariance import estimate_covariances, is_strictly_pd, sample_covariance
from errors import CocregException, CollinearCovariatesError, InputValidationError, NotPositiveDefiniteError
from models import Cohort, ComponentFit, CovariancePair, FitSequence, SolverConfig
from solver import (
    Pairs,
    StackedPairs,
    check_covariates,
    constraints_for,
    fit_component,
    least_squares_coefficients,
    objective,
    sign_normalize,
    similarity,
    stack_pairs,
)

logger = logging.getLogger("cocreg.components")

ORTHONORMAL_TOL = 1e-8
RIDGE = 1e-10
DEFAULT_THRESHOLD = 2.0


def _as_basis(basis, dim: int) -> np.ndarray:
    basis = np.asarray(basis, dtype=float)
    if basis.ndim == 1:
        basis = basis[:, None]
    if basis.size == 0:
        return np.zeros((dim, 0))
    if basis.shape[0] != dim:
        raise InputValidationError(f"Basis has {basis.shape[0]} rows, expected {dim}")
    return basis


def _check_orthonormal(basis: np.ndarray) -> None:
    k = basis.shape[1]
    if np.max(np.abs(basis.T @ basis - np.eye(k)), initial=0.0) > ORTHONORMAL_TOL:
        raise InputValidationError("Deflation basis must have orthonormal columns")


def deflate(data, basis) -> np.ndarray:
    """Remove the span of basis from the columns' space: data - data B B'"""
    data = np.asarray(data, dtype=float)
    basis = _as_basis(basis, data.shape[1])
    if basis.shape[1] == 0:
        return data.copy()
    if basis.shape[1] > data.shape[1]:
        raise InputValidationError("Deflation basis has more columns than the data")
    _check_orthonormal(basis)
    return data - (data @ basis) @ basis.T


def deflate_covariance(S: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Covariance of deflated data, (I - BB') S (I - BB')"""
    P = np.eye(S.shape[0]) - basis @ basis.T
    D = P @ S @ P
    return (D + D.T) / 2


def log_nu(A) -> float:
    A = np.asarray(A, dtype=float)
    diagonal = np.diag(A)
    sign, logdet = np.linalg.slogdet(A)
    if sign <= 0 or np.any(diagonal <= 0):
        raise NotPositiveDefiniteError("nu is undefined for a matrix that is not positive definite")
    # Hadamard's inequality: the value is >= 0 up to rounding
    return max(0.0, float(np.sum(np.log(diagonal)) - logdet))


def nu(A) -> float:
    """det(diag(A)) / det(A)"""
    return float(np.exp(log_nu(A)))


def dfd_side(basis, matrices, weights) -> float:
    """Weighted geometric mean over subjects of nu(B' S_i B)"""
    matrices = np.asarray(matrices, dtype=float)
    basis = _as_basis(basis, matrices.shape[1])
    if basis.shape[1] < 1:
        raise InputValidationError("DfD needs at least one basis column")
    weights = np.asarray(weights, dtype=float)
    projected = np.einsum("ik,nij,jl->nkl", basis, matrices, basis)
    logs = np.array([log_nu(P) for P in projected])
    return float(np.exp(np.sum(weights * logs) / weights.sum()))


def dfd(k: int, gamma_basis, theta_basis, pairs: Pairs) -> float:
    st = stack_pairs(pairs)
    gamma_basis = _as_basis(gamma_basis, st.q)
    theta_basis = _as_basis(theta_basis, st.p)
    if k < 1 or k > min(gamma_basis.shape[1], theta_basis.shape[1]):
        raise InputValidationError(f"k={k} is outside the available components")
    return max(
        dfd_side(gamma_basis[:, :k], st.sigmas, st.v),
        dfd_side(theta_basis[:, :k], st.deltas, st.u),
    )


def dfd_trace(gamma_basis, theta_basis, pairs: Pairs) -> List[Tuple[int, float]]:
    st = stack_pairs(pairs)
    G = _as_basis(gamma_basis, st.q)
    T = _as_basis(theta_basis, st.p)
    return [(k, dfd(k, G, T, st)) for k in range(1, min(G.shape[1], T.shape[1]) + 1)]


def select_count(trace: Sequence[Tuple[int, float]], threshold: float = DEFAULT_THRESHOLD) -> int:
    """Largest k with DfD(k) <= threshold, 0 if none"""
    return max((k for k, value in trace if value <= threshold), default=0)


def projection_alignment(fit: ComponentFit) -> Optional[float]:
    """|<gamma, theta>| after unit normalisation; only defined when p == q"""
    if fit.gamma.size != fit.theta.size:
        return None
    return similarity(fit.gamma, fit.theta)


def _orthonormal_columns(vectors: List[np.ndarray], dim: int) -> np.ndarray:
    if not vectors:
        return np.zeros((dim, 0))
    Q, _ = np.linalg.qr(np.column_stack(vectors))
    return Q


def _complement(basis: np.ndarray) -> np.ndarray:
    dim, k = basis.shape
    if k == 0:
        return np.eye(dim)
    Q, _ = np.linalg.qr(basis, mode="complete")
    return Q[:, k:]


def _compress(matrices: np.ndarray, N: np.ndarray, block: str, subject_ids) -> np.ndarray:
    reduced = np.einsum("ik,nij,jl->nkl", N, matrices, N)
    reduced = (reduced + np.transpose(reduced, (0, 2, 1))) / 2
    dim = N.shape[1]
    for i, S in enumerate(reduced):
        if not is_strictly_pd(S):
            raise NotPositiveDefiniteError(f"Deflated {block} covariance is rank-deficient for subject {subject_ids[i]}")
        S += RIDGE * np.trace(S) / dim * np.eye(dim)
    return reduced


def _fit_in_complement(
    deflated: StackedPairs,
    original: StackedPairs,
    W: np.ndarray,
    config: SolverConfig,
    gamma_basis: np.ndarray,
    theta_basis: np.ndarray,
) -> ComponentFit:
    """
    Fit on the deflated covariances restricted to the orthogonal complement of
    the earlier bases, then map back to the full space.
    """
    N_y = _complement(gamma_basis)
    N_x = _complement(theta_basis)
    reduced = StackedPairs(
        sigmas=_compress(deflated.sigmas, N_y, "outcome", deflated.subject_ids),
        deltas=_compress(deflated.deltas, N_x, "predictor", deflated.subject_ids),
        v=deflated.v,
        u=deflated.u,
        subject_ids=deflated.subject_ids,
    )
    fit = fit_component(reduced, W, config)

    constraints = constraints_for(original, config.constraint_mode)
    gamma = N_y @ fit.gamma
    gamma -= gamma_basis @ (gamma_basis.T @ gamma)
    gamma = sign_normalize(gamma / np.sqrt(gamma @ constraints.H_y @ gamma))
    theta = N_x @ fit.theta
    theta -= theta_basis @ (theta_basis.T @ theta)
    theta = sign_normalize(theta / np.sqrt(theta @ constraints.H_x @ theta))

    # On the complement the deflated and original forms coincide
    alpha, beta = fit.alpha, fit.beta
    try:
        alpha, beta = least_squares_coefficients(gamma, theta, original, W)
    except CollinearCovariatesError:
        pass
    return ComponentFit(
        gamma=gamma,
        theta=theta,
        alpha=alpha,
        beta=beta,
        objective=objective(gamma, theta, alpha, beta, original, W),
        n_iter=fit.n_iter,
        converged=fit.converged,
        restart_index=fit.restart_index,
        trace=fit.trace,
        multipliers=fit.multipliers,
    )


DeflatedPairs = Callable[[np.ndarray, np.ndarray], StackedPairs]


def _fit_deflation_sequence(
    original: StackedPairs,
    W: np.ndarray,
    config: SolverConfig,
    max_k: int,
    threshold: float,
    deflated_pairs: DeflatedPairs,
) -> FitSequence:
    if max_k < 1 or max_k > min(original.p, original.q):
        raise InputValidationError(f"max_k must be between 1 and min(p, q)={min(original.p, original.q)}")

    components: List[ComponentFit] = []
    trace: List[Tuple[int, float]] = []
    status = "complete"
    for k in range(1, max_k + 1):
        gamma_basis = _orthonormal_columns([c.gamma for c in components], original.q)
        theta_basis = _orthonormal_columns([c.theta for c in components], original.p)
        try:
            if k == 1:
                fit = fit_component(original, W, config)
            else:
                fit = _fit_in_complement(
                    deflated_pairs(gamma_basis, theta_basis), original, W, config, gamma_basis, theta_basis
                )
        except CocregException as e:
            if k == 1:
                raise
            logger.warning("Stopping after %d components: %s", k - 1, e.detail)
            status = "truncated"
            break
        components.append(fit)
        G = np.column_stack([c.gamma for c in components])
        T = np.column_stack([c.theta for c in components])
        trace.append((k, dfd(k, G, T, original)))
        logger.info(
            "Component %d: objective %.6g, alpha %.4f, DfD %.4f", k, fit.objective, fit.alpha, trace[-1][1]
        )

    return FitSequence(
        components=components,
        dfd_trace=trace,
        selected_k=select_count(trace, threshold),
        threshold=threshold,
        constraint_mode=config.constraint_mode,
        status=status,
    )


def fit_sequence(
    cohort: Cohort,
    config: Optional[SolverConfig] = None,
    max_k: int = 1,
    threshold: float = DEFAULT_THRESHOLD,
    pairs: Optional[Sequence[CovariancePair]] = None,
) -> FitSequence:
    """
    Fit components 1..max_k, deflating the raw data by the accumulated bases and
    re-estimating covariances each round. DfD is always scored against the
    original covariances.
    """
    config = config or SolverConfig()
    if pairs is None:
        pairs = estimate_covariances(cohort, n_jobs=config.n_jobs)
    original = stack_pairs(pairs)

    def deflated_pairs(gamma_basis, theta_basis):
        sigmas, deltas = [], []
        for s in cohort.subjects:
            sigmas.append(sample_covariance(deflate(s.Y, gamma_basis)))
            deltas.append(sample_covariance(deflate(s.X, theta_basis)))
        return StackedPairs(
            sigmas=np.stack(sigmas), deltas=np.stack(deltas), v=original.v, u=original.u, subject_ids=original.subject_ids
        )

    return _fit_deflation_sequence(original, cohort.covariates, config, max_k, threshold, deflated_pairs)


def fit_sequence_covariances(
    pairs: Pairs,
    covariates,
    config: Optional[SolverConfig] = None,
    max_k: int = 1,
    threshold: float = DEFAULT_THRESHOLD,
) -> FitSequence:
    """Same as fit_sequence, deflating the covariance pairs by congruence"""
    config = config or SolverConfig()
    original = stack_pairs(pairs)
    W = check_covariates(covariates, original.n)

    def deflated_pairs(gamma_basis, theta_basis):
        return StackedPairs(
            sigmas=np.stack([deflate_covariance(S, gamma_basis) for S in original.sigmas]),
            deltas=np.stack([deflate_covariance(D, theta_basis) for D in original.deltas]),
            v=original.v,
            u=original.u,
            subject_ids=original.subject_ids,
        )

    return _fit_deflation_sequence(original, W, config, max_k, threshold, deflated_pairs)
