"""
Covariance estimation shared by the solver, inference and baseline modules.
"""
import logging
from typing import List, Sequence

import numpy as np
from joblib import Parallel, delayed

from errors import EXIT_INPUT_ERROR, InputValidationError, InsufficientDataError, NotPositiveDefiniteError
from models import Cohort, ConstraintMatrices, ConstraintMode, CovariancePair, SubjectDataset

logger = logging.getLogger("cocreg.covariance")

# Strict-PD cut: min eigenvalue must exceed this fraction of the max eigenvalue
PD_RTOL = 1e-10


def center(M) -> np.ndarray:
    """Remove column means"""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] < 1:
        raise InputValidationError("center expects a matrix with at least one row")
    if not np.all(np.isfinite(M)):
        raise InputValidationError("Matrix contains non-finite entries")
    return M - M.mean(axis=0, keepdims=True)


def sample_covariance(M) -> np.ndarray:
    """
    Sample covariance with divisor m (the row count), not m - 1
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] < 2:
        raise InsufficientDataError("Sample covariance needs at least 2 rows")
    C = center(M)
    S = C.T @ C / C.shape[0]
    return (S + S.T) / 2


def is_strictly_pd(S: np.ndarray, rtol: float = PD_RTOL) -> bool:
    eig = np.linalg.eigvalsh(S)
    return bool(eig[-1] > 0 and eig[0] > rtol * eig[-1])


def estimate_pair(subject: SubjectDataset) -> CovariancePair:
    if subject.u <= subject.p or subject.v <= subject.q:
        # Centered rank is at most u_i - 1, so u_i <= p can never be positive definite
        raise NotPositiveDefiniteError(
            f"Subject {subject.subject_id}: sample covariances are rank-deficient, need u_i > p and v_i > q, "
            f"got (u_i, p)=({subject.u}, {subject.p}), (v_i, q)=({subject.v}, {subject.q})",
            exit_code=EXIT_INPUT_ERROR,
        )
    sigma = sample_covariance(subject.Y)
    delta = sample_covariance(subject.X)
    for name, S in (("outcome", sigma), ("predictor", delta)):
        if not is_strictly_pd(S):
            raise NotPositiveDefiniteError(f"Subject {subject.subject_id}: {name} sample covariance is rank-deficient")
    return CovariancePair(
        sigma_hat=sigma, delta_hat=delta, v_i=subject.v, u_i=subject.u, subject_id=subject.subject_id
    )


def estimate_covariances(cohort: Cohort, n_jobs: int = 1) -> List[CovariancePair]:
    """One covariance pair per subject, in cohort order"""
    if n_jobs == 1:
        return [estimate_pair(s) for s in cohort.subjects]
    return Parallel(n_jobs=n_jobs)(delayed(estimate_pair)(s) for s in cohort.subjects)


def pooled_constraints(pairs: Sequence[CovariancePair], mode=ConstraintMode.IDENTITY) -> ConstraintMatrices:
    if len(pairs) == 0:
        raise InputValidationError("pooled_constraints needs at least one covariance pair")
    mode = ConstraintMode(mode)
    q = pairs[0].sigma_hat.shape[0]
    p = pairs[0].delta_hat.shape[0]
    if mode == ConstraintMode.IDENTITY:
        return ConstraintMatrices(H_y=np.eye(q), H_x=np.eye(p), mode=mode)
    return ConstraintMatrices(
        H_y=pooled_matrix([c.sigma_hat for c in pairs], [c.v_i for c in pairs]),
        H_x=pooled_matrix([c.delta_hat for c in pairs], [c.u_i for c in pairs]),
        mode=mode,
    )


def pooled_matrix(matrices, weights) -> np.ndarray:
    """Weighted average of matrices"""
    weights = np.asarray(weights, dtype=float)
    pooled = np.einsum("n,nij->ij", weights, np.asarray(matrices)) / weights.sum()
    return (pooled + pooled.T) / 2


def descending_eigh(S: np.ndarray):
    eigenvalues, eigenvectors = np.linalg.eigh(S)
    return eigenvalues[::-1], eigenvectors[:, ::-1]


def common_eigenvector_share(matrices, weights, threshold: float = 0.5) -> np.ndarray:
    """
    For each eigenvector of the pooled matrix, the fraction of subjects whose
    own eigenvector of the same rank has |correlation| above threshold.
    """
    _, pooled_vectors = descending_eigh(pooled_matrix(matrices, weights))
    hits = np.zeros(pooled_vectors.shape[1])
    for S in matrices:
        _, own = descending_eigh(S)
        hits += np.abs(np.sum(own * pooled_vectors, axis=0)) > threshold
    return hits / len(matrices)
