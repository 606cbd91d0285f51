"""
Uncertainty for the model coefficients (alpha, beta) given fitted projections:
subject-level bootstrap and the plug-in asymptotic covariance.
"""
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from covariance import estimate_covariances
from errors import CollinearCovariatesError, InputValidationError, ReplicateFailureError
from models import AsymptoticCovariance, BootstrapResult, Cohort, ComponentFit, CovariancePair
from solver import Pairs, _check_gram, check_covariates, least_squares_coefficients, ols_coefficients, projected_log_variances, stack_pairs

logger = logging.getLogger("cocreg.inference")

MIN_REPLICATES = 100
MAX_REDRAWS = 10
MAX_FAILURE_SHARE = 0.05


def refit_coefficients(gamma, theta, pairs: Pairs, covariates) -> Tuple[float, np.ndarray]:
    """
    With (gamma, theta) fixed the objective is ordinary least squares in
    (alpha, beta), solved jointly in one step.
    """
    return least_squares_coefficients(gamma, theta, pairs, covariates)


def percentile_interval(draws, level: float) -> List[Tuple[float, float]]:
    draws = np.asarray(draws, dtype=float)
    if draws.ndim == 1:
        draws = draws[:, None]
    tail = (1 - level) / 2
    lower, upper = np.quantile(draws, [tail, 1 - tail], axis=0, method="hazen")
    return list(zip(lower.tolist(), upper.tolist()))


def _replicate(index: int, seed: int, log_y, log_x, W) -> Optional[np.ndarray]:
    rng = np.random.default_rng([seed, index])
    n = log_y.size
    for attempt in range(MAX_REDRAWS + 1):
        rows = rng.integers(0, n, size=n)
        try:
            alpha, beta = ols_coefficients(log_y[rows], log_x[rows], W[rows])
            return np.concatenate([[alpha], beta])
        except CollinearCovariatesError:
            logger.debug("Replicate %d: singular resample, redraw %d", index, attempt + 1)
    return None


def bootstrap_pairs(
    pairs: Pairs,
    covariates,
    fitted: ComponentFit,
    B: int = 500,
    level: float = 0.95,
    seed: int = 0,
    n_jobs: int = 1,
) -> BootstrapResult:
    if B < MIN_REPLICATES:
        raise InputValidationError(f"Bootstrap needs B >= {MIN_REPLICATES}, got {B}")
    if not 0 < level < 1:
        raise InputValidationError("Confidence level must lie in (0, 1)")
    st = stack_pairs(pairs)
    W = check_covariates(covariates, st.n)
    # Projections stay fixed, so each subject's log-forms are computed once
    log_y, log_x = projected_log_variances(fitted.gamma, fitted.theta, st)
    estimate = np.concatenate([[fitted.alpha], fitted.beta])

    rows = np.column_stack([log_y, log_x, W])
    if np.all(rows == rows[0]):
        # Every resample is the original sample
        logger.warning("All subjects are identical; bootstrap replicates equal the point estimate")
        draws = np.tile(estimate, (B, 1))
        return BootstrapResult(
            B=B, draws=draws, level=level, intervals=[(e, e) for e in estimate.tolist()], estimate=estimate
        )

    if n_jobs == 1:
        results = [_replicate(b, seed, log_y, log_x, W) for b in range(B)]
    else:
        results = Parallel(n_jobs=n_jobs)(delayed(_replicate)(b, seed, log_y, log_x, W) for b in range(B))

    draws = np.full((B, estimate.size), np.nan)
    for b, result in enumerate(results):
        if result is not None:
            draws[b] = result
    failed = np.isnan(draws[:, 0])
    n_failed = int(failed.sum())
    if n_failed > MAX_FAILURE_SHARE * B:
        raise ReplicateFailureError(f"{n_failed} of {B} bootstrap replicates failed", n_failed=n_failed, n_total=B)
    if n_failed:
        logger.info("%d of %d bootstrap replicates failed after redraws", n_failed, B)

    return BootstrapResult(
        B=B,
        draws=draws,
        level=level,
        intervals=percentile_interval(draws[~failed], level),
        estimate=estimate,
        n_failed=n_failed,
    )


def bootstrap(
    cohort: Cohort,
    fitted: ComponentFit,
    B: int = 500,
    level: float = 0.95,
    seed: int = 0,
    n_jobs: int = 1,
    pairs: Optional[Sequence[CovariancePair]] = None,
) -> BootstrapResult:
    """
    Subject-level bootstrap: resample subjects with replacement and refit
    (alpha, beta) with the original projections. Percentile intervals.
    """
    if pairs is None:
        pairs = estimate_covariances(cohort)
    return bootstrap_pairs(pairs, cohort.covariates, fitted, B=B, level=level, seed=seed, n_jobs=n_jobs)


def asymptotic_covariance_pairs(gamma, theta, pairs: Pairs, covariates) -> AsymptoticCovariance:
    st = stack_pairs(pairs)
    W = check_covariates(covariates, st.n)
    _, log_x = projected_log_variances(gamma, theta, st)
    G_x = float(np.mean(log_x**2))
    Q_w = W.T @ W / st.n
    H_xw = np.mean(log_x[:, None] * W, axis=0)
    block = np.block([[np.array([[G_x]]), H_xw[None, :]], [H_xw[:, None], Q_w]])
    _check_gram(block, "Asymptotic information matrix")
    M_n = int(st.v.sum())
    return AsymptoticCovariance(G_x=G_x, Q_w=Q_w, H_xw=H_xw, M_n=M_n, cov=np.linalg.inv(block) / M_n)


def asymptotic_covariance(gamma, theta, cohort: Cohort, pairs: Optional[Sequence[CovariancePair]] = None) -> AsymptoticCovariance:
    """
    Plug-in covariance of (alpha, beta) for known projections. Second moments are
    taken on centered data, so they coincide with the sample covariances.
    """
    if pairs is None:
        pairs = estimate_covariances(cohort)
    return asymptotic_covariance_pairs(gamma, theta, pairs, cohort.covariates)
