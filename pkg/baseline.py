"""
CPCA-Reg: common principal components per block, followed by a Model-(1)
regression for every pair of selected components.

The common components come from the weighted pooled covariance rather than
the full maximum-likelihood CPC iteration.
"""
import logging
from typing import List, Optional

import numpy as np
from joblib import Parallel, delayed
from scipy.optimize import linear_sum_assignment

from covariance import descending_eigh, pooled_matrix
from errors import CocregException, InputValidationError
from models import CommonComponents, CpcaModel, GroundTruth, PairRegression
from solver import Pairs, check_covariates, ols_coefficients, projected_log_variances, sign_normalize, similarity, stack_pairs

logger = logging.getLogger("cocreg.baseline")

DEFAULT_FRACTION = 0.85
IDENTIFICATION_THRESHOLD = 0.5


def common_pca(matrices, weights) -> CommonComponents:
    matrices = np.asarray(matrices, dtype=float)
    if matrices.ndim != 3 or matrices.shape[0] < 2:
        raise InputValidationError("Common PCA needs covariance matrices from at least 2 subjects")
    eigenvalues, vectors = descending_eigh(pooled_matrix(matrices, weights))
    vectors = np.column_stack([sign_normalize(v) for v in vectors.T])
    subject_eigenvalues = np.einsum("ji,njk,ki->ni", vectors, matrices, vectors)
    return CommonComponents(
        eigenvectors=vectors, pooled_eigenvalues=eigenvalues, subject_eigenvalues=subject_eigenvalues
    )


def select_top_components(eigenvalues, fraction: float = DEFAULT_FRACTION) -> List[int]:
    """
    Smallest leading set (0-based indices) whose share of the trace exceeds
    fraction.
    """
    eigenvalues = np.asarray(eigenvalues, dtype=float)
    if eigenvalues.size == 0 or np.any(eigenvalues <= 0):
        raise InputValidationError("Component selection needs positive eigenvalues")
    if not 0 < fraction < 1:
        raise InputValidationError("Variance fraction must lie in (0, 1)")
    share = np.cumsum(eigenvalues) / eigenvalues.sum()
    count = int(np.searchsorted(share, fraction, side="right")) + 1
    return list(range(min(count, eigenvalues.size)))


def _regress_pair(x_index, y_index, gamma, theta, st, W) -> PairRegression:
    try:
        log_y, log_x = projected_log_variances(gamma, theta, st)
        alpha, beta = ols_coefficients(log_y, log_x, W)
    except CocregException as e:
        logger.debug("Pair (x=%d, y=%d) failed: %s", x_index, y_index, e.detail)
        return PairRegression(x_index=x_index, y_index=y_index, failed=True)
    fitted = alpha * log_x + W @ beta
    sst = float(np.sum((log_y - log_y.mean()) ** 2))
    r_squared = 1.0 - float(np.sum((log_y - fitted) ** 2)) / sst if sst > 0 else None
    return PairRegression(
        x_index=x_index, y_index=y_index, alpha=alpha, beta=beta.tolist(), r_squared=r_squared
    )


def pairwise_regressions(
    x_components: CommonComponents,
    y_components: CommonComponents,
    x_selected: List[int],
    y_selected: List[int],
    pairs: Pairs,
    covariates,
    n_jobs: int = 1,
) -> CpcaModel:
    if not x_selected or not y_selected:
        raise InputValidationError("Pairwise regressions need at least one selected component per block")
    st = stack_pairs(pairs)
    W = check_covariates(covariates, st.n)
    jobs = [
        (j, k, y_components.eigenvectors[:, k], x_components.eigenvectors[:, j])
        for j in x_selected
        for k in y_selected
    ]
    if n_jobs == 1:
        regressions = [_regress_pair(j, k, g, t, st, W) for j, k, g, t in jobs]
    else:
        regressions = Parallel(n_jobs=n_jobs)(delayed(_regress_pair)(j, k, g, t, st, W) for j, k, g, t in jobs)
    failed = sum(r.failed for r in regressions)
    if failed:
        logger.info("%d of %d CPCA-Reg pair regressions failed", failed, len(regressions))
    return CpcaModel(
        x_components=x_components,
        y_components=y_components,
        x_selected=list(x_selected),
        y_selected=list(y_selected),
        regressions=regressions,
    )


def fit_cpca_reg(pairs: Pairs, covariates, fraction: float = DEFAULT_FRACTION, n_jobs: int = 1) -> CpcaModel:
    st = stack_pairs(pairs)
    x_components = common_pca(st.deltas, st.u)
    y_components = common_pca(st.sigmas, st.v)
    x_selected = select_top_components(x_components.pooled_eigenvalues, fraction)
    y_selected = select_top_components(y_components.pooled_eigenvalues, fraction)
    logger.info("CPCA-Reg selected %d predictor and %d outcome components", len(x_selected), len(y_selected))
    return pairwise_regressions(x_components, y_components, x_selected, y_selected, st, covariates, n_jobs=n_jobs)


def best_pair(model: CpcaModel) -> Optional[PairRegression]:
    """Highest-R² successful pair, used when no ground truth is available"""
    scored = [r for r in model.regressions if not r.failed and r.r_squared is not None]
    return max(scored, key=lambda r: r.r_squared, default=None)


def match_truth(
    model: CpcaModel, truth: GroundTruth, threshold: float = IDENTIFICATION_THRESHOLD
) -> List[Optional[PairRegression]]:
    """
    One regression per planted component, or None when it is not identified.
    Predictor components are assigned one-to-one by theta-similarity; the outcome
    component is then the best gamma match (or best R² when gamma is not shared).
    """
    thetas = model.x_components.eigenvectors
    gammas = model.y_components.eigenvectors
    xs = model.x_selected
    scores = np.array([[similarity(thetas[:, j], c.theta) for j in xs] for c in truth.components])
    rows, cols = linear_sum_assignment(scores, maximize=True)

    matched: List[Optional[PairRegression]] = [None] * len(truth.components)
    for i, col in zip(rows, cols):
        if scores[i, col] < threshold:
            continue
        component = truth.components[i]
        candidates = [r for r in model.regressions if r.x_index == xs[col] and not r.failed]
        if not candidates:
            continue
        if component.gamma_applicable:
            matched[i] = max(candidates, key=lambda r: similarity(gammas[:, r.y_index], component.gamma))
        else:
            matched[i] = max(candidates, key=lambda r: -np.inf if r.r_squared is None else r.r_squared)
    return matched
