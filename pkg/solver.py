"""
Single-component estimation.

The least-squares objective over (gamma, theta, alpha, beta) is bi-convex, so it is
minimized by coordinate descent: alpha and beta have closed forms, gamma and theta
are updated from generalized eigenvectors of a linearized stationarity condition.
"""
import logging
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from scipy import linalg, optimize

from covariance import descending_eigh, pooled_matrix
from errors import (
    CocregException,
    CollinearCovariatesError,
    DegeneratePredictorError,
    FitFailureError,
    InputValidationError,
    NonPositiveFormError,
    NotPositiveDefiniteError,
)
from models import ArrayModel, ComponentFit, ConstraintMatrices, ConstraintMode, CovariancePair, EigenSolveResult, SolverConfig

logger = logging.getLogger("cocreg.solver")

COND_LIMIT = 1e12
SYMMETRY_TOL = 1e-10
OBJECTIVE_FLOOR = 1e-12
# A projection move is accepted only if it lowers the objective by more than this
IMPROVEMENT_RTOL = 1e-10
IMPROVEMENT_ATOL = 1e-14
MAX_BACKTRACKS = 40
ARMIJO = 1e-4


class StackedPairs(ArrayModel):
    """Covariance pairs stacked into 3-D arrays for vectorized evaluation"""
    sigmas: np.ndarray
    deltas: np.ndarray
    v: np.ndarray
    u: np.ndarray
    subject_ids: Tuple[str, ...]

    @property
    def n(self) -> int:
        return self.sigmas.shape[0]

    @property
    def q(self) -> int:
        return self.sigmas.shape[1]

    @property
    def p(self) -> int:
        return self.deltas.shape[1]


Pairs = Union[Sequence[CovariancePair], StackedPairs]


def stack_pairs(pairs: Pairs) -> StackedPairs:
    if isinstance(pairs, StackedPairs):
        return pairs
    if len(pairs) == 0:
        raise InputValidationError("At least one covariance pair is required")
    return StackedPairs(
        sigmas=np.stack([c.sigma_hat for c in pairs]),
        deltas=np.stack([c.delta_hat for c in pairs]),
        v=np.array([c.v_i for c in pairs], dtype=float),
        u=np.array([c.u_i for c in pairs], dtype=float),
        subject_ids=tuple(c.subject_id or str(i) for i, c in enumerate(pairs)),
    )


def check_covariates(covariates, n: int) -> np.ndarray:
    W = np.asarray(covariates, dtype=float)
    if W.ndim != 2 or W.shape[0] != n:
        raise InputValidationError(f"Covariates must be an n x r matrix with n={n}")
    if not np.all(np.isfinite(W)):
        raise InputValidationError("Covariates contain non-finite entries")
    return W


def quadratic_forms(vec: np.ndarray, matrices: np.ndarray) -> np.ndarray:
    return np.einsum("i,nij,j->n", vec, matrices, vec)


def _log_forms(vec: np.ndarray, matrices: np.ndarray, subject_ids, block: str) -> np.ndarray:
    forms = quadratic_forms(np.asarray(vec, dtype=float), matrices)
    bad = np.flatnonzero(~(forms > 0))
    if bad.size:
        raise NonPositiveFormError(f"{block} quadratic form is non-positive for subject {subject_ids[bad[0]]}")
    return np.log(forms)


def projected_log_variances(gamma, theta, pairs: Pairs) -> Tuple[np.ndarray, np.ndarray]:
    """Per-subject log(gamma' Sigma_i gamma) and log(theta' Delta_i theta)"""
    st = stack_pairs(pairs)
    return (
        _log_forms(gamma, st.sigmas, st.subject_ids, "Outcome"),
        _log_forms(theta, st.deltas, st.subject_ids, "Predictor"),
    )


def residuals(gamma, theta, alpha: float, beta, pairs: Pairs, covariates) -> np.ndarray:
    st = stack_pairs(pairs)
    W = check_covariates(covariates, st.n)
    log_y, log_x = projected_log_variances(gamma, theta, st)
    return log_y - alpha * log_x - W @ np.asarray(beta, dtype=float)


def objective(gamma, theta, alpha: float, beta, pairs: Pairs, covariates) -> float:
    return float(np.mean(residuals(gamma, theta, alpha, beta, pairs, covariates) ** 2))


def update_alpha(theta, gamma, beta, pairs: Pairs, covariates) -> float:
    st = stack_pairs(pairs)
    W = check_covariates(covariates, st.n)
    log_y, log_x = projected_log_variances(gamma, theta, st)
    denominator = np.sum(log_x**2)
    if denominator <= 0:
        raise DegeneratePredictorError("All predictor log-forms are zero; alpha is not identified")
    return float(np.sum(log_x * (log_y - W @ np.asarray(beta, dtype=float))) / denominator)


def _check_gram(gram: np.ndarray, what: str) -> None:
    if not np.isfinite(gram).all() or np.linalg.cond(gram) >= COND_LIMIT:
        raise CollinearCovariatesError(f"{what} is singular or ill-conditioned")


def update_beta(theta, gamma, alpha: float, pairs: Pairs, covariates) -> np.ndarray:
    st = stack_pairs(pairs)
    W = check_covariates(covariates, st.n)
    gram = W.T @ W / st.n
    _check_gram(gram, "Covariate Gram matrix")
    log_y, log_x = projected_log_variances(gamma, theta, st)
    rhs = W.T @ (log_y - alpha * log_x) / st.n
    return linalg.solve(gram, rhs, assume_a="pos")


def ols_coefficients(log_y: np.ndarray, log_x: np.ndarray, W: np.ndarray) -> Tuple[float, np.ndarray]:
    """Regress log outcome forms on [log predictor forms, covariates]"""
    design = np.column_stack([log_x, W])
    _check_gram(design.T @ design, "Design matrix")
    coef, *_ = linalg.lstsq(design, log_y)
    return float(coef[0]), coef[1:]


def least_squares_coefficients(gamma, theta, pairs: Pairs, covariates) -> Tuple[float, np.ndarray]:
    """Joint (alpha, beta) minimizing the objective with the projections fixed"""
    st = stack_pairs(pairs)
    W = check_covariates(covariates, st.n)
    log_y, log_x = projected_log_variances(gamma, theta, st)
    return ols_coefficients(log_y, log_x, W)


def generalized_symmetric_eigen(A, H) -> EigenSolveResult:
    """
    Solve A v = lambda H v by Cholesky whitening: H = L L', eigh of L^-1 A L^-T,
    back-transform. Eigenvalues descending, eigenvectors H-orthonormal.
    """
    A = np.asarray(A, dtype=float)
    H = np.asarray(H, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape != H.shape:
        raise InputValidationError("A and H must be square matrices of the same size")
    if np.max(np.abs(A - A.T)) > SYMMETRY_TOL:
        raise InputValidationError("A must be symmetric")
    A = (A + A.T) / 2
    try:
        L = linalg.cholesky(H, lower=True)
    except linalg.LinAlgError:
        raise NotPositiveDefiniteError("Constraint matrix H is not positive definite")
    C = linalg.solve_triangular(L, A, lower=True)
    C = linalg.solve_triangular(L, C.T, lower=True)
    eigenvalues, U = linalg.eigh((C + C.T) / 2)
    eigenvalues, U = eigenvalues[::-1], U[:, ::-1]
    V = linalg.solve_triangular(L.T, U, lower=False)
    V = V / np.sqrt(np.einsum("ik,ij,jk->k", V, H, V))
    residual_norms = np.linalg.norm(A @ V - (H @ V) * eigenvalues, axis=0)
    return EigenSolveResult(eigenvalues=eigenvalues, eigenvectors=V, residuals=residual_norms)


def _candidate_objectives(candidates: np.ndarray, matrices: np.ndarray, scale: float, target: np.ndarray) -> np.ndarray:
    """Objective for every candidate column: mean((scale * log form - target)^2)"""
    forms = np.einsum("nij,ik,jk->nk", matrices, candidates, candidates)
    values = np.full(candidates.shape[1], np.inf)
    ok = np.all(forms > 0, axis=0)
    if ok.any():
        res = scale * np.log(forms[:, ok]) - target[:, None]
        values[ok] = np.mean(res**2, axis=0)
    return values


def _projection_gradient(vec: np.ndarray, matrices: np.ndarray, weights_numer: float, scale: float, target: np.ndarray) -> np.ndarray:
    """Euclidean gradient of mean((scale * log(v' M_i v) - target)^2) in v, i.e. 2 A v"""
    forms = quadratic_forms(vec, matrices)
    coefficients = weights_numer * (scale * np.log(forms) - target) / forms / matrices.shape[0]
    return 2.0 * np.einsum("n,nij,j->i", coefficients, matrices, vec)


def _tangent_direction(vec: np.ndarray, gradient: np.ndarray, H: np.ndarray) -> np.ndarray:
    """Gradient on the ellipsoid v' H v = 1 in the H metric; zero exactly at the eigen condition A v = lambda H v"""
    return linalg.solve(H, gradient, assume_a="pos") - (vec @ gradient) * vec


def _h_norm(vec: np.ndarray, H: np.ndarray) -> float:
    return float(np.sqrt(max(vec @ H @ vec, 0.0)))


def _backtrack(previous, gradient, matrices, scale, target, H, current):
    """Armijo search along normalize(v - s d), halving s from a unit H-length move"""
    direction = _tangent_direction(previous, gradient, H)
    slope = float(gradient @ direction)
    length = _h_norm(direction, H)
    if not slope > 0 or length == 0:
        return previous, current
    step = 1.0 / length
    for _ in range(MAX_BACKTRACKS):
        candidate = _h_unit(previous - step * direction, H)
        value = float(_candidate_objectives(candidate[:, None], matrices, scale, target)[0])
        if value <= current - ARMIJO * step * slope:
            return candidate, value
        step /= 2
    return previous, current


def _eigen_step(previous, matrices, weights_numer, scale, target, H, subject_ids, block, backtrack=False):
    """
    Shared gamma/theta update. Returns (vector, multiplier or None, objective).
    With backtrack, a rejected eigenvector falls back to a descent step on the ellipsoid.
    """
    n = matrices.shape[0]
    forms = quadratic_forms(previous, matrices)
    if not np.all(forms > 0):
        raise NonPositiveFormError(f"{block} quadratic form is non-positive for subject {subject_ids[np.argmin(forms)]}")
    log_forms = np.log(forms)
    current = float(np.mean((scale * log_forms - target) ** 2))
    coefficients = weights_numer * (scale * log_forms - target) / forms / n
    A = np.einsum("n,nij->ij", coefficients, matrices)
    eig = generalized_symmetric_eigen(A, H)
    values = _candidate_objectives(eig.eigenvectors, matrices, scale, target)
    j = int(np.argmin(values))
    if values[j] < current - (IMPROVEMENT_RTOL * current + IMPROVEMENT_ATOL):
        return eig.eigenvectors[:, j].copy(), float(eig.eigenvalues[j]), float(values[j])
    if backtrack:
        vec, value = _backtrack(previous, 2.0 * A @ previous, matrices, scale, target, H, current)
        return vec, None, value
    return previous, None, current


def _update_gamma(previous_gamma, theta, alpha, beta, st: StackedPairs, W, H_y, backtrack=False):
    log_x = _log_forms(theta, st.deltas, st.subject_ids, "Predictor")
    target = alpha * log_x + W @ beta
    return _eigen_step(
        np.asarray(previous_gamma, dtype=float), st.sigmas, 2.0, 1.0, target, H_y, st.subject_ids, "Outcome", backtrack
    )


def _update_theta(previous_theta, gamma, alpha, beta, st: StackedPairs, W, H_x, backtrack=False):
    previous_theta = np.asarray(previous_theta, dtype=float)
    log_y = _log_forms(gamma, st.sigmas, st.subject_ids, "Outcome")
    target = log_y - W @ beta
    if alpha == 0:
        # A2 vanishes and theta is not identified
        return previous_theta, None, float(np.mean(target**2))
    return _eigen_step(
        previous_theta, st.deltas, 2.0 * alpha, alpha, target, H_x, st.subject_ids, "Predictor", backtrack
    )


def update_gamma(previous_gamma, theta, alpha, beta, pairs: Pairs, covariates, H_y) -> np.ndarray:
    st = stack_pairs(pairs)
    W = check_covariates(covariates, st.n)
    gamma, _, _ = _update_gamma(previous_gamma, theta, float(alpha), np.asarray(beta, dtype=float), st, W, np.asarray(H_y, dtype=float))
    return gamma


def update_theta(previous_theta, gamma, alpha, beta, pairs: Pairs, covariates, H_x) -> np.ndarray:
    st = stack_pairs(pairs)
    W = check_covariates(covariates, st.n)
    theta, _, _ = _update_theta(previous_theta, gamma, float(alpha), np.asarray(beta, dtype=float), st, W, np.asarray(H_x, dtype=float))
    return theta


def projected_gradient_norms(gamma, theta, alpha: float, beta, pairs: Pairs, covariates, constraints: ConstraintMatrices) -> Tuple[float, float]:
    """
    H-norms of the objective's gradient in gamma and theta projected onto their
    constraint ellipsoids. Both vanish exactly at a constrained stationary point.
    """
    st = stack_pairs(pairs)
    W = check_covariates(covariates, st.n)
    gamma = np.asarray(gamma, dtype=float)
    theta = np.asarray(theta, dtype=float)
    beta = np.asarray(beta, dtype=float)
    log_y, log_x = projected_log_variances(gamma, theta, st)
    g_gamma = _projection_gradient(gamma, st.sigmas, 2.0, 1.0, alpha * log_x + W @ beta)
    g_theta = _projection_gradient(theta, st.deltas, 2.0 * alpha, alpha, log_y - W @ beta)
    return (
        _h_norm(_tangent_direction(gamma, g_gamma, constraints.H_y), constraints.H_y),
        _h_norm(_tangent_direction(theta, g_theta, constraints.H_x), constraints.H_x),
    )


def similarity(a, b) -> float:
    """|<a/|a|, b/|b|>|"""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InputValidationError("similarity is undefined for a zero vector")
    return float(min(1.0, abs(a @ b) / (na * nb)))


def sign_normalize(vec: np.ndarray) -> np.ndarray:
    """Flip so the largest-magnitude entry is positive"""
    vec = np.asarray(vec, dtype=float)
    return -vec if vec[np.argmax(np.abs(vec))] < 0 else vec.copy()


def _h_unit(vec: np.ndarray, H: np.ndarray) -> np.ndarray:
    return vec / np.sqrt(vec @ H @ vec)


def constraints_for(pairs: Pairs, mode) -> ConstraintMatrices:
    st = stack_pairs(pairs)
    mode = ConstraintMode(mode)
    if mode == ConstraintMode.IDENTITY:
        return ConstraintMatrices(H_y=np.eye(st.q), H_x=np.eye(st.p), mode=mode)
    return ConstraintMatrices(H_y=pooled_matrix(st.sigmas, st.v), H_x=pooled_matrix(st.deltas, st.u), mode=mode)


def initial_projections(pairs: Pairs, constraints: ConstraintMatrices, config: SolverConfig) -> List[Tuple[int, np.ndarray, np.ndarray]]:
    """
    Starting (gamma, theta) pairs indexed by restart number: every pairing of the
    leading config.eigen_starts eigenvectors of each pooled covariance first, then
    seeded random draws on the H-unit ellipsoids.
    """
    st = stack_pairs(pairs)
    H_y, H_x = constraints.H_y, constraints.H_x
    starts = []
    if config.eigen_init:
        _, Ey = descending_eigh(pooled_matrix(st.sigmas, st.v))
        _, Ex = descending_eigh(pooled_matrix(st.deltas, st.u))
        for j in range(min(config.eigen_starts, st.q)):
            for k in range(min(config.eigen_starts, st.p)):
                starts.append((len(starts), _h_unit(Ey[:, j], H_y), _h_unit(Ex[:, k], H_x)))
    L_y = linalg.cholesky(H_y, lower=True)
    L_x = linalg.cholesky(H_x, lower=True)
    offset = len(starts)
    for i in range(config.n_restarts):
        index = offset + i
        rng = np.random.default_rng(config.seed ^ index)
        z_y = rng.standard_normal(st.q)
        z_x = rng.standard_normal(st.p)
        gamma = linalg.solve_triangular(L_y.T, z_y / np.linalg.norm(z_y), lower=False)
        theta = linalg.solve_triangular(L_x.T, z_x / np.linalg.norm(z_x), lower=False)
        starts.append((index, gamma, theta))
    return starts


def _profiled_objective(z: np.ndarray, st: StackedPairs, W: np.ndarray, H_y: np.ndarray, H_x: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Objective over unnormalized (x, y) = z with gamma = x / |x|_H, theta = y / |y|_H
    and (alpha, beta) at their least-squares values, plus its gradient in z.
    """
    x, y = z[: st.q], z[st.q :]
    rho_y, rho_x = _h_norm(x, H_y), _h_norm(y, H_x)
    if rho_y == 0 or rho_x == 0:
        return np.inf, np.zeros_like(z)
    gamma, theta = x / rho_y, y / rho_x
    forms_y = quadratic_forms(gamma, st.sigmas)
    forms_x = quadratic_forms(theta, st.deltas)
    if not (np.all(forms_y > 0) and np.all(forms_x > 0)):
        return np.inf, np.zeros_like(z)
    log_y, log_x = np.log(forms_y), np.log(forms_x)
    try:
        alpha, beta = ols_coefficients(log_y, log_x, W)
    except CollinearCovariatesError:
        return np.inf, np.zeros_like(z)
    r = log_y - alpha * log_x - W @ beta
    # (alpha, beta) are optimal, so only the explicit dependence on the projections remains
    g_gamma = 4.0 / st.n * np.einsum("n,nij,j->i", r / forms_y, st.sigmas, gamma)
    g_theta = -4.0 * alpha / st.n * np.einsum("n,nij,j->i", r / forms_x, st.deltas, theta)
    grad_x = (g_gamma - (H_y @ gamma) * (gamma @ g_gamma)) / rho_y
    grad_y = (g_theta - (H_x @ theta) * (theta @ g_theta)) / rho_x
    return float(np.mean(r**2)), np.concatenate([grad_x, grad_y])


def _joint_polish(gamma, theta, current: float, st: StackedPairs, W, constraints: ConstraintMatrices, config: SolverConfig):
    """
    L-BFGS over both projections at once, for the slow zig-zag that alternating
    block updates show near a minimum. Returns (gamma, theta, value, iterations);
    the input comes back unchanged unless the objective drops.
    """
    H_y, H_x = constraints.H_y, constraints.H_x
    result = optimize.minimize(
        _profiled_objective,
        np.concatenate([gamma, theta]),
        args=(st, W, H_y, H_x),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": config.max_iter, "gtol": config.grad_tol / 10, "ftol": 1e-15},
    )
    if not np.isfinite(result.fun) or result.fun >= current:
        return gamma, theta, current, int(result.nit)
    return _h_unit(result.x[: st.q], H_y), _h_unit(result.x[st.q :], H_x), float(result.fun), int(result.nit)


IterationCallback = Callable[[int, np.ndarray, np.ndarray, float, np.ndarray, float], None]


def coordinate_descent(
    gamma0,
    theta0,
    pairs: Pairs,
    covariates,
    constraints: ConstraintMatrices,
    config: SolverConfig,
    restart_index: int = 0,
    callback: Optional[IterationCallback] = None,
) -> ComponentFit:
    """
    Cycle alpha -> beta -> theta -> gamma from one start until the objective
    settles, polish both projections jointly, then refit (alpha, beta) by least
    squares. A projection update whose best eigenvector does not lower the
    objective takes a backtracking step along the constraint ellipsoid instead,
    so the cycle only stalls where the constrained gradient vanishes.

    `converged` reports stationarity: both projected gradient norms at most
    config.grad_tol (or the objective at its floor).
    """
    st = stack_pairs(pairs)
    W = check_covariates(covariates, st.n)
    H_y, H_x = constraints.H_y, constraints.H_x
    gamma = _h_unit(np.asarray(gamma0, dtype=float), H_y)
    theta = _h_unit(np.asarray(theta0, dtype=float), H_x)
    alpha, beta = 0.0, np.zeros(W.shape[1])
    current = objective(gamma, theta, alpha, beta, st, W)
    trace = [current]
    multipliers = [np.nan, np.nan]
    n_iter = 0

    for n_iter in range(1, config.max_iter + 1):
        alpha = update_alpha(theta, gamma, beta, st, W)
        beta = update_beta(theta, gamma, alpha, st, W)
        theta, lam2, _ = _update_theta(theta, gamma, alpha, beta, st, W, H_x, backtrack=True)
        gamma, lam1, value = _update_gamma(gamma, theta, alpha, beta, st, W, H_y, backtrack=True)
        if lam1 is not None:
            multipliers[0] = lam1
        if lam2 is not None:
            multipliers[1] = lam2
        trace.append(value)
        if callback is not None:
            callback(n_iter, gamma, theta, alpha, beta, value)
        if value <= OBJECTIVE_FLOOR or abs(current - value) <= config.tol * current:
            current = value
            break
        current = value

    if current > OBJECTIVE_FLOOR:
        polished_gamma, polished_theta, value, steps = _joint_polish(gamma, theta, current, st, W, constraints, config)
        if value < current:
            gamma, theta, current = polished_gamma, polished_theta, value
            trace.append(value)
            logger.debug("Restart %d: joint polish took %d steps to %.6g", restart_index, steps, value)
        n_iter += steps

    try:
        alpha, beta = least_squares_coefficients(gamma, theta, st, W)
    except CollinearCovariatesError:
        logger.debug("Restart %d: joint (alpha, beta) polish skipped, design singular", restart_index)

    gamma = sign_normalize(gamma)
    theta = sign_normalize(theta)
    final = objective(gamma, theta, alpha, beta, st, W)
    trace.append(final)
    gradient_norms = projected_gradient_norms(gamma, theta, alpha, beta, st, W, constraints)
    converged = final <= OBJECTIVE_FLOOR or max(gradient_norms) <= config.grad_tol
    if not converged:
        logger.debug("Restart %d: stopped with projected gradient norms (%.3g, %.3g)", restart_index, *gradient_norms)
    return ComponentFit(
        gamma=gamma,
        theta=theta,
        alpha=alpha,
        beta=beta,
        objective=final,
        n_iter=n_iter,
        converged=converged,
        restart_index=restart_index,
        trace=np.array(trace),
        multipliers=(float(multipliers[0]), float(multipliers[1])),
    )


def _run_start(index, gamma0, theta0, st, W, constraints, config, callback=None):
    try:
        return coordinate_descent(gamma0, theta0, st, W, constraints, config, restart_index=index, callback=callback)
    except CocregException as e:
        logger.debug("Restart %d failed: %s", index, e.detail)
        return (index, e.detail)


def fit_component(
    pairs: Pairs,
    covariates,
    config: Optional[SolverConfig] = None,
    constraints: Optional[ConstraintMatrices] = None,
    callback: Optional[IterationCallback] = None,
) -> ComponentFit:
    """
    Fit one component from every start and keep the minimum-objective fit
    (ties go to the lowest restart index).
    """
    config = config or SolverConfig()
    st = stack_pairs(pairs)
    W = check_covariates(covariates, st.n)
    if st.n < W.shape[1] + 1:
        raise InputValidationError(f"Need n >= r + 1 subjects to identify beta, got n={st.n}, r={W.shape[1]}")
    if constraints is None:
        constraints = constraints_for(st, config.constraint_mode)

    starts = initial_projections(st, constraints, config)
    if config.n_jobs == 1 or callback is not None:
        results = [_run_start(i, g, t, st, W, constraints, config, callback) for i, g, t in starts]
    else:
        results = Parallel(n_jobs=config.n_jobs)(
            delayed(_run_start)(i, g, t, st, W, constraints, config) for i, g, t in starts
        )

    fits = [r for r in results if isinstance(r, ComponentFit)]
    if not fits:
        raise FitFailureError("All restarts failed", diagnostics=results)
    best = min(fits, key=lambda f: (f.objective, f.restart_index))
    logger.debug(
        "Best of %d starts: restart %d, objective %.6g, %d iterations", len(starts), best.restart_index, best.objective, best.n_iter
    )
    return best
