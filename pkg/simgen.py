"""
Simulated cohorts with a planted covariance-regression structure, and the
Monte-Carlo harness that scores fitted components against the truth.

Every random draw comes from a Generator seeded with a tuple built from the
run seed and fixed stream tags, so results do not depend on worker count.
"""
import logging
from collections import Counter
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from scipy import linalg, stats
from scipy.optimize import linear_sum_assignment

from baseline import fit_cpca_reg, match_truth
from components import fit_sequence, fit_sequence_covariances
from covariance import estimate_covariances, estimate_pair
from errors import CocregException, InputValidationError, NotPositiveDefiniteError, ReplicateFailureError
from inference import bootstrap_pairs
from models import (
    ArrayModel,
    Cohort,
    CovariancePair,
    EigenScenario,
    EigenSystemSpec,
    GroundTruth,
    MetricRow,
    MonteCarloConfig,
    MonteCarloReport,
    NoiseFamily,
    NoiseKind,
    PlantedComponent,
    PlantedTruth,
    SimScenario,
    SubjectDataset,
)
from solver import similarity

logger = logging.getLogger("cocreg.simgen")

Seed = Union[int, Sequence[int], np.random.Generator]
RunSeed = Union[int, Sequence[int]]

MIN_REPLICATES = 2
MAX_FAILURE_SHARE = 0.2

# Stream tags
_PI, _UPSILON, _COVARIATES, _SUBJECT = 0, 1, 2, 3


def _seed_parts(seed) -> List[int]:
    return [int(s) for s in np.atleast_1d(seed)]


def _stream(seed, tag: int, *more: int) -> np.random.Generator:
    return np.random.default_rng(_seed_parts(seed) + [tag, *more])


def _sign_fixed_qr(G: np.ndarray) -> np.ndarray:
    Q, R = np.linalg.qr(G)
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return Q * signs


def random_orthonormal(dim: int, seed: Seed = None) -> np.ndarray:
    """Haar-distributed orthogonal matrix"""
    if dim < 1:
        raise InputValidationError("random_orthonormal needs dim >= 1")
    rng = np.random.default_rng(seed)
    return _sign_fixed_qr(rng.standard_normal((dim, dim)))


def log_mean_grid(dim: int, start: float = 1.0, end: float = -2.0) -> np.ndarray:
    return np.linspace(start, end, dim)


def eigen_system(scenario: SimScenario, seed: Optional[RunSeed] = None) -> EigenSystemSpec:
    seed = scenario.seed if seed is None else seed
    return EigenSystemSpec(
        Pi=random_orthonormal(scenario.q, _stream(seed, _PI)),
        Upsilon=random_orthonormal(scenario.p, _stream(seed, _UPSILON)),
        common_count_y=scenario.shared_y,
        common_count_x=scenario.shared_x,
    )


def draw_covariates(scenario: SimScenario, seed: Seed = None) -> np.ndarray:
    """Intercept column followed by Bernoulli(covariate_prob) indicators"""
    rng = np.random.default_rng(seed)
    W = np.ones((scenario.n, scenario.r))
    W[:, 1:] = rng.random((scenario.n, scenario.r - 1)) < scenario.covariate_prob
    return W


def planted_outcome_eigenvalue(alpha: float, beta, w, omega: float) -> float:
    return float(np.exp(alpha * np.log(omega) + np.asarray(w, dtype=float) @ np.asarray(beta, dtype=float)))


def plant_eigenvalues(scenario: SimScenario, w, seed: Seed = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Log-normal eigenvalues decaying over the index order; each planted outcome
    eigenvalue is then set so the subject satisfies the model exactly.
    Returns (lambda, omega), outcome and predictor eigenvalues.
    """
    rng = np.random.default_rng(seed)
    start, end, sd = scenario.log_mean_start, scenario.log_mean_end, scenario.log_sd
    omega = np.exp(rng.normal(log_mean_grid(scenario.p, start, end), sd))
    lam = np.exp(rng.normal(log_mean_grid(scenario.q, start, end), sd))
    for c in scenario.planted:
        lam[c.y_index] = planted_outcome_eigenvalue(c.alpha, c.beta, w, omega[c.x_index])
    return lam, omega


def subject_basis(shared: np.ndarray, common_count: int, seed: Seed = None) -> np.ndarray:
    """Keep the leading common columns, complete with a random orthonormal complement"""
    dim = shared.shape[0]
    if common_count >= dim:
        return shared
    rng = np.random.default_rng(seed)
    head = shared[:, :common_count]
    G = rng.standard_normal((dim, dim - common_count))
    G -= head @ (head.T @ G)
    tail = _sign_fixed_qr(G)
    # Second pass against the head for round-off
    tail -= head @ (head.T @ tail)
    tail = _sign_fixed_qr(tail)
    return np.column_stack([head, tail])


def build_covariances(spec: EigenSystemSpec, lam, omega, seed: Seed = None) -> Tuple[np.ndarray, np.ndarray]:
    """One subject's (Sigma, Delta) from its eigenvalues"""
    rng = np.random.default_rng(seed)
    Pi = subject_basis(spec.Pi, spec.common_count_y, rng)
    Upsilon = subject_basis(spec.Upsilon, spec.common_count_x, rng)
    Sigma = (Pi * np.asarray(lam)) @ Pi.T
    Delta = (Upsilon * np.asarray(omega)) @ Upsilon.T
    return (Sigma + Sigma.T) / 2, (Delta + Delta.T) / 2


def _factor(cov) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    try:
        return linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError:
        # PSD covariances (e.g. rank-deficient) sample through their eigen factor
        vals, vecs = linalg.eigh(cov)
        if vals.min() < -1e-10 * max(vals.max(), 1.0):
            raise NotPositiveDefiniteError("Sampling covariance is not positive semi-definite")
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def sample_gaussian(cov, rows: int, seed: Seed = None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    L = _factor(cov)
    return rng.standard_normal((rows, L.shape[0])) @ L.T


def sample_mvt(cov, df: float, rows: int, seed: Seed = None) -> np.ndarray:
    """Multivariate t rescaled so the output covariance equals cov"""
    if df <= 2:
        raise InputValidationError("Multivariate t needs df > 2 for a finite covariance")
    rng = np.random.default_rng(seed)
    L = _factor(np.asarray(cov, dtype=float) * (df - 2) / df)
    Z = rng.standard_normal((rows, L.shape[0])) @ L.T
    chi = rng.chisquare(df, size=rows)
    return Z / np.sqrt(chi / df)[:, None]


def sample_matrix_gamma(cov, shape: float, rows: int, seed: Seed = None) -> np.ndarray:
    """
    Gamma margins with variance cov_jj, coupled through a Gaussian copula with
    the correlation matrix of cov, then centered.
    """
    if shape <= 0:
        raise InputValidationError("Gamma shape must be positive")
    cov = np.asarray(cov, dtype=float)
    sd = np.sqrt(np.diag(cov))
    Z = sample_gaussian(cov / np.outer(sd, sd), rows, seed)
    X = stats.gamma.isf(stats.norm.sf(Z), a=shape, scale=sd / np.sqrt(shape))
    return X - X.mean(axis=0)


def sample_noise(noise: NoiseFamily, cov, rows: int, seed: Seed = None) -> np.ndarray:
    if noise.kind == NoiseKind.MVT:
        return sample_mvt(cov, noise.df, rows, seed)
    if noise.kind == NoiseKind.MATRIX_GAMMA:
        return sample_matrix_gamma(cov, noise.shape, rows, seed)
    return sample_gaussian(cov, rows, seed)


def ground_truth(scenario: SimScenario, spec: EigenSystemSpec) -> GroundTruth:
    return GroundTruth(
        components=[
            PlantedTruth(
                gamma=spec.Pi[:, c.y_index],
                theta=spec.Upsilon[:, c.x_index],
                alpha=c.alpha,
                beta=np.asarray(c.beta, dtype=float),
                y_index=c.y_index,
                x_index=c.x_index,
                gamma_applicable=c.y_index < spec.common_count_y,
                theta_applicable=c.x_index < spec.common_count_x,
            )
            for c in scenario.planted
        ],
        noise=scenario.noise,
    )


def _subject_matrices(scenario, spec, w, rng) -> Tuple[np.ndarray, np.ndarray]:
    lam, omega = plant_eigenvalues(scenario, w, rng)
    return build_covariances(spec, lam, omega, rng)


def _subject_id(index: int) -> str:
    return f"sub-{index + 1:04d}"


def _subjects(scenario: SimScenario, seed: RunSeed) -> Iterator[SubjectDataset]:
    spec = eigen_system(scenario, seed)
    W = draw_covariates(scenario, _stream(seed, _COVARIATES))
    for i in range(scenario.n):
        rng = _stream(seed, _SUBJECT, i)
        Sigma, Delta = _subject_matrices(scenario, spec, W[i], rng)
        X = sample_noise(scenario.noise, Delta, scenario.u, rng)
        Y = sample_noise(scenario.noise, Sigma, scenario.v, rng)
        yield SubjectDataset(subject_id=_subject_id(i), X=X, Y=Y, w=W[i])


def generate_cohort(scenario: SimScenario, seed: Optional[RunSeed] = None) -> Tuple[Cohort, GroundTruth]:
    seed = scenario.seed if seed is None else seed
    cohort = Cohort(subjects=list(_subjects(scenario, seed)))
    return cohort, ground_truth(scenario, eigen_system(scenario, seed))


def generate_pairs(scenario: SimScenario, seed: Optional[RunSeed] = None) -> Tuple[List[CovariancePair], np.ndarray, GroundTruth]:
    """
    Same draws as generate_cohort, but each subject is reduced to its
    covariance pair as soon as it is generated.
    """
    seed = scenario.seed if seed is None else seed
    pairs = [estimate_pair(subject) for subject in _subjects(scenario, seed)]
    W = draw_covariates(scenario, _stream(seed, _COVARIATES))
    return pairs, W, ground_truth(scenario, eigen_system(scenario, seed))


def population_pairs(scenario: SimScenario, seed: Optional[RunSeed] = None) -> Tuple[List[CovariancePair], np.ndarray, GroundTruth]:
    """The generating covariances themselves, without sampling noise"""
    seed = scenario.seed if seed is None else seed
    spec = eigen_system(scenario, seed)
    W = draw_covariates(scenario, _stream(seed, _COVARIATES))
    pairs = []
    for i in range(scenario.n):
        Sigma, Delta = _subject_matrices(scenario, spec, W[i], _stream(seed, _SUBJECT, i))
        pairs.append(
            CovariancePair(sigma_hat=Sigma, delta_hat=Delta, v_i=scenario.v, u_i=scenario.u, subject_id=_subject_id(i))
        )
    return pairs, W, ground_truth(scenario, spec)


# PRESETS
_C1 = PlantedComponent(y_index=1, x_index=0, alpha=3.0, beta=[1.0, -1.0])
_C2 = PlantedComponent(y_index=3, x_index=2, alpha=2.0, beta=[-1.0, 1.0])

PRESETS: Dict[str, SimScenario] = {
    "sim-i-small": SimScenario(name="sim-i-small", p=10, q=5, n=100, u=100, v=100, planted=[_C1, _C2]),
    "sim-i-large": SimScenario(name="sim-i-large", p=100, q=100, n=500, u=500, v=500, planted=[_C1]),
    "sim-ii": SimScenario(
        name="sim-ii",
        p=10,
        q=5,
        n=100,
        u=100,
        v=100,
        scenario=EigenScenario.PARTIAL_COMMON,
        common_count_y=3,
        common_count_x=5,
        planted=[_C1, _C2],
    ),
    "mvt": SimScenario(
        name="mvt", p=10, q=5, n=100, u=100, v=100, planted=[_C1, _C2], noise=NoiseFamily(kind=NoiseKind.MVT, df=3)
    ),
    "matrix-gamma": SimScenario(
        name="matrix-gamma",
        p=10,
        q=5,
        n=100,
        u=100,
        v=100,
        planted=[_C1, _C2],
        noise=NoiseFamily(kind=NoiseKind.MATRIX_GAMMA, shape=1.0),
    ),
}
LONG_PRESETS = {"sim-i-large"}


def get_preset(name: str, long: bool = False) -> SimScenario:
    if name not in PRESETS:
        raise InputValidationError(f"Unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
    if name in LONG_PRESETS and not long:
        raise InputValidationError(f"Preset {name!r} is long-running; pass --long to run it")
    return PRESETS[name]


# MONTE CARLO
class _Score(ArrayModel):
    """One method's result for one planted component in one replicate"""

    method: str
    component: int
    sim_gamma: Optional[float]
    sim_theta: float
    estimate: np.ndarray
    covered: Optional[np.ndarray] = None


def replicate_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0])


def _match_components(fits, truth: GroundTruth) -> List[Tuple[int, int]]:
    """One-to-one (truth index, fit index) by maximal theta-similarity"""
    scores = np.array([[similarity(f.theta, c.theta) for f in fits] for c in truth.components])
    rows, cols = linear_sum_assignment(scores, maximize=True)
    return list(zip(rows.tolist(), cols.tolist()))


def _coverage(pairs, W, fit, c: PlantedTruth, config: MonteCarloConfig, seed: int) -> Optional[np.ndarray]:
    try:
        result = bootstrap_pairs(pairs, W, fit, B=config.bootstrap_B, level=config.level, seed=seed)
    except ReplicateFailureError as e:
        logger.debug("Coverage skipped: %s", e.detail)
        return None
    truth = np.concatenate([[c.alpha], c.beta])
    return np.array([lo <= t <= hi for t, (lo, hi) in zip(truth, result.intervals)])


def _run_replicate(index: int, scenario: SimScenario, config: MonteCarloConfig, seed: int):
    rep_seed = replicate_seed(seed, index)
    solver = config.solver.model_copy(update={"seed": rep_seed})
    k = min(config.n_components or len(scenario.planted), scenario.p, scenario.q)
    try:
        if config.streaming:
            pairs, W, truth = generate_pairs(scenario, rep_seed)
            sequence = fit_sequence_covariances(pairs, W, solver, max_k=k, threshold=config.threshold)
        else:
            cohort, truth = generate_cohort(scenario, rep_seed)
            pairs = estimate_covariances(cohort)
            W = cohort.covariates
            sequence = fit_sequence(cohort, solver, max_k=k, threshold=config.threshold, pairs=pairs)
    except CocregException as e:
        logger.warning("Replicate %d failed: %s", index, e.detail)
        return None

    scores: List[_Score] = []
    for i, j in _match_components(sequence.components, truth):
        c, fit = truth.components[i], sequence.components[j]
        scores.append(
            _Score(
                method="cocreg",
                component=i,
                sim_gamma=similarity(fit.gamma, c.gamma) if c.gamma_applicable else None,
                sim_theta=similarity(fit.theta, c.theta),
                estimate=np.concatenate([[fit.alpha], fit.beta]),
                covered=_coverage(pairs, W, fit, c, config, rep_seed) if config.bootstrap_B else None,
            )
        )

    if config.baseline:
        try:
            model = fit_cpca_reg(pairs, W, fraction=config.variance_fraction)
        except CocregException as e:
            logger.warning("Replicate %d: CPCA-Reg failed: %s", index, e.detail)
        else:
            for i, reg in enumerate(match_truth(model, truth)):
                if reg is None:
                    continue
                c = truth.components[i]
                scores.append(
                    _Score(
                        method="cpca-reg",
                        component=i,
                        sim_gamma=similarity(model.y_components.eigenvectors[:, reg.y_index], c.gamma)
                        if c.gamma_applicable
                        else None,
                        sim_theta=similarity(model.x_components.eigenvectors[:, reg.x_index], c.theta),
                        estimate=np.concatenate([[reg.alpha], reg.beta]),
                    )
                )
    return sequence.selected_k, scores


def _mean_se(values: List[float]) -> Tuple[Optional[float], Optional[float]]:
    if not values:
        return None, None
    se = float(np.std(values, ddof=1)) if len(values) > 1 else None
    return float(np.mean(values)), se


def _aggregate(scenario: SimScenario, methods: List[str], scores: List[_Score]) -> List[MetricRow]:
    rows = []
    for method in methods:
        for i, planted in enumerate(scenario.planted):
            scored = [s for s in scores if s.method == method and s.component == i]
            truth = [planted.alpha, *planted.beta]
            names = ["alpha"] + [f"beta_{j + 1}" for j in range(scenario.r)]
            gammas = [s.sim_gamma for s in scored if s.sim_gamma is not None]
            sim_gamma, sim_gamma_se = _mean_se(gammas)
            sim_theta, sim_theta_se = _mean_se([s.sim_theta for s in scored])
            for col, (name, value) in enumerate(zip(names, truth)):
                estimates = np.array([s.estimate[col] for s in scored])
                covered = [bool(s.covered[col]) for s in scored if s.covered is not None]
                mean_estimate, se = _mean_se(estimates.tolist())
                rows.append(
                    MetricRow(
                        method=method,
                        component=f"C{i + 1}",
                        coefficient=name,
                        truth=value,
                        sim_gamma=sim_gamma,
                        sim_gamma_se=sim_gamma_se,
                        sim_theta=sim_theta,
                        sim_theta_se=sim_theta_se,
                        mean_estimate=mean_estimate,
                        bias=None if mean_estimate is None else mean_estimate - value,
                        se=se,
                        mse=float(np.mean((estimates - value) ** 2)) if estimates.size else None,
                        cp=float(np.mean(covered)) if covered else None,
                        n_scored=len(scored),
                    )
                )
    return rows


def run_monte_carlo(
    scenario: SimScenario,
    config: Optional[MonteCarloConfig] = None,
    replicates: int = 100,
    seed: Optional[int] = None,
) -> MonteCarloReport:
    """
    Generate, fit and score `replicates` cohorts. Replicate failures are
    counted; more than 20% of them is an error.
    """
    config = config or MonteCarloConfig()
    if replicates < MIN_REPLICATES:
        raise InputValidationError(f"Monte-Carlo needs at least {MIN_REPLICATES} replicates")
    seed = scenario.seed if seed is None else seed

    if config.n_jobs == 1:
        results = [_run_replicate(b, scenario, config, seed) for b in range(replicates)]
    else:
        results = Parallel(n_jobs=config.n_jobs)(
            delayed(_run_replicate)(b, scenario, config, seed) for b in range(replicates)
        )

    n_failed = sum(r is None for r in results)
    if n_failed > MAX_FAILURE_SHARE * replicates:
        raise ReplicateFailureError(
            f"{n_failed} of {replicates} Monte-Carlo replicates failed", n_failed=n_failed, n_total=replicates
        )
    done = [r for r in results if r is not None]
    scores = [s for _, rep_scores in done for s in rep_scores]
    methods = ["cocreg"] + (["cpca-reg"] if config.baseline else [])
    logger.info("Scenario %s: %d replicates, %d failed", scenario.name, replicates, n_failed)
    return MonteCarloReport(
        scenario=scenario,
        replicates=replicates,
        n_failed=n_failed,
        rows=_aggregate(scenario, methods, scores),
        selection_counts=dict(sorted(Counter(k for k, _ in done).items())),
    )
