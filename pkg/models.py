from enum import Enum
from typing import Annotated, Dict, Iterator, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, PlainSerializer, field_validator, model_validator

SYMMETRY_TOL = 1e-10
ORTHONORMAL_TOL = 1e-10


def _to_array(value) -> np.ndarray:
    # Always copy so the stored array cannot alias caller memory
    arr = np.array(value, dtype=float)
    arr.setflags(write=False)
    return arr


FloatArray = Annotated[
    np.ndarray,
    BeforeValidator(_to_array),
    PlainSerializer(lambda a: a.tolist(), return_type=list),
]


class ArrayModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)


def _is_orthonormal(M: np.ndarray, tol: float) -> bool:
    k = M.shape[1]
    return bool(np.max(np.abs(M.T @ M - np.eye(k)), initial=0.0) <= tol)


class ConstraintMode(str, Enum):
    IDENTITY = "identity"
    POOLED = "pooled"


# Dataset layout
class Manifest(BaseModel):
    """Subject directories in canonical order; a bare JSON list is accepted too"""
    model_config = ConfigDict(extra="forbid")

    subjects: List[Annotated[str, Field(min_length=1)]]

    @model_validator(mode="before")
    @classmethod
    def wrap_list(cls, data):
        return {"subjects": data} if isinstance(data, list) else data

    @field_validator("subjects")
    @classmethod
    def validate_unique(cls, v):
        if len(set(v)) != len(v):
            raise ValueError("a subject is listed more than once")
        return v


# Observed data
class SubjectDataset(ArrayModel):
    subject_id: str = Field(..., min_length=1, description="Subject identifier")
    X: FloatArray = Field(..., description="Predictor observations (u_i x p)")
    Y: FloatArray = Field(..., description="Outcome observations (v_i x q)")
    w: FloatArray = Field(..., description="Covariates (length r), intercept first")

    @field_validator("X", "Y")
    @classmethod
    def validate_block(cls, v):
        if v.ndim != 2:
            raise ValueError("Observation block must be a 2-D matrix")
        if v.shape[0] < 2:
            raise ValueError("Observation block needs at least 2 rows")
        if v.shape[1] < 1:
            raise ValueError("Observation block needs at least 1 column")
        if not np.all(np.isfinite(v)):
            raise ValueError("Observation block contains non-finite entries")
        return v

    @field_validator("w")
    @classmethod
    def validate_covariates(cls, v):
        if v.ndim != 1 or v.size < 1:
            raise ValueError("Covariates must be a non-empty vector")
        if not np.all(np.isfinite(v)):
            raise ValueError("Covariates contain non-finite entries")
        if v[0] != 1.0:
            raise ValueError("First covariate must be the intercept (1)")
        return v

    @property
    def u(self) -> int:
        return self.X.shape[0]

    @property
    def v(self) -> int:
        return self.Y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Y.shape[1]

    @property
    def r(self) -> int:
        return self.w.size


class Cohort(ArrayModel):
    subjects: List[SubjectDataset] = Field(..., min_length=2, description="Subjects in canonical order")

    @model_validator(mode="after")
    def validate_shared_dimensions(self):
        first = self.subjects[0]
        for s in self.subjects[1:]:
            if (s.p, s.q, s.r) != (first.p, first.q, first.r):
                raise ValueError(
                    f"Subject {s.subject_id} has dimensions (p,q,r)=({s.p},{s.q},{s.r}), "
                    f"expected ({first.p},{first.q},{first.r})"
                )
        ids = [s.subject_id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise ValueError("Subject identifiers must be unique")
        return self

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def p(self) -> int:
        return self.subjects[0].p

    @property
    def q(self) -> int:
        return self.subjects[0].q

    @property
    def r(self) -> int:
        return self.subjects[0].r

    @property
    def covariates(self) -> np.ndarray:
        return np.vstack([s.w for s in self.subjects])

    @property
    def subject_ids(self) -> List[str]:
        return [s.subject_id for s in self.subjects]


# Estimated covariances
class CovariancePair(ArrayModel):
    sigma_hat: FloatArray = Field(..., description="Outcome covariance (q x q)")
    delta_hat: FloatArray = Field(..., description="Predictor covariance (p x p)")
    v_i: int = Field(..., ge=1, description="Outcome observation count")
    u_i: int = Field(..., ge=1, description="Predictor observation count")
    subject_id: str = Field("", description="Owning subject, used in error messages")

    @field_validator("sigma_hat", "delta_hat")
    @classmethod
    def validate_spd(cls, v):
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("Covariance must be a square matrix")
        if not np.all(np.isfinite(v)):
            raise ValueError("Covariance contains non-finite entries")
        if np.max(np.abs(v - v.T), initial=0.0) > SYMMETRY_TOL:
            raise ValueError("Covariance must be symmetric")
        if np.linalg.eigvalsh(v)[0] <= 0:
            raise ValueError("Covariance must be positive definite")
        return v


class ConstraintMatrices(ArrayModel):
    H_y: FloatArray = Field(..., description="Outcome normalization metric (q x q)")
    H_x: FloatArray = Field(..., description="Predictor normalization metric (p x p)")
    mode: ConstraintMode = Field(ConstraintMode.IDENTITY)

    @field_validator("H_y", "H_x")
    @classmethod
    def validate_spd(cls, v):
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("Constraint matrix must be square")
        try:
            np.linalg.cholesky(v)
        except np.linalg.LinAlgError:
            raise ValueError("Constraint matrix must be positive definite")
        return v

    @model_validator(mode="after")
    def validate_identity_mode(self):
        if self.mode == ConstraintMode.IDENTITY:
            if not (np.array_equal(self.H_y, np.eye(len(self.H_y))) and np.array_equal(self.H_x, np.eye(len(self.H_x)))):
                raise ValueError("Identity mode requires identity constraint matrices")
        return self


# Solver
class SolverConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    tol: float = Field(1e-8, gt=0, description="Relative objective-change threshold")
    max_iter: int = Field(500, ge=1, description="Maximum coordinate-descent cycles per start")
    n_restarts: int = Field(20, ge=1, description="Random initializations in addition to eigen starts")
    seed: int = Field(0, ge=0, lt=2**64, description="Unsigned 64-bit seed")
    constraint_mode: ConstraintMode = Field(ConstraintMode.IDENTITY)
    eigen_init: bool = Field(True, description="Also start from pooled-covariance eigenvector pairs")
    eigen_starts: int = Field(10, ge=1, description="Leading pooled eigenvectors per block paired as starts")
    grad_tol: float = Field(1e-6, gt=0, description="Projected-gradient norm at which a start counts as converged")
    n_jobs: int = Field(1, description="joblib workers for independent restarts")

    @field_validator("n_jobs")
    @classmethod
    def validate_n_jobs(cls, v):
        if v == 0:
            raise ValueError("n_jobs cannot be 0")
        return v


class ComponentFit(ArrayModel):
    gamma: FloatArray = Field(..., description="Outcome projection (length q)")
    theta: FloatArray = Field(..., description="Predictor projection (length p)")
    alpha: float
    beta: FloatArray = Field(..., description="Covariate coefficients (length r)")
    objective: float = Field(..., ge=0)
    n_iter: int = Field(..., ge=0)
    converged: bool
    restart_index: int = Field(..., ge=0)
    # Not serialized
    trace: FloatArray = Field(default_factory=lambda: np.zeros(0), exclude=True)
    multipliers: Optional[Tuple[float, float]] = Field(None, exclude=True)

    def to_json_dict(self) -> dict:
        return self.model_dump(mode="json")


class EigenSolveResult(ArrayModel):
    eigenvalues: FloatArray = Field(..., description="Descending eigenvalues")
    eigenvectors: FloatArray = Field(..., description="H-orthonormal eigenvectors as columns")
    residuals: FloatArray = Field(..., description="||A v - lambda H v|| per pair")

    def pairs(self) -> Iterator[Tuple[float, np.ndarray]]:
        for j, lam in enumerate(self.eigenvalues):
            yield float(lam), self.eigenvectors[:, j]


# Components
class FitSequence(ArrayModel):
    components: List[ComponentFit] = Field(default_factory=list)
    dfd_trace: List[Tuple[int, float]] = Field(default_factory=list)
    selected_k: int = Field(0, ge=0)
    threshold: float = Field(2.0, gt=0)
    constraint_mode: ConstraintMode = Field(ConstraintMode.IDENTITY)
    status: str = Field("complete", description="complete, or truncated when deflation stopped early")

    @model_validator(mode="after")
    def validate_trace(self):
        if len(self.dfd_trace) != len(self.components):
            raise ValueError("dfd_trace must have one entry per component")
        if [k for k, _ in self.dfd_trace] != list(range(1, len(self.components) + 1)):
            raise ValueError("dfd_trace must be indexed 1..k")
        if self.selected_k > len(self.components):
            raise ValueError("selected_k exceeds number of components")
        return self

    @property
    def gamma_basis(self) -> np.ndarray:
        return np.column_stack([c.gamma for c in self.components])

    @property
    def theta_basis(self) -> np.ndarray:
        return np.column_stack([c.theta for c in self.components])


# Inference
class BootstrapResult(ArrayModel):
    B: int = Field(..., ge=1)
    draws: FloatArray = Field(..., description="B x (1+r) replicates of (alpha, beta)")
    level: float = Field(..., gt=0, lt=1)
    intervals: List[Tuple[float, float]]
    estimate: FloatArray = Field(..., description="Point estimate (alpha, beta)")
    n_failed: int = Field(0, ge=0)

    @field_validator("intervals")
    @classmethod
    def validate_intervals(cls, v):
        for lower, upper in v:
            if lower > upper:
                raise ValueError("Interval lower bound exceeds upper bound")
        return v


class AsymptoticCovariance(ArrayModel):
    G_x: float
    Q_w: FloatArray
    H_xw: FloatArray
    M_n: int = Field(..., ge=1)
    cov: FloatArray

    @property
    def block(self) -> np.ndarray:
        return np.block([[np.array([[self.G_x]]), self.H_xw[None, :]], [self.H_xw[:, None], self.Q_w]])

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))


# Simulation
class NoiseKind(str, Enum):
    GAUSSIAN = "gaussian"
    MVT = "mvt"
    MATRIX_GAMMA = "matrix_gamma"


class NoiseFamily(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: NoiseKind = NoiseKind.GAUSSIAN
    df: Optional[float] = Field(None, description="Degrees of freedom for mvt")
    shape: Optional[float] = Field(None, gt=0, description="Gamma shape for matrix_gamma")

    @model_validator(mode="after")
    def validate_parameters(self):
        if self.kind == NoiseKind.MVT and (self.df is None or self.df <= 2):
            raise ValueError("mvt noise needs df > 2 for a finite covariance")
        if self.kind == NoiseKind.MATRIX_GAMMA and self.shape is None:
            raise ValueError("matrix_gamma noise needs a shape parameter")
        return self


class EigenScenario(str, Enum):
    FULL_COMMON = "full_common"
    PARTIAL_COMMON = "partial_common"


class PlantedComponent(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    y_index: int = Field(..., ge=0, description="Column of Pi (0-based)")
    x_index: int = Field(..., ge=0, description="Column of Upsilon (0-based)")
    alpha: float
    beta: List[float]


class SimScenario(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = Field("custom", min_length=1)
    p: int = Field(..., ge=1)
    q: int = Field(..., ge=1)
    r: int = Field(2, ge=1)
    n: int = Field(..., ge=2)
    u: int = Field(..., ge=2)
    v: int = Field(..., ge=2)
    scenario: EigenScenario = EigenScenario.FULL_COMMON
    common_count_y: Optional[int] = Field(None, ge=0)
    common_count_x: Optional[int] = Field(None, ge=0)
    planted: List[PlantedComponent] = Field(..., min_length=1)
    log_mean_start: float = 1.0
    log_mean_end: float = -2.0
    log_sd: float = Field(0.1, ge=0)
    covariate_prob: float = Field(0.5, ge=0, le=1)
    noise: NoiseFamily = Field(default_factory=NoiseFamily)
    seed: int = Field(0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def validate_dimensions(self):
        if self.u <= self.p or self.v <= self.q:
            raise ValueError("Need u > p and v > q for positive-definite sample covariances")
        ys = [c.y_index for c in self.planted]
        xs = [c.x_index for c in self.planted]
        if max(ys) >= self.q or max(xs) >= self.p:
            raise ValueError("Planted index outside the eigenvector range")
        if len(set(ys)) != len(ys) or len(set(xs)) != len(xs):
            raise ValueError("Planted components must use distinct eigenvectors")
        for c in self.planted:
            if len(c.beta) != self.r:
                raise ValueError(f"Planted beta must have length r={self.r}")
        if self.scenario == EigenScenario.PARTIAL_COMMON:
            if self.common_count_y is None or self.common_count_x is None:
                raise ValueError("partial_common needs common_count_y and common_count_x")
        if (self.common_count_y or 0) > self.q or (self.common_count_x or 0) > self.p:
            raise ValueError("Common eigenvector count exceeds dimension")
        return self

    @property
    def shared_y(self) -> int:
        if self.scenario == EigenScenario.FULL_COMMON:
            return self.q
        return self.common_count_y

    @property
    def shared_x(self) -> int:
        if self.scenario == EigenScenario.FULL_COMMON:
            return self.p
        return self.common_count_x


class EigenSystemSpec(ArrayModel):
    Pi: FloatArray = Field(..., description="Outcome eigenvectors (q x q)")
    Upsilon: FloatArray = Field(..., description="Predictor eigenvectors (p x p)")
    common_count_y: int = Field(..., ge=0)
    common_count_x: int = Field(..., ge=0)

    @field_validator("Pi", "Upsilon")
    @classmethod
    def validate_orthonormal(cls, v):
        if v.ndim != 2 or v.shape[0] != v.shape[1] or not _is_orthonormal(v, ORTHONORMAL_TOL):
            raise ValueError("Eigenvector matrix must be square orthonormal")
        return v


class PlantedTruth(ArrayModel):
    gamma: FloatArray
    theta: FloatArray
    alpha: float
    beta: FloatArray
    y_index: int
    x_index: int
    gamma_applicable: bool = True
    theta_applicable: bool = True


class GroundTruth(ArrayModel):
    components: List[PlantedTruth]
    noise: NoiseFamily


class MonteCarloConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    solver: SolverConfig = Field(default_factory=SolverConfig)
    n_components: Optional[int] = Field(None, ge=1, description="Components to fit; defaults to planted count")
    threshold: float = Field(2.0, gt=0)
    bootstrap_B: int = Field(0, ge=0, description="Bootstrap replicates per dataset; 0 disables coverage")
    level: float = Field(0.95, gt=0, lt=1)
    baseline: bool = False
    variance_fraction: float = Field(0.85, gt=0, lt=1)
    streaming: bool = Field(False, description="Reduce each subject to its covariance pair as it is generated")
    n_jobs: int = Field(1, description="joblib workers across replicates")


class MetricRow(BaseModel):
    method: str
    component: str
    coefficient: str
    truth: float
    sim_gamma: Optional[float] = None
    sim_gamma_se: Optional[float] = None
    sim_theta: Optional[float] = None
    sim_theta_se: Optional[float] = None
    mean_estimate: Optional[float] = None
    bias: Optional[float] = None
    se: Optional[float] = None
    mse: Optional[float] = None
    cp: Optional[float] = None
    n_scored: int = 0


class MonteCarloReport(BaseModel):
    scenario: SimScenario
    replicates: int
    n_failed: int
    rows: List[MetricRow]
    selection_counts: Dict[int, int] = Field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([row.model_dump() for row in self.rows])
        frame.insert(0, "scenario", self.scenario.name)
        frame.insert(1, "n", self.scenario.n)
        frame.insert(2, "u", self.scenario.u)
        frame.insert(3, "v", self.scenario.v)
        return frame


# Baseline
class CommonComponents(ArrayModel):
    eigenvectors: FloatArray = Field(..., description="Common eigenvectors as columns")
    pooled_eigenvalues: FloatArray = Field(..., description="Descending pooled eigenvalues")
    subject_eigenvalues: FloatArray = Field(..., description="n x d, diag(V' S_i V)")

    @field_validator("eigenvectors")
    @classmethod
    def validate_orthonormal(cls, v):
        if not _is_orthonormal(v, 1e-8):
            raise ValueError("Common eigenvectors must be orthonormal")
        return v


class PairRegression(BaseModel):
    x_index: int
    y_index: int
    alpha: Optional[float] = None
    beta: Optional[List[float]] = None
    r_squared: Optional[float] = None
    failed: bool = False


class CpcaModel(ArrayModel):
    method: str = "cpca-reg"
    x_components: CommonComponents
    y_components: CommonComponents
    x_selected: List[int] = Field(..., min_length=1)
    y_selected: List[int] = Field(..., min_length=1)
    regressions: List[PairRegression]
