import numpy as np
import pytest

from models import Cohort, CovariancePair, PlantedComponent, SimScenario, SolverConfig, SubjectDataset
from simgen import generate_cohort, population_pairs
from storage import write_cohort


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def fast_config():
    return SolverConfig(n_restarts=4, seed=11, max_iter=300)


@pytest.fixture
def small_scenario():
    """Two planted components in (p, q) = (6, 4), distinct eigenvalue levels"""
    return SimScenario(
        name="small",
        p=6,
        q=4,
        n=40,
        u=80,
        v=80,
        planted=[
            PlantedComponent(y_index=1, x_index=0, alpha=1.5, beta=[0.5, -0.5]),
            PlantedComponent(y_index=3, x_index=2, alpha=1.0, beta=[-0.5, 0.5]),
        ],
        seed=5,
    )


@pytest.fixture
def exact_scenario():
    """One planted component, no eigenvalue noise beyond the log-normal draw"""
    return SimScenario(
        name="exact",
        p=3,
        q=3,
        n=30,
        u=40,
        v=40,
        planted=[PlantedComponent(y_index=0, x_index=0, alpha=2.0, beta=[0.5, -1.0])],
        log_sd=0.3,
        seed=9,
    )


@pytest.fixture
def exact_pairs(exact_scenario):
    return population_pairs(exact_scenario)


@pytest.fixture
def small_cohort(small_scenario):
    cohort, _ = generate_cohort(small_scenario)
    return cohort


@pytest.fixture
def dataset_dir(tmp_path, small_cohort):
    return write_cohort(small_cohort, tmp_path / "cohort")


def make_pairs(sigmas, deltas, v=50, u=50):
    return [
        CovariancePair(sigma_hat=S, delta_hat=D, v_i=v, u_i=u, subject_id=f"s{i}")
        for i, (S, D) in enumerate(zip(sigmas, deltas))
    ]


def make_cohort(rng, n=5, p=3, q=2, u=20, v=20, r=2):
    subjects = []
    for i in range(n):
        w = np.ones(r)
        w[1:] = rng.integers(0, 2, size=r - 1)
        subjects.append(
            SubjectDataset(
                subject_id=f"sub-{i}",
                X=rng.standard_normal((u, p)),
                Y=rng.standard_normal((v, q)),
                w=w,
            )
        )
    return Cohort(subjects=subjects)
