"""
Dataset directories and report files.

A dataset is a directory with a manifest.json listing subject directories in
canonical order; each subject directory holds X.csv (u_i x p), Y.csv (v_i x q)
and w.csv (one row of r values, intercept first), all without headers.
"""
import json
import logging
import sys
from pathlib import Path
from typing import Any, List, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from errors import InputValidationError
from models import Cohort, FitSequence, Manifest, SubjectDataset

logger = logging.getLogger("cocreg.storage")

MANIFEST = "manifest.json"
SUBJECT_FILES = ("X.csv", "Y.csv", "w.csv")
MATRIX_FORMAT = "%.17g"

PathLike = Union[str, Path]


# Console status lines (standard error keeps stdout clean for piping)
def print_ok(message: str) -> None:
    print(f"\033[92m✓ {message}\033[0m", file=sys.stderr)


def print_warning(message: str) -> None:
    print(f"\033[93m! {message}\033[0m", file=sys.stderr)


def print_error(message: str) -> None:
    print(f"\033[91m✗ {message}\033[0m", file=sys.stderr)


def read_manifest(data_dir: PathLike) -> List[str]:
    path = Path(data_dir) / MANIFEST
    if not path.is_file():
        raise InputValidationError(f"Missing {MANIFEST} in {data_dir}")
    try:
        return Manifest.model_validate_json(path.read_text()).subjects
    except ValidationError as e:
        raise InputValidationError(f"Invalid {MANIFEST}, expected subject directories under 'subjects': {e}")


def read_matrix(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise InputValidationError(f"Missing file {path}")
    try:
        return np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as e:
        raise InputValidationError(f"Malformed CSV {path}: {e}")


def write_matrix(path: PathLike, matrix) -> None:
    np.savetxt(path, np.atleast_2d(matrix), delimiter=",", fmt=MATRIX_FORMAT)


def load_subject(data_dir: PathLike, name: str) -> SubjectDataset:
    subject_dir = Path(data_dir) / name
    X, Y, w = (read_matrix(subject_dir / f) for f in SUBJECT_FILES)
    if w.shape[0] != 1:
        raise InputValidationError(f"Subject {name}: w.csv must hold a single row")
    try:
        return SubjectDataset(subject_id=name, X=X, Y=Y, w=w[0])
    except ValidationError as e:
        raise InputValidationError(f"Subject {name}: {e}")


def load_cohort(data_dir: PathLike) -> Cohort:
    subjects = [load_subject(data_dir, name) for name in read_manifest(data_dir)]
    try:
        cohort = Cohort(subjects=subjects)
    except ValidationError as e:
        raise InputValidationError(f"Invalid cohort in {data_dir}: {e}")
    logger.info("Loaded %d subjects (p=%d, q=%d, r=%d) from %s", cohort.n, cohort.p, cohort.q, cohort.r, data_dir)
    return cohort


def write_cohort(cohort: Cohort, out_dir: PathLike) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for s in cohort.subjects:
        subject_dir = out_dir / s.subject_id
        subject_dir.mkdir(exist_ok=True)
        write_matrix(subject_dir / "X.csv", s.X)
        write_matrix(subject_dir / "Y.csv", s.Y)
        write_matrix(subject_dir / "w.csv", s.w[None, :])
    write_json(out_dir / MANIFEST, Manifest(subjects=cohort.subject_ids))
    return out_dir


def _column_count(path: Path) -> int:
    with path.open() as f:
        first = f.readline().strip()
    if not first:
        raise InputValidationError(f"{path} is empty")
    return len(first.split(","))


def check_dataset(data_dir: PathLike) -> bool:
    """
    Check the dataset layout and column counts from each file's first line
    without loading the data
    """
    try:
        subjects = read_manifest(data_dir)
        if len(subjects) < 2:
            raise InputValidationError("A cohort needs at least 2 subjects")
        shapes = set()
        for name in subjects:
            subject_dir = Path(data_dir) / name
            for f in SUBJECT_FILES:
                if not (subject_dir / f).is_file():
                    raise InputValidationError(f"Subject {name}: missing {f}")
            shapes.add(tuple(_column_count(subject_dir / f) for f in SUBJECT_FILES))
            w_first = (subject_dir / "w.csv").read_text().split(",")[0].strip()
            if float(w_first) != 1.0:
                raise InputValidationError(f"Subject {name}: first covariate must be the intercept 1")
        if len(shapes) != 1:
            raise InputValidationError("Subjects disagree on (p, q, r)")
    except (InputValidationError, ValueError) as e:
        detail = getattr(e, "detail", str(e))
        print_error(f"Dataset check failed: {detail}")
        logger.debug("Dataset check failed for %s", data_dir, exc_info=True)
        return False
    p, q, r = shapes.pop()
    print_ok(f"Dataset layout valid: {len(subjects)} subjects, p={p}, q={q}, r={r}")
    return True


def write_json(path: PathLike, payload: Any) -> None:
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def write_table(path: PathLike, frame: pd.DataFrame) -> None:
    """Headered CSV; a .gz suffix compresses"""
    frame.to_csv(path, index=False, na_rep="NA", float_format=MATRIX_FORMAT)


def read_table(path: PathLike) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise InputValidationError(f"Missing file {path}")
    return pd.read_csv(path)


def load_fit(path: PathLike) -> FitSequence:
    path = Path(path)
    if not path.is_file():
        raise InputValidationError(f"Missing fit file {path}")
    try:
        return FitSequence.model_validate_json(path.read_text())
    except ValidationError as e:
        raise InputValidationError(f"Invalid fit file {path}: {e}")


