import json

import numpy as np
import pandas as pd
import pytest

from errors import InputValidationError
from models import FitSequence
from storage import check_dataset, load_cohort, load_fit, read_manifest, read_table, write_json, write_table


def test_cohort_files_reload_exactly(dataset_dir, small_cohort):
    loaded = load_cohort(dataset_dir)
    assert loaded.subject_ids == small_cohort.subject_ids
    for a, b in zip(loaded.subjects, small_cohort.subjects):
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.Y, b.Y)
        np.testing.assert_array_equal(a.w, b.w)


def test_manifest_order_is_canonical(dataset_dir, small_cohort):
    reversed_ids = small_cohort.subject_ids[::-1]
    (dataset_dir / "manifest.json").write_text(json.dumps(reversed_ids))
    assert read_manifest(dataset_dir) == reversed_ids
    assert load_cohort(dataset_dir).subject_ids == reversed_ids


def test_missing_manifest(tmp_path):
    with pytest.raises(InputValidationError, match="manifest.json"):
        load_cohort(tmp_path)


def test_duplicate_manifest_entries(dataset_dir):
    (dataset_dir / "manifest.json").write_text(json.dumps({"subjects": ["sub-0001", "sub-0001"]}))
    with pytest.raises(InputValidationError):
        read_manifest(dataset_dir)


@pytest.mark.parametrize(
    "content",
    ['{"subjects": ["sub-0001", ""]}', '{"subject": ["sub-0001"]}', '{"subjects": "sub-0001"}', "not json"],
)
def test_malformed_manifest(dataset_dir, content):
    (dataset_dir / "manifest.json").write_text(content)
    with pytest.raises(InputValidationError, match="manifest.json"):
        read_manifest(dataset_dir)


def test_missing_subject_file(dataset_dir):
    (dataset_dir / "sub-0002" / "Y.csv").unlink()
    with pytest.raises(InputValidationError, match="Y.csv"):
        load_cohort(dataset_dir)
    assert not check_dataset(dataset_dir)


def test_covariates_without_intercept(dataset_dir):
    (dataset_dir / "sub-0003" / "w.csv").write_text("2,1\n")
    with pytest.raises(InputValidationError, match="sub-0003"):
        load_cohort(dataset_dir)
    assert not check_dataset(dataset_dir)


def test_check_dataset(dataset_dir, capsys):
    assert check_dataset(dataset_dir)
    assert "40 subjects, p=6, q=4, r=2" in capsys.readouterr().err


def test_check_dataset_dimension_mismatch(dataset_dir):
    (dataset_dir / "sub-0004" / "X.csv").write_text("1,2\n3,4\n5,7\n")
    assert not check_dataset(dataset_dir)


def test_tables_write_missing_values_as_na(tmp_path):
    frame = pd.DataFrame({"a": [1.0, None], "b": ["x", "y"]})
    write_table(tmp_path / "t.csv", frame)
    assert "NA" in (tmp_path / "t.csv").read_text()
    back = read_table(tmp_path / "t.csv")
    assert back["a"].isna().tolist() == [False, True]


def test_compressed_table(tmp_path):
    frame = pd.DataFrame({"replicate": [0, 1], "alpha": [0.5, 0.25]})
    write_table(tmp_path / "draws.csv.gz", frame)
    assert (tmp_path / "draws.csv.gz").read_bytes()[:2] == b"\x1f\x8b"
    pd.testing.assert_frame_equal(read_table(tmp_path / "draws.csv.gz"), frame)


def test_load_fit(tmp_path):
    write_json(tmp_path / "fit.json", FitSequence(threshold=1.5))
    assert load_fit(tmp_path / "fit.json").threshold == 1.5
    (tmp_path / "bad.json").write_text("{\"selected_k\": -1}")
    with pytest.raises(InputValidationError):
        load_fit(tmp_path / "bad.json")
    with pytest.raises(InputValidationError):
        load_fit(tmp_path / "missing.json")
