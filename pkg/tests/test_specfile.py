"""Strict spec-file parsing: field paths in errors, typo rejection, defaults."""
import json

import numpy as np
import pytest

import mfbsde_lq as mf
from mfbsde_lq.specfile import SpecFileError


def _minimal():
    return {
        "n": 1, "m": 1,
        "horizon": {"t_start": 0.0, "t_end": 1.0},
        "coefficients": {"N3": 1.0},
        "terminal": {"kind": "deterministic", "constant": [1.0]},
    }


def test_minimal_document_parses():
    spec = mf.parse_spec(_minimal())
    assert spec.n == 1 and spec.m == 1
    assert spec.jumps.num_marks == 0
    assert spec.coeffs.A.is_zero()  # omitted coefficients default to zero


def test_all_fixture_files_parse(fixtures_dir):
    for path in sorted(fixtures_dir.glob("*.json")):
        spec = mf.load_spec(path)
        assert spec.n >= 1


def test_scalar_promoted_to_matrix():
    doc = _minimal()
    doc["coefficients"]["A"] = 0.25
    spec = mf.parse_spec(doc)
    np.testing.assert_allclose(spec.coeffs.A.at(0.3), [[0.25]])


def test_piecewise_table():
    doc = _minimal()
    doc["coefficients"]["A"] = {"breakpoints": [0.0, 0.5], "values": [0.1, 0.9]}
    spec = mf.parse_spec(doc)
    assert spec.coeffs.A.at(0.25)[0, 0] == 0.1
    assert spec.coeffs.A.at(0.75)[0, 0] == 0.9


def test_unknown_top_level_field_rejected():
    doc = _minimal()
    doc["coefficents"] = {}  # typo
    with pytest.raises(SpecFileError, match="coefficents"):
        mf.parse_spec(doc)


def test_unknown_coefficient_name_rejected():
    doc = _minimal()
    doc["coefficients"]["N4"] = 1.0
    with pytest.raises(SpecFileError, match="N4"):
        mf.parse_spec(doc)


def test_unknown_terminal_field_rejected():
    doc = _minimal()
    doc["terminal"]["offset"] = [1.0]
    with pytest.raises(SpecFileError, match="offset"):
        mf.parse_spec(doc)


def test_missing_t_end_named():
    doc = _minimal()
    del doc["horizon"]["t_end"]
    with pytest.raises(SpecFileError, match="horizon.t_end"):
        mf.parse_spec(doc)


def test_nonpositive_jump_weight_named():
    doc = _minimal()
    doc["jumps"] = {"marks": ["a", "b"], "weights": [1.0, -0.5]}
    with pytest.raises(SpecFileError, match=r"jumps.weights\[1\]"):
        mf.parse_spec(doc)


def test_mark_weight_count_mismatch():
    doc = _minimal()
    doc["jumps"] = {"marks": ["a"], "weights": [1.0, 2.0]}
    with pytest.raises(SpecFileError, match="1 marks but 2 weights"):
        mf.parse_spec(doc)


def test_per_mark_entry_count_checked():
    doc = _minimal()
    doc["jumps"] = {"marks": ["a", "b"], "weights": [1.0, 1.0]}
    doc["coefficients"]["D"] = [0.1]  # needs two entries
    with pytest.raises(SpecFileError, match="coefficients.D"):
        mf.parse_spec(doc)


def test_ragged_matrix_named():
    doc = _minimal()
    doc["coefficients"]["G"] = [[1.0, 0.0], [1.0]]
    with pytest.raises(SpecFileError, match="coefficients.G"):
        mf.parse_spec(doc)


def test_dimension_mismatch_reported():
    doc = _minimal()
    doc["terminal"]["constant"] = [1.0, 2.0]
    with pytest.raises(SpecFileError):
        mf.parse_spec(doc)


def test_invalid_json_file_named(tmp_path):
    bad = tmp_path / "broken.json"
    bad.write_text("{not json")
    with pytest.raises(SpecFileError, match="not valid JSON"):
        mf.load_spec(bad)


def test_non_numeric_entry_path():
    doc = _minimal()
    doc["terminal"]["constant"] = ["one"]
    with pytest.raises(SpecFileError, match=r"terminal.constant\[0\]"):
        mf.parse_spec(doc)
