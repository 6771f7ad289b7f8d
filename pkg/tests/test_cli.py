"""Command-line interface: exit codes, artifacts, and byte-level replay."""
import json
import os
import subprocess
import sys

import pytest

from mfbsde_lq.cli import main

FIX = os.path.join(os.path.dirname(__file__), os.pardir, "fixtures")


def _fixture(name):
    return os.path.join(FIX, name)


def test_solve_writes_artifacts(tmp_path):
    rc = main(["solve", "--spec", _fixture("scalar_det.json"),
               "--steps", "40", "--particles", "1", "--out", str(tmp_path)])
    assert rc == 0
    for name in ("solution.json", "u.csv", "Y.csv", "Z.csv", "k.csv"):
        assert (tmp_path / name).exists()
    payload = json.loads((tmp_path / "solution.json").read_text())
    assert payload["steps"] == 40 and payload["particles"] == 1
    assert payload["diagnostics"]["terminal_error"] <= 1e-10


def test_riccati_csv_parses_back(tmp_path):
    rc = main(["riccati", "--spec", _fixture("scalar_riccati.json"),
               "--steps", "100", "--out", str(tmp_path)])
    assert rc == 0
    lines = (tmp_path / "riccati.csv").read_text().strip().splitlines()
    assert lines[0] == "s,row,col,P_value,Pi_value"
    s, row, col, p, pi = lines[1].split(",")
    float(s), float(p), float(pi)  # plain decimal floats, no numpy reprs


def test_oracle_compare_passes(tmp_path):
    rc = main(["oracle-compare", "--spec", _fixture("scalar_det.json"),
               "--steps", "50", "--particles", "1", "--out", str(tmp_path)])
    assert rc == 0
    payload = json.loads((tmp_path / "oracle_compare.json").read_text())
    assert payload["passed"]


def test_oracle_compare_fails_under_tight_tolerance(tmp_path):
    rc = main(["oracle-compare", "--spec", _fixture("scalar_det.json"),
               "--steps", "50", "--particles", "1", "--out", str(tmp_path),
               "--tolerance", "oracle_cost=1e-12"])
    assert rc == 1


def test_oracle_compare_out_of_scope_exit_code(tmp_path):
    rc = main(["oracle-compare", "--spec", _fixture("jump2.json"),
               "--steps", "20", "--particles", "50", "--out", str(tmp_path)])
    assert rc == 3


def test_missing_spec_file_exit_code(tmp_path):
    rc = main(["solve", "--spec", str(tmp_path / "absent.json"),
               "--out", str(tmp_path)])
    assert rc == 2


def test_invalid_spec_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n": 1, "m": 1}))
    rc = main(["solve", "--spec", str(bad), "--out", str(tmp_path)])
    assert rc == 2


def test_assumption_violation_exit_code(tmp_path):
    doc = json.loads(open(_fixture("scalar_det.json")).read())
    doc["coefficients"]["N3"] = -1.0
    bad = tmp_path / "indefinite.json"
    bad.write_text(json.dumps(doc))
    rc = main(["solve", "--spec", str(bad), "--out", str(tmp_path)])
    assert rc == 2


def test_unknown_tolerance_key_rejected(tmp_path):
    with pytest.raises(SystemExit):
        main(["solve", "--spec", _fixture("scalar_det.json"),
              "--out", str(tmp_path), "--tolerance", "bogus=1"])


def test_picard_compare_jump_fixture(tmp_path):
    rc = main(["picard-compare", "--spec", _fixture("jump2.json"),
               "--steps", "40", "--particles", "600", "--out", str(tmp_path)])
    assert rc == 0
    payload = json.loads((tmp_path / "picard_compare.json").read_text())
    assert payload["picard_iterations"] <= 30


def test_verify_small(tmp_path):
    rc = main(["verify", "--spec", _fixture("jump2.json"),
               "--steps", "30", "--particles", "400", "--probes", "2",
               "--out", str(tmp_path)])
    assert rc == 0
    payload = json.loads((tmp_path / "verification_report.json").read_text())
    assert payload["passed"]
    assert len(payload["probes"]) == 2


def _run_cli(outdir, threads):
    env = dict(os.environ, OMP_NUM_THREADS=threads, OPENBLAS_NUM_THREADS=threads)
    subprocess.run(
        [sys.executable, "-m", "mfbsde_lq.cli", "solve",
         "--spec", _fixture("jump2.json"), "--steps", "30",
         "--particles", "500", "--out", str(outdir)],
        check=True, env=env, capture_output=True,
    )


def test_replay_byte_identical_across_thread_counts(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    _run_cli(a, "1")
    _run_cli(b, "4")
    for name in sorted(os.listdir(a)):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
