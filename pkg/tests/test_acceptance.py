"""Acceptance gate: twelve numbered criteria, one printed line each.

Each test prints ``ACCEPTANCE <nn> <name>: PASS|FAIL (<measurements>)``
before asserting, so the full gate status is readable from the test log
even when a criterion fails.
"""
import json
import os
import subprocess
import sys

import numpy as np
import pytest

import mfbsde_lq as mf

FIX = os.path.join(os.path.dirname(__file__), os.pardir, "fixtures")


def _fixture(name):
    return os.path.join(FIX, name)


def _report(num, name, ok, detail):
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE {num:02d} {name}: {status} ({detail})")
    assert ok, f"criterion {num} {name}: {detail}"


# ---------------------------------------------------------------------------
# Shared heavy computations
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def jump_run():
    """Pipeline solve on the two-mark jump fixture at the pinned sizes."""
    spec = mf.load_spec(_fixture("jump2.json"))
    grid = mf.build_grid(spec.horizon, 200)
    noise = mf.generate_noise(grid, 10_000, spec.jumps, 0)
    solution = mf.solve_problem(spec, noise=noise)
    return spec, grid, noise, solution


@pytest.fixture(scope="module")
def probe_report():
    """Verification harness on the jump fixture (criteria 6-8 share it)."""
    spec = mf.load_spec(_fixture("jump2.json"))
    grid = mf.build_grid(spec.horizon, 100)
    noise = mf.generate_noise(grid, 4000, spec.jumps, 0)
    solution = mf.solve_problem(spec, noise=noise)
    return spec, mf.verify_optimality(spec, solution, noise, probes=20, seed=11)


# ---------------------------------------------------------------------------
# Criteria
# ---------------------------------------------------------------------------


def test_criterion_01_riccati_analytic():
    spec = mf.load_spec(_fixture("riccati_analytic.json"))
    grid = mf.build_grid(spec.horizon, 1000)
    pair = mf.solve_riccati(spec, grid)
    err = float(np.max(np.abs(pair.P.values[:, 0, 0] - (1.0 - grid.nodes))))
    _report(1, "riccati-analytic", err <= 1e-12, f"max err={err:.3e}, tol=1e-12")


def test_criterion_02_riccati_reduction():
    doc = json.loads(open(_fixture("scalar_riccati.json")).read())
    for key in [k for k in doc["coefficients"] if "bar" in k]:
        del doc["coefficients"][key]
    spec = mf.parse_spec(doc)
    pair = mf.solve_riccati(spec, mf.build_grid(spec.horizon, 500))
    gap = float(np.max(np.linalg.norm(pair.P.values - pair.Pi.values, axis=(1, 2))))
    _report(2, "riccati-reduction", gap <= 1e-12, f"max |P-Pi|={gap:.3e}, tol=1e-12")


def test_criterion_03_riccati_self_convergence():
    spec = mf.load_spec(_fixture("scalar_riccati.json"))

    def p0(steps):
        pair = mf.solve_riccati(spec, mf.build_grid(spec.horizon, steps))
        return pair.P.values[0, 0, 0]

    gap = abs(p0(1000) - p0(10_000))
    # order witness on grids coarse enough for truncation to dominate round-off
    ref = p0(4096)
    errors = [abs(p0(steps) - ref) for steps in (8, 16, 32, 64)]
    ratios = [errors[i] / errors[i + 1] for i in range(3)]
    ok = gap <= 1e-8 and all(r >= 8.0 for r in ratios)
    _report(3, "riccati-self-convergence", ok,
            f"1000-vs-10000 gap={gap:.3e} (tol=1e-8), "
            f"halving ratios={[f'{r:.1f}' for r in ratios]} (need >=8)")


def test_criterion_04_deterministic_oracle_sandwich():
    spec = mf.load_spec(_fixture("scalar_det.json"))
    grid = mf.build_grid(spec.horizon, 50)
    noise = mf.generate_noise(grid, 1, spec.jumps, 0)
    solution = mf.solve_problem(spec, noise=noise)
    u_oracle, j_oracle = mf.brute_force_lq_oracle(spec, grid)
    cost_gap = abs(solution.cost.J - j_oracle)
    cost_tol = 1e-3 * (1.0 + abs(j_oracle))
    u_gap = (solution.u + u_oracle.scaled(-1.0)).l2_norm()
    u_tol = 2e-2 * (1.0 + u_oracle.l2_norm())
    ok = cost_gap <= cost_tol and u_gap <= u_tol
    _report(4, "deterministic-oracle-sandwich", ok,
            f"|J gap|={cost_gap:.3e} (tol={cost_tol:.3e}), "
            f"||u gap||={u_gap:.3e} (tol={u_tol:.3e})")


def test_criterion_05_stationarity(jump_run):
    spec, grid, noise, solution = jump_run
    # independently recomputed adjoint: regression state solve at the
    # pipeline optimum, then the forward adjoint equation
    state = mf.solve_state_bsde(spec, solution.u, noise)
    adjoint = mf.solve_adjoint(spec, state, noise)
    residual = mf.stationarity_residual(spec, solution.u, adjoint)
    _report(5, "stationarity", residual <= 5e-2,
            f"normalized residual={residual:.3e}, tol=5e-2, "
            f"N=10000, steps=200")


def test_criterion_06_optimality_probes(probe_report):
    _, report = probe_report
    checks = [c for e in report["probes"] for c in e["checks"]
              if c["type"] == "perturbation"]
    ok = all(c["passed"] for c in checks)
    worst = min(c["margin"] for c in checks)
    _report(6, "optimality-probes", ok,
            f"{sum(c['passed'] for c in checks)}/{len(checks)} "
            f"perturbations nonnegative, worst margin={worst:.3e}")


def test_criterion_07_parabola_identity(probe_report):
    _, report = probe_report
    checks = [c for e in report["probes"] for c in e["checks"]
              if c["type"] == "parabola"]
    ok = all(c["passed"] for c in checks)
    worst = max(c["defect"] / c["tolerance"] for c in checks)
    _report(7, "parabola-identity", ok,
            f"{sum(c['passed'] for c in checks)}/{len(checks)} probes, "
            f"worst defect/tolerance={worst:.2f}")


def test_criterion_08_coercivity(probe_report):
    _, report = probe_report
    checks = report["coercivity"]
    ok = all(c["passed"] for c in checks)
    worst = min(c["margin"] for c in checks)
    _report(8, "coercivity", ok,
            f"{sum(c['passed'] for c in checks)}/{len(checks)} controls, "
            f"delta={report['delta']:.3g}, worst margin={worst:.3e}")


def test_criterion_09_picard_agreement(jump_run):
    spec, grid, noise, solution = jump_run
    distance, _, residuals = mf.picard_distance(spec, solution, noise)
    ok = distance <= 5e-2 and len(residuals) <= 30
    _report(9, "picard-agreement", ok,
            f"sup-node relative distance={distance:.3e} (tol=5e-2), "
            f"iterations={len(residuals)} (max 30, damping 0.5)")


def test_criterion_10_martingale_sanity():
    spec = mf.load_spec(_fixture("jump2.json"))
    grid = mf.build_grid(spec.horizon, 100)
    noise = mf.generate_noise(grid, 100_000, spec.jumps, 1)
    lines = []
    ok = True
    w_sum = np.sum(noise.dW, axis=0)
    se = float(np.std(w_sum, ddof=1) / np.sqrt(w_sum.size))
    ok &= abs(float(np.mean(w_sum))) <= 4 * se
    lines.append(f"W mean={float(np.mean(w_sum)):.2e} (4se={4 * se:.2e})")
    comp = noise.compensated()
    for k in range(spec.jumps.num_marks):
        c_sum = np.sum(comp[:, :, k], axis=0)
        se = float(np.std(c_sum, ddof=1) / np.sqrt(c_sum.size))
        ok &= abs(float(np.mean(c_sum))) <= 4 * se
        lines.append(f"mark{k} mean={float(np.mean(c_sum)):.2e} (4se={4 * se:.2e})")
    _report(10, "martingale-sanity", bool(ok), "; ".join(lines))


def test_criterion_11_cost_form_identity():
    worst_name, worst = "", 0.0
    for name in ("zero", "riccati_analytic", "scalar_riccati",
                 "scalar_det", "jump2"):
        spec = mf.load_spec(_fixture(f"{name}.json"))
        grid = mf.build_grid(spec.horizon, 60)
        noise = mf.generate_noise(grid, 500, spec.jumps, 2)
        solution = mf.solve_problem(spec, noise=noise)
        rel = abs(solution.cost.J - solution.cost.centered_J) / (
            1.0 + abs(solution.cost.J))
        if rel >= worst:
            worst_name, worst = name, rel
    _report(11, "cost-form-identity", worst <= 1e-10,
            f"worst fixture={worst_name}, relative gap={worst:.3e}, tol=1e-10")


def test_criterion_12_reproducibility(tmp_path):
    def run(outdir, threads):
        env = dict(os.environ, OMP_NUM_THREADS=threads,
                   OPENBLAS_NUM_THREADS=threads, MKL_NUM_THREADS=threads)
        subprocess.run(
            [sys.executable, "-m", "mfbsde_lq.cli", "solve",
             "--spec", _fixture("jump2.json"), "--steps", "50",
             "--particles", "1000", "--seed", "3", "--out", str(outdir)],
            check=True, env=env, capture_output=True,
        )

    a, b = tmp_path / "a", tmp_path / "b"
    run(a, "1")
    run(b, "4")
    mismatched = [name for name in sorted(os.listdir(a))
                  if (a / name).read_bytes() != (b / name).read_bytes()]
    _report(12, "reproducibility", not mismatched,
            f"{len(os.listdir(a))} artifacts byte-compared across "
            f"1-thread and 4-thread runs, mismatches={mismatched}")
