"""Command-line front door.

Commands: riccati, solve, verify, oracle-compare, picard-compare.  Every
output file embeds (seed, steps, particles, version) so a run can be replayed
exactly; no timestamps are written, so identical configurations produce
byte-identical outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .bsde import PicardConvergenceError
from .noise import generate_noise
from .pipeline import (
    AssumptionViolationError,
    OracleScopeError,
    brute_force_lq_oracle,
    hamilton_residual,
    picard_distance,
    solve_problem,
    verify_optimality,
)
from .problem import build_grid, validate_assumptions
from .riccati import RiccatiDivergenceError, RiccatiSingularityError, riccati_to_csv, solve_riccati
from .specfile import SpecFileError, load_spec

DEFAULT_TOLERANCES = {
    "stationarity": 1e-9,
    "terminal": 1e-8,
    "decoupling": 1e-10,
    "oracle_cost": 1e-3,
    "oracle_control": 2e-2,
    "picard_distance": 5e-2,
    "picard_tol": 1e-3,
    "parabola_floor": 1e-8,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfbsde-lq",
        description="LQ optimal control of mean-field BSDEs with jumps: "
                    "Riccati decoupling pipeline and verification harness.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--spec", required=True, help="problem-spec JSON file")
        p.add_argument("--steps", type=int, default=200, help="time-grid intervals")
        p.add_argument("--particles", type=int, default=1000, help="ensemble size")
        p.add_argument("--seed", type=int, default=0, help="64-bit master seed")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--tolerance", action="append", default=[], metavar="KEY=VAL",
                       help="override a named tolerance (repeatable)")
        p.add_argument("--factor2-variant", action="store_true",
                       help="use the doubled N1/N2 integrand convention")
        p.add_argument("--basis-degree", type=int, default=2,
                       help="regression basis polynomial degree")
        p.add_argument("--picard-damping", type=float, default=0.5,
                       help="Picard iteration damping factor")
        return p

    common(sub.add_parser("riccati", help="solve the Riccati pair, export CSV"))
    solve_p = common(sub.add_parser("solve", help="full decoupled solve, export processes"))
    solve_p.add_argument("--ensemble", action="store_true",
                         help="also dump full per-particle ensembles")
    verify_p = common(sub.add_parser("verify", help="optimality verification report"))
    verify_p.add_argument("--probes", type=int, default=20,
                          help="number of random perturbation probes")
    common(sub.add_parser("oracle-compare", help="pipeline vs brute-force LQ oracle"))
    common(sub.add_parser("picard-compare", help="pipeline vs Picard fixed point"))
    return parser


def _tolerances(overrides) -> dict:
    tol = dict(DEFAULT_TOLERANCES)
    for item in overrides:
        if "=" not in item:
            raise SystemExit(f"--tolerance expects KEY=VAL, got {item!r}")
        key, _, raw = item.partition("=")
        if key not in tol:
            raise SystemExit(f"unknown tolerance key {key!r}; known: {sorted(tol)}")
        tol[key] = float(raw)
    return tol


def _stamp(args) -> dict:
    return {
        "seed": args.seed,
        "steps": args.steps,
        "particles": args.particles,
        "version": __version__,
    }


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_means_csv(path, grid, mean, prefix):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("s," + ",".join(f"{prefix}{j}" for j in range(mean.shape[1])) + "\n")
        for i, s in enumerate(grid.nodes):
            fh.write(",".join([repr(float(s))] + [repr(float(v)) for v in mean[i]]) + "\n")


def _write_ensemble_csv(path, grid, values, name):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("s,particle,component,value\n")
        for i, s in enumerate(grid.nodes):
            for p in range(values.shape[1]):
                for c in range(values.shape[2]):
                    fh.write(f"{float(s)!r},{p},{c},{float(values[i, p, c])!r}\n")


def _cmd_riccati(spec, args, tol, out):
    grid = build_grid(spec.horizon, args.steps)
    pair = solve_riccati(spec, grid)
    with open(os.path.join(out, "riccati.csv"), "w", encoding="utf-8") as fh:
        fh.write(riccati_to_csv(pair))
    summary = {
        **_stamp(args),
        "max_residual_P": pair.max_residual_P,
        "max_residual_Pi": pair.max_residual_Pi,
        "min_inv_margin": pair.min_inv_margin,
        "passed": pair.min_inv_margin > 0,
    }
    _write_json(os.path.join(out, "riccati_summary.json"), summary)
    print(f"riccati: residual_P={pair.max_residual_P:.3e} "
          f"residual_Pi={pair.max_residual_Pi:.3e} margin={pair.min_inv_margin:.3e}")
    return 0 if summary["passed"] else 1


def _solve(spec, args):
    grid = build_grid(spec.horizon, args.steps)
    noise = generate_noise(grid, args.particles, spec.jumps, args.seed)
    solution = solve_problem(spec, seed=args.seed, basis_degree=args.basis_degree,
                             noise=noise)
    return solution, noise


def _cmd_solve(spec, args, tol, out):
    solution, noise = _solve(spec, args)
    grid = noise.grid
    if args.factor2_variant:
        solution.diagnostics["hamilton_residual_factor2"] = hamilton_residual(
            spec, solution, noise, factor2_variant=True)
    _write_means_csv(os.path.join(out, "Y.csv"), grid, solution.state.Y.mean, "Y")
    _write_means_csv(os.path.join(out, "Z.csv"), grid, solution.state.Z.mean, "Z")
    _write_means_csv(os.path.join(out, "u.csv"), grid, solution.u.values.mean(axis=1), "u")
    _write_means_csv(os.path.join(out, "k.csv"), grid, solution.k.k.mean, "k")
    for kk, r in enumerate(solution.state.R):
        _write_means_csv(os.path.join(out, f"R{kk}.csv"), grid, r.mean, f"R{kk}_")
    if args.ensemble:
        _write_ensemble_csv(os.path.join(out, "Y_ensemble.csv"), grid,
                            solution.state.Y.values, "Y")
    checks = {
        "stationarity": solution.diagnostics["stationarity_residual"] <= tol["stationarity"],
        "terminal": solution.diagnostics["terminal_error"] <= tol["terminal"],
        "decoupling": solution.diagnostics["decoupling_defect"] <= tol["decoupling"],
    }
    summary = {
        **_stamp(args),
        "J": solution.cost.J,
        "decomposition": solution.cost.decomposition,
        "mc_standard_error": solution.cost.mc_standard_error,
        "diagnostics": solution.diagnostics,
        "checks": checks,
        "passed": all(checks.values()),
    }
    _write_json(os.path.join(out, "solution.json"), summary)
    print(f"solve: J={solution.cost.J:.6e} "
          f"stationarity={solution.diagnostics['stationarity_residual']:.3e} "
          f"terminal={solution.diagnostics['terminal_error']:.3e}")
    return 0 if summary["passed"] else 1


def _cmd_verify(spec, args, tol, out):
    solution, noise = _solve(spec, args)
    report = verify_optimality(spec, solution, noise, probes=args.probes,
                               seed=args.seed, basis_degree=args.basis_degree,
                               parabola_floor=tol["parabola_floor"])
    report.update(_stamp(args))
    _write_json(os.path.join(out, "verification_report.json"), report)
    n_probe = sum(1 for e in report["probes"] if e["passed"])
    n_coer = sum(1 for e in report["coercivity"] if e["passed"])
    print(f"verify: probes {n_probe}/{len(report['probes'])} "
          f"coercivity {n_coer}/{len(report['coercivity'])} "
          f"passed={report['passed']}")
    return 0 if report["passed"] else 1


def _cmd_oracle_compare(spec, args, tol, out):
    solution, noise = _solve(spec, args)
    u_oracle, J_oracle = brute_force_lq_oracle(spec, noise.grid)
    J_pipe = solution.cost.J
    wt = np.full(noise.grid.steps + 1, noise.grid.step)
    wt[0] = wt[-1] = 0.5 * noise.grid.step
    du = solution.u.values[:, 0, :] - u_oracle.values[:, 0, :]
    u_gap = float(np.sqrt(wt @ np.sum(du ** 2, axis=1)))
    cost_ok = abs(J_pipe - J_oracle) <= tol["oracle_cost"] * (1.0 + abs(J_oracle))
    ctrl_ok = u_gap <= tol["oracle_control"] * (1.0 + u_oracle.l2_norm())
    with open(os.path.join(out, "oracle_compare.csv"), "w", encoding="utf-8") as fh:
        fh.write("quantity,pipeline,oracle,gap,tolerance,passed\n")
        fh.write(f"cost,{J_pipe!r},{J_oracle!r},{abs(J_pipe - J_oracle)!r},"
                 f"{tol['oracle_cost'] * (1.0 + abs(J_oracle))!r},{cost_ok}\n")
        fh.write(f"control_l2,{solution.u.l2_norm()!r},{u_oracle.l2_norm()!r},"
                 f"{u_gap!r},{tol['oracle_control'] * (1.0 + u_oracle.l2_norm())!r},{ctrl_ok}\n")
    summary = {
        **_stamp(args),
        "J_pipeline": J_pipe, "J_oracle": J_oracle,
        "cost_gap": abs(J_pipe - J_oracle), "control_gap": u_gap,
        "passed": bool(cost_ok and ctrl_ok),
    }
    _write_json(os.path.join(out, "oracle_compare.json"), summary)
    print(f"oracle-compare: cost gap={summary['cost_gap']:.3e} "
          f"control gap={u_gap:.3e} passed={summary['passed']}")
    return 0 if summary["passed"] else 1


def _cmd_picard_compare(spec, args, tol, out):
    solution, noise = _solve(spec, args)
    distance, per_node, residuals = picard_distance(
        spec, solution, noise, tol=tol["picard_tol"],
        damping=args.picard_damping, basis_degree=args.basis_degree,
        factor2_variant=args.factor2_variant,
    )
    with open(os.path.join(out, "picard_compare.csv"), "w", encoding="utf-8") as fh:
        fh.write("s,relative_distance\n")
        for s, d in zip(noise.grid.nodes, per_node):
            fh.write(f"{float(s)!r},{float(d)!r}\n")
    summary = {
        **_stamp(args),
        "sup_distance": distance,
        "picard_iterations": len(residuals),
        "picard_residuals": residuals,
        "passed": distance <= tol["picard_distance"],
    }
    _write_json(os.path.join(out, "picard_compare.json"), summary)
    print(f"picard-compare: sup distance={distance:.3e} "
          f"iterations={len(residuals)} passed={summary['passed']}")
    return 0 if summary["passed"] else 1


_COMMANDS = {
    "riccati": _cmd_riccati,
    "solve": _cmd_solve,
    "verify": _cmd_verify,
    "oracle-compare": _cmd_oracle_compare,
    "picard-compare": _cmd_picard_compare,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    tol = _tolerances(args.tolerance)
    try:
        spec = load_spec(args.spec)
    except (OSError, SpecFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    grid = build_grid(spec.horizon, args.steps)
    report = validate_assumptions(spec, grid)
    if not report.passed:
        print("error: standing assumptions violated:", file=sys.stderr)
        for name, time, msg in report.violations:
            print(f"  [{name}] at s={time:.6g}: {msg}", file=sys.stderr)
        return 2
    out = args.out
    os.makedirs(out, exist_ok=True)
    try:
        return _COMMANDS[args.command](spec, args, tol, out)
    except (RiccatiSingularityError, RiccatiDivergenceError,
            AssumptionViolationError, OracleScopeError,
            PicardConvergenceError, ArithmeticError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
