"""Strict JSON problem-spec files.

Layout::

    {
      "name": "optional label",
      "n": 1, "m": 1,
      "horizon": {"t_start": 0.0, "t_end": 1.0},
      "jumps": {"marks": ["up", "down"], "weights": [1.0, 2.0]},
      "coefficients": {
        "A": 0.5,                       // scalar, matrix, or piecewise table
        "Q": [[1.0]],
        "N3": {"breakpoints": [0.0, 0.5], "values": [[[1.0]], [[2.0]]]},
        "D": [0.1, -0.2],               // per-mark list for D/Dbar/N2/N2bar
        "G": [[1.0]]
      },
      "terminal": {"kind": "affine", "constant": [1.0], "brownian": [0.5],
                   "jumps": [[0.1], [0.2]], "brownian_quadratic": [0.0]}
    }

Unknown fields are rejected anywhere (silent typos in coefficient names would
corrupt experiments invisibly); omitted coefficients default to zero.
"""

from __future__ import annotations

import json

import numpy as np

from .problem import (
    CoefficientSet,
    DimensionError,
    JumpMeasure,
    PiecewiseMatrix,
    ProblemSpec,
    TerminalCondition,
    TimeHorizon,
)

__all__ = ["SpecFileError", "parse_spec", "load_spec"]

_PER_MARK = ("D", "Dbar", "N2", "N2bar")
_COEFF_NAMES = (
    "A", "Abar", "B", "Bbar", "C", "Cbar", "Q", "Qbar",
    "N1", "N1bar", "N3", "N3bar", "G", "Gbar",
) + _PER_MARK
_TERMINAL_KEYS = ("kind", "constant", "brownian", "jumps", "brownian_quadratic")


class SpecFileError(ValueError):
    """Malformed problem-spec document; message names the offending field."""


def _require(cond: bool, path: str, message: str):
    if not cond:
        raise SpecFileError(f"{path}: {message}")


def _number(value, path: str) -> float:
    _require(isinstance(value, (int, float)) and not isinstance(value, bool),
             path, f"expected a number, got {type(value).__name__}")
    return float(value)


def _matrix(value, path: str) -> np.ndarray:
    """Scalar or nested-list matrix payload."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return np.array([[float(value)]])
    _require(isinstance(value, list), path, "expected a number or a list of rows")
    try:
        mat = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise SpecFileError(f"{path}: rows are not numeric or are ragged") from None
    _require(mat.ndim == 2, path, f"expected a 2-d matrix, got {mat.ndim}-d data")
    _require(np.all(np.isfinite(mat)), path, "matrix entries must be finite")
    return mat


def _table(value, path: str, horizon: TimeHorizon) -> PiecewiseMatrix:
    if isinstance(value, dict):
        unknown = set(value) - {"breakpoints", "values"}
        _require(not unknown, path, f"unknown keys {sorted(unknown)}")
        _require("breakpoints" in value and "values" in value, path,
                 "piecewise table needs 'breakpoints' and 'values'")
        bps = value["breakpoints"]
        vals = value["values"]
        _require(isinstance(bps, list) and isinstance(vals, list), path,
                 "'breakpoints' and 'values' must be lists")
        _require(len(bps) == len(vals), path,
                 f"{len(bps)} breakpoints but {len(vals)} value matrices")
        mats = [_matrix(v, f"{path}.values[{j}]") for j, v in enumerate(vals)]
        try:
            return PiecewiseMatrix(
                breakpoints=np.array([_number(b, f"{path}.breakpoints[{j}]")
                                      for j, b in enumerate(bps)]),
                values=np.stack(mats),
                horizon=horizon,
            )
        except ValueError as exc:
            raise SpecFileError(f"{path}: {exc}") from None
    return PiecewiseMatrix.constant(_matrix(value, path), horizon)


def _vector(value, path: str) -> np.ndarray:
    _require(isinstance(value, list), path, "expected a list of numbers")
    return np.array([_number(x, f"{path}[{j}]") for j, x in enumerate(value)])


def parse_spec(document: dict, source: str = "<spec>") -> ProblemSpec:
    """Build a validated ProblemSpec from a parsed JSON document."""
    _require(isinstance(document, dict), source, "top level must be an object")
    unknown = set(document) - {"name", "n", "m", "horizon", "jumps", "coefficients", "terminal"}
    _require(not unknown, source, f"unknown top-level fields {sorted(unknown)}")
    for key in ("n", "m", "horizon", "terminal"):
        _require(key in document, source, f"missing required field '{key}'")

    n, m = document["n"], document["m"]
    _require(isinstance(n, int) and n >= 1, "n", "must be an integer >= 1")
    _require(isinstance(m, int) and m >= 1, "m", "must be an integer >= 1")

    hz = document["horizon"]
    _require(isinstance(hz, dict), "horizon", "must be an object")
    unknown = set(hz) - {"t_start", "t_end"}
    _require(not unknown, "horizon", f"unknown fields {sorted(unknown)}")
    try:
        horizon = TimeHorizon(
            t_start=_number(hz.get("t_start", 0.0), "horizon.t_start"),
            t_end=_number(hz.get("t_end"), "horizon.t_end"),
        )
    except TypeError:
        raise SpecFileError("horizon.t_end: missing") from None
    except ValueError as exc:
        raise SpecFileError(f"horizon: {exc}") from None

    jm = document.get("jumps", {"marks": [], "weights": []})
    _require(isinstance(jm, dict), "jumps", "must be an object")
    unknown = set(jm) - {"marks", "weights"}
    _require(not unknown, "jumps", f"unknown fields {sorted(unknown)}")
    marks = jm.get("marks", [])
    weights = jm.get("weights", [])
    _require(isinstance(marks, list) and isinstance(weights, list),
             "jumps", "'marks' and 'weights' must be lists")
    _require(len(marks) == len(weights), "jumps",
             f"{len(marks)} marks but {len(weights)} weights")
    for j, w in enumerate(weights):
        wv = _number(w, f"jumps.weights[{j}]")
        _require(wv > 0, f"jumps.weights[{j}]", f"weight must be positive, got {wv}")
    jumps = JumpMeasure(marks=tuple(marks), weights=np.array(weights, dtype=float))
    K = jumps.num_marks

    raw_coeffs = document.get("coefficients", {})
    _require(isinstance(raw_coeffs, dict), "coefficients", "must be an object")
    unknown = set(raw_coeffs) - set(_COEFF_NAMES)
    _require(not unknown, "coefficients", f"unknown coefficient names {sorted(unknown)}")
    tables = {}
    for name, value in raw_coeffs.items():
        path = f"coefficients.{name}"
        if name in ("G", "Gbar"):
            tables[name] = _matrix(value, path)
        elif name in _PER_MARK:
            _require(isinstance(value, list), path,
                     f"per-mark coefficient must be a list of {K} entries")
            _require(len(value) == K, path,
                     f"expected {K} per-mark entries, got {len(value)}")
            tables[name] = tuple(_table(v, f"{path}[{j}]", horizon)
                                 for j, v in enumerate(value))
        else:
            tables[name] = _table(value, path, horizon)
    try:
        coeffs = CoefficientSet.build(n, m, horizon, K, **tables)
    except (DimensionError, ValueError) as exc:
        raise SpecFileError(f"coefficients: {exc}") from None

    term = document["terminal"]
    _require(isinstance(term, dict), "terminal", "must be an object")
    unknown = set(term) - set(_TERMINAL_KEYS)
    _require(not unknown, "terminal", f"unknown fields {sorted(unknown)}")
    _require("kind" in term and "constant" in term, "terminal",
             "needs at least 'kind' and 'constant'")
    kwargs = {"kind": term["kind"], "constant": _vector(term["constant"], "terminal.constant")}
    if "brownian" in term:
        kwargs["brownian"] = _vector(term["brownian"], "terminal.brownian")
    if "brownian_quadratic" in term:
        kwargs["brownian_quadratic"] = _vector(term["brownian_quadratic"],
                                               "terminal.brownian_quadratic")
    if "jumps" in term:
        rows = term["jumps"]
        _require(isinstance(rows, list), "terminal.jumps", "expected one row per mark")
        kwargs["jumps"] = np.array(
            [_vector(r, f"terminal.jumps[{j}]") for j, r in enumerate(rows)]
        ).reshape(len(rows), -1) if rows else np.zeros((0, n))
    try:
        terminal = TerminalCondition(**kwargs)
        return ProblemSpec(n=n, m=m, horizon=horizon, jumps=jumps,
                           coeffs=coeffs, terminal=terminal)
    except (DimensionError, ValueError) as exc:
        raise SpecFileError(f"{source}: {exc}") from None


def load_spec(path) -> ProblemSpec:
    """Parse and validate a problem-spec JSON file."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            document = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SpecFileError(f"{path}: not valid JSON ({exc})") from None
    return parse_spec(document, source=str(path))
