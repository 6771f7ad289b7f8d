"""Problem instances: coefficients, horizon, jump measure, time grids, validation.

All containers are immutable after construction and safe to share across
threads.  Coefficients are piecewise-constant in time; a table's piece j
applies on [breakpoints[j], breakpoints[j+1]), with the last piece extending
to the end of the horizon (so the value at an interior breakpoint is the new
piece's value).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DimensionError",
    "HorizonError",
    "TimeHorizon",
    "JumpMeasure",
    "PiecewiseMatrix",
    "CoefficientSet",
    "TerminalCondition",
    "ProblemSpec",
    "TimeGrid",
    "AssumptionReport",
    "build_grid",
    "sample_coefficient",
    "validate_assumptions",
]

# Relative tolerance used for symmetry checks of weight matrices.
_SYM_TOL = 1e-12


class DimensionError(ValueError):
    """A coefficient's shape is inconsistent with the declared dimensions."""


class HorizonError(ValueError):
    """A time query fell outside the control horizon."""


@dataclass(frozen=True)
class TimeHorizon:
    t_start: float
    t_end: float

    def __post_init__(self):
        if not (0.0 <= self.t_start < self.t_end):
            raise HorizonError(
                f"horizon must satisfy 0 <= t_start < t_end, got [{self.t_start}, {self.t_end}]"
            )

    @property
    def length(self) -> float:
        return self.t_end - self.t_start


@dataclass(frozen=True)
class JumpMeasure:
    """Finite mark set with per-mark jump intensities (units 1/time)."""

    marks: tuple
    weights: np.ndarray  # shape (K,), all > 0

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "marks", tuple(self.marks))
        if weights.ndim != 1 or len(self.marks) != weights.shape[0]:
            raise DimensionError("marks and weights must have equal length")
        if weights.size and not np.all(weights > 0):
            raise ValueError("all jump weights must be positive")
        if not np.all(np.isfinite(weights)):
            raise ValueError("jump weights must be finite")

    @property
    def num_marks(self) -> int:
        return len(self.marks)

    @property
    def total_intensity(self) -> float:
        return float(self.weights.sum())

    @classmethod
    def empty(cls) -> "JumpMeasure":
        return cls(marks=(), weights=np.zeros(0))


@dataclass(frozen=True)
class PiecewiseMatrix:
    """Piecewise-constant matrix trajectory on a horizon."""

    breakpoints: np.ndarray  # (J,), breakpoints[0] == horizon start
    values: np.ndarray  # (J, r, c)
    horizon: TimeHorizon

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)
        if bp.ndim != 1 or bp.size == 0:
            raise ValueError("breakpoints must be a non-empty 1-d array")
        if vals.ndim != 3 or vals.shape[0] != bp.shape[0]:
            raise DimensionError("values must be (J, r, c) with one matrix per breakpoint")
        if np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if abs(bp[0] - self.horizon.t_start) > 1e-12:
            raise ValueError("first breakpoint must equal the horizon start")
        if bp[-1] >= self.horizon.t_end:
            raise ValueError("breakpoints must lie inside the horizon")
        if not np.all(np.isfinite(vals)):
            raise ValueError("coefficient values must be finite")

    @property
    def shape(self) -> tuple:
        return self.values.shape[1:]

    @classmethod
    def constant(cls, matrix, horizon: TimeHorizon) -> "PiecewiseMatrix":
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        return cls(
            breakpoints=np.array([horizon.t_start]),
            values=matrix[None, :, :],
            horizon=horizon,
        )

    def at(self, s: float) -> np.ndarray:
        if s < self.horizon.t_start - 1e-12 or s > self.horizon.t_end + 1e-12:
            raise HorizonError(f"time {s} outside horizon [{self.horizon.t_start}, {self.horizon.t_end}]")
        idx = int(np.searchsorted(self.breakpoints, s, side="right")) - 1
        return self.values[max(idx, 0)]

    def is_zero(self) -> bool:
        return not np.any(self.values)


def sample_coefficient(table: PiecewiseMatrix, s: float) -> np.ndarray:
    """Value of a piecewise-constant coefficient table at time s."""
    return table.at(s)


def _mark_tables(entry, horizon: TimeHorizon, num_marks: int, shape, name: str):
    """Normalize a per-mark coefficient into a tuple of K tables."""
    if entry is None:
        zero = np.zeros(shape)
        return tuple(PiecewiseMatrix.constant(zero, horizon) for _ in range(num_marks))
    entry = tuple(entry)
    if len(entry) != num_marks:
        raise DimensionError(f"{name}: expected {num_marks} per-mark tables, got {len(entry)}")
    return entry


@dataclass(frozen=True)
class CoefficientSet:
    """All coefficient tables of one problem instance.

    n-by-n tables: A, Abar, C, Cbar, Q, Qbar, N1, N1bar; n-by-m: B, Bbar;
    m-by-m: N3, N3bar; per-mark n-by-n: D, Dbar, N2, N2bar; constants G, Gbar.
    """

    A: PiecewiseMatrix
    Abar: PiecewiseMatrix
    B: PiecewiseMatrix
    Bbar: PiecewiseMatrix
    C: PiecewiseMatrix
    Cbar: PiecewiseMatrix
    Q: PiecewiseMatrix
    Qbar: PiecewiseMatrix
    N1: PiecewiseMatrix
    N1bar: PiecewiseMatrix
    N3: PiecewiseMatrix
    N3bar: PiecewiseMatrix
    D: tuple
    Dbar: tuple
    N2: tuple
    N2bar: tuple
    G: np.ndarray
    Gbar: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "G", np.atleast_2d(np.asarray(self.G, dtype=float)))
        object.__setattr__(self, "Gbar", np.atleast_2d(np.asarray(self.Gbar, dtype=float)))
        object.__setattr__(self, "D", tuple(self.D))
        object.__setattr__(self, "Dbar", tuple(self.Dbar))
        object.__setattr__(self, "N2", tuple(self.N2))
        object.__setattr__(self, "N2bar", tuple(self.N2bar))

    @classmethod
    def build(cls, n: int, m: int, horizon: TimeHorizon, num_marks: int, **tables) -> "CoefficientSet":
        """Construct from a partial dict; omitted coefficients default to zero."""

        def table(name, shape):
            entry = tables.pop(name, None)
            if entry is None:
                return PiecewiseMatrix.constant(np.zeros(shape), horizon)
            if isinstance(entry, PiecewiseMatrix):
                return entry
            return PiecewiseMatrix.constant(entry, horizon)

        nn, nm, mm = (n, n), (n, m), (m, m)
        kwargs = dict(
            A=table("A", nn), Abar=table("Abar", nn),
            B=table("B", nm), Bbar=table("Bbar", nm),
            C=table("C", nn), Cbar=table("Cbar", nn),
            Q=table("Q", nn), Qbar=table("Qbar", nn),
            N1=table("N1", nn), N1bar=table("N1bar", nn),
            N3=table("N3", mm), N3bar=table("N3bar", mm),
            D=_mark_tables(tables.pop("D", None), horizon, num_marks, nn, "D"),
            Dbar=_mark_tables(tables.pop("Dbar", None), horizon, num_marks, nn, "Dbar"),
            N2=_mark_tables(tables.pop("N2", None), horizon, num_marks, nn, "N2"),
            N2bar=_mark_tables(tables.pop("N2bar", None), horizon, num_marks, nn, "N2bar"),
            G=np.atleast_2d(np.asarray(tables.pop("G", np.zeros(nn)), dtype=float)),
            Gbar=np.atleast_2d(np.asarray(tables.pop("Gbar", np.zeros(nn)), dtype=float)),
        )
        if tables:
            raise DimensionError(f"unknown coefficient names: {sorted(tables)}")
        return cls(**kwargs)


@dataclass(frozen=True)
class TerminalCondition:
    """Terminal state, realizable per particle from the driving noise.

    kind "deterministic": xi = constant.
    kind "affine": xi = constant + brownian * W(T) + sum_k jumps[k] * Ntilde_k(T),
    where Ntilde_k is the compensated mark-k count over the horizon.
    kind "functional": affine plus brownian_quadratic * (W(T)^2 - (T - t)).
    """

    kind: str
    constant: np.ndarray
    brownian: np.ndarray | None = None
    jumps: np.ndarray | None = None
    brownian_quadratic: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("deterministic", "affine", "functional"):
            raise ValueError(f"unknown terminal kind {self.kind!r}")
        object.__setattr__(self, "constant", np.atleast_1d(np.asarray(self.constant, dtype=float)))
        for name in ("brownian", "jumps", "brownian_quadratic"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, np.asarray(val, dtype=float))
        if self.kind == "deterministic" and (
            self.brownian is not None or self.jumps is not None or self.brownian_quadratic is not None
        ):
            raise ValueError("deterministic terminal condition takes only a constant payload")
        if self.kind == "affine" and self.brownian_quadratic is not None:
            raise ValueError("quadratic loading requires kind 'functional'")

    @property
    def is_deterministic(self) -> bool:
        if self.kind == "deterministic":
            return True
        stochastic = [self.brownian, self.jumps, self.brownian_quadratic]
        return all(v is None or not np.any(v) for v in stochastic)

    def realize(self, noise) -> np.ndarray:
        """Per-particle terminal vectors, shape (N, n) or (1, n) when deterministic."""
        n = self.constant.shape[0]
        if self.is_deterministic:
            return self.constant[None, :].copy()
        w_end = np.sum(noise.dW, axis=0)  # (N,)
        xi = np.broadcast_to(self.constant, (w_end.shape[0], n)).copy()
        if self.brownian is not None and np.any(self.brownian):
            xi += w_end[:, None] * self.brownian[None, :]
        if self.jumps is not None and np.any(self.jumps):
            horizon_len = noise.grid.nodes[-1] - noise.grid.nodes[0]
            comp = np.sum(noise.jump_counts, axis=0) - noise.weights[None, :] * horizon_len
            xi += np.einsum("pk,kj->pj", comp, self.jumps)
        if self.brownian_quadratic is not None and np.any(self.brownian_quadratic):
            horizon_len = noise.grid.nodes[-1] - noise.grid.nodes[0]
            xi += (w_end**2 - horizon_len)[:, None] * self.brownian_quadratic[None, :]
        return xi


@dataclass(frozen=True)
class TimeGrid:
    nodes: np.ndarray  # (M+1,), uniform
    step: float

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        object.__setattr__(self, "nodes", nodes)
        if nodes.size < 3:
            raise ValueError("grid needs at least 2 intervals")

    @property
    def steps(self) -> int:
        return self.nodes.shape[0] - 1

    @property
    def t_start(self) -> float:
        return float(self.nodes[0])

    @property
    def t_end(self) -> float:
        return float(self.nodes[-1])


def build_grid(horizon: TimeHorizon, steps: int) -> TimeGrid:
    """Uniform grid with `steps` intervals over the horizon."""
    if steps < 2:
        raise ValueError(f"steps must be >= 2, got {steps}")
    nodes = horizon.t_start + (horizon.t_end - horizon.t_start) * np.arange(steps + 1) / steps
    nodes[-1] = horizon.t_end
    return TimeGrid(nodes=nodes, step=(horizon.t_end - horizon.t_start) / steps)


@dataclass(frozen=True)
class ProblemSpec:
    n: int
    m: int
    horizon: TimeHorizon
    jumps: JumpMeasure
    coeffs: CoefficientSet
    terminal: TerminalCondition

    def __post_init__(self):
        self._check_dimensions()

    def _check_dimensions(self):
        n, m, K = self.n, self.m, self.jumps.num_marks
        expected = {
            "A": (n, n), "Abar": (n, n), "C": (n, n), "Cbar": (n, n),
            "Q": (n, n), "Qbar": (n, n), "N1": (n, n), "N1bar": (n, n),
            "B": (n, m), "Bbar": (n, m), "N3": (m, m), "N3bar": (m, m),
        }
        for name, shape in expected.items():
            table = getattr(self.coeffs, name)
            if table.shape != shape:
                raise DimensionError(f"{name} has shape {table.shape}, expected {shape}")
        for name in ("D", "Dbar", "N2", "N2bar"):
            tables = getattr(self.coeffs, name)
            if len(tables) != K:
                raise DimensionError(f"{name} must have one table per mark ({K}), got {len(tables)}")
            for k, table in enumerate(tables):
                if table.shape != (n, n):
                    raise DimensionError(f"{name}[{k}] has shape {table.shape}, expected {(n, n)}")
        for name in ("G", "Gbar"):
            mat = getattr(self.coeffs, name)
            if mat.shape != (n, n):
                raise DimensionError(f"{name} has shape {mat.shape}, expected {(n, n)}")
        if self.terminal.constant.shape != (n,):
            raise DimensionError(
                f"terminal constant has shape {self.terminal.constant.shape}, expected {(n,)}"
            )
        for name, shape in (("brownian", (n,)), ("brownian_quadratic", (n,)), ("jumps", (K, n))):
            val = getattr(self.terminal, name)
            if val is not None and val.shape != shape:
                raise DimensionError(f"terminal {name} has shape {val.shape}, expected {shape}")

    def sampled(self, grid: TimeGrid) -> "SampledCoefficients":
        return SampledCoefficients.from_spec(self, grid)


@dataclass(frozen=True)
class SampledCoefficients:
    """Coefficient tables evaluated at every grid node, for the hot loops."""

    grid: TimeGrid
    A: np.ndarray
    Abar: np.ndarray
    B: np.ndarray
    Bbar: np.ndarray
    C: np.ndarray
    Cbar: np.ndarray
    Q: np.ndarray
    Qbar: np.ndarray
    N1: np.ndarray
    N1bar: np.ndarray
    N3: np.ndarray
    N3bar: np.ndarray
    D: np.ndarray      # (M+1, K, n, n)
    Dbar: np.ndarray
    N2: np.ndarray
    N2bar: np.ndarray
    G: np.ndarray
    Gbar: np.ndarray
    weights: np.ndarray  # jump intensities (K,)

    @classmethod
    def from_spec(cls, spec: ProblemSpec, grid: TimeGrid) -> "SampledCoefficients":
        nodes = grid.nodes
        K = spec.jumps.num_marks

        def stack(table):
            return np.stack([table.at(s) for s in nodes])

        def stack_marks(tables):
            if K == 0:
                return np.zeros((nodes.size, 0, spec.n, spec.n))
            return np.stack([[t.at(s) for t in tables] for s in nodes])

        c = spec.coeffs
        return cls(
            grid=grid,
            A=stack(c.A), Abar=stack(c.Abar), B=stack(c.B), Bbar=stack(c.Bbar),
            C=stack(c.C), Cbar=stack(c.Cbar), Q=stack(c.Q), Qbar=stack(c.Qbar),
            N1=stack(c.N1), N1bar=stack(c.N1bar), N3=stack(c.N3), N3bar=stack(c.N3bar),
            D=stack_marks(c.D), Dbar=stack_marks(c.Dbar),
            N2=stack_marks(c.N2), N2bar=stack_marks(c.N2bar),
            G=c.G, Gbar=c.Gbar, weights=spec.jumps.weights,
        )


@dataclass(frozen=True)
class AssumptionReport:
    passed: bool
    delta: float
    violations: tuple = field(default_factory=tuple)


def _is_symmetric(mat: np.ndarray) -> bool:
    scale = 1.0 + np.abs(mat).max(initial=0.0)
    return np.abs(mat - mat.T).max(initial=0.0) <= _SYM_TOL * scale


def _min_eig(mat: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (mat + mat.T)).min())


def validate_assumptions(spec: ProblemSpec, grid: TimeGrid) -> AssumptionReport:
    """Check the standing symmetry, nonnegativity, and positivity assumptions.

    Checks run at every grid node; because coefficients are piecewise
    constant, node checks are exhaustive whenever table breakpoints align
    with grid nodes.  Violations are reported, not raised.
    """
    violations = []
    delta = np.inf
    sampled = spec.sampled(grid)
    weight_families = [
        ("Q", sampled.Q), ("Q+Qbar", sampled.Q + sampled.Qbar),
        ("N1", sampled.N1), ("N1+N1bar", sampled.N1 + sampled.N1bar),
    ]
    for k in range(spec.jumps.num_marks):
        weight_families.append((f"N2[{k}]", sampled.N2[:, k]))
        weight_families.append((f"N2+N2bar[{k}]", sampled.N2[:, k] + sampled.N2bar[:, k]))

    for name, traj in weight_families:
        for i, s in enumerate(grid.nodes):
            mat = traj[i]
            if not _is_symmetric(mat):
                violations.append((f"{name}-symmetric", float(s), f"{name} not symmetric"))
                break
        eigmins = [_min_eig(traj[i]) for i in range(grid.nodes.size)]
        worst = int(np.argmin(eigmins))
        if eigmins[worst] < -1e-12:
            violations.append(
                (f"{name}-nonnegative", float(grid.nodes[worst]),
                 f"{name} not nonnegative (min eigenvalue {eigmins[worst]:.3e})")
            )

    for name, traj in (("N3", sampled.N3), ("N3+N3bar", sampled.N3 + sampled.N3bar)):
        for i, s in enumerate(grid.nodes):
            if not _is_symmetric(traj[i]):
                violations.append((f"{name}-symmetric", float(s), f"{name} not symmetric"))
                break
        eigmins = [_min_eig(traj[i]) for i in range(grid.nodes.size)]
        worst = int(np.argmin(eigmins))
        delta = min(delta, float(np.min(eigmins)))
        if eigmins[worst] <= 0:
            violations.append(
                (f"{name}-positive", float(grid.nodes[worst]),
                 f"{name} not uniformly positive (min eigenvalue {eigmins[worst]:.3e})")
            )

    for name, mat in (("G", sampled.G), ("G+Gbar", sampled.G + sampled.Gbar)):
        if not _is_symmetric(mat):
            violations.append((f"{name}-symmetric", grid.t_start, f"{name} not symmetric"))
        eigmin = _min_eig(mat)
        if eigmin < -1e-12:
            violations.append(
                (f"{name}-nonnegative", grid.t_start,
                 f"{name} not nonnegative (min eigenvalue {eigmin:.3e})")
            )

    return AssumptionReport(passed=not violations, delta=float(delta), violations=tuple(violations))
