"""Backward integration of the two decoupling Riccati matrix ODEs.

P governs the centered part of the adjoint-to-state relationship, Pi the mean
part.  Both satisfy terminal condition 0 at t_end and are integrated backward
with classical fixed-step RK4; each step output is symmetrized to suppress
asymmetry drift.  The inverses appearing in the right-hand sides are guarded
by a scale-aware singularity check.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .problem import ProblemSpec, TimeGrid

__all__ = [
    "RiccatiSingularityError",
    "RiccatiDivergenceError",
    "MatrixTrajectory",
    "RiccatiPair",
    "rhs_P",
    "rhs_Pi",
    "solve_P",
    "solve_Pi",
    "solve_riccati",
    "riccati_residual",
    "riccati_to_csv",
]

# A factor counts as singular when its smallest singular value drops below
# this fraction of (1 + its norm).
SINGULARITY_RTOL = 1e-10


class RiccatiSingularityError(ArithmeticError):
    def __init__(self, time: float, factor: str):
        self.time = time
        self.factor = factor
        super().__init__(f"factor {factor} numerically singular at s={time:.6g}")


class RiccatiDivergenceError(ArithmeticError):
    def __init__(self, time: float, what: str = "Riccati trajectory"):
        self.time = time
        super().__init__(f"{what} non-finite at s={time:.6g}")


@dataclass(frozen=True)
class MatrixTrajectory:
    grid: TimeGrid
    values: np.ndarray  # (M+1, n, n)

    def __post_init__(self):
        if self.values.shape[0] != self.grid.steps + 1:
            raise ValueError("one matrix per grid node required")

    def at_node(self, i: int) -> np.ndarray:
        return self.values[i]


@dataclass(frozen=True)
class RiccatiPair:
    P: MatrixTrajectory
    Pi: MatrixTrajectory
    max_residual_P: float
    max_residual_Pi: float
    min_inv_margin: float


def _guarded_solve(factor: np.ndarray, rhs: np.ndarray, s: float, name: str) -> np.ndarray:
    smin = np.linalg.svd(factor, compute_uv=False)[-1]
    if smin < SINGULARITY_RTOL * (1.0 + np.linalg.norm(factor)):
        raise RiccatiSingularityError(s, name)
    return np.linalg.solve(factor, rhs)


def rhs_P(P: np.ndarray, s: float, spec: ProblemSpec) -> np.ndarray:
    """dP/ds of the centered Riccati equation at time s."""
    c = spec.coeffs
    A, B, C, Q = c.A.at(s), c.B.at(s), c.C.at(s), c.Q.at(s)
    N1, N3 = c.N1.at(s), c.N3.at(s)
    eye = np.eye(spec.n)
    out = P @ A.T + A @ P + P @ Q @ P
    out -= B @ _guarded_solve(N3, B.T, s, "N3")
    out -= C @ _guarded_solve(P @ N1 + eye, P, s, "P*N1+I") @ C.T
    for k, nu in enumerate(spec.jumps.weights):
        Dk, N2k = c.D[k].at(s), c.N2[k].at(s)
        out -= nu * (Dk @ _guarded_solve(P @ N2k + eye, P, s, f"P*N2[{k}]+I") @ Dk.T)
    return out


def rhs_Pi(Pi: np.ndarray, P: np.ndarray, s: float, spec: ProblemSpec) -> np.ndarray:
    """dPi/ds of the mean-part Riccati equation at time s."""
    c = spec.coeffs
    At = c.A.at(s) + c.Abar.at(s)
    Bt = c.B.at(s) + c.Bbar.at(s)
    Ct = c.C.at(s) + c.Cbar.at(s)
    Qt = c.Q.at(s) + c.Qbar.at(s)
    N1t = c.N1.at(s) + c.N1bar.at(s)
    N3t = c.N3.at(s) + c.N3bar.at(s)
    eye = np.eye(spec.n)
    out = Pi @ At.T + At @ Pi + Pi @ Qt @ Pi
    out -= Bt @ _guarded_solve(N3t, Bt.T, s, "N3+N3bar")
    out -= Ct @ _guarded_solve(P @ N1t + eye, P, s, "P*(N1+N1bar)+I") @ Ct.T
    for k, nu in enumerate(spec.jumps.weights):
        Dt = c.D[k].at(s) + c.Dbar[k].at(s)
        N2t = c.N2[k].at(s) + c.N2bar[k].at(s)
        out -= nu * (Dt @ _guarded_solve(P @ N2t + eye, P, s, f"P*(N2+N2bar)[{k}]+I") @ Dt.T)
    return out


def _rk4_backward(grid: TimeGrid, rhs, terminal: np.ndarray, what: str) -> np.ndarray:
    """Integrate dX/ds = rhs(X, s) backward from X(t_end) = terminal."""
    nodes, h = grid.nodes, grid.step
    values = np.empty((grid.steps + 1,) + terminal.shape)
    values[-1] = terminal
    for i in range(grid.steps - 1, -1, -1):
        s1, s0 = nodes[i + 1], nodes[i]
        sm = 0.5 * (s0 + s1)
        X = values[i + 1]
        k1 = rhs(X, s1, i + 1)
        k2 = rhs(X - 0.5 * h * k1, sm, None)
        k3 = rhs(X - 0.5 * h * k2, sm, None)
        k4 = rhs(X - h * k3, s0, i)
        step = X - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        values[i] = 0.5 * (step + step.T)
        if not np.all(np.isfinite(values[i])):
            raise RiccatiDivergenceError(s0, what)
    return values


def solve_P(spec: ProblemSpec, grid: TimeGrid) -> MatrixTrajectory:
    """Backward RK4 for P with P(t_end) = 0, symmetrized per step."""
    terminal = np.zeros((spec.n, spec.n))
    values = _rk4_backward(grid, lambda X, s, _i: rhs_P(X, s, spec), terminal, "P")
    return MatrixTrajectory(grid=grid, values=values)


def _hermite_midpoint(x0, x1, f0, f1, h):
    """Cubic-Hermite value at the interval midpoint (preserves RK4 order)."""
    return 0.5 * (x0 + x1) + 0.125 * h * (f0 - f1)


def solve_Pi(spec: ProblemSpec, grid: TimeGrid, P: MatrixTrajectory) -> MatrixTrajectory:
    """Backward RK4 for Pi with Pi(t_end) = 0.

    P at RK4 interior stages is interpolated by cubic Hermite using
    rhs_P-consistent slopes so P's interpolation error does not degrade the
    integrator's fourth order.
    """
    nodes, h = grid.nodes, grid.step
    slopes = np.stack([rhs_P(P.values[i], nodes[i], spec) for i in range(grid.steps + 1)])

    def rhs(X, s, node_index):
        if node_index is not None:
            P_here = P.values[node_index]
        else:
            i = int(np.searchsorted(nodes, s) - 1)
            i = min(max(i, 0), grid.steps - 1)
            P_here = _hermite_midpoint(P.values[i], P.values[i + 1], slopes[i], slopes[i + 1], h)
        return rhs_Pi(X, P_here, s, spec)

    terminal = np.zeros((spec.n, spec.n))
    values = _rk4_backward(grid, rhs, terminal, "Pi")
    return MatrixTrajectory(grid=grid, values=values)


def _inverse_margin(spec: ProblemSpec, grid: TimeGrid, P: np.ndarray, Pi: np.ndarray) -> float:
    """Smallest singular value over the grid among all required inverse factors."""
    sampled = spec.sampled(grid)
    eye = np.eye(spec.n)
    margin = np.inf

    def upd(mat):
        nonlocal margin
        margin = min(margin, float(np.linalg.svd(mat, compute_uv=False)[-1]))

    for i in range(grid.steps + 1):
        upd(P[i] @ sampled.N1[i] + eye)
        upd(P[i] @ (sampled.N1[i] + sampled.N1bar[i]) + eye)
        for k in range(spec.jumps.num_marks):
            upd(P[i] @ sampled.N2[i, k] + eye)
            upd(P[i] @ (sampled.N2[i, k] + sampled.N2bar[i, k]) + eye)
    upd(eye + sampled.G @ P[0])
    upd(eye + (sampled.G + sampled.Gbar) @ Pi[0])
    return margin


def riccati_residual(pair: RiccatiPair, spec: ProblemSpec) -> tuple[float, float]:
    """Max Frobenius defect of both equations via central differences."""
    grid = pair.P.grid
    nodes, h = grid.nodes, grid.step
    res_P = res_Pi = 0.0
    for i in range(1, grid.steps):
        dP = (pair.P.values[i + 1] - pair.P.values[i - 1]) / (2.0 * h)
        dPi = (pair.Pi.values[i + 1] - pair.Pi.values[i - 1]) / (2.0 * h)
        res_P = max(res_P, float(np.linalg.norm(dP - rhs_P(pair.P.values[i], nodes[i], spec))))
        res_Pi = max(
            res_Pi,
            float(np.linalg.norm(dPi - rhs_Pi(pair.Pi.values[i], pair.P.values[i], nodes[i], spec))),
        )
    return res_P, res_Pi


def solve_riccati(spec: ProblemSpec, grid: TimeGrid) -> RiccatiPair:
    """Solve both equations and certify residuals and inverse margins."""
    P = solve_P(spec, grid)
    Pi = solve_Pi(spec, grid, P)
    margin = _inverse_margin(spec, grid, P.values, Pi.values)
    if margin <= 0:
        raise RiccatiSingularityError(grid.t_start, "inverse margin")
    pair = RiccatiPair(P=P, Pi=Pi, max_residual_P=0.0, max_residual_Pi=0.0, min_inv_margin=margin)
    res_P, res_Pi = riccati_residual(pair, spec)
    return RiccatiPair(P=P, Pi=Pi, max_residual_P=res_P, max_residual_Pi=res_Pi,
                       min_inv_margin=margin)


def riccati_to_csv(pair: RiccatiPair) -> str:
    """Rows (s, row, col, P_value, Pi_value) for every node and entry."""
    buf = io.StringIO()
    buf.write("s,row,col,P_value,Pi_value\n")
    n = pair.P.values.shape[1]
    for i, s in enumerate(pair.P.grid.nodes):
        for r in range(n):
            for c in range(n):
                buf.write(f"{float(s)!r},{r},{c},"
                          f"{float(pair.P.values[i, r, c])!r},"
                          f"{float(pair.Pi.values[i, r, c])!r}\n")
    return buf.getvalue()
