"""Monte Carlo solvers for the mean-field BSDEs and the forward adjoint SDE.

The backward solvers extract the martingale integrands Z and R by
least-squares projection of one-step martingale increments onto a polynomial
basis in the accumulated noise state, then step the drift explicitly
(first-order weak scheme).  Instances with deterministic terminal data and
deterministic control bypass the regression entirely and integrate the mean
ODE with RK4.

Ensemble linear algebra uses np.einsum / np.sum throughout, which keeps
results bit-identical across BLAS thread counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .noise import NoiseIncrements, PathEnsemble, empirical_mean
from .problem import ProblemSpec, SampledCoefficients, TimeGrid
from .riccati import MatrixTrajectory, rhs_Pi

__all__ = [
    "BsdeDivergenceError",
    "PicardConvergenceError",
    "ControlProcess",
    "StateProcesses",
    "AdjointProcess",
    "PhiSolution",
    "solve_state_bsde",
    "solve_adjoint",
    "solve_phi",
    "solve_hamilton_picard",
    "control_from_adjoint",
    "m2_norm",
]

# Gram-matrix condition number beyond which the regression basis is degraded.
_COND_LIMIT = 1e10


class BsdeDivergenceError(ArithmeticError):
    pass


class PicardConvergenceError(ArithmeticError):
    def __init__(self, residuals):
        self.residuals = list(residuals)
        super().__init__(
            f"Picard iteration did not converge in {len(self.residuals)} iterations "
            f"(last residual {self.residuals[-1]:.3e})"
        )


def _matvec(mat: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    """Apply an (r, c) matrix to an ensemble of c-vectors, shape (N, c) -> (N, r)."""
    return np.einsum("ij,pj->pi", mat, vecs)


def _collapsed(values: np.ndarray) -> np.ndarray:
    """Drop the particle axis to size 1 when all particles agree exactly."""
    if values.shape[1] > 1 and not np.any(np.ptp(values, axis=1)):
        return values[:, :1]
    return values


@dataclass(frozen=True)
class ControlProcess:
    """Admissible control resolved on grid nodes.

    values has shape (M+1, Np, m) with Np == 1 for deterministic controls;
    the value at node i applies on [s_i, s_{i+1}).
    """

    grid: TimeGrid
    values: np.ndarray
    kind: str = "ensemble"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 3 or values.shape[0] != self.grid.steps + 1:
            raise ValueError("control values must have shape (nodes, particles, m)")
        if not np.all(np.isfinite(values)):
            raise ValueError("control values must be finite (admissibility)")
        object.__setattr__(self, "values", _collapsed(values))

    @classmethod
    def deterministic(cls, grid: TimeGrid, values: np.ndarray) -> "ControlProcess":
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        return cls(grid=grid, values=values[:, None, :], kind="deterministic")

    @classmethod
    def zero(cls, grid: TimeGrid, m: int) -> "ControlProcess":
        return cls(grid=grid, values=np.zeros((grid.steps + 1, 1, m)), kind="deterministic")

    @property
    def is_deterministic(self) -> bool:
        return self.values.shape[1] == 1

    def resolve(self, particles: int) -> np.ndarray:
        if self.values.shape[1] == particles:
            return self.values
        if self.values.shape[1] == 1:
            return np.broadcast_to(self.values, (self.values.shape[0], particles, self.values.shape[2]))
        raise ValueError("control ensemble size does not match particle count")

    def __add__(self, other: "ControlProcess") -> "ControlProcess":
        return ControlProcess(grid=self.grid, values=self.values + other.values, kind="ensemble")

    def scaled(self, factor: float) -> "ControlProcess":
        return ControlProcess(grid=self.grid, values=factor * self.values, kind=self.kind)

    def l2_norm(self) -> float:
        """L2(grid x ensemble) norm with trapezoid time quadrature."""
        h = self.grid.step
        sq = empirical_mean(np.sum(self.values ** 2, axis=2), axis=1)
        weights = np.full(sq.shape[0], h)
        weights[0] = weights[-1] = 0.5 * h
        return float(np.sqrt(weights @ sq))


@dataclass(frozen=True)
class StateProcesses:
    Y: PathEnsemble
    Z: PathEnsemble
    R: tuple  # per-mark PathEnsemble
    regression_degraded: bool = False

    def r_values(self) -> np.ndarray:
        """Stacked per-mark R values, shape (M+1, N, K, n)."""
        if not self.R:
            M1, N, n = self.Y.values.shape
            return np.zeros((M1, N, 0, n))
        return np.stack([r.values for r in self.R], axis=2)

    def r_means(self) -> np.ndarray:
        if not self.R:
            M1, _, n = self.Y.values.shape
            return np.zeros((M1, 0, n))
        return np.stack([r.mean for r in self.R], axis=1)


@dataclass(frozen=True)
class AdjointProcess:
    k: PathEnsemble

    @property
    def k_left(self) -> np.ndarray:
        """Discrete realization of the left limit k(s-) on each interval.

        Jump increments over (s_i, s_{i+1}] are applied at node i+1, so the
        node value k[i] is the value of the left-limit process everywhere on
        (s_i, s_{i+1}]: using it in the control formula keeps the control
        predictable without introducing an extra one-node lag.
        """
        return self.k.values


@dataclass(frozen=True)
class PhiSolution:
    phi: PathEnsemble
    beta: PathEnsemble
    Phi: tuple  # per-mark PathEnsemble
    alpha_drift: np.ndarray  # (M+1, Np, n); node M repeats node M-1
    regression_degraded: bool = False

    def phi_values(self) -> np.ndarray:
        if not self.Phi:
            M1, N, n = self.phi.values.shape
            return np.zeros((M1, N, 0, n))
        return np.stack([p.values for p in self.Phi], axis=2)

    def centered_eta(self) -> np.ndarray:
        """eta = phi - E[phi], computed on demand."""
        return self.phi.values - self.phi.mean[:, None, :]


# ---------------------------------------------------------------------------
# Regression machinery
# ---------------------------------------------------------------------------


def _basis_columns(state: np.ndarray, degree: int) -> np.ndarray:
    """Polynomial design matrix in the noise-state variables, shape (N, nb)."""
    N, q = state.shape
    cols = [np.ones(N)]
    if degree >= 1:
        cols.extend(state[:, a] for a in range(q))
    if degree >= 2:
        for a in range(q):
            for b in range(a, q):
                cols.append(state[:, a] * state[:, b])
    return np.stack(cols, axis=1)


def _regress(state: np.ndarray, responses: np.ndarray, degree: int) -> tuple[np.ndarray, bool]:
    """Fitted conditional expectations of responses given the noise state.

    Degrades the basis degree when the Gram matrix is ill-conditioned (for
    example at the initial node, where the noise state is identically zero).
    Returns (fitted values (N, r), degraded flag).
    """
    degraded = False
    for d in range(degree, -1, -1):
        basis = _basis_columns(state, d)
        scale = np.maximum(np.max(np.abs(basis), axis=0), 1e-300)
        basis = basis / scale
        gram = np.einsum("pa,pb->ab", basis, basis)
        eigs = np.linalg.eigvalsh(0.5 * (gram + gram.T))
        if eigs[0] <= 0 or eigs[-1] / eigs[0] > _COND_LIMIT:
            degraded = True
            continue
        rhs = np.einsum("pa,pr->ar", basis, responses)
        coef = np.linalg.solve(gram, rhs)
        return np.einsum("pa,ar->pr", basis, coef), degraded and d < degree
    # Degree 0 fell through only if N == 0, which generate_noise precludes.
    mean = empirical_mean(responses, axis=0)
    return np.broadcast_to(mean, responses.shape).copy(), True


# ---------------------------------------------------------------------------
# Backward solvers
# ---------------------------------------------------------------------------


def _rk4_linear_backward(grid: TimeGrid, matrix_at, forcing, terminal: np.ndarray) -> np.ndarray:
    """Backward RK4 for dX/ds = matrix_at(s) X + forcing(i) on each interval.

    forcing(i) is held constant over [s_i, s_{i+1}) (piecewise-constant
    controls).  terminal has shape (Np, d); returns (M+1, Np, d).
    """
    nodes, h = grid.nodes, grid.step
    out = np.empty((grid.steps + 1,) + terminal.shape)
    out[-1] = terminal
    for i in range(grid.steps - 1, -1, -1):
        s0, s1 = nodes[i], nodes[i + 1]
        sm = 0.5 * (s0 + s1)
        f = forcing(i)

        def rhs(X, s):
            return np.einsum("ij,pj->pi", matrix_at(s), X) + f

        X = out[i + 1]
        k1 = rhs(X, s1)
        k2 = rhs(X - 0.5 * h * k1, sm)
        k3 = rhs(X - 0.5 * h * k2, sm)
        k4 = rhs(X - h * k3, s0)
        out[i] = X - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(out[i])):
            raise BsdeDivergenceError(f"backward ODE non-finite at s={s0:.6g}")
    return out


def solve_state_bsde(
    spec: ProblemSpec,
    u: ControlProcess,
    noise: NoiseIncrements,
    basis_degree: int = 2,
) -> StateProcesses:
    """Solve the controlled state MF-BSDE backward from the realized terminal."""
    grid = noise.grid
    xi = spec.terminal.realize(noise)
    if spec.terminal.is_deterministic and u.is_deterministic:
        return _solve_state_deterministic(spec, u, grid, xi)
    return _solve_state_regression(spec, u, noise, xi, basis_degree)


def _solve_state_deterministic(spec, u, grid, xi) -> StateProcesses:
    c = spec.coeffs
    u_vals = u.values

    def matrix_at(s):
        return c.A.at(s) + c.Abar.at(s)

    def forcing(i):
        # Trapezoidal control convention: the interval sees the average of
        # the endpoint node values, which keeps node-sampled smooth controls
        # second-order consistent with their continuum counterpart.
        s = grid.nodes[i]
        Bt = c.B.at(s) + c.Bbar.at(s)
        return np.einsum("ij,pj->pi", Bt, 0.5 * (u_vals[i] + u_vals[i + 1]))

    Y = _rk4_linear_backward(grid, matrix_at, forcing, xi)
    M1 = grid.steps + 1
    zeros = np.zeros((M1, 1, spec.n))
    R = tuple(PathEnsemble(grid=grid, values=zeros.copy()) for _ in range(spec.jumps.num_marks))
    return StateProcesses(
        Y=PathEnsemble(grid=grid, values=Y),
        Z=PathEnsemble(grid=grid, values=zeros),
        R=R,
    )


def _martingale_responses(resid_vals, dW_i, comp_i, weights, h):
    """Stack Z and per-mark R regression responses from centered next values.

    resid_vals must be the next node values minus their fitted conditional
    expectation; centering removes the O(1/h) variance the raw product
    Y(s_{i+1}) dW/h would carry while leaving the conditional mean unchanged.
    """
    parts = [resid_vals * (dW_i / h)[:, None]]
    for k in range(weights.shape[0]):
        parts.append(resid_vals * (comp_i[:, k] / (weights[k] * h))[:, None])
    return np.concatenate(parts, axis=1)


def _solve_state_regression(spec, u, noise, xi, basis_degree) -> StateProcesses:
    grid = noise.grid
    M, N, n, K, h = grid.steps, noise.particles, spec.n, spec.jumps.num_marks, grid.step
    sc = spec.sampled(grid)
    w_state = noise.brownian_state()
    c_state = noise.compensated_state()
    comp = noise.compensated()
    u_vals = u.resolve(N)

    Y = np.empty((M + 1, N, n))
    Z = np.zeros((M + 1, N, n))
    R = np.zeros((M + 1, N, K, n))
    Y[M] = np.broadcast_to(xi, (N, n))
    degraded = False

    for i in range(M - 1, -1, -1):
        state_vars = np.concatenate([w_state[i][:, None], c_state[i]], axis=1)
        y_tilde, deg_y = _regress(state_vars, Y[i + 1], basis_degree)
        responses = _martingale_responses(Y[i + 1] - y_tilde, noise.dW[i], comp[i],
                                          noise.weights, h)
        fitted, deg_m = _regress(state_vars, responses, basis_degree)
        degraded = degraded or deg_y or deg_m
        Z[i] = fitted[:, :n]
        for k in range(K):
            R[i, :, k, :] = fitted[:, (1 + k) * n:(2 + k) * n]

        drift = _matvec(sc.A[i], y_tilde) + empirical_mean(_matvec(sc.Abar[i], y_tilde), axis=0)
        drift += _matvec(sc.B[i], u_vals[i]) + empirical_mean(_matvec(sc.Bbar[i], u_vals[i]), axis=0)
        drift += _matvec(sc.C[i], Z[i]) + empirical_mean(_matvec(sc.Cbar[i], Z[i]), axis=0)
        for k in range(K):
            nu = noise.weights[k]
            drift += nu * (_matvec(sc.D[i, k], R[i, :, k, :])
                           + empirical_mean(_matvec(sc.Dbar[i, k], R[i, :, k, :]), axis=0))
        Y[i] = y_tilde - h * drift
        if not np.all(np.isfinite(Y[i])):
            raise BsdeDivergenceError(f"state BSDE non-finite at node {i}")

    return StateProcesses(
        Y=PathEnsemble(grid=grid, values=Y),
        Z=PathEnsemble(grid=grid, values=Z),
        R=tuple(PathEnsemble(grid=grid, values=R[:, :, k, :].copy()) for k in range(K)),
        regression_degraded=degraded,
    )


# ---------------------------------------------------------------------------
# Forward adjoint SDE
# ---------------------------------------------------------------------------


def solve_adjoint(
    spec: ProblemSpec,
    state: StateProcesses,
    noise: NoiseIncrements,
    ystart: np.ndarray | None = None,
    factor2_variant: bool = False,
) -> AdjointProcess:
    """Forward Euler-Maruyama for the adjoint MF-SDE started at -G Y(t) - Gbar E[Y(t)].

    factor2_variant restores the doubled N1/N2 integrand loadings as printed
    in one of the source conventions; the default uses the single factor.
    """
    grid = noise.grid
    M, N, n, K, h = grid.steps, noise.particles, spec.n, spec.jumps.num_marks, grid.step
    sc = spec.sampled(grid)
    comp = noise.compensated()
    cfac = 2.0 if factor2_variant else 1.0

    Yv = state.Y.values
    Zv = state.Z.values
    Rv = state.r_values()
    if ystart is None:
        ystart = Yv[0]
    y0 = np.broadcast_to(ystart, (max(N, ystart.shape[0]), n))
    y0_mean = empirical_mean(ystart, axis=0)

    k = np.empty((M + 1, N, n))
    k[0] = -(_matvec(sc.G, y0) + sc.Gbar @ y0_mean)

    def expand(vals):
        return np.broadcast_to(vals, (N, vals.shape[-1]))

    for i in range(M):
        ki = k[i]
        k_mean = empirical_mean(ki, axis=0)
        Yi, Zi = expand(Yv[i]), expand(Zv[i])
        Y_mean, Z_mean = empirical_mean(Yv[i], axis=0), empirical_mean(Zv[i], axis=0)

        drift = -(_matvec(sc.A[i].T, ki) + sc.Abar[i].T @ k_mean
                  + _matvec(sc.Q[i], Yi) + sc.Qbar[i] @ Y_mean)
        load_w = -(_matvec(sc.C[i].T, ki) + sc.Cbar[i].T @ k_mean
                   + cfac * _matvec(sc.N1[i], Zi) + sc.N1bar[i] @ Z_mean)
        k[i + 1] = ki + h * drift + load_w * noise.dW[i][:, None]
        for kk in range(K):
            Rk = expand(Rv[i, :, kk, :]) if Rv.shape[1] == N else expand(Rv[i, :, kk, :])
            R_mean = empirical_mean(Rv[i, :, kk, :], axis=0)
            load_j = -(_matvec(sc.D[i, kk].T, ki) + sc.Dbar[i, kk].T @ k_mean
                       + cfac * _matvec(sc.N2[i, kk], Rk) + sc.N2bar[i, kk] @ R_mean)
            k[i + 1] += load_j * comp[i, :, kk][:, None]
        if not np.all(np.isfinite(k[i + 1])):
            raise BsdeDivergenceError(f"adjoint SDE non-finite at node {i + 1}")

    return AdjointProcess(k=PathEnsemble(grid=grid, values=_collapsed(k)))


# ---------------------------------------------------------------------------
# Auxiliary MF-BSDE for phi
# ---------------------------------------------------------------------------


def solve_phi(
    spec: ProblemSpec,
    P: MatrixTrajectory,
    Pi: MatrixTrajectory,
    noise: NoiseIncrements,
    basis_degree: int = 2,
) -> PhiSolution:
    """Solve the auxiliary decoupling MF-BSDE (terminal value = realized xi)."""
    grid = noise.grid
    xi = spec.terminal.realize(noise)
    if spec.terminal.is_deterministic:
        return _solve_phi_deterministic(spec, P, Pi, grid, xi)
    return _solve_phi_regression(spec, P, Pi, noise, xi, basis_degree)


def _solve_phi_deterministic(spec, P, Pi, grid, xi) -> PhiSolution:
    c = spec.coeffs
    nodes, h = grid.nodes, grid.step
    slopes = np.stack([rhs_Pi(Pi.values[i], P.values[i], nodes[i], spec)
                       for i in range(grid.steps + 1)])

    def matrix_at(s):
        i = int(np.searchsorted(nodes, s) - 1)
        if s <= nodes[0]:
            Pi_here, i = Pi.values[0], 0
        elif np.isclose(s, nodes[min(i + 1, grid.steps)]):
            Pi_here = Pi.values[i + 1]
        elif np.isclose(s, nodes[i]):
            Pi_here = Pi.values[i]
        else:
            from .riccati import _hermite_midpoint
            Pi_here = _hermite_midpoint(Pi.values[i], Pi.values[i + 1], slopes[i], slopes[i + 1], h)
        Qt = c.Q.at(s) + c.Qbar.at(s)
        return c.A.at(s) + c.Abar.at(s) + Pi_here @ Qt

    zero_forcing = np.zeros((1, spec.n))
    phi = _rk4_linear_backward(grid, matrix_at, lambda i: zero_forcing, xi)
    M1 = grid.steps + 1
    zeros = np.zeros((M1, 1, spec.n))
    alpha = np.empty_like(phi)
    for i in range(grid.steps + 1):
        alpha[i] = np.einsum("ij,pj->pi", matrix_at(nodes[min(i, grid.steps - 1)]), phi[i])
    return PhiSolution(
        phi=PathEnsemble(grid=grid, values=phi),
        beta=PathEnsemble(grid=grid, values=zeros),
        Phi=tuple(PathEnsemble(grid=grid, values=zeros.copy()) for _ in range(spec.jumps.num_marks)),
        alpha_drift=alpha,
    )


def _phi_drift_matrices(spec, sc: SampledCoefficients, P: np.ndarray, Pi: np.ndarray, i: int):
    """Per-node coefficient matrices of the phi-equation drift."""
    n, eye = spec.n, np.eye(spec.n)
    M_phi = P[i] @ sc.Q[i] + sc.A[i]
    M_phi_mean = sc.Abar[i] + Pi[i] @ (sc.Q[i] + sc.Qbar[i]) - P[i] @ sc.Q[i]
    inv1 = np.linalg.solve((P[i] @ sc.N1[i] + eye).T, sc.C[i].T).T  # C (P N1 + I)^{-1}
    inv1t = np.linalg.solve((P[i] @ (sc.N1[i] + sc.N1bar[i]) + eye).T,
                            (sc.C[i] + sc.Cbar[i]).T).T
    M_beta = inv1
    M_beta_mean = inv1t - inv1
    M_Phi, M_Phi_mean = [], []
    for k in range(spec.jumps.num_marks):
        inv2 = np.linalg.solve((P[i] @ sc.N2[i, k] + eye).T, sc.D[i, k].T).T
        inv2t = np.linalg.solve((P[i] @ (sc.N2[i, k] + sc.N2bar[i, k]) + eye).T,
                                (sc.D[i, k] + sc.Dbar[i, k]).T).T
        M_Phi.append(inv2)
        M_Phi_mean.append(inv2t - inv2)
    return M_phi, M_phi_mean, M_beta, M_beta_mean, M_Phi, M_Phi_mean


def _solve_phi_regression(spec, P, Pi, noise, xi, basis_degree) -> PhiSolution:
    grid = noise.grid
    M, N, n, K, h = grid.steps, noise.particles, spec.n, spec.jumps.num_marks, grid.step
    sc = spec.sampled(grid)
    w_state = noise.brownian_state()
    c_state = noise.compensated_state()
    comp = noise.compensated()

    phi = np.empty((M + 1, N, n))
    beta = np.zeros((M + 1, N, n))
    Phi = np.zeros((M + 1, N, K, n))
    alpha = np.zeros((M + 1, N, n))
    phi[M] = np.broadcast_to(xi, (N, n))
    degraded = False

    for i in range(M - 1, -1, -1):
        state_vars = np.concatenate([w_state[i][:, None], c_state[i]], axis=1)
        p_tilde, deg_p = _regress(state_vars, phi[i + 1], basis_degree)
        responses = _martingale_responses(phi[i + 1] - p_tilde, noise.dW[i], comp[i],
                                          noise.weights, h)
        fitted, deg_m = _regress(state_vars, responses, basis_degree)
        degraded = degraded or deg_p or deg_m
        beta[i] = fitted[:, :n]
        for k in range(K):
            Phi[i, :, k, :] = fitted[:, (1 + k) * n:(2 + k) * n]

        Mp, Mpm, Mb, Mbm, MPh, MPhm = _phi_drift_matrices(spec, sc, P.values, Pi.values, i)
        drift = _matvec(Mp, p_tilde) + empirical_mean(_matvec(Mpm, p_tilde), axis=0)
        drift += _matvec(Mb, beta[i]) + empirical_mean(_matvec(Mbm, beta[i]), axis=0)
        for k in range(K):
            nu = noise.weights[k]
            drift += nu * (_matvec(MPh[k], Phi[i, :, k, :])
                           + empirical_mean(_matvec(MPhm[k], Phi[i, :, k, :]), axis=0))
        alpha[i] = drift
        phi[i] = p_tilde - h * drift
        if not np.all(np.isfinite(phi[i])):
            raise BsdeDivergenceError(f"phi BSDE non-finite at node {i}")

    beta[M] = beta[M - 1]
    Phi[M] = Phi[M - 1]
    alpha[M] = alpha[M - 1]
    return PhiSolution(
        phi=PathEnsemble(grid=grid, values=phi),
        beta=PathEnsemble(grid=grid, values=beta),
        Phi=tuple(PathEnsemble(grid=grid, values=Phi[:, :, k, :].copy()) for k in range(K)),
        alpha_drift=alpha,
        regression_degraded=degraded,
    )


# ---------------------------------------------------------------------------
# Stationarity control map and the Picard oracle
# ---------------------------------------------------------------------------


def control_from_adjoint(spec: ProblemSpec, grid: TimeGrid, k_values: np.ndarray) -> ControlProcess:
    """Control satisfying the stationarity condition, from the discrete k(s-).

    Built from the centered/mean split of the stationarity condition:
    u - E[u] = -N3^{-1} B^T (k(s-) - E[k(s-)]) and
    E[u] = -(N3+N3bar)^{-1} (B+Bbar)^T E[k(s-)], which together satisfy the
    full condition identically.
    """
    sc = spec.sampled(grid)
    M1 = grid.steps + 1
    k_left = k_values  # node value == discrete left limit, see AdjointProcess
    Np = k_left.shape[1]
    u = np.empty((M1, Np, spec.m))
    for i in range(M1):
        k_mean = empirical_mean(k_left[i], axis=0)
        kc = k_left[i] - k_mean
        uc = -np.linalg.solve(sc.N3[i], np.einsum("ji,pj->ip", sc.B[i], kc)).T
        um = -np.linalg.solve(sc.N3[i] + sc.N3bar[i], (sc.B[i] + sc.Bbar[i]).T @ k_mean)
        u[i] = uc + um
    return ControlProcess(grid=grid, values=u, kind="feedback")


def solve_hamilton_picard(
    spec: ProblemSpec,
    noise: NoiseIncrements,
    max_iter: int = 30,
    tol: float = 1e-3,
    damping: float = 0.5,
    basis_degree: int = 2,
    factor2_variant: bool = False,
):
    """Fixed-point iteration on the fully coupled stochastic Hamilton system.

    Independent oracle for the decoupled pipeline: alternates the
    stationarity control map, the backward state solve, and the forward
    adjoint solve, with damped updates of the adjoint trajectory.  Returns
    (control, state, adjoint, residual history).
    """
    grid = noise.grid
    M1, N, n = grid.steps + 1, noise.particles, spec.n
    k = np.zeros((M1, N, n))
    residuals = []
    for _ in range(max_iter):
        u = control_from_adjoint(spec, grid, k)
        state = solve_state_bsde(spec, u, noise, basis_degree=basis_degree)
        adj = solve_adjoint(spec, state, noise, factor2_variant=factor2_variant)
        k_new = np.broadcast_to(adj.k.values, (M1, N, n))
        diff = np.sqrt(np.max(empirical_mean(np.sum((k_new - k) ** 2, axis=2), axis=1)))
        scale = 1.0 + np.sqrt(np.max(empirical_mean(np.sum(k ** 2, axis=2), axis=1)))
        residuals.append(float(diff / scale))
        k = (1.0 - damping) * k + damping * k_new
        if residuals[-1] <= tol:
            u = control_from_adjoint(spec, grid, k)
            state = solve_state_bsde(spec, u, noise, basis_degree=basis_degree)
            adj = solve_adjoint(spec, state, noise, factor2_variant=factor2_variant)
            return u, state, adj, residuals
    raise PicardConvergenceError(residuals)


def m2_norm(state: StateProcesses, weights: np.ndarray) -> float:
    """Squared solution norm: E[sup |Y|^2] + E int |Z|^2 + E int int |R|^2 nu."""
    grid = state.Y.grid
    h = grid.step
    sup_y = np.max(np.sum(state.Y.values ** 2, axis=2), axis=0)
    total = float(empirical_mean(sup_y, axis=0))
    total += h * float(np.sum(empirical_mean(np.sum(state.Z.values[:-1] ** 2, axis=2), axis=1)))
    for k, r in enumerate(state.R):
        total += weights[k] * h * float(
            np.sum(empirical_mean(np.sum(r.values[:-1] ** 2, axis=2), axis=1))
        )
    return total
