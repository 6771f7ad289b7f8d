"""BSDE solvers: ODE oracles, an exact affine benchmark, and the Picard loop."""
import numpy as np
import pytest
from scipy.integrate import solve_ivp

import mfbsde_lq as mf


def _det_control(grid, m, fn):
    vals = np.stack([np.full((1, m), fn(s)) for s in grid.nodes])
    return mf.ControlProcess(grid=grid, values=vals, kind="open-loop")


# ---------------------------------------------------------------------------
# Control container
# ---------------------------------------------------------------------------


def test_control_l2_norm_trapezoid():
    grid = mf.build_grid(mf.TimeHorizon(0.0, 1.0), 400)
    u = _det_control(grid, 1, lambda s: s)
    # ||s||_{L2[0,1]} = 1/sqrt(3); trapezoid rule is second order
    assert u.l2_norm() == pytest.approx(1.0 / np.sqrt(3.0), abs=1e-5)


def test_control_algebra():
    grid = mf.build_grid(mf.TimeHorizon(0.0, 1.0), 10)
    u = _det_control(grid, 2, lambda s: 1.0)
    v = u.scaled(2.0)
    w = u + v
    np.testing.assert_allclose(w.values, 3.0 * u.values)
    assert u.is_deterministic
    np.testing.assert_allclose(u.resolve(5).shape, (11, 5, 2))


# ---------------------------------------------------------------------------
# Deterministic state solver against an ODE integrator
# ---------------------------------------------------------------------------


def test_state_bsde_deterministic_oracle(scalar_det_spec):
    spec = scalar_det_spec
    grid = mf.build_grid(spec.horizon, 200)
    u = _det_control(grid, 1, np.sin)
    noise = mf.generate_noise(grid, 1, spec.jumps, 0)
    state = mf.solve_state_bsde(spec, u, noise)

    at, bt = 0.3 + 0.1, 0.8 + 0.2  # A+Abar, B+Bbar of the fixture

    def rhs(s, y):
        return at * y + bt * np.sin(s)

    sol = solve_ivp(rhs, (1.0, 0.0), [1.0], t_eval=grid.nodes[::-1],
                    rtol=1e-11, atol=1e-13)
    ref = sol.y[0][::-1]
    err = np.max(np.abs(state.Y.values[:, 0, 0] - ref))
    assert err < 5e-5  # node-sampled control costs O(h^2)
    assert np.max(np.abs(state.Z.values)) == 0.0


def test_state_bsde_linearity(jump2_spec):
    spec = jump2_spec
    grid = mf.build_grid(spec.horizon, 30)
    noise = mf.generate_noise(grid, 300, spec.jumps, 1)
    ua = _det_control(grid, 1, np.cos)
    ub = _det_control(grid, 1, lambda s: s * s)
    u0 = mf.ControlProcess.zero(grid, 1)
    Ya = mf.solve_state_bsde(spec, ua, noise).Y.values
    Yb = mf.solve_state_bsde(spec, ub, noise).Y.values
    Yab = mf.solve_state_bsde(spec, ua + ub, noise).Y.values
    Y0 = mf.solve_state_bsde(spec, u0, noise).Y.values
    np.testing.assert_allclose(Yab, Ya + Yb - Y0, atol=1e-9)


# ---------------------------------------------------------------------------
# Regression solver against an exactly known affine solution
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def affine_benchmark():
    """dY = 0.5 Y ds + Z dW + R dmu with affine terminal value.

    The exact solution is Y(s) = e^{-0.5 (1-s)} (0.3 + 0.4 W(s) + 0.2 C(s)),
    Z(s) = 0.4 e^{-0.5 (1-s)}, R(s) = 0.2 e^{-0.5 (1-s)} where C is the
    compensated mark count.
    """
    doc = {
        "n": 1, "m": 1,
        "horizon": {"t_start": 0.0, "t_end": 1.0},
        "jumps": {"marks": ["u"], "weights": [1.0]},
        "coefficients": {"A": 0.5, "N3": 1.0},
        "terminal": {"kind": "affine", "constant": [0.3],
                     "brownian": [0.4], "jumps": [[0.2]]},
    }
    spec = mf.parse_spec(doc)
    grid = mf.build_grid(spec.horizon, 50)
    noise = mf.generate_noise(grid, 3000, spec.jumps, 3)
    return spec, grid, noise


def test_regression_solver_affine_exact(affine_benchmark):
    spec, grid, noise = affine_benchmark
    u = mf.ControlProcess.zero(grid, 1)
    state = mf.solve_state_bsde(spec, u, noise)
    fac = np.exp(-0.5 * (1.0 - grid.nodes))[:, None, None]
    W = noise.brownian_state()[..., None]
    C = noise.compensated_state()
    Y_exact = fac * (0.3 + 0.4 * W + 0.2 * C)
    Z_exact = 0.4 * fac * np.ones_like(W)
    R_exact = 0.2 * fac * np.ones_like(W)

    def rms(err):
        return float(np.sqrt(np.mean(err ** 2)))

    assert rms(state.Y.values - Y_exact) < 0.05
    assert rms(state.Z.values[:-1] - Z_exact[:-1]) < 0.10
    assert rms(state.R[0].values[:-1] - R_exact[:-1]) < 0.30


def test_regression_terminal_matches_realization(affine_benchmark):
    spec, grid, noise = affine_benchmark
    u = mf.ControlProcess.zero(grid, 1)
    state = mf.solve_state_bsde(spec, u, noise)
    xi = spec.terminal.realize(noise)
    np.testing.assert_allclose(state.Y.values[-1], xi, atol=1e-12)


# ---------------------------------------------------------------------------
# Auxiliary phi equation, deterministic reduction
# ---------------------------------------------------------------------------


def test_phi_deterministic_reduction(scalar_det_spec):
    spec = scalar_det_spec
    grid = mf.build_grid(spec.horizon, 400)
    pair = mf.solve_riccati(spec, grid)
    noise = mf.generate_noise(grid, 1, spec.jumps, 0)
    phi = mf.solve_phi(spec, pair.P, pair.Pi, noise)
    assert np.max(np.abs(phi.beta.values)) == 0.0

    # With deterministic xi, phi solves dphi/ds = [A+Abar + Pi (Q+Qbar)] phi.
    pi_nodes = pair.Pi.values[:, 0, 0]

    def rhs(s, y):
        pi = np.interp(s, grid.nodes, pi_nodes)
        return (0.4 + pi * 1.3) * y  # A+Abar = 0.4, Q+Qbar = 1.3

    sol = solve_ivp(rhs, (1.0, 0.0), [1.0], t_eval=grid.nodes[::-1],
                    rtol=1e-11, atol=1e-13)
    ref = sol.y[0][::-1]
    err = np.max(np.abs(phi.phi.values[:, 0, 0] - ref))
    assert err < 1e-6


# ---------------------------------------------------------------------------
# Adjoint, stationarity control, and the Picard fixed point
# ---------------------------------------------------------------------------


def test_control_from_adjoint_formula(scalar_det_spec):
    spec = scalar_det_spec
    grid = mf.build_grid(spec.horizon, 8)
    kv = np.linspace(-1.0, 1.0, 9)[:, None, None] * np.ones((9, 4, 1))
    kv[:, 1:, :] *= 1.5  # make the ensemble non-degenerate
    u = mf.control_from_adjoint(spec, grid, kv)
    sc = spec.sampled(grid)
    for i in (0, 4, 8):
        km = kv[i].mean(axis=0)
        kc = kv[i] - km
        expect = (-(sc.B[i].T @ kc.T / sc.N3[i][0, 0]).T
                  - (sc.B[i] + sc.Bbar[i]).T @ km / (sc.N3[i] + sc.N3bar[i])[0, 0])
        np.testing.assert_allclose(u.values[i], expect, atol=1e-12)


def test_adjoint_initial_coupling(scalar_det_spec):
    spec = scalar_det_spec
    grid = mf.build_grid(spec.horizon, 50)
    noise = mf.generate_noise(grid, 1, spec.jumps, 0)
    u = mf.ControlProcess.zero(grid, 1)
    state = mf.solve_state_bsde(spec, u, noise)
    adj = mf.solve_adjoint(spec, state, noise)
    y0 = state.Y.values[0]
    expect = -(0.5 * y0 + 0.2 * y0.mean(axis=0))  # -G Y(t) - Gbar E[Y(t)]
    np.testing.assert_allclose(adj.k.values[0], expect, atol=1e-12)


def test_k_left_is_node_value(scalar_det_spec):
    grid = mf.build_grid(scalar_det_spec.horizon, 5)
    kv = np.arange(6.0)[:, None, None] * np.ones((6, 1, 1))
    adj = mf.AdjointProcess(k=mf.PathEnsemble(grid=grid, values=kv))
    np.testing.assert_array_equal(adj.k_left, kv)


def test_picard_matches_pipeline_deterministic(scalar_det_spec):
    spec = scalar_det_spec
    grid = mf.build_grid(spec.horizon, 100)
    noise = mf.generate_noise(grid, 1, spec.jumps, 0)
    solution = mf.solve_problem(spec, noise=noise)
    u_p, state_p, _, residuals = mf.solve_hamilton_picard(spec, noise)
    assert residuals[-1] <= 1e-3
    gap = np.max(np.abs(u_p.values - solution.u.values))
    assert gap < 5e-3
    y_gap = np.max(np.abs(state_p.Y.values - solution.state.Y.values))
    assert y_gap < 5e-3
