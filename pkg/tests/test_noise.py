"""Unit tests for noise generation and the path-ensemble container."""
import numpy as np
import pytest

import mfbsde_lq as mf
from mfbsde_lq.noise import dump_noise, load_noise


@pytest.fixture(scope="module")
def grid():
    return mf.build_grid(mf.TimeHorizon(0.0, 1.0), 50)


@pytest.fixture(scope="module")
def jumps():
    return mf.JumpMeasure(marks=("up", "down"), weights=np.array([1.0, 0.5]))


def test_shapes(grid, jumps):
    noise = mf.generate_noise(grid, 200, jumps, 0)
    assert noise.dW.shape == (50, 200)
    assert noise.jump_counts.shape == (50, 200, 2)
    assert noise.compensated().shape == (50, 200, 2)
    assert noise.brownian_state().shape == (51, 200)
    assert noise.compensated_state().shape == (51, 200, 2)


def test_reproducible_across_calls(grid, jumps):
    a = mf.generate_noise(grid, 100, jumps, 42)
    b = mf.generate_noise(grid, 100, jumps, 42)
    np.testing.assert_array_equal(a.dW, b.dW)
    np.testing.assert_array_equal(a.jump_counts, b.jump_counts)


def test_seeds_decorrelated(grid, jumps):
    a = mf.generate_noise(grid, 100, jumps, 1)
    b = mf.generate_noise(grid, 100, jumps, 2)
    assert np.max(np.abs(a.dW - b.dW)) > 0


def test_brownian_moments(grid, jumps):
    noise = mf.generate_noise(grid, 100_000, jumps, 7)
    w_end = np.sum(noise.dW, axis=0)
    se = 1.0 / np.sqrt(100_000)
    assert abs(np.mean(w_end)) < 4 * se
    assert abs(np.var(w_end) - 1.0) < 6 * se


def test_jump_counts_poisson_mean(grid, jumps):
    noise = mf.generate_noise(grid, 100_000, jumps, 7)
    totals = np.sum(noise.jump_counts, axis=0)  # (N, K)
    for k, nu in enumerate(jumps.weights):
        se = np.sqrt(nu / 100_000)
        assert abs(np.mean(totals[:, k]) - nu) < 4 * se


def test_compensated_increments_are_centered(grid, jumps):
    noise = mf.generate_noise(grid, 50_000, jumps, 3)
    comp = noise.compensated()
    sums = np.sum(comp, axis=0)
    for k in range(2):
        se = np.std(sums[:, k], ddof=1) / np.sqrt(50_000)
        assert abs(np.mean(sums[:, k])) < 4 * se


def test_state_paths_start_at_zero(grid, jumps):
    noise = mf.generate_noise(grid, 10, jumps, 0)
    assert np.all(noise.brownian_state()[0] == 0.0)
    assert np.all(noise.compensated_state()[0] == 0.0)


def test_empirical_mean_keeps_dims():
    vals = np.arange(12.0).reshape(3, 4)
    out = mf.empirical_mean(vals, axis=0)
    np.testing.assert_allclose(out, vals.mean(axis=0))


def test_dump_load_roundtrip(tmp_path, grid, jumps):
    noise = mf.generate_noise(grid, 37, jumps, 11)
    path = tmp_path / "noise.bin"
    dump_noise(noise, path)
    loaded = load_noise(path, grid, jumps)
    np.testing.assert_array_equal(loaded.dW, noise.dW)
    np.testing.assert_array_equal(loaded.jump_counts, noise.jump_counts)


def test_path_ensemble_validates_grid(grid):
    with pytest.raises(ValueError):
        mf.PathEnsemble(grid=grid, values=np.zeros((3, 2, 1)))
