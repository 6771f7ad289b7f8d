"""Reproducible Brownian/Poisson increment generation and ensemble utilities.

All randomness flows through counter-based Philox streams keyed off a single
64-bit seed, so regenerating with the same (seed, grid, N, jumps) is
bit-identical regardless of thread schedule.  Reductions over particles use
numpy's pairwise summation, which is deterministic and independent of BLAS
thread counts.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .problem import JumpMeasure, TimeGrid

__all__ = [
    "NoiseIncrements",
    "PathEnsemble",
    "generate_noise",
    "compensated_increment",
    "empirical_mean",
    "dump_noise",
    "load_noise",
]

_MAGIC = b"MFLQNOIS"


@dataclass(frozen=True)
class NoiseIncrements:
    grid: TimeGrid
    particles: int
    dW: np.ndarray           # (M, N) Brownian increments over [s_i, s_{i+1}]
    jump_counts: np.ndarray  # (M, N, K) Poisson counts per mark
    weights: np.ndarray      # (K,) jump intensities
    seed: int

    @property
    def num_marks(self) -> int:
        return self.jump_counts.shape[2]

    def compensated(self) -> np.ndarray:
        """Compensated jump masses counts - nu_k * h, shape (M, N, K)."""
        return self.jump_counts - self.weights[None, None, :] * self.grid.step

    def brownian_state(self) -> np.ndarray:
        """W(s_i) per particle at every node, shape (M+1, N); W(t_start) = 0."""
        out = np.zeros((self.grid.steps + 1, self.particles))
        np.cumsum(self.dW, axis=0, out=out[1:])
        return out

    def compensated_state(self) -> np.ndarray:
        """Accumulated compensated counts at every node, shape (M+1, N, K)."""
        M, N, K = self.jump_counts.shape
        out = np.zeros((M + 1, N, K))
        np.cumsum(self.compensated(), axis=0, out=out[1:])
        return out


def generate_noise(grid: TimeGrid, particles: int, jumps: JumpMeasure, seed: int) -> NoiseIncrements:
    """Draw all Brownian and Poisson increments for an N-particle ensemble."""
    if particles < 1:
        raise ValueError("need at least one particle")
    child_w, child_j = np.random.SeedSequence(seed).spawn(2)
    rng_w = np.random.Generator(np.random.Philox(child_w))
    M, K, h = grid.steps, jumps.num_marks, grid.step
    dW = rng_w.normal(0.0, np.sqrt(h), size=(M, particles))
    if K:
        rng_j = np.random.Generator(np.random.Philox(child_j))
        counts = rng_j.poisson(lam=jumps.weights * h, size=(M, particles, K)).astype(float)
    else:
        counts = np.zeros((M, particles, 0))
    return NoiseIncrements(
        grid=grid, particles=particles, dW=dW, jump_counts=counts,
        weights=jumps.weights.copy(), seed=int(seed),
    )


def compensated_increment(counts: np.ndarray, jumps: JumpMeasure, h: float) -> np.ndarray:
    """Discrete compensated measure mass counts_k - nu_k * h per mark."""
    if h <= 0:
        raise ValueError("step must be positive")
    counts = np.asarray(counts, dtype=float)
    return counts - jumps.weights * h


def empirical_mean(values: np.ndarray, axis: int = 0) -> np.ndarray:
    """Arithmetic ensemble mean with deterministic (pairwise) summation."""
    values = np.asarray(values)
    if values.shape[axis] == 0:
        raise ValueError("empirical mean of an empty ensemble")
    return np.mean(values, axis=axis)


@dataclass(frozen=True)
class PathEnsemble:
    """Node-indexed particle trajectories plus their per-node empirical means."""

    grid: TimeGrid
    values: np.ndarray  # (M+1, N, d)
    mean: np.ndarray = None  # (M+1, d)

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError("values must have shape (nodes, particles, dim)")
        if self.values.shape[0] != self.grid.steps + 1:
            raise ValueError("one value per grid node required")
        if self.mean is None:
            object.__setattr__(self, "mean", empirical_mean(self.values, axis=1))

    @property
    def particles(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]


def dump_noise(noise: NoiseIncrements, path) -> None:
    """Binary replay dump: magic + (seed, M, N, K) + dW + counts, little-endian."""
    M, N, K = noise.jump_counts.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<qqqq", noise.seed, M, N, K))
        fh.write(noise.dW.astype("<f8").tobytes())
        fh.write(noise.jump_counts.astype("<f8").tobytes())


def load_noise(path, grid: TimeGrid, jumps: JumpMeasure) -> NoiseIncrements:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError("not a noise dump")
        seed, M, N, K = struct.unpack("<qqqq", fh.read(32))
        if M != grid.steps or K != jumps.num_marks:
            raise ValueError("dump dimensions do not match grid/jump measure")
        dW = np.frombuffer(fh.read(8 * M * N), dtype="<f8").reshape(M, N).copy()
        counts = np.frombuffer(fh.read(8 * M * N * K), dtype="<f8").reshape(M, N, K).copy()
    return NoiseIncrements(grid=grid, particles=N, dW=dW, jump_counts=counts,
                           weights=jumps.weights.copy(), seed=seed)
