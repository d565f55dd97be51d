from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numba import njit

from sdeid.errors import InvalidArgumentError, SimulationBlowupError
from sdeid.library import SparseModel
from sdeid.models import BrownianPath, Measure, SubPartition, TimeGrid, Trajectory


@dataclass(frozen=True, eq=False)
class CoefficientPair:
    mu: SparseModel
    sigma: SparseModel

    @classmethod
    def from_expressions(cls, mu: str, sigma: str) -> "CoefficientPair":
        return cls(SparseModel.from_expression(mu, name="mu"), SparseModel.from_expression(sigma, name="sigma"))


def make_uniform_grid(t0: float, T: float, n_steps: int) -> TimeGrid:
    if not (np.isfinite(t0) and np.isfinite(T)) or T <= t0:
        raise InvalidArgumentError(f"'T' must be > 't0' (got t0={t0}, T={T})")
    if int(n_steps) != n_steps or n_steps < 1:
        raise InvalidArgumentError(f"'n_steps' must be a positive integer (got {n_steps})")
    n_steps = int(n_steps)
    times = t0 + (T - t0) * (np.arange(n_steps + 1, dtype=np.float64) / n_steps)
    times[-1] = T
    return TimeGrid(times, uniform=True)


def rng_for(seed: int, stream: int = 0) -> np.random.Generator:
    """Stream s matches SeedSequence(seed).spawn(s + 1)[s]."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(stream),))))


def sample_brownian(grid: TimeGrid, seed: int, stream: int = 0) -> BrownianPath:
    rng = rng_for(seed, stream)
    increments = rng.standard_normal(grid.n_steps) * np.sqrt(grid.increments)
    return BrownianPath(grid, increments, measure=Measure.PHYSICAL, origin=0.0)


def coarse_grain_increments(path: BrownianPath, sub: SubPartition) -> BrownianPath:
    if path.grid.n_steps != sub.fine_grid.n_steps:
        raise InvalidArgumentError("Noise and sub-partition live on different grids")
    summed = np.add.reduceat(path.increments, sub.window_indices[:-1])
    return BrownianPath(sub.coarse_grid, summed, measure=path.measure, origin=path.origin)


@njit(cache=True, nogil=True)
def _horner(coeffs: np.ndarray, x: float) -> float:
    acc = 0.0
    for j in range(coeffs.size - 1, -1, -1):
        acc = acc * x + coeffs[j]
    return acc


@njit(cache=True, nogil=True)
def _em_polynomial(x0, dt, dB, mu_coeffs, sigma_coeffs, check_sigma):
    n = dB.size
    out = np.empty(n + 1)
    out[0] = x0
    x = x0
    for i in range(n):
        s = _horner(sigma_coeffs, x)
        if check_sigma and not s > 0.0:
            return out, i
        x = x + _horner(mu_coeffs, x) * dt[i] + s * dB[i]
        if not np.isfinite(x):
            return out, i + 1
        out[i + 1] = x
    return out, -1


def _em_generic(x0, dt, dB, mu: SparseModel, sigma: SparseModel, check_sigma: bool):
    n = dB.size
    out = np.empty(n + 1)
    out[0] = x0
    x = float(x0)
    for i in range(n):
        s = float(sigma(x))
        if check_sigma and not s > 0.0:
            return out, i
        x = x + float(mu(x)) * dt[i] + s * dB[i]
        if not np.isfinite(x):
            return out, i + 1
        out[i + 1] = x
    return out, -1


def simulate_euler_maruyama(coeffs: CoefficientPair, x0: float, noise: BrownianPath) -> Trajectory:
    """Itô Euler-Maruyama on the noise grid.

    A diffusion that is identically zero gives a pure Euler ODE solve; any
    other diffusion must stay strictly positive along the path.
    """
    if noise.measure != Measure.PHYSICAL:
        raise InvalidArgumentError("Euler-Maruyama needs physical-measure noise")
    if not np.isfinite(x0):
        raise InvalidArgumentError("'x0' must be finite")

    dt = noise.grid.increments
    dB = np.ascontiguousarray(noise.increments)
    check_sigma = not coeffs.sigma.is_empty
    mu_power = coeffs.mu.power_coefficients()
    sigma_power = coeffs.sigma.power_coefficients()

    if mu_power is not None and sigma_power is not None:
        values, fail = _em_polynomial(float(x0), dt, dB, mu_power, sigma_power, check_sigma)
    else:
        logging.debug("Non-polynomial coefficients, using the generic Euler-Maruyama loop")
        values, fail = _em_generic(float(x0), dt, dB, coeffs.mu, coeffs.sigma, check_sigma)

    if fail >= 0:
        raise SimulationBlowupError(
            f"Simulation left the admissible region at index {fail} "
            f"(t={noise.grid.times[min(fail, noise.grid.n_steps)]:.6g})",
            index=int(fail),
        )
    return Trajectory(noise.grid, values)


def ito_to_stratonovich_drift(coeffs: CoefficientPair) -> Callable[[np.ndarray], np.ndarray]:
    coeffs.sigma.check_differentiable()
    mu, sigma = coeffs.mu, coeffs.sigma

    def stratonovich_drift(x):
        return mu(x) - 0.5 * sigma(x) * sigma.derivative(x, 1)

    return stratonovich_drift
