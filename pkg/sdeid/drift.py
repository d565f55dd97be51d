from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.ndimage import median_filter

from sdeid.errors import (
    DegenerateDiffusionError,
    InvalidArgumentError,
    SimulationBlowupError,
    SingularDiffusionError,
)
from sdeid.library import SparseModel
from sdeid.models import BrownianPath, DriftVector, Measure, TimeGrid


@dataclass(frozen=True, eq=False)
class DriftOdeCoeffs:
    """mu'(x) = a(x) mu(x) + b(x, k), with b using the psi21 estimate of window k."""

    a: Callable[[np.ndarray], np.ndarray]
    b: Callable[[np.ndarray, np.ndarray], np.ndarray]
    psi21_per_window: np.ndarray


def _nonzero_sigma(sigma: np.ndarray, x: np.ndarray) -> None:
    bad = np.flatnonzero(sigma == 0.0)
    if bad.size:
        location = float(np.ravel(x)[bad[0]])
        raise SingularDiffusionError(f"Diffusion vanishes at x={location:.6g}", location=location)


def build_drift_ode(sigma_model: SparseModel, psi21) -> DriftOdeCoeffs:
    sigma_model.check_differentiable()
    psi21 = np.array(psi21, dtype=np.float64).reshape(-1)
    psi21.setflags(write=False)

    def a(x):
        x = np.asarray(x, dtype=np.float64)
        s = sigma_model(x)
        _nonzero_sigma(np.atleast_1d(s), np.atleast_1d(x))
        return sigma_model.derivative(x, 1) / s

    def b(x, k):
        x = np.asarray(x, dtype=np.float64)
        s = sigma_model(x)
        _nonzero_sigma(np.atleast_1d(s), np.atleast_1d(x))
        s1 = sigma_model.derivative(x, 1)
        s2 = sigma_model.derivative(x, 2)
        return (2.0 * psi21[k] + s * s1 * s1 + s * s * s2) / (2.0 * s)

    return DriftOdeCoeffs(a=a, b=b, psi21_per_window=psi21)


def smooth_psi21(values, half_width: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if half_width < 0:
        raise InvalidArgumentError("'half_width' must be >= 0")
    if half_width == 0 or values.size == 0:
        return values.copy()
    return median_filter(values, size=2 * half_width + 1, mode="nearest")


def solve_mu_euler(coeffs: DriftOdeCoeffs, traj_coarse, mu0: float) -> DriftVector:
    """Euler steps in state space along the visited coarse states."""
    states = np.asarray(traj_coarse, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(states)):
        raise InvalidArgumentError("Coarse states must be finite")
    n_windows = states.size - 1
    if coeffs.psi21_per_window.size != n_windows:
        raise InvalidArgumentError(
            f"{coeffs.psi21_per_window.size} psi21 values for {n_windows} windows"
        )

    anchors = states[:-1]
    window_ids = np.arange(n_windows)
    a_vals = np.asarray(coeffs.a(anchors), dtype=np.float64) * np.ones(n_windows)
    b_vals = np.asarray(coeffs.b(anchors, window_ids), dtype=np.float64) * np.ones(n_windows)
    dx = np.diff(states)

    mu = np.empty(n_windows + 1, dtype=np.float64)
    mu[0] = mu0
    for k in range(1, n_windows + 1):
        mu[k] = mu[k - 1] + (a_vals[k - 1] * mu[k - 1] + b_vals[k - 1]) * dx[k - 1]
        if not np.isfinite(mu[k]):
            raise SimulationBlowupError(f"Drift ODE diverged at window {k}", index=k)
    return DriftVector(values=mu, mu0=float(mu0))


def recover_p_increments(
    q_path: BrownianPath,
    drift: DriftVector,
    sigma_vals,
    grid: TimeGrid,
) -> BrownianPath:
    sigma_vals = np.asarray(sigma_vals, dtype=np.float64).reshape(-1)
    n_windows = grid.n_steps
    if q_path.increments.size != n_windows or sigma_vals.size != n_windows:
        raise InvalidArgumentError("Noise, sigma values and grid disagree on the window count")
    if drift.values.size < n_windows:
        raise InvalidArgumentError("Drift vector is shorter than the window count")
    bad = np.flatnonzero(~(sigma_vals > 0.0))
    if bad.size:
        k = int(bad[0])
        raise DegenerateDiffusionError(f"Sigma estimate of window {k} is not positive", window=k)

    ratio = drift.values[:n_windows] / sigma_vals
    increments = q_path.increments - ratio * grid.increments
    logging.debug("Girsanov shift: mean drift/sigma ratio %.6g", float(np.mean(ratio)))
    return BrownianPath(grid, increments, measure=Measure.PHYSICAL, origin=0.0)
