from __future__ import annotations

import logging

import numpy as np

from sdeid import config
from sdeid.errors import (
    DegenerateDiffusionError,
    InsufficientResolutionError,
    InvalidArgumentError,
    SingularDiffusionError,
    UnsupportedModelError,
)
from sdeid.library import FunctionLibrary, SparseModel
from sdeid.linalg import restricted_lstsq
from sdeid.models import BrownianPath, DiffusionEstimate, Measure, SubPartition, TimeGrid, Trajectory

FINE_Q_MODES = ("window", "model")


def make_sub_partition(fine_grid: TimeGrid, n_windows: int) -> SubPartition:
    n_steps = fine_grid.n_steps
    if n_windows < 1:
        raise InvalidArgumentError(f"'n_windows' must be >= 1 (got {n_windows})")
    if n_steps % n_windows != 0:
        raise InvalidArgumentError(f"N={n_steps} is not a multiple of M={n_windows}")
    step = n_steps // n_windows
    return SubPartition(fine_grid, np.arange(0, n_steps + 1, step, dtype=np.int64))


def _check_trajectory(traj: Trajectory, sub: SubPartition) -> None:
    if traj.grid.n_steps != sub.fine_grid.n_steps or not np.array_equal(traj.grid.times, sub.fine_grid.times):
        raise InvalidArgumentError("Trajectory and sub-partition use different grids")


def estimate_window_qv(traj: Trajectory, sub: SubPartition) -> np.ndarray:
    _check_trajectory(traj, sub)
    steps = sub.steps_per_window
    short = np.flatnonzero(steps < 2)
    if short.size:
        raise InsufficientResolutionError(
            f"Window {int(short[0])} holds {int(steps[short[0]])} fine step(s); at least 2 are required"
        )
    dx = traj.increments
    return np.add.reduceat(dx * dx, sub.window_indices[:-1])


def estimate_sigma_vector(traj: Trajectory, sub: SubPartition) -> DiffusionEstimate:
    qv = estimate_window_qv(traj, sub)
    sigma = np.sqrt(qv / sub.window_lengths)
    zero = tuple(int(k) for k in np.flatnonzero(qv == 0.0))
    if zero:
        logging.warning("Zero quadratic variation in %s of %s windows (first: %s)", len(zero), qv.size, zero[0])
    anchors = traj.values[sub.window_indices[:-1]]
    return DiffusionEstimate(sub=sub, sigma_values=sigma, qv_windows=qv, anchors=anchors, zero_windows=zero)


def reconstruct_q_increments(traj: Trajectory, est: DiffusionEstimate) -> BrownianPath:
    sub = est.sub
    _check_trajectory(traj, sub)
    if est.zero_windows:
        k = est.zero_windows[0]
        raise DegenerateDiffusionError(f"Window {k} has zero quadratic variation", window=k)
    coarse_dx = np.diff(traj.values[sub.window_indices])
    increments = np.sqrt(sub.window_lengths) * coarse_dx / np.sqrt(est.qv_windows)
    return BrownianPath(sub.coarse_grid, increments, measure=Measure.MARTINGALE, origin=0.0)


def _lamperti_increments(values: np.ndarray, dt: np.ndarray, sigma_model: SparseModel) -> np.ndarray:
    """Increments of F(X) + 1/2 int sigma'(X) dt with F' = 1/sigma.

    This is the Ito identity dB = dX / sigma(X) written without the
    squared-increment term, so the in-window state is an exact function of
    the returned path. F uses Simpson's rule on every fine step.
    """
    left, right = values[:-1], values[1:]
    mid = 0.5 * (left + right)
    s_left, s_mid, s_right = sigma_model(left), sigma_model(mid), sigma_model(right)
    bad = np.flatnonzero(~((s_left > 0.0) & (s_mid > 0.0) & (s_right > 0.0)))
    if bad.size:
        i = int(bad[0])
        points = (left[i], mid[i], right[i])
        location = float(next(x for x, s in zip(points, (s_left[i], s_mid[i], s_right[i])) if not s > 0.0))
        raise SingularDiffusionError(
            f"Fitted sigma is not positive at x={location:.6g} (fine step {i})",
            location=location,
        )
    lamperti = (right - left) / 6.0 * (1.0 / s_left + 4.0 / s_mid + 1.0 / s_right)
    slope = sigma_model.derivative(left, 1) + sigma_model.derivative(right, 1)
    return lamperti + 0.25 * slope * dt


def reconstruct_fine_q_path(
    traj: Trajectory,
    est: DiffusionEstimate,
    mode: str = config.FINE_Q_MODE,
    sigma_model: SparseModel | None = None,
) -> BrownianPath:
    """Fine-step martingale increments for the in-window signature rows.

    "window" divides every fine increment of window k by the window's
    sigma estimate, so inside a window the state is linear in the path.
    "model" integrates the fitted diffusion along each step (see
    `_lamperti_increments`); the window rows then carry the curvature terms
    of the fitted sigma.
    """
    sub = est.sub
    _check_trajectory(traj, sub)
    if mode == "window":
        if est.zero_windows:
            k = est.zero_windows[0]
            raise DegenerateDiffusionError(f"Window {k} has zero quadratic variation", window=k)
        increments = traj.increments / np.repeat(est.sigma_values, sub.steps_per_window)
    elif mode == "model":
        if sigma_model is None:
            raise InvalidArgumentError("Mode 'model' needs a fitted sigma model")
        sigma_model.check_differentiable()
        increments = _lamperti_increments(traj.values, traj.grid.increments, sigma_model)
    else:
        raise InvalidArgumentError(f"Unknown fine path mode '{mode}' (expected one of {FINE_Q_MODES})")
    return BrownianPath(traj.grid, increments, measure=Measure.MARTINGALE, origin=0.0)


def fit_sigma_stlsq(
    x: np.ndarray,
    sigma_hat: np.ndarray,
    library: FunctionLibrary,
    threshold: float = config.STLSQ_THRESHOLD,
    max_iters: int = config.STLSQ_MAX_ITERS,
) -> SparseModel:
    """Sequentially thresholded least squares over the library columns."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(sigma_hat, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise InvalidArgumentError("'x' and 'sigma_hat' must have the same length")
    if threshold < 0:
        raise InvalidArgumentError("'threshold' must be >= 0")
    if max_iters < 1:
        raise InvalidArgumentError("'max_iters' must be >= 1")
    if x.size < len(library):
        raise InvalidArgumentError(f"STLSQ needs at least {len(library)} pairs (got {x.size})")

    theta = library.evaluate(x)
    if not np.all(np.isfinite(theta)):
        raise InvalidArgumentError("Library columns are not finite on the supplied states")

    names = library.names
    active = np.ones(len(library), dtype=bool)
    coefficients = restricted_lstsq(theta, y, np.flatnonzero(active), names=names)
    for iteration in range(max_iters):
        keep = active & (np.abs(coefficients) >= threshold)
        if np.array_equal(keep, active):
            break
        active = keep
        if not active.any():
            logging.warning("STLSQ threshold %s removed every term; returning the empty model", threshold)
            return SparseModel.zeros(library)
        coefficients = restricted_lstsq(theta, y, np.flatnonzero(active), names=names)
    else:
        logging.info("STLSQ stopped after %s iterations without a stable support", max_iters)
    return SparseModel(library, coefficients)


def eval_model_derivatives(model: SparseModel, x, order: int):
    if order not in (0, 1, 2):
        raise UnsupportedModelError(f"Derivative order {order} is not supported (0, 1 or 2)")
    values = model.derivative(x, order)
    if np.ndim(x) == 0:
        return float(values)
    return values
