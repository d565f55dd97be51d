from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from sdeid import config
from sdeid.errors import ConvergenceError, InvalidArgumentError, ObjectiveIncreaseError


@dataclass(frozen=True, eq=False)
class ElasticNetResult:
    coefficients: np.ndarray
    normalized_coefficients: np.ndarray
    scales: np.ndarray
    alpha: float
    rho: float
    converged: bool
    n_sweeps: int
    max_change: float
    kkt_residual: float
    objective: float
    objective_monotone: bool

    def support(self, tol: float = config.NONZERO_TOL) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(np.abs(self.normalized_coefficients) > tol))


def column_scales(design: np.ndarray) -> np.ndarray:
    """Per-column RMS; all-zero columns keep scale 1."""
    design = np.asarray(design, dtype=np.float64)
    if design.shape[0] == 0:
        return np.ones(design.shape[1])
    rms = np.sqrt(np.mean(design * design, axis=0))
    return np.where(rms > 0.0, rms, 1.0)


def soft_threshold(value: float, threshold: float) -> float:
    if value > threshold:
        return value - threshold
    if value < -threshold:
        return value + threshold
    return 0.0


_soft_threshold = njit(cache=True, nogil=True)(soft_threshold)


@njit(cache=True, nogil=True)
def _objective(H, c, yy, l1, l2, beta):
    quad = 0.0
    for j in range(beta.size):
        acc = 0.0
        for k in range(beta.size):
            acc += H[j, k] * beta[k]
        quad += beta[j] * acc
    lin = 0.0
    l1_norm = 0.0
    sq_norm = 0.0
    for j in range(beta.size):
        lin += beta[j] * c[j]
        l1_norm += abs(beta[j])
        sq_norm += beta[j] * beta[j]
    return yy - lin + 0.5 * quad + l1 * l1_norm + 0.5 * l2 * sq_norm


@njit(cache=True, nogil=True)
def _coordinate_descent(H, c, yy, l1, l2, beta, tol, max_sweeps, rtol):
    p = beta.size
    grad = np.zeros(p)
    for j in range(p):
        for k in range(p):
            grad[j] += H[j, k] * beta[k]
    obj = _objective(H, c, yy, l1, l2, beta)
    rising_sweep = 0
    max_change = 0.0
    sweeps = 0
    converged = False
    while sweeps < max_sweeps:
        sweeps += 1
        max_change = 0.0
        for j in range(p):
            denom = H[j, j] + l2
            old = beta[j]
            if denom <= 0.0:
                new = 0.0
            else:
                partial = c[j] - (grad[j] - H[j, j] * old)
                new = _soft_threshold(partial, l1) / denom
            delta = new - old
            if delta != 0.0:
                beta[j] = new
                for k in range(p):
                    grad[k] += H[k, j] * delta
                if abs(delta) > max_change:
                    max_change = abs(delta)
        new_obj = _objective(H, c, yy, l1, l2, beta)
        if rising_sweep == 0 and new_obj > obj + rtol * max(1.0, abs(obj)):
            rising_sweep = sweeps
        obj = new_obj
        if max_change < tol:
            converged = True
            break
    return beta, sweeps, max_change, converged, obj, rising_sweep


def kkt_residual(H: np.ndarray, c: np.ndarray, beta: np.ndarray, l1: float, l2: float) -> float:
    """Largest violation of the elastic-net optimality conditions."""
    grad = H @ beta - c + l2 * beta
    active = beta != 0.0
    viol = np.where(
        active,
        np.abs(grad + l1 * np.sign(beta)),
        np.maximum(np.abs(grad) - l1, 0.0),
    )
    return float(np.max(viol)) if viol.size else 0.0


def elastic_net_fit(
    design: np.ndarray,
    target: np.ndarray,
    alpha: float,
    rho: float,
    scales: np.ndarray | None = None,
    *,
    tol: float = config.CD_TOL,
    max_sweeps: int = config.CD_MAX_SWEEPS,
    warm_start: np.ndarray | None = None,
) -> ElasticNetResult:
    """Minimise (1/n)|y - G b|^2 + alpha (rho |b|_1 + (1 - rho)/2 |b|^2).

    Columns are divided by `scales` before the solve (RMS of the design when
    not given) and the coefficients are mapped back to original units.
    """
    design = np.asarray(design, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if design.ndim != 2 or design.shape[0] != target.size:
        raise InvalidArgumentError("'design' and 'target' disagree on the number of rows")
    if design.shape[0] == 0:
        raise InvalidArgumentError("Cannot fit on zero rows")
    if not alpha >= 0.0:
        raise InvalidArgumentError(f"'alpha' must be >= 0 (got {alpha})")
    if not 0.0 <= rho <= 1.0:
        raise InvalidArgumentError(f"'rho' must be in [0, 1] (got {rho})")

    n_rows, n_cols = design.shape
    scales = column_scales(design) if scales is None else np.asarray(scales, dtype=np.float64)
    if scales.shape != (n_cols,) or np.any(scales <= 0.0):
        raise InvalidArgumentError("'scales' must hold one positive factor per column")

    g = design / scales
    H = (2.0 / n_rows) * (g.T @ g)
    c = (2.0 / n_rows) * (g.T @ target)
    yy = float(target @ target) / n_rows
    l1 = alpha * rho
    l2 = alpha * (1.0 - rho)

    beta0 = np.zeros(n_cols) if warm_start is None else np.asarray(warm_start, dtype=np.float64) * scales
    beta, sweeps, max_change, converged, obj, rising_sweep = _coordinate_descent(
        np.ascontiguousarray(H),
        c,
        yy,
        l1,
        l2,
        beta0.copy(),
        float(tol),
        int(max_sweeps),
        config.CD_MONOTONE_RTOL,
    )

    result = ElasticNetResult(
        coefficients=beta / scales,
        normalized_coefficients=beta,
        scales=scales,
        alpha=float(alpha),
        rho=float(rho),
        converged=bool(converged),
        n_sweeps=int(sweeps),
        max_change=float(max_change),
        kkt_residual=kkt_residual(H, c, beta, l1, l2),
        objective=float(obj),
        objective_monotone=rising_sweep == 0,
    )
    if rising_sweep:
        raise ObjectiveIncreaseError(
            f"Elastic-net objective increased in sweep {rising_sweep} (alpha={alpha:.3g}, rho={rho:.3g})",
            sweep=rising_sweep,
            result=result,
        )
    if not converged:
        raise ConvergenceError(
            f"Coordinate descent did not converge in {sweeps} sweeps "
            f"(alpha={alpha:.3g}, rho={rho:.3g}, last change {max_change:.3g})",
            result=result,
        )
    return result
