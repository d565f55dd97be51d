from __future__ import annotations

import logging

import numpy as np

from sdeid import config
from sdeid.errors import InsufficientResolutionError, InvalidArgumentError
from sdeid.job_manager import JobManager
from sdeid.library import SparseModel
from sdeid.models import BrownianPath, PsiEstimate, SignatureFeatures, SubPartition, Trajectory


def _window_bounds(window, n_steps: int) -> tuple[int, int]:
    start, end = (int(window[0]), int(window[1]))
    if start < 0 or end > n_steps or end <= start:
        raise InvalidArgumentError(f"Window ({start}, {end}) is outside the fine grid [0, {n_steps}]")
    instants = end - start + 1
    if instants < config.SIGNATURE_MIN_INSTANTS:
        raise InsufficientResolutionError(
            f"Window ({start}, {end}) has {instants} instants; "
            f"at least {config.SIGNATURE_MIN_INSTANTS} are needed"
        )
    return start, end


def compute_signature_features(q_path: BrownianPath, window) -> SignatureFeatures:
    """Level-3 iterated Stratonovich integrals of (t, B) on one window.

    Time and noise are taken relative to the window anchor; the mixed
    integrals use midpoint sums and the pure noise integrals their closed
    forms.
    """
    start, end = _window_bounds(window, q_path.grid.n_steps)
    times = q_path.grid.times[start : end + 1]
    dB = q_path.increments[start:end]

    tau = times - times[0]
    b = np.concatenate(([0.0], np.cumsum(dB)))
    dtau = np.diff(tau)

    i12 = np.concatenate(([0.0], np.cumsum(0.5 * (tau[:-1] + tau[1:]) * dB)))
    i21 = np.concatenate(([0.0], np.cumsum(0.5 * (b[:-1] + b[1:]) * dtau)))

    return SignatureFeatures(
        times=times,
        i1=tau,
        ib=b,
        i12=i12,
        i21=i21,
        i22=0.5 * b * b,
        i222=b * b * b / 6.0,
    )


def _solve_svd(design: np.ndarray, target: np.ndarray, ridge: float | None) -> tuple[np.ndarray, float, float]:
    u, s, vt = np.linalg.svd(design, full_matrices=False)
    s_max = float(s[0]) if s.size else 0.0
    s_min = float(s[-1]) if s.size else 0.0
    cond = s_max / s_min if s_min > 0.0 else float("inf")
    lam = config.WINDOW_RIDGE_FACTOR * s_max * s_max if ridge is None else float(ridge)

    uty = u.T @ target
    if lam > 0.0:
        gain = s / (s * s + lam)
    else:
        cutoff = max(design.shape) * np.finfo(np.float64).eps * s_max
        gain = np.zeros_like(s)
        mask = s > cutoff
        gain[mask] = 1.0 / s[mask]
    return vt.T @ (gain * uty), cond, lam


def fit_window_psi(
    traj: Trajectory,
    feats: SignatureFeatures,
    window,
    ridge: float | None = None,
    *,
    k: int = 0,
    drop_i222: bool = False,
) -> PsiEstimate:
    """Regress X_u - X_s on the window features.

    ridge=None applies the default relative ridge; ridge=0 solves by the
    pseudo-inverse, so columns that vanish get a zero coefficient.
    """
    if ridge is not None and ridge < 0:
        raise InvalidArgumentError("'ridge' must be >= 0")
    start, end = _window_bounds(window, traj.grid.n_steps)
    if feats.i1.size != end - start + 1:
        raise InvalidArgumentError("Features were computed on a different window")

    design = feats.matrix(drop_i222=drop_i222)
    target = traj.values[start + 1 : end + 1] - traj.values[start]
    coefficients, cond, lam = _solve_svd(design, target, ridge)
    if drop_i222:
        coefficients = np.append(coefficients, 0.0)

    residual = target - design @ coefficients[: design.shape[1]]
    residual_rms = float(np.sqrt(np.mean(residual * residual)))
    ill = bool(lam == 0.0 and cond > config.ILL_CONDITIONED)

    return PsiEstimate(
        window=int(k),
        psi1=float(coefficients[0]),
        psi2=float(coefficients[1]),
        psi12=float(coefficients[2]),
        psi21=float(coefficients[3]),
        psi22=float(coefficients[4]),
        psi222=float(coefficients[5]),
        residual_rms=residual_rms,
        condition_number=cond,
        ill_conditioned=ill,
    )


def estimate_psi(
    traj: Trajectory,
    q_fine: BrownianPath,
    sub: SubPartition,
    *,
    ridge: float | None = None,
    drop_i222: bool = False,
    jobs: JobManager | None = None,
) -> list[PsiEstimate]:
    """Window-by-window psi fits, returned in window order."""

    def fit(k: int) -> PsiEstimate:
        window = sub.window(k)
        feats = compute_signature_features(q_fine, window)
        return fit_window_psi(traj, feats, window, ridge, k=k, drop_i222=drop_i222)

    windows = range(sub.n_windows)
    estimates = jobs.map(fit, windows, "psi") if jobs is not None else [fit(k) for k in windows]

    ill = sum(1 for est in estimates if est.ill_conditioned)
    if ill:
        logging.warning("%s of %s window regressions are ill-conditioned", ill, len(estimates))
    return estimates


def coefficient_identities(mu: SparseModel, sigma: SparseModel, x) -> dict[str, np.ndarray]:
    """Theoretical psi values of a known (mu, sigma) pair at states x."""
    x = np.asarray(x, dtype=np.float64)
    m = mu(x)
    m1 = mu.derivative(x, 1)
    s = sigma(x)
    s1 = sigma.derivative(x, 1)
    s2 = sigma.derivative(x, 2)
    return {
        "psi1": -0.5 * s * s1,
        "psi2": s,
        "psi12": -0.5 * s * s1 * s1,
        "psi21": m1 * s - m * s1 - 0.5 * s * s1 * s1 - 0.5 * s * s * s2,
        "psi22": s * s1,
    }


def theoretical_psi21(mu: SparseModel, sigma: SparseModel, x) -> np.ndarray:
    return coefficient_identities(mu, sigma, x)["psi21"]
