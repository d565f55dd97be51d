from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from sdeid import config
from sdeid.cross_validation import CvReport, cv_time_series
from sdeid.elastic_net import ElasticNetResult, elastic_net_fit
from sdeid.errors import ConvergenceError, EmptyModelError, InvalidArgumentError, RankDeficiencyError
from sdeid.job_manager import JobManager
from sdeid.library import FunctionLibrary, SparseModel
from sdeid.linalg import restricted_lstsq


@dataclass(frozen=True, eq=False)
class SsisdeDesign:
    matrix: np.ndarray
    target: np.ndarray
    lib_mu: FunctionLibrary
    lib_sigma: FunctionLibrary

    @property
    def n_mu(self) -> int:
        return len(self.lib_mu)

    @property
    def names(self) -> list[str]:
        return [f"mu:{name}" for name in self.lib_mu.names] + [f"sigma:{name}" for name in self.lib_sigma.names]

    def split(self, coefficients) -> tuple[SparseModel, SparseModel]:
        coefficients = np.asarray(coefficients, dtype=np.float64)
        return (
            SparseModel(self.lib_mu, coefficients[: self.n_mu]),
            SparseModel(self.lib_sigma, coefficients[self.n_mu :]),
        )


@dataclass(frozen=True, eq=False)
class IdentificationResult:
    mu_model: SparseModel
    sigma_model: SparseModel
    mse: float
    cv_report: CvReport
    alpha: float
    rho: float
    penalized: ElasticNetResult
    debiased: bool

    def to_json(self) -> dict:
        return {
            "mu": self.mu_model.to_json(),
            "sigma": self.sigma_model.to_json(),
            "mu_expression": self.mu_model.describe(),
            "sigma_expression": self.sigma_model.describe(),
            "in_sample_mse": self.mse,
            "alpha_dagger": self.alpha,
            "rho_dagger": self.rho,
            "debiased": self.debiased,
            "cv": self.cv_report.summary(),
        }


def build_ssisde_design(
    traj_coarse,
    dt,
    dbp,
    lib_mu: FunctionLibrary,
    lib_sigma: FunctionLibrary,
) -> SsisdeDesign:
    """Rows [theta_mu(X_i) dt_i, theta_sigma(X_i) dB_i], target X_{i+1} - X_i."""
    states = np.asarray(traj_coarse, dtype=np.float64).reshape(-1)
    dt = np.asarray(dt, dtype=np.float64).reshape(-1)
    dbp = np.asarray(dbp, dtype=np.float64).reshape(-1)
    n_rows = states.size - 1
    if n_rows < 1 or dt.size != n_rows or dbp.size != n_rows:
        raise InvalidArgumentError(
            f"Expected {n_rows} steps and noise increments for {states.size} states "
            f"(got {dt.size} and {dbp.size})"
        )
    left = states[:-1]
    blocks = [lib_mu.evaluate(left) * dt[:, None], lib_sigma.evaluate(left) * dbp[:, None]]
    matrix = np.hstack(blocks)
    return SsisdeDesign(matrix=matrix, target=np.diff(states), lib_mu=lib_mu, lib_sigma=lib_sigma)


def fit_models(design: SsisdeDesign, alpha: float, rho: float) -> tuple[ElasticNetResult, SparseModel, SparseModel]:
    result = elastic_net_fit(design.matrix, design.target, alpha, rho)
    mu, sigma = design.split(result.coefficients)
    return result, mu, sigma


def restricted_ls_debias(
    design: SsisdeDesign,
    target,
    support: Sequence[int],
) -> tuple[SparseModel, SparseModel]:
    if len(support) == 0:
        raise EmptyModelError("De-biasing needs a non-empty support")
    coefficients = restricted_lstsq(design.matrix, target, support, names=design.names)
    return design.split(coefficients)


def in_sample_mse(design: SsisdeDesign, mu: SparseModel, sigma: SparseModel) -> float:
    coefficients = np.concatenate([mu.coefficients, sigma.coefficients])
    residual = design.target - design.matrix @ coefficients
    return float(np.mean(residual * residual))


def ssisde_identify(
    design: SsisdeDesign,
    *,
    k: int = config.CV_FOLDS,
    alpha_grid: Sequence[float] | None = None,
    rho_grid: Sequence[float] = config.RHO_GRID,
    jobs: JobManager | None = None,
    show_progress: bool = False,
    report: CvReport | None = None,
) -> IdentificationResult:
    """Cross-validate, pick the 1-SE cell, refit on all rows and de-bias.

    A precomputed `report` skips the cross-validation.
    """
    if report is None:
        report = cv_time_series(
            design.matrix,
            design.target,
            k,
            alpha_grid,
            rho_grid,
            n_mu=design.n_mu,
            jobs=jobs,
            show_progress=show_progress,
        )
    chosen = report.selected
    alpha, rho = chosen.alpha, chosen.rho
    logging.info(
        "1-SE selection: alpha=%.3g rho=%.2f (support %s, mean error %.3g, threshold %.3g)",
        alpha,
        rho,
        chosen.n_total,
        chosen.mean_error,
        report.epsilon,
    )

    try:
        penalized = elastic_net_fit(design.matrix, design.target, alpha, rho)
    except ConvergenceError as exc:
        logging.warning("Final elastic-net fit did not converge; using the last iterate")
        penalized = exc.result

    support = penalized.support()
    debiased = True
    if not support:
        logging.warning("Selected model is empty (alpha=%s, rho=%s)", alpha, rho)
        mu, sigma = design.split(np.zeros(design.matrix.shape[1]))
    else:
        try:
            mu, sigma = restricted_ls_debias(design, design.target, support)
        except RankDeficiencyError as exc:
            logging.warning("De-biasing failed (%s); keeping the penalized coefficients", exc)
            mu, sigma = design.split(penalized.coefficients)
            debiased = False

    mse = in_sample_mse(design, mu, sigma)
    logging.info("Identified mu(x) = %s, sigma(x) = %s, in-sample MSE %.3e", mu.describe(), sigma.describe(), mse)
    return IdentificationResult(
        mu_model=mu,
        sigma_model=sigma,
        mse=mse,
        cv_report=report,
        alpha=alpha,
        rho=rho,
        penalized=penalized,
        debiased=debiased,
    )
