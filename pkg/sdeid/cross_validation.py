from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.model_selection import KFold

from sdeid import config
from sdeid.elastic_net import ElasticNetResult, column_scales, elastic_net_fit
from sdeid.errors import ConvergenceError, InvalidArgumentError, RankDeficiencyError
from sdeid.job_manager import JobManager
from sdeid.linalg import restricted_lstsq


@dataclass(frozen=True)
class FoldFit:
    coefficients: np.ndarray
    support: tuple[int, ...]
    error: float
    debiased: bool
    converged: bool


@dataclass(frozen=True)
class CvCell:
    alpha: float
    rho: float
    fold_errors: tuple[float, ...]
    mean_error: float
    se: float
    n_mu: int
    n_sigma: int
    support: tuple[int, ...] = ()
    debiased: bool = True
    converged: bool = True

    @classmethod
    def from_fold_errors(
        cls,
        alpha: float,
        rho: float,
        fold_errors: Sequence[float],
        n_mu: int,
        n_sigma: int,
        **extra,
    ) -> "CvCell":
        errors = np.asarray(fold_errors, dtype=np.float64)
        k = errors.size
        if k < 2:
            raise InvalidArgumentError("A CV cell needs at least two fold errors")
        mean = float(errors.mean())
        se = float(np.sqrt(np.sum((errors - mean) ** 2) / (k * (k - 1))))
        return cls(
            alpha=float(alpha),
            rho=float(rho),
            fold_errors=tuple(float(e) for e in errors),
            mean_error=mean,
            se=se,
            n_mu=int(n_mu),
            n_sigma=int(n_sigma),
            **extra,
        )

    @property
    def n_total(self) -> int:
        return self.n_mu + self.n_sigma


@dataclass(frozen=True)
class SupportCurve:
    kind: str
    sizes: tuple[int, ...]
    delta: tuple[float, ...]
    se: tuple[float, ...]
    n_tilde: int


@dataclass(frozen=True)
class CvReport:
    cells: tuple[CvCell, ...]
    k: int = 0
    alpha_grid: tuple[float, ...] = ()
    rho_grid: tuple[float, ...] = ()
    tolerance: float = 0.0
    notes: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.cells:
            raise InvalidArgumentError("A CV report needs at least one cell")
        object.__setattr__(self, "cells", tuple(self.cells))

    @property
    def best(self) -> CvCell:
        return min(self.cells, key=lambda cell: cell.mean_error)

    @property
    def epsilon(self) -> float:
        best = self.best
        return best.mean_error + best.se

    @property
    def selected(self) -> CvCell:
        bound = self.epsilon + self.tolerance
        qualifying = [cell for cell in self.cells if cell.mean_error <= bound]
        return min(qualifying, key=lambda cell: (cell.n_total, -cell.alpha, -cell.rho))

    def summary(self) -> dict:
        best = self.best
        chosen = self.selected
        curves = delta_vs_support(self)
        return {
            "k": self.k,
            "n_cells": len(self.cells),
            "alpha_star": best.alpha,
            "rho_star": best.rho,
            "epsilon": self.epsilon,
            "tolerance": self.tolerance,
            "alpha_dagger": chosen.alpha,
            "rho_dagger": chosen.rho,
            "selected_mean_error": chosen.mean_error,
            "selected_support": chosen.n_total,
            "n_tilde": {curve.kind: curve.n_tilde for curve in curves.values()},
            **self.notes,
        }


def select_one_se(report: CvReport) -> tuple[float, float]:
    """Simplest cell within one standard error of the minimiser.

    Ties on support go to the larger alpha, then the larger rho.
    """
    chosen = report.selected
    return chosen.alpha, chosen.rho


def _support_curve(kind: str, cells: Sequence[CvCell], size_of, tolerance: float = 0.0) -> SupportCurve:
    groups: dict[int, CvCell] = {}
    for cell in cells:
        n = size_of(cell)
        if n not in groups or cell.mean_error < groups[n].mean_error:
            groups[n] = cell
    sizes = sorted(groups)
    delta = [groups[n].mean_error for n in sizes]
    se = [groups[n].se for n in sizes]
    i_min = int(np.argmin(delta))
    bound = delta[i_min] + se[i_min] + tolerance
    n_tilde = next(n for n, d in zip(sizes, delta) if d <= bound)
    return SupportCurve(kind=kind, sizes=tuple(sizes), delta=tuple(delta), se=tuple(se), n_tilde=int(n_tilde))


def delta_vs_support(report: CvReport) -> dict[str, SupportCurve]:
    return {
        "total": _support_curve("total", report.cells, lambda cell: cell.n_total, report.tolerance),
        "mu": _support_curve("mu", report.cells, lambda cell: cell.n_mu, report.tolerance),
        "sigma": _support_curve("sigma", report.cells, lambda cell: cell.n_sigma, report.tolerance),
    }


def contiguous_folds(n_rows: int, k: int) -> list[tuple[np.ndarray, np.ndarray]]:
    if k < 2:
        raise InvalidArgumentError(f"'k' must be >= 2 (got {k})")
    if n_rows < 2 * k:
        raise InvalidArgumentError(f"{n_rows} rows are too few for {k} folds (need >= {2 * k})")
    splitter = KFold(n_splits=k, shuffle=False)
    return [(train, test) for train, test in splitter.split(np.arange(n_rows))]


def _fit_or_last_iterate(design, target, alpha, rho, scales) -> ElasticNetResult:
    try:
        return elastic_net_fit(design, target, alpha, rho, scales)
    except ConvergenceError as exc:
        return exc.result


def fit_fold(
    design: np.ndarray,
    target: np.ndarray,
    train: np.ndarray,
    test: np.ndarray,
    alpha: float,
    rho: float,
) -> FoldFit:
    """Fit on the training rows, de-bias on the active set, score on the held-out block."""
    g_train = design[train]
    y_train = target[train]
    result = _fit_or_last_iterate(g_train, y_train, alpha, rho, column_scales(g_train))
    support = result.support()
    debiased = True
    if not support:
        coefficients = np.zeros(design.shape[1])
    else:
        try:
            coefficients = restricted_lstsq(g_train, y_train, support)
        except RankDeficiencyError:
            coefficients = result.coefficients.copy()
            debiased = False
    residual = target[test] - design[test] @ coefficients
    error = float(np.sqrt(np.mean(residual * residual)))
    return FoldFit(
        coefficients=coefficients,
        support=support,
        error=error,
        debiased=debiased,
        converged=result.converged,
    )


def cv_time_series(
    design: np.ndarray,
    target: np.ndarray,
    k: int = config.CV_FOLDS,
    alpha_grid: Sequence[float] | None = None,
    rho_grid: Sequence[float] = config.RHO_GRID,
    *,
    n_mu: int | None = None,
    jobs: JobManager | None = None,
    show_progress: bool = False,
) -> CvReport:
    """Contiguous-fold CV over the (alpha, rho) grid.

    Cells come back in grid order (alpha outer, rho inner). A cell's support
    is that of the penalized fit on all rows; n_mu splits it into the drift
    and diffusion blocks.
    """
    design = np.asarray(design, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if design.ndim != 2 or design.shape[0] != target.size:
        raise InvalidArgumentError("'design' and 'target' disagree on the number of rows")
    alphas = tuple(float(a) for a in (config.alpha_grid() if alpha_grid is None else alpha_grid))
    rhos = tuple(float(r) for r in rho_grid)
    if not alphas or not rhos:
        raise InvalidArgumentError("Alpha and rho grids must be non-empty")
    if any(a < 0 for a in alphas) or any(not 0.0 <= r <= 1.0 for r in rhos):
        raise InvalidArgumentError("Alpha values must be >= 0 and rho values in [0, 1]")
    n_mu = design.shape[1] if n_mu is None else int(n_mu)

    folds = contiguous_folds(design.shape[0], k)
    full_scales = column_scales(design)

    def run_cell(params: tuple[float, float]) -> CvCell:
        alpha, rho = params
        fits = [fit_fold(design, target, train, test, alpha, rho) for train, test in folds]
        full = _fit_or_last_iterate(design, target, alpha, rho, full_scales)
        support = full.support()
        return CvCell.from_fold_errors(
            alpha,
            rho,
            [fit.error for fit in fits],
            n_mu=sum(1 for i in support if i < n_mu),
            n_sigma=sum(1 for i in support if i >= n_mu),
            support=support,
            debiased=all(fit.debiased for fit in fits),
            converged=full.converged and all(fit.converged for fit in fits),
        )

    grid = [(alpha, rho) for alpha in alphas for rho in rhos]
    if jobs is not None:
        cells = jobs.map(run_cell, grid, "cv", show_progress=show_progress)
    else:
        cells = [run_cell(params) for params in grid]

    unconverged = sum(1 for cell in cells if not cell.converged)
    not_debiased = sum(1 for cell in cells if not cell.debiased)
    if unconverged:
        logging.warning("%s of %s CV cells used a non-converged fit", unconverged, len(cells))
    if not_debiased:
        logging.warning("%s of %s CV cells fell back to the penalized fit in some fold", not_debiased, len(cells))

    tolerance = config.CV_ROUNDOFF_RTOL * float(np.sqrt(np.mean(target * target)))
    return CvReport(cells=tuple(cells), k=int(k), alpha_grid=alphas, rho_grid=rhos, tolerance=tolerance)
