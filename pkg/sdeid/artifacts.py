from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from sdeid import config
from sdeid.cross_validation import CvCell, CvReport, SupportCurve
from sdeid.errors import InvalidArgumentError
from sdeid.models import PSI_NAMES, BrownianPath, DiffusionEstimate, PsiEstimate, TimeGrid, Trajectory

CACHE_VERSION = 1


# JSON

def write_json(path: Path, data: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")


def read_json(path: Path) -> dict:
    return json.loads(path.read_text(encoding="utf-8"))


# CSV

def write_csv(path: Path, frame: pd.DataFrame) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(
        path,
        index=False,
        float_format=config.CSV_FLOAT_FORMAT,
        lineterminator="\n",
        encoding="utf-8",
    )


def trajectory_frame(traj: Trajectory) -> pd.DataFrame:
    return pd.DataFrame({"t": traj.grid.times, "value": traj.values})


def noise_frame(path: BrownianPath) -> pd.DataFrame:
    return pd.DataFrame({"t": path.grid.times[:-1], "increment": path.increments})


def read_trajectory_csv(path: Path) -> Trajectory:
    if not path.exists():
        raise InvalidArgumentError(f"Trajectory file not found: {path}")
    frame = pd.read_csv(path, float_precision="round_trip")
    missing = {"t", "value"} - set(frame.columns)
    if missing:
        raise InvalidArgumentError(f"Trajectory CSV {path} lacks column(s): {', '.join(sorted(missing))}")
    times = frame["t"].to_numpy(dtype=np.float64)
    values = frame["value"].to_numpy(dtype=np.float64)
    return Trajectory(TimeGrid.from_times(times), values)


def diffusion_frame(est: DiffusionEstimate) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "k": np.arange(est.sub.n_windows),
            "t": est.anchor_times,
            "x": est.anchors,
            "sigma_hat": est.sigma_values,
            "qv": est.qv_windows,
        }
    )


def psi_frame(estimates: Sequence[PsiEstimate], anchor_times: np.ndarray) -> pd.DataFrame:
    data: dict[str, object] = {
        "k": [est.window for est in estimates],
        "t": np.asarray(anchor_times, dtype=np.float64),
    }
    for name in PSI_NAMES:
        data[name] = [getattr(est, name) for est in estimates]
    data["residual_rms"] = [est.residual_rms for est in estimates]
    data["cond"] = [est.condition_number for est in estimates]
    return pd.DataFrame(data)


def drift_frame(
    times: np.ndarray,
    states: np.ndarray,
    mu_hat: np.ndarray,
    delta_bq: np.ndarray,
    delta_bp: np.ndarray,
) -> pd.DataFrame:
    n = len(delta_bq)
    return pd.DataFrame(
        {
            "k": np.arange(n),
            "t": times[:n],
            "x": states[:n],
            "mu_hat": mu_hat[:n],
            "delta_bq": delta_bq,
            "delta_bp": delta_bp,
        }
    )


def cv_surface_frame(report: CvReport) -> pd.DataFrame:
    rows = []
    for cell in report.cells:
        row = {
            "alpha": cell.alpha,
            "rho": cell.rho,
            "mean_error": cell.mean_error,
            "se": cell.se,
            "n_mu": cell.n_mu,
            "n_sigma": cell.n_sigma,
        }
        for j, err in enumerate(cell.fold_errors, start=1):
            row[f"fold_{j}"] = err
        rows.append(row)
    return pd.DataFrame(rows)


def support_curves_frame(curves: dict[str, SupportCurve]) -> pd.DataFrame:
    rows = []
    for kind, curve in curves.items():
        for n, delta, se in zip(curve.sizes, curve.delta, curve.se):
            rows.append(
                {
                    "kind": kind,
                    "n": n,
                    "delta": delta,
                    "se": se,
                    "lower": delta - se,
                    "upper": delta + se,
                    "n_tilde": curve.n_tilde,
                }
            )
    return pd.DataFrame(rows, columns=["kind", "n", "delta", "se", "lower", "upper", "n_tilde"])


# Stage cache

def stage_cache_key(stage: str, params: dict) -> str:
    payload = {"stage": stage, "params": params, "v": CACHE_VERSION}
    encoded = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=True, default=str)
    return hashlib.sha256(encoded.encode("utf-8")).hexdigest()


def stage_cache_path(output_dir: Path, stage: str) -> Path:
    return output_dir / config.CACHE_DIRNAME / f"{stage}.npz"


def save_stage_cache(path: Path, key: str, **arrays: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(path, cache_key=np.array(key), **arrays)


def load_stage_cache(path: Path, expected_key: str) -> dict[str, np.ndarray] | None:
    if not path.exists():
        return None
    try:
        with np.load(path, allow_pickle=False) as data:
            cached_key = data["cache_key"].item() if "cache_key" in data.files else ""
            if cached_key != expected_key:
                return None
            return {name: data[name] for name in data.files if name != "cache_key"}
    except Exception as exc:
        logging.warning("Ignoring unreadable stage cache %s: %s", path, exc)
        return None


# Failure marker

def partial_marker_path(output_dir: Path) -> Path:
    return output_dir / config.PARTIAL_MARKER


def write_partial_marker(output_dir: Path, stage: str, error: str, hint: str = "") -> None:
    write_json(partial_marker_path(output_dir), {"stage": stage, "error": error, "hint": hint})


def clear_partial_marker(output_dir: Path) -> None:
    partial_marker_path(output_dir).unlink(missing_ok=True)


def cv_report_to_arrays(report: CvReport, n_cols: int) -> dict[str, np.ndarray]:
    support_mask = np.zeros((len(report.cells), n_cols), dtype=bool)
    for row, cell in enumerate(report.cells):
        support_mask[row, list(cell.support)] = True
    return {
        "alpha": np.array([cell.alpha for cell in report.cells]),
        "rho": np.array([cell.rho for cell in report.cells]),
        "fold_errors": np.array([cell.fold_errors for cell in report.cells]),
        "n_mu": np.array([cell.n_mu for cell in report.cells], dtype=np.int64),
        "n_sigma": np.array([cell.n_sigma for cell in report.cells], dtype=np.int64),
        "support": support_mask,
        "debiased": np.array([cell.debiased for cell in report.cells]),
        "converged": np.array([cell.converged for cell in report.cells]),
        "k": np.array(report.k),
        "alpha_grid": np.array(report.alpha_grid),
        "rho_grid": np.array(report.rho_grid),
        "tolerance": np.array(report.tolerance),
    }


def cv_report_from_arrays(arrays: dict[str, np.ndarray]) -> CvReport:
    cells = []
    for row in range(arrays["alpha"].size):
        cells.append(
            CvCell.from_fold_errors(
                float(arrays["alpha"][row]),
                float(arrays["rho"][row]),
                arrays["fold_errors"][row],
                n_mu=int(arrays["n_mu"][row]),
                n_sigma=int(arrays["n_sigma"][row]),
                support=tuple(int(i) for i in np.flatnonzero(arrays["support"][row])),
                debiased=bool(arrays["debiased"][row]),
                converged=bool(arrays["converged"][row]),
            )
        )
    return CvReport(
        cells=tuple(cells),
        k=int(arrays["k"]),
        alpha_grid=tuple(float(a) for a in arrays["alpha_grid"]),
        rho_grid=tuple(float(r) for r in arrays["rho_grid"]),
        tolerance=float(arrays["tolerance"]),
    )


def cv_report_json(report: CvReport) -> dict:
    return {
        "summary": report.summary(),
        "cells": [
            {
                "alpha": cell.alpha,
                "rho": cell.rho,
                "fold_errors": list(cell.fold_errors),
                "mean_error": cell.mean_error,
                "se": cell.se,
                "n_mu": cell.n_mu,
                "n_sigma": cell.n_sigma,
                "support": list(cell.support),
                "debiased": cell.debiased,
                "converged": cell.converged,
            }
            for cell in report.cells
        ],
    }
