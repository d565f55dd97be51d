from __future__ import annotations

import os
from pathlib import Path

import numpy as np

REPO_ROOT = Path(__file__).resolve().parent.parent
PACKAGE_ROOT = Path(__file__).resolve().parent

# Output / storage
OUTPUT_DIR_ENV = "SDEID_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = REPO_ROOT / "runs" / "latest"
CACHE_DIRNAME = "cache"
PARTIAL_MARKER = ".partial"
CSV_FLOAT_FORMAT = "%.17g"

# Simulation grid
DEFAULT_T0 = 0.0
DEFAULT_T = 1.0
DEFAULT_N_STEPS = 100_000
DEFAULT_N_WINDOWS = 1_000
UNIFORM_GRID_RTOL = 1e-12

# Diffusion estimation
STLSQ_THRESHOLD = 0.05
STLSQ_MAX_ITERS = 20
LIBRARY_DEGREE = 5

# Fine martingale path: "model" integrates the fitted sigma, "window" uses window estimates
FINE_Q_MODE = "model"

# Window regression
SIGNATURE_MIN_INSTANTS = 7
WINDOW_RIDGE_FACTOR = 1e-10
ILL_CONDITIONED = 1e12
PSI21_SMOOTHING_HALF_WIDTH = 5

# Elastic net / CV
CV_FOLDS = 7
ALPHA_MIN = 1e-5
ALPHA_MAX = 1e1
ALPHA_COUNT = 35
RHO_GRID = (0.3, 0.4, 0.5, 0.7, 0.85, 0.95, 1.0)
CD_TOL = 1e-10
CD_MAX_SWEEPS = 100_000
# Allowed objective rise per coordinate-descent sweep, relative to max(1, |objective|)
CD_MONOTONE_RTOL = 1e-12
NONZERO_TOL = 1e-8
# CV errors this close (relative to the target RMS) count as ties
CV_ROUNDOFF_RTOL = 1e-10

# Runtime tuning
JOB_WORKERS = max(1, min(8, os.cpu_count() or 1))


def alpha_grid(
    alpha_min: float = ALPHA_MIN,
    alpha_max: float = ALPHA_MAX,
    count: int = ALPHA_COUNT,
) -> tuple[float, ...]:
    return tuple(float(a) for a in np.geomspace(alpha_min, alpha_max, count))


def resolve_output_dir(explicit: str | Path | None = None) -> Path:
    if explicit is not None:
        return Path(explicit)
    env_value = os.environ.get(OUTPUT_DIR_ENV)
    if env_value:
        return Path(env_value)
    return DEFAULT_OUTPUT_DIR


def ensure_output_dir(output_dir: Path) -> Path:
    output_dir.mkdir(parents=True, exist_ok=True)
    (output_dir / CACHE_DIRNAME).mkdir(exist_ok=True)
    return output_dir
