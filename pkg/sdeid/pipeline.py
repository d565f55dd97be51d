from __future__ import annotations

import hashlib
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Literal, Optional

import numpy as np
import pandas as pd
import yaml
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from sdeid import artifacts
from sdeid import config
from sdeid import runtime
from sdeid.diffusion import (
    estimate_sigma_vector,
    fit_sigma_stlsq,
    make_sub_partition,
    reconstruct_fine_q_path,
    reconstruct_q_increments,
)
from sdeid.drift import build_drift_ode, recover_p_increments, smooth_psi21, solve_mu_euler
from sdeid.errors import InvalidArgumentError, PipelineStageError, SimulationBlowupError
from sdeid.cross_validation import delta_vs_support
from sdeid.identification import IdentificationResult, build_ssisde_design, ssisde_identify
from sdeid.library import FunctionLibrary, SparseModel
from sdeid.models import (
    PSI_NAMES,
    BrownianPath,
    DiffusionEstimate,
    DriftVector,
    Measure,
    PsiEstimate,
    SubPartition,
    Trajectory,
)
from sdeid.paths import (
    CoefficientPair,
    coarse_grain_increments,
    make_uniform_grid,
    sample_brownian,
    simulate_euler_maruyama,
)
from sdeid.signatures import estimate_psi

STAGES = ("simulate", "load", "diffusion", "sigma_fit", "fine_q", "psi", "drift", "noise", "identify", "plot")

STAGE_HINTS = {
    "simulate": "check the coefficient expressions, x0 and the grid; sigma must stay positive along the path",
    "load": "the input CSV needs columns t,value with strictly increasing t and finite values",
    "diffusion": "every window needs non-zero variation and at least 2 fine steps; try fewer windows",
    "sigma_fit": "lower the STLSQ threshold or use a smaller sigma library",
    "fine_q": "the fitted sigma must stay positive along the path and have registered derivatives",
    "psi": "windows need at least 7 instants; use more fine steps per window",
    "drift": "check mu0 and look for zeros of the fitted sigma along the path",
    "noise": "sigma estimates must be positive in every window",
    "identify": "use smaller libraries or a wider alpha grid",
    "plot": "check that the output directory is writable",
}

Mode = Literal["simulate", "identify", "full"]


class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: Mode = "full"
    true_mu: Optional[str] = None
    true_sigma: Optional[str] = None
    x0: float = 1.0
    mu0: Optional[float] = None
    t0: float = config.DEFAULT_T0
    T: float = config.DEFAULT_T
    n_steps: int = config.DEFAULT_N_STEPS
    n_windows: int = config.DEFAULT_N_WINDOWS
    seed: int = 0
    stream: int = 0
    lib_mu: Optional[str | list[str]] = None
    lib_sigma: Optional[str | list[str]] = None
    library_degree: int = config.LIBRARY_DEGREE
    stlsq_threshold: float = config.STLSQ_THRESHOLD
    stlsq_max_iters: int = config.STLSQ_MAX_ITERS
    cv_folds: int = config.CV_FOLDS
    alpha_min: float = config.ALPHA_MIN
    alpha_max: float = config.ALPHA_MAX
    alpha_count: int = config.ALPHA_COUNT
    rho_grid: list[float] = list(config.RHO_GRID)
    window_ridge: Optional[float] = None
    drop_i222: bool = False
    psi21_smoothing: int = 0
    fine_q_mode: Literal["window", "model"] = config.FINE_Q_MODE
    input_csv: Optional[Path] = None
    output_dir: Optional[Path] = None
    workers: Optional[int] = None
    show_progress: bool = False

    @model_validator(mode="after")
    def _check(self) -> "PipelineConfig":
        if self.n_steps < 1 or self.n_windows < 1:
            raise ValueError("'n_steps' and 'n_windows' must be positive")
        if self.n_steps % self.n_windows != 0:
            raise ValueError(f"'n_steps' ({self.n_steps}) must be a multiple of 'n_windows' ({self.n_windows})")
        if self.n_windows > self.n_steps / 2:
            raise ValueError("'n_windows' must be at most n_steps / 2")
        if self.T <= self.t0:
            raise ValueError("'T' must be greater than 't0'")
        if self.cv_folds < 2:
            raise ValueError("'cv_folds' must be >= 2")
        if not self.rho_grid or any(not 0.0 <= r <= 1.0 for r in self.rho_grid):
            raise ValueError("'rho_grid' values must lie in [0, 1]")
        if not 0.0 < self.alpha_min < self.alpha_max or self.alpha_count < 1:
            raise ValueError("alpha grid needs 0 < alpha_min < alpha_max and alpha_count >= 1")
        if self.stlsq_threshold < 0 or self.stlsq_max_iters < 1:
            raise ValueError("STLSQ needs threshold >= 0 and max_iters >= 1")
        if self.window_ridge is not None and self.window_ridge < 0:
            raise ValueError("'window_ridge' must be >= 0")
        if self.psi21_smoothing < 0 or self.library_degree < 0:
            raise ValueError("'psi21_smoothing' and 'library_degree' must be >= 0")
        if self.mode == "identify":
            if self.input_csv is None:
                raise ValueError("identify mode needs 'input_csv'")
            if self.mu0 is None:
                raise ValueError("identify mode needs 'mu0' (the drift at the first observation)")
        else:
            if not self.true_mu or not self.true_sigma:
                raise ValueError(f"{self.mode} mode needs 'true_mu' and 'true_sigma'")
        return self

    def alpha_values(self) -> tuple[float, ...]:
        return config.alpha_grid(self.alpha_min, self.alpha_max, self.alpha_count)

    def library_mu(self) -> FunctionLibrary:
        return _library(self.lib_mu, self.library_degree, "mu")

    def library_sigma(self) -> FunctionLibrary:
        return _library(self.lib_sigma, self.library_degree, "sigma")

    def true_coefficients(self) -> CoefficientPair | None:
        if not self.true_mu or not self.true_sigma:
            return None
        return CoefficientPair.from_expressions(self.true_mu, self.true_sigma)

    def resolved_output_dir(self) -> Path:
        return config.resolve_output_dir(self.output_dir)

    def echo(self) -> dict:
        return self.model_dump(mode="json", exclude={"output_dir", "workers", "show_progress"})


def _library(names, degree: int, name: str) -> FunctionLibrary:
    if names is None or (isinstance(names, str) and not names.strip()):
        return FunctionLibrary.monomials(degree, name=name)
    return FunctionLibrary.from_names(names, name=name)


def load_config(path: Path | None = None, overrides: dict | None = None) -> PipelineConfig:
    """File values, then the output-dir env var, then explicit overrides."""
    data: dict = {}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except (OSError, yaml.YAMLError) as exc:
            raise InvalidArgumentError(f"Could not read config file {path}: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise InvalidArgumentError(f"Config file {path} must hold a flat key/value mapping")
        nested = [key for key, value in loaded.items() if isinstance(value, dict)]
        if nested:
            raise InvalidArgumentError(f"Config keys must be flat (nested: {', '.join(map(str, nested))})")
        data.update(loaded)
    env_value = os.environ.get(config.OUTPUT_DIR_ENV)
    if env_value:
        data["output_dir"] = env_value
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    try:
        return PipelineConfig(**data)
    except ValidationError as exc:
        raise InvalidArgumentError(f"Invalid configuration: {exc}") from exc


@dataclass(frozen=True, eq=False)
class GroundTruth:
    coeffs: CoefficientPair
    noise: BrownianPath
    coarse_noise: BrownianPath | None = None


@dataclass(eq=False)
class RunReport:
    config: PipelineConfig
    output_dir: Path
    trajectory: Trajectory | None = None
    truth: GroundTruth | None = None
    sub: SubPartition | None = None
    estimate: DiffusionEstimate | None = None
    sigma_stlsq: SparseModel | None = None
    q_coarse: BrownianPath | None = None
    mu0: float | None = None
    mu0_source: Literal["config", "true_drift"] = "config"
    psi: list[PsiEstimate] = field(default_factory=list)
    drift: DriftVector | None = None
    p_coarse: BrownianPath | None = None
    identification: IdentificationResult | None = None
    manifest: list[str] = field(default_factory=list)
    stage_seconds: dict[str, float] = field(default_factory=dict)
    cached_stages: list[str] = field(default_factory=list)

    @property
    def coarse_states(self) -> np.ndarray:
        assert self.sub is not None and self.trajectory is not None
        return self.trajectory.values[self.sub.window_indices]

    def record(self, name: str) -> Path:
        if name not in self.manifest:
            self.manifest.append(name)
        return self.output_dir / name

    def to_json(self) -> dict:
        data: dict = {"mode": self.config.mode, "config": self.config.echo()}
        if self.sigma_stlsq is not None:
            data["sigma_stlsq"] = self.sigma_stlsq.to_json()
            data["sigma_stlsq_expression"] = self.sigma_stlsq.describe()
        if self.identification is not None:
            data["identification"] = self.identification.to_json()
        if self.truth is not None:
            data["truth"] = {"mu": self.config.true_mu, "sigma": self.config.true_sigma}
            if self.p_coarse is not None and self.truth.coarse_noise is not None:
                data["truth"]["noise_correlation"] = float(
                    np.corrcoef(self.p_coarse.increments, self.truth.coarse_noise.increments)[0, 1]
                )
        if self.mu0 is not None:
            data["mu0"] = {"value": self.mu0, "source": self.mu0_source}
        data["manifest"] = sorted(self.manifest + ["report.json"])
        return data


def _set_job_state(stage: str, **updates) -> None:
    runtime.get_job_manager().set_state(stage, **updates)


@contextmanager
def _stage(report: RunReport, name: str) -> Iterator[None]:
    _set_job_state(name, status="running")
    logging.info("Stage %s started", name)
    start = time.perf_counter()
    try:
        yield
    except PipelineStageError:
        raise
    except Exception as exc:
        hint = STAGE_HINTS.get(name, "")
        logging.exception("Stage %s failed", name)
        _set_job_state(name, status="error", error=str(exc))
        try:
            artifacts.write_partial_marker(report.output_dir, name, str(exc), hint)
        except OSError:
            logging.exception("Failed to write the failure marker in %s", report.output_dir)
        raise PipelineStageError(name, exc, hint) from exc
    seconds = time.perf_counter() - start
    report.stage_seconds[name] = seconds
    _set_job_state(name, status="done", seconds=seconds)
    logging.info("Stage %s finished in %.2fs", name, seconds)


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _data_params(cfg: PipelineConfig) -> dict:
    if cfg.mode == "identify":
        assert cfg.input_csv is not None
        return {"input": _file_digest(Path(cfg.input_csv))}
    return {
        "true_mu": cfg.true_mu,
        "true_sigma": cfg.true_sigma,
        "x0": cfg.x0,
        "t0": cfg.t0,
        "T": cfg.T,
        "n_steps": cfg.n_steps,
        "seed": cfg.seed,
        "stream": cfg.stream,
    }


def _psi_params(cfg: PipelineConfig, data: dict) -> dict:
    params = {
        **data,
        "n_windows": cfg.n_windows,
        "fine_q_mode": cfg.fine_q_mode,
        "window_ridge": cfg.window_ridge,
        "drop_i222": cfg.drop_i222,
    }
    if cfg.fine_q_mode == "model":
        params.update(
            lib_sigma=cfg.lib_sigma,
            library_degree=cfg.library_degree,
            stlsq_threshold=cfg.stlsq_threshold,
            stlsq_max_iters=cfg.stlsq_max_iters,
        )
    return params


def _cv_params(cfg: PipelineConfig, psi: dict) -> dict:
    return {
        **psi,
        "lib_mu": cfg.lib_mu,
        "lib_sigma": cfg.lib_sigma,
        "library_degree": cfg.library_degree,
        "stlsq_threshold": cfg.stlsq_threshold,
        "stlsq_max_iters": cfg.stlsq_max_iters,
        "psi21_smoothing": cfg.psi21_smoothing,
        "mu0": cfg.mu0,
        "cv_folds": cfg.cv_folds,
        "alpha": [cfg.alpha_min, cfg.alpha_max, cfg.alpha_count],
        "rho_grid": list(cfg.rho_grid),
    }


def _simulate(cfg: PipelineConfig, report: RunReport, force: bool) -> tuple[Trajectory, GroundTruth]:
    coeffs = cfg.true_coefficients()
    assert coeffs is not None
    grid = make_uniform_grid(cfg.t0, cfg.T, cfg.n_steps)
    cache_path = artifacts.stage_cache_path(report.output_dir, "simulate")
    key = artifacts.stage_cache_key("simulate", _data_params(cfg))
    cached = None if force else artifacts.load_stage_cache(cache_path, key)
    if cached is not None:
        noise = BrownianPath(grid, cached["noise"], measure=Measure.PHYSICAL)
        traj = Trajectory(grid, cached["values"])
        report.cached_stages.append("simulate")
    else:
        noise = sample_brownian(grid, cfg.seed, cfg.stream)
        traj = simulate_euler_maruyama(coeffs, cfg.x0, noise)
        artifacts.save_stage_cache(cache_path, key, noise=noise.increments, values=traj.values)
    return traj, GroundTruth(coeffs=coeffs, noise=noise)


def _psi_from_arrays(arrays: dict[str, np.ndarray]) -> list[PsiEstimate]:
    coefficients = arrays["coefficients"]
    return [
        PsiEstimate(
            window=k,
            **{name: float(coefficients[k, j]) for j, name in enumerate(PSI_NAMES)},
            residual_rms=float(arrays["residual_rms"][k]),
            condition_number=float(arrays["cond"][k]),
            ill_conditioned=bool(arrays["ill"][k]),
        )
        for k in range(coefficients.shape[0])
    ]


def _psi_to_arrays(estimates: list[PsiEstimate]) -> dict[str, np.ndarray]:
    return {
        "coefficients": np.array([est.coefficients() for est in estimates]),
        "residual_rms": np.array([est.residual_rms for est in estimates]),
        "cond": np.array([est.condition_number for est in estimates]),
        "ill": np.array([est.ill_conditioned for est in estimates]),
    }


def run_pipeline(cfg: PipelineConfig, *, force: bool = False) -> RunReport:
    """Run every stage the mode asks for and write the artifacts.

    Stage failures raise PipelineStageError and leave a `.partial` marker
    next to whatever was already written.
    """
    output_dir = config.ensure_output_dir(cfg.resolved_output_dir())
    if cfg.workers and runtime.job_manager is not None and runtime.job_manager.max_workers != cfg.workers:
        runtime.reset_runtime()
    runtime.init_runtime(cfg.workers)
    jobs = runtime.get_job_manager()
    jobs.reset()

    report = RunReport(config=cfg, output_dir=output_dir)

    if cfg.mode in ("simulate", "full"):
        with _stage(report, "simulate"):
            traj, truth = _simulate(cfg, report, force)
            report.trajectory = traj
            report.truth = truth
            artifacts.write_csv(report.record("trajectory.csv"), artifacts.trajectory_frame(traj))
            artifacts.write_csv(report.record("noise_true.csv"), artifacts.noise_frame(truth.noise))
        if cfg.mode == "simulate":
            return _finish(report)
    else:
        with _stage(report, "load"):
            assert cfg.input_csv is not None
            report.trajectory = artifacts.read_trajectory_csv(Path(cfg.input_csv))
            logging.info("Loaded %s observations from %s", len(report.trajectory.grid), cfg.input_csv)

    traj = report.trajectory
    assert traj is not None
    data = _data_params(cfg)
    mu0 = cfg.mu0
    if mu0 is None:
        # full mode without mu0: the initial condition is read off the true drift
        assert report.truth is not None
        mu0 = float(report.truth.coeffs.mu(traj.values[0]))
        report.mu0_source = "true_drift"
        logging.warning("No mu0 configured; using the true drift at x0, mu0 = %.6g", mu0)
    report.mu0 = mu0

    with _stage(report, "diffusion"):
        sub = make_sub_partition(traj.grid, cfg.n_windows)
        est = estimate_sigma_vector(traj, sub)
        q_coarse = reconstruct_q_increments(traj, est)
        report.sub, report.estimate, report.q_coarse = sub, est, q_coarse
        if report.truth is not None:
            report.truth = GroundTruth(
                coeffs=report.truth.coeffs,
                noise=report.truth.noise,
                coarse_noise=coarse_grain_increments(report.truth.noise, sub),
            )
        artifacts.write_csv(report.record("diffusion.csv"), artifacts.diffusion_frame(est))

    with _stage(report, "sigma_fit"):
        lib_sigma = cfg.library_sigma()
        sigma_stlsq = fit_sigma_stlsq(
            est.anchors, est.sigma_values, lib_sigma, cfg.stlsq_threshold, cfg.stlsq_max_iters
        )
        report.sigma_stlsq = sigma_stlsq
        logging.info("STLSQ sigma(x) = %s", sigma_stlsq.describe())
        artifacts.write_json(report.record("sigma_stlsq.json"), sigma_stlsq.to_json())

    with _stage(report, "fine_q"):
        q_fine = reconstruct_fine_q_path(traj, est, cfg.fine_q_mode, sigma_stlsq)
        if cfg.fine_q_mode == "model":
            q_coarse = coarse_grain_increments(q_fine, sub)
            girsanov_sigma = sigma_stlsq(report.coarse_states[:-1])
        else:
            girsanov_sigma = est.sigma_values
        report.q_coarse = q_coarse

    psi_params = _psi_params(cfg, data)
    with _stage(report, "psi"):
        cache_path = artifacts.stage_cache_path(output_dir, "psi")
        key = artifacts.stage_cache_key("psi", psi_params)
        cached = None if force else artifacts.load_stage_cache(cache_path, key)
        if cached is not None:
            report.psi = _psi_from_arrays(cached)
            report.cached_stages.append("psi")
        else:
            report.psi = estimate_psi(
                traj, q_fine, sub, ridge=cfg.window_ridge, drop_i222=cfg.drop_i222, jobs=jobs
            )
            artifacts.save_stage_cache(cache_path, key, **_psi_to_arrays(report.psi))
        artifacts.write_csv(report.record("psi.csv"), artifacts.psi_frame(report.psi, est.anchor_times))

    with _stage(report, "drift"):
        if cfg.fine_q_mode == "window":
            logging.warning("Window fine path: psi21 carries no in-window curvature, drift follows sigma alone")
        psi21 = smooth_psi21([p.psi21 for p in report.psi], cfg.psi21_smoothing)
        ode = build_drift_ode(sigma_stlsq, psi21)
        report.drift = solve_mu_euler(ode, report.coarse_states, mu0)

    with _stage(report, "noise"):
        report.p_coarse = recover_p_increments(q_coarse, report.drift, girsanov_sigma, sub.coarse_grid)
        if report.truth is not None and report.truth.coarse_noise is not None:
            corr = np.corrcoef(report.p_coarse.increments, report.truth.coarse_noise.increments)[0, 1]
            logging.info("Correlation of recovered and true coarse noise: %.4f", corr)
        artifacts.write_csv(
            report.record("drift.csv"),
            artifacts.drift_frame(
                sub.coarse_grid.times,
                report.coarse_states,
                report.drift.values,
                q_coarse.increments,
                report.p_coarse.increments,
            ),
        )

    with _stage(report, "identify"):
        design = build_ssisde_design(
            report.coarse_states,
            sub.coarse_grid.increments,
            report.p_coarse.increments,
            cfg.library_mu(),
            lib_sigma,
        )
        cache_path = artifacts.stage_cache_path(output_dir, "cv")
        key = artifacts.stage_cache_key("cv", _cv_params(cfg, psi_params))
        cached = None if force else artifacts.load_stage_cache(cache_path, key)
        cv_report = artifacts.cv_report_from_arrays(cached) if cached is not None else None
        if cv_report is not None:
            report.cached_stages.append("identify")
        result = ssisde_identify(
            design,
            k=cfg.cv_folds,
            alpha_grid=cfg.alpha_values(),
            rho_grid=cfg.rho_grid,
            jobs=jobs,
            show_progress=cfg.show_progress,
            report=cv_report,
        )
        if cv_report is None:
            artifacts.save_stage_cache(
                cache_path, key, **artifacts.cv_report_to_arrays(result.cv_report, design.matrix.shape[1])
            )
        report.identification = result
        artifacts.write_json(report.record("model_mu.json"), result.mu_model.to_json())
        artifacts.write_json(report.record("model_sigma.json"), result.sigma_model.to_json())
        artifacts.write_json(report.record("cv_report.json"), artifacts.cv_report_json(result.cv_report))
        artifacts.write_csv(report.record("cv_surface.csv"), artifacts.cv_surface_frame(result.cv_report))
        curves = artifacts.support_curves_frame(delta_vs_support(result.cv_report))
        artifacts.write_csv(report.record("support_curves.csv"), curves)

    with _stage(report, "plot"):
        emit_plot_data(report)

    return _finish(report)


def _finish(report: RunReport) -> RunReport:
    artifacts.write_json(report.output_dir / "report.json", report.to_json())
    report.record("report.json")
    artifacts.clear_partial_marker(report.output_dir)
    total = sum(report.stage_seconds.values())
    logging.info("Run finished in %.2fs; %s files in %s", total, len(report.manifest), report.output_dir)
    return report


def resimulate(
    mu: SparseModel,
    sigma: SparseModel,
    x0: float,
    noise: BrownianPath,
) -> np.ndarray:
    """Euler-Maruyama driven by a given noise; NaN after a blowup."""
    physical = BrownianPath(noise.grid, noise.increments, measure=Measure.PHYSICAL, origin=noise.origin)
    try:
        return simulate_euler_maruyama(CoefficientPair(mu, sigma), x0, physical).values
    except SimulationBlowupError as exc:
        logging.warning("Re-simulation left the admissible region at index %s", exc.index)
        return np.full(noise.grid.n_steps + 1, np.nan)


def emit_plot_data(report: RunReport, truth: GroundTruth | None = None) -> dict[str, Path]:
    """Write the four plot panels: drift, diffusion, noise paths and state."""
    if report.identification is None or report.sub is None or report.drift is None:
        raise InvalidArgumentError("Plot data needs a completed identification run")
    truth = truth if truth is not None else report.truth
    assert report.estimate is not None and report.q_coarse is not None and report.p_coarse is not None
    assert report.sigma_stlsq is not None

    result = report.identification
    coarse = report.sub.coarse_grid
    states = report.coarse_states
    n = report.sub.n_windows
    t_left = coarse.times[:n]
    x_left = states[:n]

    mu_panel = pd.DataFrame(
        {
            "t": t_left,
            "x": x_left,
            "mu_ode": report.drift.values[:n],
            "mu_recovered": result.mu_model(x_left),
        }
    )
    sigma_panel = pd.DataFrame(
        {
            "t": t_left,
            "x": x_left,
            "sigma_window": report.estimate.sigma_values,
            "sigma_stlsq": report.sigma_stlsq(x_left),
            "sigma_recovered": result.sigma_model(x_left),
        }
    )
    noise_panel = pd.DataFrame(
        {
            "t": coarse.times,
            "bq": report.q_coarse.values,
            "bp_recovered": report.p_coarse.values,
        }
    )
    state_panel = pd.DataFrame(
        {
            "t": coarse.times,
            "x_observed": states,
            "x_resimulated": resimulate(result.mu_model, result.sigma_model, float(states[0]), report.p_coarse),
        }
    )

    if truth is not None:
        mu_panel["mu_true"] = truth.coeffs.mu(x_left)
        sigma_panel["sigma_true"] = truth.coeffs.sigma(x_left)
        coarse_noise = truth.coarse_noise or coarse_grain_increments(truth.noise, report.sub)
        noise_panel["bp_true"] = coarse_noise.values

    paths = {
        "mu": report.record("plot_mu.csv"),
        "sigma": report.record("plot_sigma.csv"),
        "noise": report.record("plot_noise.csv"),
        "state": report.record("plot_state.csv"),
    }
    artifacts.write_csv(paths["mu"], mu_panel)
    artifacts.write_csv(paths["sigma"], sigma_panel)
    artifacts.write_csv(paths["noise"], noise_panel)
    artifacts.write_csv(paths["state"], state_panel)
    return paths
