from __future__ import annotations

import logging
from pathlib import Path

import click

from sdeid import artifacts
from sdeid import config
from sdeid.errors import PipelineStageError, SdeIdError
from sdeid.pipeline import PipelineConfig, RunReport, load_config, run_pipeline
from sdeid.runtime import init_runtime


def _configure_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s [%(levelname)s] %(message)s",
        force=True,
    )


def _run_options(fn):
    options = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path)),
        click.option("--output-dir", type=click.Path(file_okay=False, path_type=Path)),
        click.option("--true-mu", help="Drift expression in x, e.g. '0.5*x'."),
        click.option("--true-sigma", help="Diffusion expression in x, e.g. '0.3*x'."),
        click.option("--x0", type=float),
        click.option("--mu0", type=float, help="Drift at the first observation."),
        click.option("--t0", type=float),
        click.option("--T", "T", type=float),
        click.option("--n-steps", type=int),
        click.option("--n-windows", type=int),
        click.option("--seed", type=int),
        click.option("--stream", type=int),
        click.option("--lib-mu", help="Comma separated drift library terms, e.g. '1,x,x^2'."),
        click.option("--lib-sigma", help="Comma separated diffusion library terms."),
        click.option("--library-degree", type=int),
        click.option("--stlsq-threshold", type=float),
        click.option("--cv-folds", type=int),
        click.option("--alpha-min", type=float),
        click.option("--alpha-max", type=float),
        click.option("--alpha-count", type=int),
        click.option("--rho", "rho_grid", type=float, multiple=True, help="Repeat for each rho value."),
        click.option("--window-ridge", type=float),
        click.option("--drop-i222/--keep-i222", default=None),
        click.option("--psi21-smoothing", type=int),
        click.option("--fine-q-mode", type=click.Choice(["window", "model"])),
        click.option("--workers", type=int),
        click.option("--progress/--no-progress", "show_progress", default=None),
        click.option("--force", is_flag=True, help="Ignore cached intermediate results."),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _build_config(mode: str, config_path: Path | None, force: bool, **flags) -> tuple[PipelineConfig, bool]:
    overrides = {key: value for key, value in flags.items() if value is not None}
    if not overrides.get("rho_grid"):
        overrides.pop("rho_grid", None)
    else:
        overrides["rho_grid"] = list(overrides["rho_grid"])
    overrides["mode"] = mode
    return load_config(config_path, overrides), force


def _execute(cfg: PipelineConfig, force: bool) -> RunReport:
    try:
        report = run_pipeline(cfg, force=force)
    except PipelineStageError as exc:
        raise click.ClickException(str(exc)) from exc
    except SdeIdError as exc:
        raise click.ClickException(str(exc)) from exc
    _print_summary(report)
    return report


def _print_summary(report: RunReport) -> None:
    click.echo(f"Output: {report.output_dir}")
    if report.identification is not None:
        result = report.identification
        click.echo(f"mu(x)    = {result.mu_model.describe()}")
        click.echo(f"sigma(x) = {result.sigma_model.describe()}")
        click.echo(f"in-sample MSE = {result.mse:.6e}")
    for name in sorted(report.manifest):
        click.echo(f"  {name}")


def create_cli() -> click.Group:
    @click.group()
    @click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
    @click.option("-q", "--quiet", is_flag=True, help="Only warnings and errors.")
    def cli(verbose: bool, quiet: bool) -> None:
        """Identify drift and diffusion of a 1-D SDE from one trajectory."""
        _configure_logging(verbose, quiet)
        init_runtime()

    @cli.command()
    @_run_options
    def simulate(config_path, force, **flags):
        """Simulate a trajectory and its driving noise."""
        _execute(*_safe_config("simulate", config_path, force, **flags))

    @cli.command()
    @click.option("--input", "input_csv", type=click.Path(path_type=Path), help="CSV with columns t,value.")
    @_run_options
    def identify(config_path, force, **flags):
        """Identify mu and sigma from an observed trajectory."""
        _execute(*_safe_config("identify", config_path, force, **flags))

    @cli.command()
    @_run_options
    def full(config_path, force, **flags):
        """Simulate, then identify, with ground truth in the plot data."""
        _execute(*_safe_config("full", config_path, force, **flags))

    @cli.command("plot-data")
    @click.option("--output-dir", type=click.Path(file_okay=False, path_type=Path))
    def plot_data(output_dir):
        """Regenerate the plot CSVs of an earlier run from its cached stages."""
        run_dir = config.resolve_output_dir(output_dir)
        report_path = run_dir / "report.json"
        if not report_path.exists():
            raise click.ClickException(f"No report.json in {run_dir}; run 'full' or 'identify' first")
        saved = artifacts.read_json(report_path)
        if saved.get("mode") == "simulate":
            raise click.ClickException("A simulate-only run has no identified model to plot")
        try:
            cfg = PipelineConfig(**{**saved["config"], "output_dir": run_dir})
        except Exception as exc:
            raise click.ClickException(f"Could not rebuild the run configuration: {exc}") from exc
        _execute(cfg, force=False)

    return cli


def _safe_config(mode: str, config_path, force, **flags) -> tuple[PipelineConfig, bool]:
    try:
        return _build_config(mode, config_path, force, **flags)
    except SdeIdError as exc:
        raise click.UsageError(str(exc)) from exc
