from __future__ import annotations

import tempfile
import unittest
from pathlib import Path

import numpy as np

from sdeid import config, runtime
from sdeid.pipeline import RunReport, load_config, run_pipeline

SEEDS = range(10)


def _run_seeds(name: str) -> list[RunReport]:
    reports = []
    with tempfile.TemporaryDirectory() as tmp:
        for seed in SEEDS:
            runtime.reset_runtime()
            cfg = load_config(
                config.REPO_ROOT / "configs" / name,
                {"seed": seed, "output_dir": Path(tmp) / f"seed{seed}"},
            )
            reports.append(run_pipeline(cfg))
    runtime.reset_runtime()
    return reports


def _coefficients(model) -> dict[str, float]:
    return {model.library.names[i]: float(model.coefficients[i]) for i in model.support}


def _noise_correlation(report: RunReport) -> float:
    return float(np.corrcoef(report.p_coarse.increments, report.truth.coarse_noise.increments)[0, 1])


class BlackScholesAcceptanceTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.reports = _run_seeds("black_scholes.yaml")

    def test_drift_is_linear_with_slope_near_one_half(self):
        hits = 0
        for report in self.reports:
            mu = _coefficients(report.identification.mu_model)
            hits += set(mu) == {"x"} and 0.45 <= mu["x"] <= 0.55
        self.assertGreaterEqual(hits, 9)

    def test_diffusion_slope_and_intercept(self):
        hits = 0
        for report in self.reports:
            sigma = report.identification.sigma_model.block(["1", "x"])
            hits += 0.25 <= sigma["x"] <= 0.35 and abs(sigma["1"]) < 0.02
        self.assertGreaterEqual(hits, 9)

    def test_in_sample_error_and_noise_recovery_every_seed(self):
        for seed, report in zip(SEEDS, self.reports):
            with self.subTest(seed=seed):
                self.assertLess(report.identification.mse, 1e-6)
                self.assertGreaterEqual(_noise_correlation(report), 0.99)


class QuadraticAcceptanceTests(unittest.TestCase):
    """mu0 pins the drift at x0; away from x0 it follows mu0 * sigma(x) / sigma(x0)."""

    @classmethod
    def setUpClass(cls):
        cls.reports = _run_seeds("quadratic.yaml")

    def test_diffusion_within_bands(self):
        hits = 0
        for report in self.reports:
            sigma = report.identification.sigma_model.block(["1", "x", "x^2"])
            hits += abs(sigma["x"] - 0.5) <= 0.06 and abs(sigma["x^2"] - 0.1) <= 0.06 and abs(sigma["1"]) < 0.03
        self.assertGreaterEqual(hits, 8)

    def test_in_sample_error_and_noise_recovery_every_seed(self):
        for seed, report in zip(SEEDS, self.reports):
            with self.subTest(seed=seed):
                self.assertLess(report.identification.mse, 1e-5)
                self.assertGreaterEqual(_noise_correlation(report), 0.99)

    def test_drift_vector_follows_the_fitted_diffusion(self):
        for seed, report in zip(SEEDS, self.reports):
            with self.subTest(seed=seed):
                x = report.coarse_states
                sigma = report.sigma_stlsq
                expected = 1.0 * sigma(x) / sigma(x[:1])
                rel = np.abs(report.drift.values - expected) / np.abs(expected)
                self.assertLess(float(rel.max()), 0.25)

    def test_identified_drift_matches_mu0_at_the_start(self):
        hits = 0
        for report in self.reports:
            mu = report.identification.mu_model
            hits += abs(float(mu(np.array([1.0]))[0]) - 1.0) <= 0.12
        self.assertGreaterEqual(hits, 8)


if __name__ == "__main__":
    unittest.main()
