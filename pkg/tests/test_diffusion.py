from __future__ import annotations

import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from sdeid.diffusion import (
    estimate_sigma_vector,
    estimate_window_qv,
    eval_model_derivatives,
    fit_sigma_stlsq,
    make_sub_partition,
    reconstruct_fine_q_path,
    reconstruct_q_increments,
)
from sdeid.errors import (
    DegenerateDiffusionError,
    InsufficientResolutionError,
    InvalidArgumentError,
    RankDeficiencyError,
    SingularDiffusionError,
    UnsupportedModelError,
)
from sdeid.library import FunctionLibrary, SparseModel
from sdeid.models import DiffusionEstimate, Measure, SubPartition, Trajectory
from sdeid.paths import (
    CoefficientPair,
    coarse_grain_increments,
    make_uniform_grid,
    sample_brownian,
    simulate_euler_maruyama,
)


def _simulate(mu: str, sigma: str, *, n_steps=100_000, seed=0, x0=1.0):
    grid = make_uniform_grid(0.0, 1.0, n_steps)
    noise = sample_brownian(grid, seed)
    traj = simulate_euler_maruyama(CoefficientPair.from_expressions(mu, sigma), x0, noise)
    return traj, noise


def _exact_estimate(sub: SubPartition, traj: Trajectory, sigma_at_anchor: np.ndarray) -> DiffusionEstimate:
    lengths = sub.window_lengths
    return DiffusionEstimate(
        sub=sub,
        sigma_values=sigma_at_anchor,
        qv_windows=sigma_at_anchor**2 * lengths,
        anchors=traj.values[sub.window_indices[:-1]],
    )


class SubPartitionTests(unittest.TestCase):
    def test_equal_windows(self):
        grid = make_uniform_grid(0.0, 1.0, 12)
        sub = make_sub_partition(grid, 4)
        assert_array_equal(sub.window_indices, [0, 3, 6, 9, 12])
        assert_allclose(sub.window_lengths, np.full(4, 0.25))
        self.assertTrue(sub.coarse_grid.uniform)

    def test_rejects_invalid_partitions(self):
        grid = make_uniform_grid(0.0, 1.0, 12)
        with self.assertRaisesRegex(InvalidArgumentError, "multiple"):
            make_sub_partition(grid, 5)
        with self.assertRaisesRegex(InvalidArgumentError, "N/2"):
            make_sub_partition(grid, 12)
        with self.assertRaises(InvalidArgumentError):
            SubPartition.from_indices(grid, [0, 6, 6, 12])


class QuadraticVariationTests(unittest.TestCase):
    def test_constant_path_has_zero_variation(self):
        grid = make_uniform_grid(0.0, 1.0, 20)
        traj = Trajectory(grid, np.full(21, 3.0))
        with self.assertLogs(level="WARNING"):
            est = estimate_sigma_vector(traj, make_sub_partition(grid, 4))
        assert_array_equal(est.qv_windows, np.zeros(4))
        self.assertEqual(est.zero_windows, (0, 1, 2, 3))

    def test_linear_path_single_window(self):
        n = 50
        grid = make_uniform_grid(0.0, 1.0, n)
        traj = Trajectory(grid, grid.times.copy())
        qv = estimate_window_qv(traj, make_sub_partition(grid, 1))
        self.assertAlmostEqual(float(qv[0]), 1.0 / n, places=14)

    def test_one_step_window_is_rejected(self):
        grid = make_uniform_grid(0.0, 1.0, 4)
        traj = Trajectory(grid, np.arange(5.0))
        sub = SubPartition.from_indices(grid, [0, 1, 4])
        with self.assertRaises(InsufficientResolutionError):
            estimate_window_qv(traj, sub)

    def test_brownian_motion_qv_per_window(self):
        grid = make_uniform_grid(0.0, 1.0, 100_000)
        noise = sample_brownian(grid, seed=4)
        traj = Trajectory(grid, noise.values)
        qv = estimate_window_qv(traj, make_sub_partition(grid, 1000))
        self.assertAlmostEqual(float(qv.mean()) / 1e-3, 1.0, delta=0.02)

    def test_sigma_vector_tracks_gbm_diffusion(self):
        traj, _ = _simulate("0.5*x", "0.3*x", seed=1)
        est = estimate_sigma_vector(traj, make_sub_partition(traj.grid, 1000))
        self.assertAlmostEqual(float(np.mean(est.sigma_values / est.anchors)), 0.3, delta=0.015)
        assert_allclose(est.sigma_values**2 * est.sub.window_lengths, est.qv_windows, rtol=1e-12)

    def test_sigma_vector_for_brownian_motion(self):
        traj, _ = _simulate("0", "1", seed=2)
        est = estimate_sigma_vector(traj, make_sub_partition(traj.grid, 1000))
        rel_rmse = float(np.sqrt(np.mean((est.sigma_values - 1.0) ** 2)))
        self.assertLess(rel_rmse, 0.2)


class MartingaleIncrementTests(unittest.TestCase):
    def test_unit_diffusion_with_exact_qv_returns_the_increments(self):
        traj, _ = _simulate("0", "1", n_steps=1000, seed=3)
        sub = make_sub_partition(traj.grid, 100)
        dbq = reconstruct_q_increments(traj, _exact_estimate(sub, traj, np.ones(100)))
        assert_allclose(dbq.increments, np.diff(traj.values[sub.window_indices]), rtol=1e-12)
        self.assertEqual(dbq.measure, Measure.MARTINGALE)

    def test_scaling_the_path_leaves_increments_unchanged(self):
        traj, _ = _simulate("0.5*x", "0.3*x", n_steps=10_000, seed=5)
        sub = make_sub_partition(traj.grid, 100)
        base = reconstruct_q_increments(traj, estimate_sigma_vector(traj, sub))
        scaled_traj = Trajectory(traj.grid, 4.0 * traj.values)
        scaled = reconstruct_q_increments(scaled_traj, estimate_sigma_vector(scaled_traj, sub))
        assert_allclose(scaled.increments, base.increments, rtol=1e-12)

    def test_zero_window_is_degenerate(self):
        grid = make_uniform_grid(0.0, 1.0, 20)
        values = np.concatenate([np.full(6, 2.0), 2.0 + 0.1 * np.arange(1, 16)])
        traj = Trajectory(grid, values)
        with self.assertLogs(level="WARNING"):
            est = estimate_sigma_vector(traj, make_sub_partition(grid, 4))
        with self.assertRaises(DegenerateDiffusionError) as ctx:
            reconstruct_q_increments(traj, est)
        self.assertEqual(ctx.exception.window, 0)

    def test_martingale_shift_matches_market_price_of_risk(self):
        traj, noise = _simulate("0.5*x", "0.3*x", seed=6)
        sub = make_sub_partition(traj.grid, 1000)
        dbq = reconstruct_q_increments(traj, estimate_sigma_vector(traj, sub))
        dbp = coarse_grain_increments(noise, sub)
        # (mu / sigma) * delta = (5/3) * 1e-3
        self.assertAlmostEqual(float(np.mean(dbq.increments - dbp.increments)), 5e-3 / 3, delta=6e-4)

    def test_true_sigma_without_drift_reproduces_the_noise(self):
        traj, noise = _simulate("0", "0.3*x", seed=7)
        sub = make_sub_partition(traj.grid, 1000)
        anchors = traj.values[sub.window_indices[:-1]]
        dbq = reconstruct_q_increments(traj, _exact_estimate(sub, traj, 0.3 * anchors))
        dbp = coarse_grain_increments(noise, sub)
        self.assertGreaterEqual(float(np.corrcoef(dbq.increments, dbp.increments)[0, 1]), 0.999)


class FinePathTests(unittest.TestCase):
    def setUp(self):
        self.traj, _ = _simulate("0.5*x", "0.3*x", n_steps=2000, seed=8)
        self.sub = make_sub_partition(self.traj.grid, 20)
        self.est = estimate_sigma_vector(self.traj, self.sub)

    def test_window_mode_divides_by_window_sigma(self):
        fine = reconstruct_fine_q_path(self.traj, self.est, "window")
        expected = self.traj.increments / np.repeat(self.est.sigma_values, 100)
        assert_allclose(fine.increments, expected, rtol=1e-14)
        self.assertEqual(fine.grid.n_steps, 2000)

    def test_model_mode_integrates_the_fitted_sigma(self):
        model = SparseModel.from_expression("0.3*x")
        fine = reconstruct_fine_q_path(self.traj, self.est, "model", model)
        x = self.traj.values
        expected = np.diff(np.log(x)) / 0.3 + 0.15 * self.traj.grid.increments
        assert_allclose(fine.increments, expected, rtol=1e-9, atol=1e-9)
        self.assertIs(fine.measure, Measure.MARTINGALE)

    def test_model_mode_with_constant_sigma_scales_the_increments(self):
        model = SparseModel.from_expression("0.3")
        fine = reconstruct_fine_q_path(self.traj, self.est, "model", model)
        assert_allclose(fine.increments, self.traj.increments / 0.3, rtol=1e-12, atol=1e-15)

    def test_model_mode_rejects_non_positive_sigma(self):
        model = SparseModel.from_expression("x - 1")
        with self.assertRaises(SingularDiffusionError) as ctx:
            reconstruct_fine_q_path(self.traj, self.est, "model", model)
        self.assertLessEqual(ctx.exception.location, 1.0)

    def test_unknown_mode(self):
        with self.assertRaisesRegex(InvalidArgumentError, "mode"):
            reconstruct_fine_q_path(self.traj, self.est, "spline")


class StlsqTests(unittest.TestCase):
    def setUp(self):
        self.x = np.linspace(0.5, 2.5, 200)
        self.library = FunctionLibrary.monomials(5)

    def test_noiseless_linear_diffusion(self):
        model = fit_sigma_stlsq(self.x, 0.3 * self.x, self.library)
        assert_allclose(model.coefficients, [0.0, 0.3, 0.0, 0.0, 0.0, 0.0], atol=1e-10)
        self.assertEqual(model.support, (1,))

    def test_noiseless_quadratic_diffusion(self):
        model = fit_sigma_stlsq(self.x, 0.5 * self.x + 0.1 * self.x**2, self.library)
        assert_allclose(model.coefficients, [0.0, 0.5, 0.1, 0.0, 0.0, 0.0], atol=1e-10)

    def test_threshold_zero_is_ordinary_least_squares(self):
        rng = np.random.default_rng(0)
        y = 0.3 * self.x + 0.01 * rng.standard_normal(self.x.size)
        library = FunctionLibrary.monomials(2)
        model = fit_sigma_stlsq(self.x, y, library, threshold=0.0)
        expected, *_ = np.linalg.lstsq(library.evaluate(self.x), y, rcond=None)
        assert_allclose(model.coefficients, expected, atol=1e-10)

    def test_large_threshold_gives_the_empty_model(self):
        with self.assertLogs(level="WARNING") as logs:
            model = fit_sigma_stlsq(self.x, 0.3 * self.x, self.library, threshold=10.0)
        self.assertTrue(model.is_empty)
        self.assertIn("empty model", logs.output[0])

    def test_dependent_library_columns_are_named(self):
        library = FunctionLibrary.from_names("x, 2*x")
        with self.assertRaises(RankDeficiencyError) as ctx:
            fit_sigma_stlsq(self.x, 0.3 * self.x, library, threshold=0.0)
        self.assertTrue(set(ctx.exception.columns) <= {"x", "2*x"})

    def test_eval_model_derivatives(self):
        model = SparseModel.from_expression("0.5*x + 0.1*x^2")
        self.assertAlmostEqual(eval_model_derivatives(model, 1.0, 0), 0.6)
        self.assertAlmostEqual(eval_model_derivatives(model, 1.0, 1), 0.7)
        self.assertAlmostEqual(eval_model_derivatives(model, 1.0, 2), 0.2)
        assert_allclose(eval_model_derivatives(model, np.array([0.0, 2.0]), 1), [0.5, 0.9])
        with self.assertRaises(UnsupportedModelError):
            eval_model_derivatives(model, 1.0, 3)


if __name__ == "__main__":
    unittest.main()
