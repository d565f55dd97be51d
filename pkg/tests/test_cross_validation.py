from __future__ import annotations

import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from sdeid import config
from sdeid.cross_validation import (
    CvCell,
    CvReport,
    contiguous_folds,
    cv_time_series,
    delta_vs_support,
    fit_fold,
    select_one_se,
)
from sdeid.errors import InvalidArgumentError
from sdeid.job_manager import JobManager
from sdeid.linalg import restricted_lstsq


def _cell(alpha, rho, mean_error, se, n_mu, n_sigma=0) -> CvCell:
    return CvCell(
        alpha=alpha,
        rho=rho,
        fold_errors=(mean_error, mean_error),
        mean_error=mean_error,
        se=se,
        n_mu=n_mu,
        n_sigma=n_sigma,
    )


class FoldTests(unittest.TestCase):
    def test_contiguous_blocks_in_time_order(self):
        folds = contiguous_folds(9, 3)
        assert_array_equal([test for _, test in folds], [[0, 1, 2], [3, 4, 5], [6, 7, 8]])
        assert_array_equal(folds[1][0], [0, 1, 2, 6, 7, 8])

    def test_rejects_too_few_rows_or_folds(self):
        with self.assertRaises(InvalidArgumentError):
            contiguous_folds(10, 1)
        with self.assertRaises(InvalidArgumentError):
            contiguous_folds(13, 7)

    def test_standard_error_of_fold_errors(self):
        cell = CvCell.from_fold_errors(0.1, 0.5, [1.0, 2.0, 3.0], n_mu=1, n_sigma=1)
        self.assertAlmostEqual(cell.mean_error, 2.0)
        self.assertAlmostEqual(cell.se, 0.5774, places=4)
        self.assertEqual(cell.n_total, 2)


class OneStandardErrorTests(unittest.TestCase):
    def test_equal_errors_pick_the_smallest_support(self):
        report = CvReport(
            cells=(
                _cell(0.01, 0.5, 1.0, 0.0, 3),
                _cell(0.01, 0.7, 1.0, 0.0, 2),
                _cell(0.01, 0.9, 1.0, 0.0, 5),
            )
        )
        self.assertEqual(select_one_se(report), (0.01, 0.7))

    def test_simpler_cell_within_one_standard_error_wins(self):
        report = CvReport(
            cells=(
                _cell(0.001, 1.0, 1.0, 0.1, 2),
                _cell(0.1, 1.0, 1.05, 0.1, 1),
                _cell(1.0, 1.0, 1.5, 0.1, 0),
            )
        )
        self.assertAlmostEqual(report.epsilon, 1.1)
        self.assertEqual(select_one_se(report), (0.1, 1.0))
        self.assertLessEqual(report.selected.mean_error, report.epsilon)

    def test_ties_prefer_larger_alpha_then_larger_rho(self):
        report = CvReport(
            cells=(
                _cell(0.001, 1.0, 1.0, 0.1, 1),
                _cell(0.01, 0.5, 1.0, 0.1, 1),
                _cell(0.01, 0.9, 1.0, 0.1, 1),
            )
        )
        self.assertEqual(select_one_se(report), (0.01, 0.9))

    def test_selection_is_stable_under_monotone_rescaling(self):
        cells = (
            _cell(0.001, 1.0, 1.0, 0.1, 3),
            _cell(0.01, 1.0, 1.08, 0.1, 2),
            _cell(0.1, 1.0, 1.3, 0.1, 1),
        )
        scaled = tuple(
            _cell(c.alpha, c.rho, 2.0 * c.mean_error + 1.0, 2.0 * c.se, c.n_mu) for c in cells
        )
        self.assertEqual(select_one_se(CvReport(cells)), select_one_se(CvReport(scaled)))


class SupportCurveTests(unittest.TestCase):
    def test_n_tilde_is_the_smallest_support_within_one_se(self):
        report = CvReport(
            cells=(
                _cell(1.0, 1.0, 5.0, 0.2, 1),
                _cell(0.1, 1.0, 1.0, 0.05, 2),
                _cell(0.05, 1.0, 0.99, 0.05, 3),
                _cell(0.01, 1.0, 1.4, 0.05, 4),
                _cell(0.2, 1.0, 1.2, 0.05, 2),
            )
        )
        curve = delta_vs_support(report)["total"]
        self.assertEqual(curve.sizes, (1, 2, 3, 4))
        assert_allclose(curve.delta, (5.0, 1.0, 0.99, 1.4))
        self.assertEqual(curve.n_tilde, 2)

    def test_flat_tail_selects_the_first_support(self):
        report = CvReport(
            cells=(
                _cell(1.0, 1.0, 1.02, 0.05, 1),
                _cell(0.1, 1.0, 1.01, 0.05, 2),
                _cell(0.01, 1.0, 1.0, 0.05, 3),
            )
        )
        self.assertEqual(delta_vs_support(report)["total"].n_tilde, 1)

    def test_single_support_size(self):
        report = CvReport(cells=(_cell(1.0, 1.0, 2.0, 0.1, 2), _cell(0.1, 1.0, 1.0, 0.1, 2)))
        curve = delta_vs_support(report)["total"]
        self.assertEqual(curve.sizes, (2,))
        self.assertEqual(curve.n_tilde, 2)

    def test_block_curves_split_by_library(self):
        report = CvReport(cells=(_cell(1.0, 1.0, 2.0, 0.1, 1, 2), _cell(0.1, 1.0, 1.0, 0.1, 2, 1)))
        curves = delta_vs_support(report)
        self.assertEqual(curves["mu"].sizes, (1, 2))
        self.assertEqual(curves["sigma"].sizes, (1, 2))
        self.assertEqual(curves["total"].sizes, (3,))


class CrossValidationTests(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        self.design = rng.standard_normal((70, 3))
        self.beta = np.array([1.0, 0.0, 2.0])

    def test_repeated_halves_without_noise_give_zero_error(self):
        half = self.design[:20]
        design = np.vstack([half, half])
        target = design @ self.beta
        report = cv_time_series(design, target, k=2, alpha_grid=[1e-8], rho_grid=[1.0])
        self.assertEqual(len(report.cells), 1)
        assert_allclose(report.cells[0].fold_errors, [0.0, 0.0], atol=1e-10)

    def test_default_grid_has_245_cells_in_grid_order(self):
        target = self.design @ self.beta + 0.01 * np.random.default_rng(1).standard_normal(70)
        report = cv_time_series(self.design, target, n_mu=2)
        self.assertEqual(len(report.cells), 245)
        self.assertEqual(report.k, config.CV_FOLDS)
        self.assertEqual((report.cells[0].alpha, report.cells[0].rho), (report.alpha_grid[0], report.rho_grid[0]))
        self.assertEqual((report.cells[1].alpha, report.cells[1].rho), (report.alpha_grid[0], report.rho_grid[1]))
        for cell in report.cells:
            self.assertEqual(len(cell.fold_errors), 7)
            self.assertEqual(cell.n_total, len(cell.support))
            self.assertEqual(cell.n_mu, sum(1 for i in cell.support if i < 2))

    def test_validation_rows_do_not_touch_normalization(self):
        rng = np.random.default_rng(2)
        target = self.design @ self.beta + 0.1 * rng.standard_normal(70)
        folds = contiguous_folds(70, 7)
        train, test = folds[3]
        corrupted = self.design.copy()
        corrupted[test] = 100.0 * corrupted[test] + 7.0
        a = fit_fold(self.design, target, train, test, 0.01, 0.5)
        b = fit_fold(corrupted, target, train, test, 0.01, 0.5)
        assert_array_equal(a.coefficients, b.coefficients)
        self.assertEqual(a.support, b.support)

    def test_debiased_fit_is_invariant_to_column_scaling(self):
        target = self.design @ self.beta + 0.1 * np.random.default_rng(3).standard_normal(70)
        scales = np.array([3.0, 0.2, 50.0])
        plain = restricted_lstsq(self.design, target, (0, 2))
        scaled = restricted_lstsq(self.design * scales, target, (0, 2))
        assert_allclose(scaled * scales, plain, atol=1e-10)

    def test_empty_support_scores_the_zero_model(self):
        target = self.design @ self.beta
        train, test = contiguous_folds(70, 7)[0]
        fit = fit_fold(self.design, target, train, test, 1e6, 1.0)
        self.assertEqual(fit.support, ())
        self.assertAlmostEqual(fit.error, float(np.sqrt(np.mean(target[test] ** 2))))

    def test_parallel_cells_match_serial_cells(self):
        target = self.design @ self.beta + 0.05 * np.random.default_rng(4).standard_normal(70)
        grid = dict(k=5, alpha_grid=[1e-4, 1e-2, 1.0], rho_grid=[0.5, 1.0], n_mu=1)
        serial = cv_time_series(self.design, target, **grid)
        jobs = JobManager(max_workers=3)
        try:
            parallel = cv_time_series(self.design, target, jobs=jobs, **grid)
        finally:
            jobs.shutdown()
        for a, b in zip(serial.cells, parallel.cells):
            self.assertEqual((a.alpha, a.rho, a.support), (b.alpha, b.rho, b.support))
            assert_allclose(a.fold_errors, b.fold_errors, rtol=1e-12)
        self.assertEqual(jobs.get_state("cv")["status"], "done")

    def test_summary_reports_both_selections(self):
        target = self.design @ self.beta + 0.05 * np.random.default_rng(5).standard_normal(70)
        report = cv_time_series(self.design, target, k=5, alpha_grid=[1e-4, 1e-2, 1.0], rho_grid=[1.0])
        summary = report.summary()
        for key in ("alpha_star", "rho_star", "epsilon", "alpha_dagger", "rho_dagger", "n_tilde"):
            self.assertIn(key, summary)
        self.assertLessEqual(summary["selected_mean_error"], summary["epsilon"] + report.tolerance)


if __name__ == "__main__":
    unittest.main()
