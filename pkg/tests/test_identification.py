from __future__ import annotations

import unittest

import numpy as np
from numpy.testing import assert_allclose

from sdeid.diffusion import make_sub_partition
from sdeid.errors import EmptyModelError, InvalidArgumentError
from sdeid.identification import (
    build_ssisde_design,
    in_sample_mse,
    restricted_ls_debias,
    ssisde_identify,
)
from sdeid.library import FunctionLibrary
from sdeid.paths import (
    CoefficientPair,
    coarse_grain_increments,
    make_uniform_grid,
    sample_brownian,
    simulate_euler_maruyama,
)


def _noiseless_rows(mu, sigma, *, x0=1.0, T=1.0, n_windows: int = 200, seed: int = 0):
    """Coarse states whose increments satisfy the design rows exactly."""
    grid = make_uniform_grid(0.0, T, n_windows)
    dB = sample_brownian(grid, seed).increments
    dt = grid.increments
    states = np.empty(n_windows + 1)
    states[0] = x0
    for i in range(n_windows):
        states[i + 1] = states[i] + mu(states[i]) * dt[i] + sigma(states[i]) * dB[i]
    return states, dt, dB


class DesignTests(unittest.TestCase):
    def test_row_layout(self):
        library = FunctionLibrary.monomials(1)
        design = build_ssisde_design([2.0, 3.0], [0.1], [0.1], library, library)
        assert_allclose(design.matrix, [[0.1, 0.2, 0.1, 0.2]])
        assert_allclose(design.target, [1.0])
        self.assertEqual(design.names, ["mu:1", "mu:x", "sigma:1", "sigma:x"])

    def test_empty_sigma_library_keeps_only_the_drift_block(self):
        design = build_ssisde_design(
            [1.0, 2.0, 4.0], [0.5, 0.5], [0.1, -0.1], FunctionLibrary.monomials(1), FunctionLibrary(())
        )
        self.assertEqual(design.matrix.shape, (2, 2))
        mu, sigma = design.split([1.0, 2.0])
        self.assertEqual(len(sigma.library), 0)
        assert_allclose(mu.coefficients, [1.0, 2.0])

    def test_rejects_length_mismatch(self):
        library = FunctionLibrary.monomials(1)
        with self.assertRaises(InvalidArgumentError):
            build_ssisde_design([1.0, 2.0, 3.0], [0.1], [0.1, 0.2], library, library)


class DebiasTests(unittest.TestCase):
    def setUp(self):
        states, dt, dB = _noiseless_rows(lambda x: 0.5 * x, lambda x: 0.3 * x)
        library = FunctionLibrary.monomials(2)
        self.design = build_ssisde_design(states, dt, dB, library, library)

    def test_true_support_recovers_coefficients(self):
        mu, sigma = restricted_ls_debias(self.design, self.design.target, (1, 4))
        assert_allclose(mu.coefficients, [0.0, 0.5, 0.0], atol=1e-10)
        assert_allclose(sigma.coefficients, [0.0, 0.3, 0.0], atol=1e-10)
        self.assertLess(in_sample_mse(self.design, mu, sigma), 1e-25)

    def test_full_support_is_ordinary_least_squares(self):
        rng = np.random.default_rng(1)
        target = self.design.target + 1e-4 * rng.standard_normal(self.design.target.size)
        mu, sigma = restricted_ls_debias(self.design, target, range(6))
        expected, *_ = np.linalg.lstsq(self.design.matrix, target, rcond=None)
        assert_allclose(np.concatenate([mu.coefficients, sigma.coefficients]), expected, rtol=1e-6, atol=1e-8)

    def test_empty_support(self):
        with self.assertRaises(EmptyModelError):
            restricted_ls_debias(self.design, self.design.target, ())


class IdentifyTests(unittest.TestCase):
    def test_noiseless_rows_give_exact_support_and_coefficients(self):
        # mean-reverting path around 0 keeps the constant and linear columns apart
        states, dt, dB = _noiseless_rows(lambda x: -2.0 * x, lambda x: 1.0, x0=0.0, T=10.0, n_windows=500)
        library = FunctionLibrary.monomials(1)
        design = build_ssisde_design(states, dt, dB, library, library)
        result = ssisde_identify(design, alpha_grid=np.geomspace(1e-6, 1e-1, 11), rho_grid=[0.5, 1.0])
        self.assertEqual(result.mu_model.support, (1,))
        self.assertEqual(result.sigma_model.support, (0,))
        assert_allclose(result.mu_model.coefficients, [0.0, -2.0], atol=1e-8)
        assert_allclose(result.sigma_model.coefficients, [1.0, 0.0], atol=1e-8)
        self.assertTrue(result.debiased)

    def test_noisy_gbm_rows(self):
        grid = make_uniform_grid(0.0, 1.0, 100_000)
        sub = make_sub_partition(grid, 1000)
        noise = sample_brownian(grid, 3)
        traj = simulate_euler_maruyama(CoefficientPair.from_expressions("0.5*x", "0.3*x"), 1.0, noise)
        coarse = coarse_grain_increments(noise, sub)
        library = FunctionLibrary.monomials(2)
        design = build_ssisde_design(
            traj.values[sub.window_indices], sub.coarse_grid.increments, coarse.increments, library, library
        )
        result = ssisde_identify(design, alpha_grid=np.geomspace(1e-5, 1e-1, 9), rho_grid=[0.5, 1.0])
        self.assertAlmostEqual(float(result.sigma_model(1.0)), 0.3, delta=0.05)
        payload = result.to_json()
        self.assertEqual(payload["mu"]["library"], ["1", "x", "x^2"])
        self.assertIn("cv", payload)


if __name__ == "__main__":
    unittest.main()
