"""
Unit tests for the ustd_diffusion module.

Tests the noise schedule, forward corruption, the noise-prediction loss,
the reverse step against an independent scalar evaluator and the sampling
loop with an analytic Gaussian denoiser.
"""

import math
import unittest

import numpy as np
import torch

from src.ustd_diffusion import (
    NoiseSchedule,
    make_schedule,
    q_sample,
    reverse_step,
    sample,
    training_loss,
)
from src.ustd_errors import ContractError, InputError, NumericError


def scalar_reverse(y: float, eps_hat: float, z: float, beta: np.ndarray, k: int) -> float:
    """Independent evaluation of one reverse step from the raw betas."""
    b = beta[k - 1]
    alpha = 1.0
    for value in beta[:k]:
        alpha *= 1.0 - value
    out = (y - b / math.sqrt(1.0 - alpha) * eps_hat) / math.sqrt(1.0 - b)
    return out + (math.sqrt(b) * z if k > 1 else 0.0)


class TestSchedule(unittest.TestCase):
    """Test cases for noise schedules."""

    def test_two_step_linear(self):
        schedule = make_schedule(2, 0.1, 0.2, "linear")
        np.testing.assert_allclose(schedule.alpha_hat, [0.9, 0.8])
        np.testing.assert_allclose(schedule.alpha, [0.9, 0.72])
        self.assertEqual(schedule.K, 2)

    def test_single_step(self):
        schedule = make_schedule(1, 0.3, 0.5)
        self.assertEqual(schedule.alpha[0], 1.0 - schedule.beta[0])

    def test_default_final_alpha(self):
        schedule = make_schedule()
        self.assertEqual(schedule.K, 50)
        self.assertLess(schedule.alpha[-1], 1e-4)
        self.assertAlmostEqual(schedule.beta[0], 1e-4)
        self.assertAlmostEqual(schedule.beta[-1], 0.5)

    def test_quadratic_formula(self):
        schedule = make_schedule(10, 1e-3, 0.2)
        for k in range(1, 11):
            expected = (math.sqrt(1e-3) + (k - 1) / 9 * (math.sqrt(0.2) - math.sqrt(1e-3))) ** 2
            self.assertAlmostEqual(schedule.beta[k - 1], expected, places=12)

    def test_invariants_on_random_configs(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            start, end = np.sort(rng.uniform(1e-5, 0.9, size=2))
            schedule = make_schedule(int(rng.integers(1, 100)), float(start), float(end),
                                     str(rng.choice(["linear", "quadratic"])))
            self.assertTrue(np.all((schedule.beta > 0) & (schedule.beta < 1)))
            self.assertTrue(np.all(np.diff(schedule.beta) > 0))
            self.assertTrue(np.all(np.diff(schedule.alpha) < 0))
            self.assertTrue(np.all((schedule.alpha > 0) & (schedule.alpha < 1)))
            for k in range(1, schedule.K):
                self.assertEqual(schedule.alpha[k],
                                 schedule.alpha[k - 1] * schedule.alpha_hat[k])

    def test_invalid_ranges(self):
        with self.assertRaises(InputError):
            make_schedule(10, 0.5, 0.1)
        with self.assertRaises(InputError):
            make_schedule(10, 0.0, 0.1)
        with self.assertRaises(InputError):
            make_schedule(0)
        with self.assertRaises(InputError):
            make_schedule(10, shape="cosine")

    def test_serialization(self):
        schedule = make_schedule(5, 0.01, 0.3)
        restored = NoiseSchedule.from_dict(schedule.to_dict())
        np.testing.assert_array_equal(restored.alpha, schedule.alpha)

    def test_read_only(self):
        with self.assertRaises(ValueError):
            make_schedule(3, 0.1, 0.2).beta[0] = 0.5


class TestForwardProcess(unittest.TestCase):
    """Test cases for q_sample and the noise-prediction loss."""

    def setUp(self):
        self.schedule = make_schedule(2, 0.1, 0.2, "linear")

    def test_noise_free(self):
        y = q_sample(torch.ones(1), 2, torch.zeros(1), self.schedule)
        self.assertAlmostEqual(float(y), math.sqrt(0.72), places=6)

    def test_zero_signal(self):
        epsilon = torch.randn(4, dtype=torch.float64)
        y = q_sample(torch.zeros(4, dtype=torch.float64), 2, epsilon, self.schedule)
        torch.testing.assert_close(y, math.sqrt(0.28) * epsilon)

    def test_step_out_of_range(self):
        for k in (0, 3):
            with self.assertRaises(InputError):
                q_sample(torch.ones(1), k, torch.zeros(1), self.schedule)

    def test_per_element_steps(self):
        y0 = torch.ones(2, 3)
        y = q_sample(y0, torch.tensor([1, 2]), torch.zeros(2, 3), self.schedule)
        torch.testing.assert_close(y[0], torch.full((3,), math.sqrt(0.9)))
        torch.testing.assert_close(y[1], torch.full((3,), math.sqrt(0.72)))

    def test_monte_carlo_marginal(self):
        generator = torch.Generator().manual_seed(0)
        y0 = torch.full((100_000,), 1.5, dtype=torch.float64)
        epsilon = torch.randn(y0.shape, generator=generator, dtype=torch.float64)
        y = q_sample(y0, 1, epsilon, self.schedule)
        self.assertAlmostEqual(float(y.mean()) / (math.sqrt(0.9) * 1.5), 1.0, delta=0.02)
        self.assertAlmostEqual(float(y.var()) / 0.1, 1.0, delta=0.02)

    def test_chain_matches_one_shot(self):
        schedule = make_schedule()
        generator = torch.Generator().manual_seed(1)
        k = 10
        y = torch.full((100_000,), 2.0, dtype=torch.float64)
        for step in range(k):
            noise = torch.randn(y.shape, generator=generator, dtype=torch.float64)
            y = math.sqrt(schedule.alpha_hat[step]) * y + math.sqrt(schedule.beta[step]) * noise
        alpha = schedule.alpha[k - 1]
        self.assertAlmostEqual(float(y.mean()) / (math.sqrt(alpha) * 2.0), 1.0, delta=0.02)
        self.assertAlmostEqual(float(y.var()) / (1.0 - alpha), 1.0, delta=0.02)

    def test_zero_predictor_loss(self):
        generator = torch.Generator().manual_seed(0)
        y0 = torch.randn((4096, 8), generator=generator)
        epsilon = torch.randn(y0.shape, generator=generator)
        k = torch.randint(1, 3, (4096,), generator=generator)
        loss = training_loss(y0, None, k, epsilon,
                             lambda y, h, steps, ctx: torch.zeros_like(y), self.schedule)
        self.assertAlmostEqual(float(loss), 1.0, delta=0.05)

    def test_oracle_predictor_loss(self):
        y0 = torch.randn(16, 4)
        epsilon = torch.randn(16, 4)
        loss = training_loss(y0, None, 2, epsilon, lambda y, h, steps, ctx: epsilon,
                             self.schedule)
        self.assertEqual(float(loss), 0.0)

    def test_shape_contract(self):
        with self.assertRaises(ContractError):
            training_loss(torch.zeros(2, 3), None, 1, torch.zeros(2, 3),
                          lambda y, h, steps, ctx: torch.zeros(2, 4), self.schedule)


class TestReverseStep(unittest.TestCase):
    """Test cases for the ancestral reverse step."""

    def test_scalar_oracle(self):
        schedule = make_schedule(2, 0.1, 0.2, "linear")
        value = reverse_step(1.0, 2, 0.5, 0.0, schedule)
        expected = (1 / math.sqrt(0.8)) * (1 - 0.2 / math.sqrt(0.28) * 0.5)
        self.assertAlmostEqual(value, expected, places=12)
        self.assertAlmostEqual(value, 0.9065, delta=5e-4)

    def test_random_tuples_match_independent_evaluator(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            start, end = np.sort(rng.uniform(1e-4, 0.9, size=2))
            schedule = make_schedule(int(rng.integers(1, 60)), float(start), float(end),
                                     str(rng.choice(["linear", "quadratic"])))
            k = int(rng.integers(1, schedule.K + 1))
            y, eps_hat, z = rng.normal(size=3)
            result = reverse_step(y, k, eps_hat, z, schedule)
            expected = scalar_reverse(y, eps_hat, z, schedule.beta, k)
            self.assertAlmostEqual(result, expected,
                                   delta=1e-12 * max(1.0, abs(expected)))

    def test_vanishing_beta_is_identity(self):
        schedule = make_schedule(1, 1e-12, 0.5)
        self.assertAlmostEqual(reverse_step(0.7, 1, 0.0, None, schedule), 0.7, places=9)

    def test_last_step_ignores_noise(self):
        schedule = make_schedule(5, 0.01, 0.3)
        a = reverse_step(torch.tensor([0.3]), 1, torch.tensor([0.2]), torch.tensor([5.0]),
                         schedule)
        b = reverse_step(torch.tensor([0.3]), 1, torch.tensor([0.2]), None, schedule)
        torch.testing.assert_close(a, b)

    def test_true_noise_recovers_clean_value(self):
        for beta_start, beta_end, y0 in [(1e-4, 0.5, 2.0), (1e-3, 0.2, -1.0),
                                         (0.05, 0.6, 0.3)]:
            schedule = make_schedule(10, beta_start, beta_end)
            alpha = schedule.alpha[0]
            epsilon = 0.8
            y1 = math.sqrt(alpha) * y0 + math.sqrt(1 - alpha) * epsilon
            eps_hat = (y1 - math.sqrt(alpha) * y0) / math.sqrt(1 - alpha)
            self.assertAlmostEqual(reverse_step(y1, 1, eps_hat, 0.0, schedule), y0,
                                   places=12)

    def test_step_below_one(self):
        with self.assertRaises(InputError):
            reverse_step(1.0, 0, 0.0, 0.0, make_schedule(3, 0.1, 0.2))


class GaussianOracle:
    """Exact noise predictor E[ε | y_k] for N(mean, std²) targets."""

    def __init__(self, schedule: NoiseSchedule, mean: float, std: float):
        self.alpha = torch.as_tensor(schedule.alpha, dtype=torch.float64)
        self.mean = mean
        self.var = std ** 2

    def __call__(self, y_k, condition, k, context=None):
        alpha = self.alpha[k - 1].reshape(-1, *([1] * (y_k.dim() - 1)))
        spread = alpha * self.var + 1 - alpha
        return (1 - alpha).sqrt() * (y_k - alpha.sqrt() * self.mean) / spread


class TestSampling(unittest.TestCase):
    """Test cases for the full reverse chain."""

    def setUp(self):
        self.schedule = make_schedule()
        self.oracle = GaussianOracle(self.schedule, 2.0, 0.5)
        self.condition = torch.zeros(3, 1, dtype=torch.float64)

    def test_sample_shape(self):
        draws = sample(self.condition, self.oracle, self.schedule, (3, 4), n_samples=8,
                       generator=torch.Generator().manual_seed(0))
        self.assertEqual(tuple(draws.shape), (8, 3, 4))

    def test_deterministic(self):
        a = sample(self.condition, self.oracle, self.schedule, (3, 4), 8,
                   torch.Generator().manual_seed(7))
        b = sample(self.condition, self.oracle, self.schedule, (3, 4), 8,
                   torch.Generator().manual_seed(7))
        self.assertTrue(torch.equal(a, b))

    def test_gaussian_recovery_with_analytic_denoiser(self):
        draws = sample(torch.zeros(10_000, 1, dtype=torch.float64), self.oracle,
                       self.schedule, (10_000, 1), 1, torch.Generator().manual_seed(0))
        self.assertAlmostEqual(float(draws.mean()), 2.0, delta=0.1)
        self.assertAlmostEqual(float(draws.std()), 0.5, delta=0.025)

    def test_non_finite_chain_aborts(self):
        def exploding(y_k, condition, k, context=None):
            return torch.full_like(y_k, float("inf"))

        with self.assertRaises(NumericError) as ctx:
            sample(self.condition, exploding, self.schedule, (3, 4), 2)
        self.assertIn("step 50", str(ctx.exception))

    def test_invalid_sample_count(self):
        with self.assertRaises(InputError):
            sample(self.condition, self.oracle, self.schedule, (3, 4), 0)


if __name__ == "__main__":
    unittest.main()
