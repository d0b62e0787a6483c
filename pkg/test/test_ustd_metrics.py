"""
Unit tests for the ustd_metrics module.

Tests the point scores, the CRPS estimator against closed forms, the
baselines and report writing.
"""

import math
import os
import tempfile
import unittest

import numpy as np
import pandas as pd

from src.ustd_errors import ConfigError, InputError
from src.ustd_graph import Graph
from src.ustd_metrics import (
    MetricReport,
    SampleSet,
    baseline_climatology,
    baseline_idw,
    baseline_persistence,
    climatology_stats,
    crps,
    gaussian_crps,
    mae,
    rmse,
    score_sample_sets,
    write_reports,
)


class TestPointScores(unittest.TestCase):
    """Test cases for MAE and RMSE."""

    def test_hand_example(self):
        pred = np.array([3.0, -1.0])
        truth = np.zeros(2)
        self.assertEqual(mae(pred, truth), 2.0)
        self.assertAlmostEqual(rmse(pred, truth), math.sqrt(5.0), places=12)

    def test_rmse_dominates_mae(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            pred, truth = rng.normal(size=(2, 20))
            self.assertGreaterEqual(rmse(pred, truth) + 1e-12, mae(pred, truth))

    def test_shape_mismatch(self):
        with self.assertRaises(InputError):
            mae(np.zeros(3), np.zeros(4))

    def test_empty(self):
        with self.assertRaises(InputError):
            rmse(np.zeros(0), np.zeros(0))


class TestCRPS(unittest.TestCase):
    """Test cases for the energy-form CRPS."""

    def test_perfect_samples(self):
        truth = np.array([[1.0, 2.0], [3.0, -4.0]])
        samples = np.repeat(truth[None], 5, axis=0)
        self.assertEqual(crps(samples, truth), 0.0)

    def test_two_sample_hand_case(self):
        samples = np.array([[0.0], [2.0]])
        self.assertAlmostEqual(crps(samples, np.array([1.0]), normalized=False), 0.5,
                               places=12)

    def test_fair_two_sample_hand_case(self):
        samples = np.array([[0.0], [2.0]])
        self.assertAlmostEqual(
            crps(samples, np.array([1.0]), normalized=False, fair=True), 0.0, places=12)

    def test_sorted_identity_matches_pairwise_sum(self):
        rng = np.random.default_rng(1)
        samples = rng.normal(size=(7, 3))
        truth = rng.normal(size=3)
        spread = np.mean(np.abs(samples - truth), axis=0)
        pairwise = np.abs(samples[:, None] - samples[None]).sum(axis=(0, 1))
        expected = np.mean(spread - pairwise / (2 * 7 * 7))
        self.assertAlmostEqual(crps(samples, truth, normalized=False), expected, places=12)

    def test_gaussian_closed_form(self):
        samples = np.random.default_rng(2).standard_normal(10_000)
        value = crps(samples, np.array(0.0), normalized=False)
        self.assertAlmostEqual(gaussian_crps(1.0), 0.2337, places=4)
        self.assertAlmostEqual(value, 0.2337, delta=0.03 * 0.2337)

    def test_normalized_divides_by_total_truth(self):
        samples = np.array([[0.0, 1.0], [2.0, 1.0]])
        truth = np.array([1.0, 3.0])
        unnormalized = crps(samples, truth, normalized=False)
        self.assertAlmostEqual(crps(samples, truth), unnormalized * 2 / 4, places=12)

    def test_all_zero_truth(self):
        with self.assertRaises(InputError) as ctx:
            crps(np.ones((3, 2)), np.zeros(2))
        self.assertIn("unnormalized", str(ctx.exception))

    def test_fair_needs_two_samples(self):
        with self.assertRaises(InputError):
            crps(np.ones((1, 2)), np.ones(2), fair=True)

    def test_non_negative(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            samples = rng.normal(size=(4, 6))
            truth = rng.normal(size=6)
            self.assertGreaterEqual(crps(samples, truth, normalized=False), 0.0)


class TestBaselines(unittest.TestCase):
    """Test cases for persistence, climatology and IDW."""

    def test_persistence_constant_series(self):
        condition = np.full((3, 12, 1), 4.2)
        forecast = baseline_persistence(condition, 5)
        self.assertEqual(forecast.shape, (3, 5, 1))
        self.assertEqual(mae(forecast, np.full((3, 5, 1), 4.2)), 0.0)

    def test_persistence_repeats_last_step(self):
        condition = np.arange(8, dtype=float).reshape(2, 4, 1)
        np.testing.assert_array_equal(baseline_persistence(condition, 2)[:, :, 0],
                                      [[3.0, 3.0], [7.0, 7.0]])

    def test_climatology_matches_gaussian_crps(self):
        rng = np.random.default_rng(4)
        means = np.array([[10.0], [-5.0], [0.5]])
        stds = np.array([[2.0], [0.5], [1.0]])
        train = means[:, None, :] + stds[:, None, :] * rng.standard_normal((3, 20_000, 1))
        mean, std = climatology_stats(train)
        samples = baseline_climatology(mean, std, 4000, 10, rng)
        self.assertEqual(samples.shape, (4000, 3, 10, 1))
        for node in range(3):
            value = crps(samples[:, node], np.full((10, 1), means[node, 0]),
                         normalized=False)
            expected = gaussian_crps(stds[node, 0])
            self.assertAlmostEqual(value, expected, delta=0.05 * expected)

    def test_idw_single_observed_node(self):
        graph = Graph(adjacency=np.zeros((3, 3)),
                      coords=np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]]))
        values = np.array([[[2.0], [3.0]]])
        estimate = baseline_idw(graph, np.array([1]), values, np.array([0, 2]))
        np.testing.assert_array_equal(estimate, np.repeat(values, 2, axis=0))

    def test_idw_inverse_square_weights(self):
        graph = Graph(adjacency=np.zeros((3, 3)),
                      coords=np.array([[0.0, 0.0], [1.0, 0.0], [-2.0, 0.0]]))
        values = np.array([[[1.0]], [[4.0]]])
        estimate = baseline_idw(graph, np.array([1, 2]), values, np.array([0]))
        expected = (1.0 * 1.0 + 4.0 * 0.25) / 1.25
        self.assertAlmostEqual(float(estimate[0, 0, 0]), expected, places=12)

    def test_idw_coincident_coordinates(self):
        graph = Graph(adjacency=np.zeros((3, 3)),
                      coords=np.array([[1.0, 1.0], [1.0, 1.0], [3.0, 0.0]]))
        values = np.array([[[7.0]], [[9.0]]])
        estimate = baseline_idw(graph, np.array([1, 2]), values, np.array([0]))
        self.assertEqual(float(estimate[0, 0, 0]), 7.0)

    def test_idw_needs_coordinates(self):
        with self.assertRaises(ConfigError):
            baseline_idw(Graph(adjacency=np.zeros((2, 2))), np.array([0]),
                         np.zeros((1, 3, 1)), np.array([1]))

    def test_idw_needs_observed_nodes(self):
        graph = Graph(adjacency=np.zeros((2, 2)), coords=np.zeros((2, 2)))
        with self.assertRaises(InputError):
            baseline_idw(graph, np.array([], dtype=int), np.zeros((0, 3, 1)),
                         np.array([1]))


class TestScoring(unittest.TestCase):
    """Test cases for sample sets and reports."""

    def setUp(self):
        rng = np.random.default_rng(5)
        self.truths = [rng.normal(size=(3, 4, 1)) + 5 for _ in range(6)]
        self.sets = [SampleSet(samples=t[None] + rng.normal(size=(5, 3, 4, 1)), start=i)
                     for i, t in enumerate(self.truths)]

    def test_median_within_envelope(self):
        sample_set = self.sets[0]
        self.assertTrue(np.all(sample_set.point_estimate >= sample_set.samples.min(axis=0)))
        self.assertTrue(np.all(sample_set.point_estimate <= sample_set.samples.max(axis=0)))
        self.assertEqual(sample_set.n_samples, 5)

    def test_empty_sample_set(self):
        with self.assertRaises(InputError):
            SampleSet(samples=np.zeros((0, 2, 2, 1)))

    def test_forecast_horizon_mae_averages_to_mae(self):
        report = score_sample_sets(self.sets, self.truths, "forecast", "ustd")
        self.assertEqual(len(report.horizon_mae), 4)
        self.assertAlmostEqual(float(np.mean(report.horizon_mae)), report.mae, places=12)
        self.assertGreaterEqual(report.rmse, report.mae)
        self.assertGreaterEqual(report.crps, 0.0)
        self.assertEqual(report.n_windows, 6)
        self.assertEqual(report.n_samples, 5)

    def test_kriging_has_no_horizon_breakdown(self):
        report = score_sample_sets(self.sets, self.truths, "krige", "ustd")
        self.assertEqual(report.horizon_mae, [])

    def test_single_sample_falls_back_to_plain_crps(self):
        sets = [SampleSet(samples=t[None]) for t in self.truths]
        report = score_sample_sets(sets, self.truths, "krige", "persistence")
        self.assertEqual(report.crps, 0.0)

    def test_no_windows(self):
        with self.assertRaises(InputError):
            score_sample_sets([], [], "forecast", "ustd")

    def test_write_reports(self):
        forecast = score_sample_sets(self.sets, self.truths, "forecast", "ustd")
        baseline = MetricReport(task="forecast", model="persistence", split="test",
                                mae=1.0, rmse=1.5, crps=0.3, n_samples=1, n_windows=6,
                                horizon_mae=[1.0, 1.0, 1.0, 1.0])
        with tempfile.TemporaryDirectory() as tmp:
            paths = write_reports([forecast, baseline], tmp)
            names = sorted(os.path.basename(p) for p in paths)
            self.assertEqual(names, ["forecast_persistence_metrics.txt",
                                     "forecast_ustd_metrics.txt",
                                     "horizon_mae.csv", "metrics.csv"])
            with open(os.path.join(tmp, "forecast_persistence_metrics.txt")) as f:
                text = f.read()
            self.assertIn("mae=1.000000\n", text)
            self.assertIn("mae_h4=1.000000\n", text)
            table = pd.read_csv(os.path.join(tmp, "metrics.csv"))
            self.assertEqual(list(table["model"]), ["ustd", "persistence"])
            horizons = pd.read_csv(os.path.join(tmp, "horizon_mae.csv"))
            self.assertEqual(list(horizons["horizon"]), [1, 2, 3, 4])


if __name__ == "__main__":
    unittest.main()
