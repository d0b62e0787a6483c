"""
Unit tests for the ustd_logging module.

Tests timestamp and value formatting and the structured records of each
logged operation.
"""

import unittest
from datetime import datetime
from types import SimpleNamespace
from unittest.mock import patch

from src.ustd_logging import (
    _format_loss,
    _format_timestamp,
    log_bench_operation,
    log_evaluation_operation,
    log_pretrain_operation,
    log_train_operation,
)


class TestUstdLogging(unittest.TestCase):
    """Test cases for ustd_logging module functions."""

    def setUp(self):
        """Set up test fixtures."""
        self.log_capture = []
        self.patcher = patch('src.ustd_logging.logger')
        self.mock_logger = self.patcher.start()

        def capture_log(message):
            self.log_capture.append(message)

        self.mock_logger.info.side_effect = capture_log
        self.mock_logger.error.side_effect = capture_log

        self.timestamp_patcher = patch('src.ustd_logging._format_timestamp',
                                       return_value="2024-01-01 12:00:00")
        self.timestamp_patcher.start()

    def tearDown(self):
        """Tear down test fixtures."""
        self.timestamp_patcher.stop()
        self.patcher.stop()
        self.log_capture = []

    def test_format_timestamp(self):
        """Test that timestamp formatting produces expected format."""
        self.timestamp_patcher.stop()
        fixed_datetime = datetime(2023, 1, 1, 12, 0, 0)
        with patch('src.ustd_logging.datetime') as mock_datetime:
            mock_datetime.now.return_value = fixed_datetime
            self.assertEqual(_format_timestamp(), "2023-01-01 12:00:00")
        self.timestamp_patcher.start()

    def test_format_loss(self):
        """Test loss formatting including missing and non-finite values."""
        self.assertEqual(_format_loss(None), "-")
        self.assertEqual(_format_loss(float("nan")), "nan")
        self.assertEqual(_format_loss(float("inf")), "nan")
        self.assertEqual(_format_loss(0.123456789), "0.123457")

    def test_log_pretrain_success(self):
        """Test logging of a successful pre-training step."""
        log_pretrain_operation(step=100, success=True, loss=0.5, n_nodes=13,
                               mask_ratio=0.75)
        self.mock_logger.info.assert_called_once()
        self.assertEqual(
            self.log_capture[0],
            "[2024-01-01 12:00:00] PRETRAIN SUCCESS | Step: 100 | Loss: 0.5 | "
            "Nodes: 13 | Mask: 0.75"
        )

    def test_log_pretrain_failure(self):
        """Test logging of a failed pre-training step."""
        log_pretrain_operation(step=3, success=False, error="Loss diverged")
        self.mock_logger.error.assert_called_once()
        self.assertIn("PRETRAIN FAILED", self.log_capture[0])
        self.assertIn("Error: Loss diverged", self.log_capture[0])

    def test_log_train_success(self):
        """Test logging of a completed training epoch."""
        log_train_operation("forecast", 4, True, train_loss=0.25, val_loss=0.3,
                            best_val_loss=0.28)
        self.assertEqual(
            self.log_capture[0],
            "[2024-01-01 12:00:00] TRAIN SUCCESS | Task: forecast | Epoch: 4 | "
            "Loss: 0.25 | Val: 0.3 | Best: 0.28"
        )

    def test_log_train_without_validation(self):
        log_train_operation("krige", 0, True, train_loss=1.0)
        self.assertIn("Val: - | Best: -", self.log_capture[0])

    def test_log_train_failure_without_message(self):
        """Test the fallback error text."""
        log_train_operation("krige", 2, False)
        self.mock_logger.error.assert_called_once()
        self.assertIn("Error: Unknown error", self.log_capture[0])

    def test_log_evaluation_success(self):
        """Test logging of an evaluation report."""
        report = SimpleNamespace(mae=1.5, rmse=2.0, crps=0.1)
        log_evaluation_operation("forecast", "ustd", True, report=report)
        self.assertEqual(
            self.log_capture[0],
            "[2024-01-01 12:00:00] EVALUATE SUCCESS | Task: forecast | Model: ustd | "
            "MAE: 1.5 | RMSE: 2 | CRPS: 0.1"
        )

    def test_log_evaluation_without_report(self):
        """Test that a missing report is logged as a failure."""
        log_evaluation_operation("krige", "idw", True)
        self.mock_logger.error.assert_called_once()

    def test_log_bench(self):
        """Test logging of benchmark results."""
        log_bench_operation("gated", True, mean_seconds=0.5, std_seconds=0.01,
                            n_params=1234)
        self.assertEqual(
            self.log_capture[0],
            "[2024-01-01 12:00:00] BENCH SUCCESS | Denoiser: gated | "
            "Seconds: 0.5 ± 0.01 | Params: 1234"
        )
        log_bench_operation("full_attention", False, error="Out of memory")
        self.assertIn("BENCH FAILED | Denoiser: full_attention | Error: Out of memory",
                      self.log_capture[1])


if __name__ == "__main__":
    unittest.main()
