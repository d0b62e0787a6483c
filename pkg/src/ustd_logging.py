"""
USTD Logging Module

Provides standardized logging functionality for USTD runs.
Implements consistent log formatting for pre-training, denoiser training,
evaluation and benchmarking, so long experiment logs stay greppable and
every record of a given operation has the same shape.
"""

import logging
import math
from datetime import datetime
from typing import Any, Optional

# Configure logging with a clean format focused on the message content
logging.basicConfig(
    level=logging.INFO,
    format='%(message)s',
    datefmt='%Y-%m-%d %H:%M:%S'
)

logger = logging.getLogger("ustd")


def _format_timestamp() -> str:
    """
    Generate a formatted timestamp for log messages.

    Returns:
        str: Current timestamp in YYYY-MM-DD HH:MM:SS format
    """
    return datetime.now().strftime("%Y-%m-%d %H:%M:%S")


def _format_loss(value: Optional[float]) -> str:
    """
    Format a loss or metric value for a log record.

    Args:
        value: The value to format (None renders as "-")

    Returns:
        str: Six significant digits, or "nan" for non-finite values
    """
    if value is None:
        return "-"
    value = float(value)
    if not math.isfinite(value):
        return "nan"
    return f"{value:.6g}"


def log_pretrain_operation(
    step: int,
    success: bool,
    loss: Optional[float] = None,
    n_nodes: int = 0,
    mask_ratio: float = 0.0,
    error: Optional[str] = None
) -> None:
    """
    Log one pre-training step in a structured, consistent format.

    Args:
        step: Optimizer step counter after the update
        success: Whether the step completed
        loss: Masked reconstruction loss of the step
        n_nodes: Number of nodes in the sampled subgraph
        mask_ratio: Fraction of masked cells
        error: Error message if the step failed
    """
    timestamp = _format_timestamp()
    status = "SUCCESS" if success else "FAILED"

    if success:
        logger.info(
            f"[{timestamp}] PRETRAIN {status} | Step: {step} | "
            f"Loss: {_format_loss(loss)} | Nodes: {n_nodes} | "
            f"Mask: {mask_ratio:.2f}"
        )
    else:
        logger.error(
            f"[{timestamp}] PRETRAIN {status} | Step: {step} | "
            f"Error: {error or 'Unknown error'}"
        )


def log_train_operation(
    task: str,
    epoch: int,
    success: bool,
    train_loss: Optional[float] = None,
    val_loss: Optional[float] = None,
    best_val_loss: Optional[float] = None,
    error: Optional[str] = None
) -> None:
    """
    Log a denoiser training epoch in a structured, consistent format.

    Args:
        task: Task name (forecast/krige)
        epoch: Epoch index
        success: Whether the epoch completed
        train_loss: Mean training loss over the epoch
        val_loss: Validation loss at the end of the epoch
        best_val_loss: Best validation loss seen so far
        error: Error message if training failed
    """
    timestamp = _format_timestamp()
    status = "SUCCESS" if success else "FAILED"

    if success:
        logger.info(
            f"[{timestamp}] TRAIN {status} | Task: {task} | Epoch: {epoch} | "
            f"Loss: {_format_loss(train_loss)} | Val: {_format_loss(val_loss)} | "
            f"Best: {_format_loss(best_val_loss)}"
        )
    else:
        logger.error(
            f"[{timestamp}] TRAIN {status} | Task: {task} | Epoch: {epoch} | "
            f"Error: {error or 'Unknown error'}"
        )


def log_evaluation_operation(
    task: str,
    model_name: str,
    success: bool,
    report: Optional[Any] = None,
    error: Optional[str] = None
) -> None:
    """
    Log an evaluation result in a structured, consistent format.

    Args:
        task: Task name (forecast/krige)
        model_name: Model or baseline that produced the predictions
        success: Whether the evaluation completed
        report: MetricReport with mae, rmse and crps attributes
        error: Error message if evaluation failed
    """
    timestamp = _format_timestamp()
    status = "SUCCESS" if success else "FAILED"

    if success and report is not None:
        logger.info(
            f"[{timestamp}] EVALUATE {status} | Task: {task} | Model: {model_name} | "
            f"MAE: {_format_loss(report.mae)} | RMSE: {_format_loss(report.rmse)} | "
            f"CRPS: {_format_loss(report.crps)}"
        )
    else:
        logger.error(
            f"[{timestamp}] EVALUATE {status} | Task: {task} | Model: {model_name} | "
            f"Error: {error or 'Unknown error'}"
        )


def log_bench_operation(
    denoiser_name: str,
    success: bool,
    mean_seconds: Optional[float] = None,
    std_seconds: Optional[float] = None,
    n_params: int = 0,
    error: Optional[str] = None
) -> None:
    """
    Log a sampling benchmark in a structured, consistent format.

    Args:
        denoiser_name: Name of the benchmarked denoiser
        success: Whether the benchmark completed
        mean_seconds: Mean wall-clock of one full sampling pass
        std_seconds: Standard deviation over trials
        n_params: Number of trainable denoiser parameters
        error: Error message if the benchmark failed
    """
    timestamp = _format_timestamp()
    status = "SUCCESS" if success else "FAILED"

    if success:
        logger.info(
            f"[{timestamp}] BENCH {status} | Denoiser: {denoiser_name} | "
            f"Seconds: {_format_loss(mean_seconds)} ± {_format_loss(std_seconds)} | "
            f"Params: {n_params}"
        )
    else:
        logger.error(
            f"[{timestamp}] BENCH {status} | Denoiser: {denoiser_name} | "
            f"Error: {error or 'Unknown error'}"
        )
