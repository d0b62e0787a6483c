"""
USTD Metrics Module

Point and probabilistic scores, sample sets and the reference baselines the
trained models are compared against.

All scores here operate on de-normalized values.
"""

import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import norm

from src.ustd_errors import ConfigError, InputError
from src.ustd_graph import Graph


@dataclass(eq=False)
class SampleSet:
    """
    Probabilistic prediction of one window.

    Attributes:
        samples: (m, nodes, steps, d) de-normalized samples
        start: First time step of the condition window
        point_estimate: Per-element median across samples
    """

    samples: np.ndarray
    start: int = 0
    point_estimate: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim < 1 or self.samples.shape[0] < 1:
            raise InputError("A sample set needs at least one sample")
        self.point_estimate = np.median(self.samples, axis=0)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]


@dataclass
class MetricReport:
    """Scores of one model on one split."""

    task: str
    model: str
    split: str
    mae: float
    rmse: float
    crps: float
    n_samples: int
    n_windows: int
    horizon_mae: List[float] = field(default_factory=list)
    crps_normalized: bool = True

    def to_text(self) -> str:
        """Structured key=value text, one metric per line."""
        lines = [
            f"task={self.task}",
            f"model={self.model}",
            f"split={self.split}",
            f"mae={self.mae:.6f}",
            f"rmse={self.rmse:.6f}",
            f"crps={self.crps:.6f}",
            f"crps_normalized={str(self.crps_normalized).lower()}",
            f"n_samples={self.n_samples}",
            f"n_windows={self.n_windows}",
        ]
        lines += [f"mae_h{i + 1}={value:.6f}" for i, value in enumerate(self.horizon_mae)]
        return "\n".join(lines) + "\n"

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


def write_reports(reports: Sequence[MetricReport], directory: str) -> List[str]:
    """
    Write each report as key=value text plus one table of all reports.

    Args:
        reports: Reports to write
        directory: Output directory

    Returns:
        List[str]: Written file paths
    """
    os.makedirs(directory, exist_ok=True)
    paths = []
    for report in reports:
        path = os.path.join(directory, f"{report.task}_{report.model}_metrics.txt")
        with open(path, "w") as f:
            f.write(report.to_text())
        paths.append(path)

    rows = [{k: v for k, v in report.to_dict().items() if k != "horizon_mae"}
            for report in reports]
    table = os.path.join(directory, "metrics.csv")
    pd.DataFrame(rows).to_csv(table, index=False)
    paths.append(table)

    horizons = [report for report in reports if report.horizon_mae]
    if horizons:
        frame = pd.DataFrame({r.model: r.horizon_mae for r in horizons})
        frame.index = pd.RangeIndex(1, len(frame) + 1, name="horizon")
        horizon_table = os.path.join(directory, "horizon_mae.csv")
        frame.to_csv(horizon_table)
        paths.append(horizon_table)
    return paths


def _check_pair(pred: np.ndarray, truth: np.ndarray) -> None:
    if pred.shape != truth.shape:
        raise InputError(f"Prediction {pred.shape} and truth {truth.shape} differ")
    if truth.size == 0:
        raise InputError("Metrics need at least one value")


def mae(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean absolute error."""
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    _check_pair(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def rmse(pred: np.ndarray, truth: np.ndarray) -> float:
    """Root mean squared error."""
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    _check_pair(pred, truth)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def crps(
    samples: np.ndarray,
    truth: np.ndarray,
    normalized: bool = True,
    fair: bool = False,
) -> float:
    """
    Energy-form CRPS estimated from an ensemble.

    Per point: (1/m)Σ|s_i − y| − c·ΣΣ|s_i − s_j| with c = 1/(2m²), or
    1/(2m(m − 1)) when ``fair`` is set. Point scores are summed and divided
    by Σ|y| when normalized, otherwise averaged.

    Args:
        samples: (m, ...) ensemble with the truth's shape after the first axis
        truth: Observed values
        normalized: Divide by the total absolute truth
        fair: Use the unbiased pairwise term

    Returns:
        float: The CRPS

    Raises:
        InputError: On shape mismatches, fair mode with one sample, or an
            all-zero truth in normalized mode
    """
    samples = np.asarray(samples, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if samples.shape[1:] != truth.shape or samples.shape[0] < 1:
        raise InputError(
            f"Samples {samples.shape} do not match truth {truth.shape}"
        )
    if truth.size == 0:
        raise InputError("CRPS needs at least one value")
    m = samples.shape[0]
    if fair and m < 2:
        raise InputError("The fair CRPS estimator needs at least two samples")

    spread = np.mean(np.abs(samples - truth[None]), axis=0)
    # Σ_ij |s_i − s_j| = 2 Σ_i (2i − m + 1)·s_(i) over sorted samples
    ordered = np.sort(samples, axis=0)
    ranks = (2 * np.arange(m) - m + 1).reshape(-1, *([1] * truth.ndim))
    pairwise = 2.0 * np.sum(ranks * ordered, axis=0)
    denominator = 2.0 * m * (m - 1) if fair else 2.0 * m * m
    point_scores = spread - pairwise / denominator

    if not normalized:
        return float(np.mean(point_scores))
    scale = np.sum(np.abs(truth))
    if scale == 0:
        raise InputError(
            "Normalized CRPS is undefined for an all-zero truth; "
            "use the unnormalized mode"
        )
    return float(np.sum(point_scores) / scale)


def baseline_persistence(condition: np.ndarray, horizon: int) -> np.ndarray:
    """
    Repeat the last observed step across the horizon.

    Args:
        condition: (nodes, T, d) condition window
        horizon: Number of future steps

    Returns:
        np.ndarray: (nodes, horizon, d) forecast
    """
    return np.repeat(condition[:, -1:], horizon, axis=1)


def climatology_stats(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-node Gaussian statistics of a training segment.

    Args:
        values: (nodes, steps, d) raw training values

    Returns:
        Tuple of (mean, std), each (nodes, d)
    """
    return values.mean(axis=1), values.std(axis=1)


def baseline_climatology(
    mean: np.ndarray,
    std: np.ndarray,
    n_samples: int,
    steps: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Ensemble drawn from the per-node training Gaussian.

    Args:
        mean: (nodes, d) training means
        std: (nodes, d) training standard deviations
        n_samples: Ensemble size m
        steps: Steps per sample
        rng: Random generator

    Returns:
        np.ndarray: (m, nodes, steps, d) samples
    """
    noise = rng.standard_normal((n_samples, mean.shape[0], steps, mean.shape[1]))
    return mean[None, :, None, :] + std[None, :, None, :] * noise


def baseline_idw(
    graph: Graph,
    observed_nodes: np.ndarray,
    observed_values: np.ndarray,
    target_nodes: np.ndarray,
) -> np.ndarray:
    """
    Inverse-distance-weighted interpolation with weights 1/dist².

    A target that coincides with an observed node copies that node.

    Args:
        graph: Graph carrying node coordinates
        observed_nodes: (N,) indices of observed nodes
        observed_values: (N, T, d) observed window
        target_nodes: (M,) indices of the nodes to estimate

    Returns:
        np.ndarray: (M, T, d) estimates

    Raises:
        ConfigError: If the graph has no coordinates
        InputError: If there is no observed node
    """
    if graph.coords is None:
        raise ConfigError("Inverse-distance weighting needs node coordinates")
    if len(observed_nodes) == 0:
        raise InputError("Inverse-distance weighting needs at least one observed node")
    source = graph.coords[np.asarray(observed_nodes)]
    target = graph.coords[np.asarray(target_nodes)]
    dist = np.linalg.norm(target[:, None, :] - source[None, :, :], axis=-1)

    estimates = np.empty((len(target_nodes),) + observed_values.shape[1:])
    for row, distances in enumerate(dist):
        nearest = int(np.argmin(distances))
        if distances[nearest] == 0:
            estimates[row] = observed_values[nearest]
            continue
        weights = 1.0 / distances ** 2
        estimates[row] = np.tensordot(weights / weights.sum(), observed_values, axes=1)
    return estimates


def score_sample_sets(
    sample_sets: Sequence[SampleSet],
    truths: Sequence[np.ndarray],
    task: str,
    model: str,
    split: str = "test",
    normalized: bool = True,
    fair: bool = True,
) -> MetricReport:
    """
    Score a model's sample sets against the de-normalized truths.

    Forecasting MAE is the mean of the per-horizon MAE vector.

    Args:
        sample_sets: One SampleSet per window
        truths: (nodes, steps, d) truth per window
        task: "forecast" or "krige"
        model: Name in the report
        split: Split identifier
        normalized: Normalize CRPS by Σ|y|
        fair: Use the unbiased CRPS pairwise term when m > 1

    Returns:
        MetricReport: The scores
    """
    if not sample_sets:
        raise InputError(f"No windows to score for {model}")
    preds = np.stack([s.point_estimate for s in sample_sets])
    truth = np.stack([np.asarray(t, dtype=np.float64) for t in truths])
    _check_pair(preds, truth)
    ensemble = np.stack([s.samples for s in sample_sets], axis=1)
    m = ensemble.shape[0]

    errors = np.abs(preds - truth)
    horizon_mae: List[float] = []
    if task == "forecast":
        horizon = errors.mean(axis=(0, 1, 3))
        horizon_mae = [float(v) for v in horizon]
        mae_value = float(np.mean(horizon))
    else:
        mae_value = mae(preds, truth)

    return MetricReport(
        task=task,
        model=model,
        split=split,
        mae=mae_value,
        rmse=rmse(preds, truth),
        crps=crps(ensemble, truth, normalized=normalized, fair=fair and m > 1),
        n_samples=m,
        n_windows=len(sample_sets),
        horizon_mae=horizon_mae,
        crps_normalized=normalized,
    )


def gaussian_crps(sigma: float, z: float = 0.0) -> float:
    """Closed-form CRPS of N(μ, σ²) at y = μ + zσ."""
    return float(sigma * (z * (2 * norm.cdf(z) - 1) + 2 * norm.pdf(z)
                          - 1 / np.sqrt(np.pi)))
