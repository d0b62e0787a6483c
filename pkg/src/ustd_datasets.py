"""
USTD Datasets Module

Dataset ingestion, normalization, windowing and splits for both tasks.

Signals are stored in a small binary container: a text header line
``USTD1 N T d`` followed by N×T×d little-endian float32 values in row-major
order. A ``node,t,channel,value`` CSV is accepted as a fallback, and a JSON
sidecar (``<signals>.meta.json``) carries granularity, attribute and units.

Windows are built from a normalized copy of the series; every WindowPair
records which segment its normalization statistics came from so callers can
assert there is no leakage across splits.
"""

import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from torch.utils.data import Dataset

from src.ustd_config import GraphConfig, SynthConfig
from src.ustd_errors import DataFormatError, InputError
from src.ustd_graph import (
    Graph,
    build_adjacency_from_coords,
    load_coordinates,
    load_edge_list,
    normalize_adjacency,
)
from src.ustd_logging import logger

CONTAINER_MAGIC = "USTD1"

Segment = Tuple[int, int]


@dataclass(eq=False)
class SignalSeries:
    """
    Node signals over the full time axis.

    Attributes:
        values: N×T_total×d_x array without NaNs
        timestamps: T_total monotone time indices
        granularity: Minutes per step (None when unknown)
        gap_mask: N×T_total bool, True where a reading was missing and
            could not be forward-filled; windows holding such a cell are dropped
        metadata: Attribute name, units, provenance and generator params
    """

    values: np.ndarray
    timestamps: np.ndarray
    granularity: Optional[float] = None
    gap_mask: Optional[np.ndarray] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.values.ndim != 3:
            raise DataFormatError(
                f"Signals must be N×T×d, got shape {self.values.shape}"
            )
        if np.isnan(self.values).any():
            raise DataFormatError("Signals contain NaNs after ingestion")
        if len(self.timestamps) != self.values.shape[1]:
            raise DataFormatError(
                f"{len(self.timestamps)} timestamps for {self.values.shape[1]} steps"
            )
        if self.gap_mask is None:
            self.gap_mask = np.zeros(self.values.shape[:2], dtype=bool)

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def t_total(self) -> int:
        return self.values.shape[1]

    @property
    def n_channels(self) -> int:
        return self.values.shape[2]


@dataclass(eq=False)
class WindowPair:
    """
    One (condition, target) sample.

    Attributes:
        condition: N_c×T×d_x condition window
        target: N_t×T_t×d_y target window
        task: "forecast" or "krige"
        start: First time step of the condition window
        condition_nodes: Node indices of the condition rows
        target_nodes: Node indices of the target rows
        stats_provenance: Segment the normalization statistics came from
    """

    condition: np.ndarray
    target: np.ndarray
    task: str
    start: int
    condition_nodes: np.ndarray
    target_nodes: np.ndarray
    stats_provenance: Optional[Segment] = None


@dataclass(eq=False)
class Normalizer:
    """Per-channel z-score statistics fitted on the training segment only."""

    mean: np.ndarray
    std: np.ndarray
    fitted_on: Segment

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Normalize values whose last axis is the channel axis."""
        return (values - self.mean) / self.std

    def invert(self, values: np.ndarray) -> np.ndarray:
        """Map normalized values back to the original scale."""
        return values * self.std + self.mean

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "fitted_on": list(self.fitted_on),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Normalizer":
        return cls(
            mean=np.asarray(data["mean"], dtype=np.float64),
            std=np.asarray(data["std"], dtype=np.float64),
            fitted_on=tuple(data["fitted_on"]),
        )


@dataclass(eq=False)
class SplitSpec:
    """
    Temporal segments and, for kriging, the node partition.

    Attributes:
        ratios: Train/val/test ratios summing to 1
        segments: Mapping of split name to [start, stop) time steps
        observed: Observed node indices (kriging condition side)
        unobserved: Unobserved node indices (kriging targets)
    """

    ratios: Tuple[float, float, float]
    segments: Dict[str, Segment]
    observed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    unobserved: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def make_temporal_split(t_total: int, ratios: Sequence[float]) -> SplitSpec:
    """
    Contiguous train < val < test segments.

    Args:
        t_total: Number of time steps
        ratios: Three non-negative ratios summing to 1

    Returns:
        SplitSpec: Segments keyed by "train", "val" and "test"
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
        raise InputError(f"Split ratios must be three values summing to 1, got {ratios}")
    train_end = int(round(ratios[0] * t_total))
    val_end = int(round((ratios[0] + ratios[1]) * t_total))
    segments = {
        "train": (0, train_end),
        "val": (train_end, val_end),
        "test": (val_end, t_total),
    }
    return SplitSpec(ratios=tuple(ratios), segments=segments)


def _metadata_path(signals_path: str) -> str:
    return f"{signals_path}.meta.json"


def _read_container(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline()
        if not header:
            raise DataFormatError(f"Signals file {path} is empty")
        parts = header.decode("ascii", errors="replace").split()
        if len(parts) != 4 or parts[0] != CONTAINER_MAGIC:
            raise DataFormatError(
                f"Signals file {path} must start with '{CONTAINER_MAGIC} N T d'"
            )
        try:
            n, t, d = (int(p) for p in parts[1:])
        except ValueError as e:
            raise DataFormatError(f"Invalid header in {path}: {header!r}") from e
        payload = np.frombuffer(f.read(), dtype="<f4")
    if payload.size != n * t * d:
        raise DataFormatError(
            f"Signals file {path} declares {n}×{t}×{d} values but holds {payload.size}"
        )
    return payload.reshape(n, t, d).astype(np.float64)


def _read_csv_signals(path: str) -> np.ndarray:
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError as e:
        raise DataFormatError(f"Signals file {path} is empty") from e
    missing = {"node", "t", "channel", "value"} - set(frame.columns)
    if missing or frame.empty:
        raise DataFormatError(
            f"Signals CSV {path} needs columns node,t,channel,value and data rows"
        )
    n = int(frame["node"].max()) + 1
    t = int(frame["t"].max()) + 1
    d = int(frame["channel"].max()) + 1
    values = np.full((n, t, d), np.nan)
    values[frame["node"].to_numpy(), frame["t"].to_numpy(),
           frame["channel"].to_numpy()] = frame["value"].to_numpy(dtype=np.float64)
    return values


def _forward_fill(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray, int]:
    """Forward-fill NaNs along time; leading gaps stay flagged and are zeroed."""
    missing = np.isnan(values)
    n_missing = int(missing.sum())
    if n_missing == 0:
        return values, np.zeros(values.shape[:2], dtype=bool), 0
    n, t, d = values.shape
    frame = pd.DataFrame(values.transpose(1, 0, 2).reshape(t, n * d))
    filled = frame.ffill().to_numpy().reshape(t, n, d).transpose(1, 0, 2)
    gaps = np.isnan(filled).any(axis=2)
    filled = np.nan_to_num(filled, nan=0.0)
    return filled, gaps, n_missing


def start_minutes(metadata: Dict[str, Any]) -> float:
    """
    Minutes from Monday 00:00 to the first step, read from ``start_time``.

    Args:
        metadata: Sidecar metadata; ``start_time`` is any pandas-parsable timestamp

    Returns:
        float: Offset in minutes, 0.0 when no start time is recorded

    Raises:
        DataFormatError: If the start time cannot be parsed
    """
    value = metadata.get("start_time")
    if value is None:
        return 0.0
    try:
        stamp = pd.Timestamp(value)
    except (TypeError, ValueError) as e:
        raise DataFormatError(f"Invalid start_time '{value}': {e}") from e
    if pd.isna(stamp):
        raise DataFormatError(f"Invalid start_time '{value}'")
    return float(stamp.dayofweek * 1440 + stamp.hour * 60 + stamp.minute
                 + stamp.second / 60.0)


def load_signals(path: str) -> SignalSeries:
    """
    Read a signals file (container or CSV) and its optional sidecar.

    Args:
        path: Signals file path

    Returns:
        SignalSeries: Gap-handled series with metadata

    Raises:
        DataFormatError: On empty or malformed files
    """
    if not os.path.exists(path):
        raise DataFormatError(f"Signals file {path} does not exist")
    if os.path.getsize(path) == 0:
        raise DataFormatError(f"Signals file {path} is empty")

    with open(path, "rb") as f:
        is_container = f.read(len(CONTAINER_MAGIC)) == CONTAINER_MAGIC.encode()
    raw = _read_container(path) if is_container else _read_csv_signals(path)
    values, gaps, n_missing = _forward_fill(raw)

    metadata: Dict[str, Any] = {}
    if os.path.exists(_metadata_path(path)):
        with open(_metadata_path(path), "r") as f:
            try:
                metadata = json.load(f)
            except json.JSONDecodeError as e:
                raise DataFormatError(f"Invalid metadata sidecar for {path}: {e}") from e
    start_minutes(metadata)  # reject an unparsable start_time at load
    metadata["missing_filled"] = n_missing
    metadata["gap_cells"] = int(gaps.sum())
    if n_missing:
        logger.info(
            f"Forward-filled {n_missing} missing readings in {path}; "
            f"{int(gaps.sum())} leading gap cells remain flagged"
        )

    return SignalSeries(
        values=values,
        timestamps=np.arange(values.shape[1]),
        granularity=metadata.get("granularity"),
        gap_mask=gaps,
        metadata=metadata,
    )


def save_signals(path: str, series: SignalSeries) -> None:
    """
    Write a series in the binary container format plus its JSON sidecar.

    Args:
        path: Output signals path
        series: Series to write
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    n, t, d = series.values.shape
    with open(path, "wb") as f:
        f.write(f"{CONTAINER_MAGIC} {n} {t} {d}\n".encode("ascii"))
        f.write(np.ascontiguousarray(series.values, dtype="<f4").tobytes())
    metadata = dict(series.metadata)
    metadata["granularity"] = series.granularity
    with open(_metadata_path(path), "w") as f:
        json.dump(metadata, f, indent=4, default=_json_default)


def save_graph(path: str, graph: Graph) -> None:
    """
    Write a graph as an edge list and, when present, a coordinates CSV.

    Args:
        path: Edge list output path; coordinates go to ``<path>.coords.csv``
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    src, dst = np.nonzero(graph.adjacency)
    pd.DataFrame({
        "src": src, "dst": dst, "weight": graph.adjacency[src, dst]
    }).to_csv(path, header=False, index=False, float_format="%.17g")
    if graph.coords is not None:
        pd.DataFrame({
            "node_id": list(graph.node_ids),
            "x": graph.coords[:, 0],
            "y": graph.coords[:, 1],
        }).to_csv(f"{path}.coords.csv", index=False, float_format="%.17g")


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"Cannot serialize {type(value)}")


def load_dataset(
    signals_path: str,
    adjacency_path: str,
    graph_config: Optional[GraphConfig] = None,
) -> Tuple[Graph, SignalSeries]:
    """
    Load a graph and its signals, checking that their shapes agree.

    Args:
        signals_path: Signals container or CSV
        adjacency_path: ``src,dst,weight`` edge list, or ``node_id,x,y``
            coordinates when graph_config.adjacency_format is "coords"
        graph_config: Adjacency settings

    Returns:
        Tuple of (Graph, SignalSeries)

    Raises:
        DataFormatError: On malformed files or a node-count mismatch
    """
    graph_config = graph_config or GraphConfig()
    series = load_signals(signals_path)

    if graph_config.adjacency_format == "coords":
        coords, node_ids = load_coordinates(adjacency_path)
        graph = build_adjacency_from_coords(
            coords, sigma=graph_config.sigma, epsilon=graph_config.epsilon,
            node_ids=node_ids,
        )
    else:
        graph = load_edge_list(adjacency_path, series.n_nodes,
                               symmetric=graph_config.symmetric)
        coords_path = f"{adjacency_path}.coords.csv"
        if os.path.exists(coords_path):
            coords, node_ids = load_coordinates(coords_path)
            if coords.shape[0] == graph.n_nodes:
                graph = Graph(adjacency=graph.adjacency, coords=coords,
                              node_ids=node_ids)

    if graph.n_nodes != series.n_nodes:
        raise DataFormatError(
            f"Signals have {series.n_nodes} nodes (shape {series.values.shape}) "
            f"but the graph has {graph.n_nodes} nodes "
            f"(adjacency {graph.adjacency.shape})"
        )
    series.metadata.setdefault("attribute", "value")
    return graph, series


def fit_normalizer(series: SignalSeries, train_segment: Segment) -> Normalizer:
    """
    Fit per-channel z-score statistics on the training segment only.

    Args:
        series: Raw series
        train_segment: [start, stop) time steps of the training split

    Returns:
        Normalizer: Fitted statistics with their provenance

    Raises:
        InputError: If the segment is empty or a channel has zero variance
    """
    start, stop = train_segment
    if stop <= start:
        raise InputError(f"Training segment {train_segment} is empty")
    values = series.values[:, start:stop]
    gaps = series.gap_mask[:, start:stop]
    observed = values[~gaps]
    if observed.size == 0:
        raise InputError(f"Training segment {train_segment} holds no observed values")
    mean = observed.mean(axis=0)
    std = observed.std(axis=0)
    if np.any(std <= 0):
        raise InputError(
            f"Channels {np.nonzero(std <= 0)[0].tolist()} have zero variance "
            "on the training segment"
        )
    return Normalizer(mean=mean, std=std, fitted_on=(int(start), int(stop)))


def normalize_series(series: SignalSeries, normalizer: Normalizer) -> SignalSeries:
    """Return a normalized copy of the series tagged with stat provenance."""
    metadata = dict(series.metadata)
    metadata["normalized_with"] = list(normalizer.fitted_on)
    return SignalSeries(
        values=normalizer.apply(series.values),
        timestamps=series.timestamps,
        granularity=series.granularity,
        gap_mask=series.gap_mask,
        metadata=metadata,
    )


def _provenance(series: SignalSeries) -> Optional[Segment]:
    stats = series.metadata.get("normalized_with")
    return tuple(stats) if stats is not None else None


def _window_starts(
    t_start: int, t_stop: int, length: int, stride: int
) -> range:
    if stride < 1:
        raise InputError(f"Stride must be positive, got {stride}")
    if t_stop - t_start < length:
        raise InputError(
            f"Segment [{t_start}, {t_stop}) holds {t_stop - t_start} steps, "
            f"needs at least {length}"
        )
    return range(t_start, t_stop - length + 1, stride)


def make_forecast_windows(
    series: SignalSeries,
    window: int = 12,
    horizon: int = 12,
    stride: int = 1,
    segment: Optional[Segment] = None,
) -> List[WindowPair]:
    """
    Slide (T past steps → T′ future steps) windows over a segment.

    Args:
        series: Normalized series
        window: Condition length T
        horizon: Target length T′
        stride: Step between window starts
        segment: [start, stop) time steps; the whole series by default

    Returns:
        List[WindowPair]: floor((len − T − T′)/stride) + 1 pairs, minus any
            pair holding a gap cell that forward-filling could not fill

    Raises:
        InputError: If the segment is shorter than T + T′
    """
    t_start, t_stop = segment or (0, series.t_total)
    nodes = np.arange(series.n_nodes)
    provenance = _provenance(series)
    pairs = []
    for start in _window_starts(t_start, t_stop, window + horizon, stride):
        span = slice(start, start + window + horizon)
        if series.gap_mask[:, span].any():
            continue
        pairs.append(WindowPair(
            condition=series.values[:, start:start + window],
            target=series.values[:, start + window:start + window + horizon],
            task="forecast",
            start=start,
            condition_nodes=nodes,
            target_nodes=nodes,
            stats_provenance=provenance,
        ))
    return pairs


def make_kriging_partition(
    graph: Graph,
    series: SignalSeries,
    ratio: Sequence[int] = (2, 1),
    rng: Optional[np.random.Generator] = None,
    window: int = 12,
    stride: int = 1,
    segment: Optional[Segment] = None,
    split: Optional[SplitSpec] = None,
) -> Tuple[SplitSpec, List[WindowPair]]:
    """
    Fix an observed/unobserved node partition and window the series.

    The partition is drawn once and reused for every window (transductive
    kriging). Pass an existing SplitSpec to reuse its partition on another
    segment.

    Args:
        graph: Full graph
        series: Normalized series
        ratio: Observed:unobserved ratio N:M
        rng: Generator for the partition draw
        window: Window length T, shared by condition and target
        stride: Step between window starts
        segment: [start, stop) time steps; the whole series by default
        split: Existing split whose partition should be reused

    Returns:
        Tuple of (SplitSpec with the partition, list of WindowPair)

    Raises:
        InputError: If fewer than 3 nodes or no unobserved node results
    """
    if graph.n_nodes != series.n_nodes:
        raise InputError(
            f"Graph has {graph.n_nodes} nodes, series has {series.n_nodes}"
        )
    if split is None or split.unobserved.size == 0:
        if graph.n_nodes < 3:
            raise InputError(f"Kriging needs at least 3 nodes, got {graph.n_nodes}")
        if rng is None:
            raise InputError("A random generator is required to draw the partition")
        n_obs_ratio, n_unobs_ratio = ratio
        n_unobserved = int(np.floor(graph.n_nodes * n_unobs_ratio
                                    / (n_obs_ratio + n_unobs_ratio) + 0.5))
        n_unobserved = min(n_unobserved, graph.n_nodes - 1)
        if n_unobserved < 1:
            raise InputError(
                f"Ratio {tuple(ratio)} leaves no unobserved node among {graph.n_nodes}"
            )
        permutation = rng.permutation(graph.n_nodes)
        unobserved = np.sort(permutation[:n_unobserved])
        observed = np.sort(permutation[n_unobserved:])
        base = split or make_temporal_split(series.t_total, (1.0, 0.0, 0.0))
        split = SplitSpec(ratios=base.ratios, segments=base.segments,
                          observed=observed, unobserved=unobserved)

    t_start, t_stop = segment or (0, series.t_total)
    provenance = _provenance(series)
    pairs = []
    for start in _window_starts(t_start, t_stop, window, stride):
        span = slice(start, start + window)
        if series.gap_mask[:, span].any():
            continue
        pairs.append(WindowPair(
            condition=series.values[split.observed, span],
            target=series.values[split.unobserved, span],
            task="krige",
            start=start,
            condition_nodes=split.observed,
            target_nodes=split.unobserved,
            stats_provenance=provenance,
        ))
    return split, pairs


def calendar_features(
    series: SignalSeries, start: int
) -> Optional[np.ndarray]:
    """
    Time-of-day and day-of-week sin/cos features of a window start.

    Step times are offset by the series' ``start_time`` metadata when
    present; otherwise step 0 is taken to fall on Monday 00:00.

    Args:
        series: Series whose granularity is given in minutes
        start: Window start step

    Returns:
        np.ndarray of 4 features, or None when the granularity is unknown
    """
    if not series.granularity:
        return None
    minutes = start_minutes(series.metadata) \
        + float(series.timestamps[start]) * float(series.granularity)
    day_phase = 2 * np.pi * (minutes % 1440.0) / 1440.0
    week_phase = 2 * np.pi * (minutes % 10080.0) / 10080.0
    return np.array([np.sin(day_phase), np.cos(day_phase),
                     np.sin(week_phase), np.cos(week_phase)])


class WindowDataset(Dataset):
    """Torch dataset over WindowPairs yielding float tensors."""

    def __init__(self, pairs: Sequence[WindowPair],
                 series: Optional[SignalSeries] = None):
        if not pairs:
            raise InputError("WindowDataset needs at least one window")
        self.pairs = list(pairs)
        self.series = series

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, index: int) -> Dict[str, torch.Tensor]:
        pair = self.pairs[index]
        item = {
            "condition": torch.as_tensor(pair.condition, dtype=torch.float32),
            "target": torch.as_tensor(pair.target, dtype=torch.float32),
            "start": torch.as_tensor(pair.start),
        }
        if self.series is not None:
            calendar = calendar_features(self.series, pair.start)
            if calendar is not None:
                item["calendar"] = torch.as_tensor(calendar, dtype=torch.float32)
        return item


def synthesize_graph_signal(
    n_nodes: int,
    t_total: int,
    rng: np.random.Generator,
    config: Optional[SynthConfig] = None,
    graph_config: Optional[GraphConfig] = None,
) -> Tuple[Graph, SignalSeries]:
    """
    Generate diffusion-coupled seasonal signals on a random geometric graph.

    Each node's signal is a seasonal component (two incommensurate sinusoids
    with node-specific phases), plus AR(1) noise whose innovations are mixed
    through the normalized adjacency at every step, plus white observation
    noise at the configured SNR.

    Args:
        n_nodes: Number of nodes, at least 4
        t_total: Number of time steps
        rng: Random generator; output is bit-identical for equal states
        config: Generator parameters
        graph_config: Kernel settings for the geometric graph

    Returns:
        Tuple of (Graph with coordinates, SignalSeries with d_x = 1)

    Raises:
        InputError: If n_nodes < 4 or t_total < 1
    """
    config = config or SynthConfig()
    graph_config = graph_config or GraphConfig()
    if n_nodes < 4:
        raise InputError(f"Synthetic graphs need at least 4 nodes, got {n_nodes}")
    if t_total < 1:
        raise InputError(f"t_total must be positive, got {t_total}")
    if not -1 < config.ar_coefficient < 1:
        raise InputError(f"AR coefficient must be in (-1, 1), got {config.ar_coefficient}")

    coords = rng.uniform(0.0, 1.0, size=(n_nodes, 2))
    graph = build_adjacency_from_coords(coords, sigma=graph_config.sigma,
                                        epsilon=graph_config.epsilon)
    mixing = normalize_adjacency(graph)

    t = np.arange(t_total, dtype=np.float64)
    phases = rng.uniform(0.0, 2 * np.pi, size=(len(config.periods), n_nodes))
    seasonal = np.zeros((n_nodes, t_total))
    for amplitude, period, phase in zip(config.amplitudes, config.periods, phases):
        seasonal += amplitude * np.sin(2 * np.pi * t[None, :] / period + phase[:, None])

    innovations = rng.standard_normal((t_total, n_nodes)) @ mixing.T
    ar = np.zeros((n_nodes, t_total))
    rho = config.ar_coefficient
    state = np.zeros(n_nodes)
    for step in range(t_total):
        state = rho * state + config.ar_scale * innovations[step]
        ar[:, step] = state

    clean = seasonal + ar
    if config.snr_db is None:
        observation = np.zeros_like(clean)
        noise_std = 0.0
    else:
        noise_std = float(np.sqrt(clean.var() / 10 ** (config.snr_db / 10.0)))
        observation = noise_std * rng.standard_normal(clean.shape)

    values = (clean + observation)[:, :, None]
    metadata = {
        "attribute": "synthetic",
        "units": "arbitrary",
        "generator": {
            "n_nodes": n_nodes,
            "t_total": t_total,
            "ar_coefficient": rho,
            "ar_scale": config.ar_scale,
            "snr_db": config.snr_db,
            "noise_std": noise_std,
            "amplitudes": list(config.amplitudes),
            "periods": list(config.periods),
        },
    }
    series = SignalSeries(values=values, timestamps=np.arange(t_total),
                          granularity=None, metadata=metadata)
    return graph, series
