"""
USTD Pipeline Module

End-to-end orchestration of a USTD run:

1. prepare_data: load or receive a graph and signals, split them in time,
   fit the normalizer on the training segment and build task windows.
2. PretrainManager: masked, graph-sampled encoder pre-training with
   resumable checkpoints.
3. DenoiserTrainer / train_denoiser: denoiser training with the encoder
   finetuned at a reduced learning rate, early stopping and divergence
   guards.
4. infer / evaluate_model: conditional sampling of the evaluation windows,
   de-normalization and scoring, plus the reference baselines.

Experiments built on top of these (ablations, Gaussian recovery and the
sampling benchmark) live at the end of the module.
"""

import copy
import os
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from torch.utils.data import DataLoader
from tqdm import tqdm

from src.ustd_checkpoint import check_encoder_compatible, load_checkpoint, save_checkpoint
from src.ustd_config import ConfigManager, RunConfig
from src.ustd_datasets import (
    Normalizer,
    SignalSeries,
    SplitSpec,
    WindowDataset,
    WindowPair,
    fit_normalizer,
    load_dataset,
    make_forecast_windows,
    make_kriging_partition,
    make_temporal_split,
    normalize_series,
    save_signals,
)
from src.ustd_denoisers import (
    DenoiserContext,
    ScalarDenoiser,
    build_denoiser,
    count_parameters,
    match_ffn_dim,
)
from src.ustd_diffusion import NoiseSchedule, make_schedule, sample, training_loss
from src.ustd_encoder import (
    MaskedAutoencoder,
    STEncoder,
    build_encoder,
    encode,
    pretrain_step,
)
from src.ustd_errors import ConfigError, DataFormatError, InputError, NumericError
from src.ustd_graph import Graph, SpatialEmbedding, flip_signs, laplacian_embedding
from src.ustd_logging import (
    log_bench_operation,
    log_evaluation_operation,
    log_pretrain_operation,
    log_train_operation,
    logger,
)
from src.ustd_metrics import (
    MetricReport,
    SampleSet,
    baseline_climatology,
    baseline_idw,
    baseline_persistence,
    climatology_stats,
    score_sample_sets,
)

SPLITS = ("train", "val", "test")

ENCODER_CHECKPOINT = "encoder.pt"


def denoiser_checkpoint_name(task: str) -> str:
    return f"denoiser_{task}.pt"


def seed_everything(seed: int) -> np.random.Generator:
    """Seed torch and return the numpy generator of a run."""
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


@dataclass(eq=False)
class PreparedData:
    """
    Everything a run needs from its dataset.

    Attributes:
        task: "forecast" or "krige"
        graph: Full graph
        raw: Series on the original scale
        series: Series normalized with train-only statistics
        normalizer: The fitted statistics
        split: Temporal segments and, for kriging, the node partition
        windows: WindowPairs per split name
        spatial: Spatial embeddings of every node of the full graph
    """

    task: str
    graph: Graph
    raw: SignalSeries
    series: SignalSeries
    normalizer: Normalizer
    split: SplitSpec
    windows: Dict[str, List[WindowPair]]
    spatial: SpatialEmbedding

    @property
    def condition_nodes(self) -> np.ndarray:
        if self.task == "krige":
            return self.split.observed
        return np.arange(self.graph.n_nodes)

    @property
    def target_nodes(self) -> np.ndarray:
        if self.task == "krige":
            return self.split.unobserved
        return np.arange(self.graph.n_nodes)

    @property
    def condition_graph(self) -> Graph:
        """Graph the encoder runs on: observed nodes only when kriging."""
        if self.task == "krige":
            return self.graph.subgraph(self.split.observed)
        return self.graph

    def context(self, calendar: Optional[torch.Tensor] = None,
                dtype: torch.dtype = torch.float32,
                spatial: Optional[SpatialEmbedding] = None) -> DenoiserContext:
        """Denoiser context; `spatial` replaces the fixed embedding when given."""
        spatial = spatial if spatial is not None else self.spatial
        vectors = torch.as_tensor(spatial.vectors, dtype=dtype)
        return DenoiserContext(
            target_spatial=vectors[torch.as_tensor(self.target_nodes)],
            cond_spatial=vectors[torch.as_tensor(self.condition_nodes)],
            calendar=calendar.to(dtype) if calendar is not None else None,
        )

    def dataset(self, split: str) -> WindowDataset:
        return WindowDataset(self.windows[split], self.series)

    def truth(self, pair: WindowPair) -> np.ndarray:
        """De-normalized target of a window, read from the raw series."""
        length = pair.target.shape[1]
        offset = pair.condition.shape[1] if self.task == "forecast" else 0
        span = slice(pair.start + offset, pair.start + offset + length)
        return self.raw.values[pair.target_nodes, span]


@dataclass
class TrainRun:
    """Record of one training run."""

    task: str
    config: Dict[str, Any]
    seed: int
    step: int = 0
    losses: List[float] = field(default_factory=list)
    val_losses: List[float] = field(default_factory=list)
    best_val_loss: Optional[float] = None
    checkpoint_paths: List[str] = field(default_factory=list)
    stopped_reason: str = ""


def dataset_paths(config: RunConfig) -> Tuple[str, str]:
    """Signals and adjacency paths, falling back to the synthetic output."""
    signals = config.data.signals_path or os.path.join(
        config.synth.output_dir, "signals.ustd")
    adjacency = config.data.adjacency_path or os.path.join(
        config.synth.output_dir, "adjacency.csv")
    return signals, adjacency


def prepare_data(
    config: RunConfig,
    rng: np.random.Generator,
    graph: Optional[Graph] = None,
    series: Optional[SignalSeries] = None,
    partition: Optional[Tuple[Sequence[int], Sequence[int]]] = None,
    normalizer: Optional[Normalizer] = None,
) -> PreparedData:
    """
    Split, normalize and window a dataset for the configured task.

    Args:
        config: Run configuration
        rng: Generator for the kriging partition draw
        graph: In-memory graph; loaded from the configured files when absent
        series: In-memory raw series; loaded with the graph when absent
        partition: (observed, unobserved) node indices to reuse for kriging
        normalizer: Statistics to reuse, e.g. those stored with a trained
            model; fitted on the training segment when absent

    Returns:
        PreparedData: Windows for every split and the shared statistics

    Raises:
        DataFormatError: If any window's statistics do not come from the
            training segment
    """
    if graph is None or series is None:
        signals_path, adjacency_path = dataset_paths(config)
        graph, series = load_dataset(signals_path, adjacency_path, config.graph)

    split = make_temporal_split(series.t_total, config.data.split_ratios)
    if normalizer is None:
        normalizer = fit_normalizer(series, split.segments["train"])
    else:
        if normalizer.mean.shape[-1] != series.values.shape[-1]:
            raise DataFormatError(
                f"Normalizer has {normalizer.mean.shape[-1]} channels, "
                f"series has {series.values.shape[-1]}"
            )
        logger.info(f"Reusing normalization statistics fitted on {normalizer.fitted_on}")
    normalized = normalize_series(series, normalizer)
    data_cfg = config.data

    windows: Dict[str, List[WindowPair]] = {}
    if config.task == "forecast":
        for name in SPLITS:
            stride = data_cfg.stride if name == "train" else data_cfg.eval_stride
            windows[name] = make_forecast_windows(
                normalized, data_cfg.window, data_cfg.horizon, stride,
                segment=split.segments[name],
            )
    else:
        if partition is not None:
            split = SplitSpec(ratios=split.ratios, segments=split.segments,
                              observed=np.asarray(partition[0], dtype=np.int64),
                              unobserved=np.asarray(partition[1], dtype=np.int64))
        for name in SPLITS:
            stride = data_cfg.stride if name == "train" else data_cfg.eval_stride
            split, windows[name] = make_kriging_partition(
                graph, normalized, data_cfg.krige_ratio, rng, data_cfg.window,
                stride, segment=split.segments[name], split=split,
            )

    for name, pairs in windows.items():
        if not pairs:
            raise DataFormatError(f"Split '{name}' has no complete window")
        if any(pair.stats_provenance != normalizer.fitted_on for pair in pairs):
            raise DataFormatError(
                f"Split '{name}' holds windows normalized with statistics "
                f"not fitted on the training segment"
            )

    if graph.n_nodes < 2:
        raise InputError("Spatial embeddings need a graph with at least two nodes")
    spatial_dim = min(config.graph.spatial_dim, graph.n_nodes - 1)
    if spatial_dim != config.graph.spatial_dim:
        logger.info(
            f"Spatial embedding reduced to {spatial_dim} dimensions for a "
            f"{graph.n_nodes}-node graph"
        )
    spatial = laplacian_embedding(graph, spatial_dim)

    return PreparedData(
        task=config.task,
        graph=graph,
        raw=series,
        series=normalized,
        normalizer=normalizer,
        split=split,
        windows=windows,
        spatial=spatial,
    )


def _spatial_config(config: RunConfig, data: PreparedData) -> RunConfig:
    """Copy of the config whose spatial size matches the prepared embedding."""
    config = copy.deepcopy(config)
    config.graph.spatial_dim = data.spatial.vectors.shape[1]
    return config


class PretrainManager:
    """
    Manages masked encoder pre-training.

    Draws condition batches from the training windows, runs pretrain_step
    on a freshly sampled subgraph with a fresh mask every step, logs the
    masked-MAE curve and writes resumable checkpoints that carry the
    optimizer state, step counter and generator state.
    """

    def __init__(self, config: RunConfig, data: PreparedData, seed: int,
                 checkpoint_path: Optional[str] = None):
        """
        Initialize the pre-training manager.

        Args:
            config: Run configuration
            data: Prepared dataset; training-split conditions are used
            seed: Seed of the subgraph, mask and batch draws
            checkpoint_path: Where checkpoints are written
        """
        self.config = config
        self.data = data
        self.seed = seed
        self.checkpoint_path = checkpoint_path or os.path.join(
            config.output_dir, ENCODER_CHECKPOINT)
        self.model = MaskedAutoencoder(config.encoder, config.data.window)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=config.encoder.lr)
        self.rng = np.random.default_rng(seed)
        self.step = 0
        self.losses: List[float] = []
        self.conditions = np.stack(
            [pair.condition for pair in data.windows["train"]]
        ).astype(np.float32)

    @property
    def sample_rate(self) -> float:
        return self.config.encoder.sample_rate if self.config.encoder.graph_sampling else 1.0

    def resume(self) -> bool:
        """
        Restore model, optimizer, step counter and generator from the checkpoint.

        Returns:
            bool: True if a checkpoint was restored
        """
        if not os.path.exists(self.checkpoint_path):
            logger.info(f"No checkpoint at {self.checkpoint_path}, starting fresh")
            return False
        checkpoint = load_checkpoint(self.checkpoint_path, kind="encoder")
        check_encoder_compatible(checkpoint, self.config.to_dict())
        self.model.encoder.load_state_dict(checkpoint["state"]["encoder"])
        self.model.decoder.load_state_dict(checkpoint["state"]["decoder"])
        extra = checkpoint["extra"]
        self.optimizer.load_state_dict(extra["optimizer"])
        self.step = int(extra["step"])
        self.losses = list(extra["losses"])
        self.rng.bit_generator.state = extra["rng_state"]
        logger.info(f"Resumed pre-training at step {self.step}")
        return True

    def save(self) -> str:
        """Write the current state to the checkpoint path."""
        return save_checkpoint(
            self.checkpoint_path,
            kind="encoder",
            modules={"encoder": self.model.encoder, "decoder": self.model.decoder},
            config=self.config.to_dict(),
            extra={
                "step": self.step,
                "losses": self.losses,
                "optimizer": self.optimizer.state_dict(),
                "rng_state": self.rng.bit_generator.state,
                "tau": self.model.encoder.output_length(self.config.data.window),
                "seed": self.seed,
            },
        )

    def _batch(self) -> torch.Tensor:
        size = min(self.config.encoder.batch_size, len(self.conditions))
        index = self.rng.choice(len(self.conditions), size=size, replace=False)
        return torch.from_numpy(self.conditions[index])

    def run(self, steps: Optional[int] = None, progress: bool = False) -> TrainRun:
        """
        Pre-train up to ``steps`` total steps.

        Args:
            steps: Total step target, defaults to encoder.steps
            progress: Show a progress bar

        Returns:
            TrainRun: Loss curve and checkpoint paths

        Raises:
            NumericError: If a step produces a non-finite loss
        """
        enc = self.config.encoder
        total = enc.steps if steps is None else steps
        run = TrainRun(task=self.config.task, config=self.config.to_dict(),
                       seed=self.seed)
        graph = self.data.condition_graph

        for _ in tqdm(range(self.step, total), disable=not progress, desc="pretrain"):
            try:
                loss, n_nodes = pretrain_step(
                    self._batch(), graph, self.model, self.optimizer, self.rng,
                    enc.mask_ratio, self.sample_rate, enc.masking,
                )
            except NumericError as e:
                log_pretrain_operation(self.step + 1, False, error=str(e))
                raise
            self.step += 1
            self.losses.append(loss)
            if self.step % enc.log_every == 0 or self.step == total:
                log_pretrain_operation(self.step, True, loss, n_nodes,
                                       enc.mask_ratio if enc.masking else 0.0)
            if self.step % enc.checkpoint_every == 0:
                run.checkpoint_paths.append(self.save())

        run.checkpoint_paths.append(self.save())
        run.step = self.step
        run.losses = list(self.losses)
        return run


def load_encoder(config: RunConfig, path: Optional[str] = None) -> STEncoder:
    """
    Load a pre-trained encoder compatible with the current config.

    Raises:
        ConfigError: If the checkpoint is missing or incompatible
    """
    path = path or config.train.encoder_checkpoint or os.path.join(
        config.output_dir, ENCODER_CHECKPOINT)
    if not os.path.exists(path):
        raise ConfigError(
            f"Encoder checkpoint {path} not found; run pre-training first"
        )
    checkpoint = load_checkpoint(path, kind="encoder")
    check_encoder_compatible(checkpoint, config.to_dict())
    encoder = STEncoder(config.encoder)
    encoder.load_state_dict(checkpoint["state"]["encoder"])
    return encoder


class DenoiserTrainer:
    """
    Trains a task denoiser on encoder latents.

    Every batch encodes its conditions, draws one diffusion step per window
    and standard normal noise, and takes an Adam step on the noise-prediction
    loss. The encoder sits in its own parameter group at encoder_lr_scale
    times the denoiser rate when finetuned, at the full rate when trained
    from scratch, and out of the optimizer when frozen.
    """

    def __init__(self, config: RunConfig, data: PreparedData, seed: int,
                 encoder: nn.Module, denoiser: Optional[nn.Module] = None):
        if data.task != config.task:
            raise ConfigError(
                f"Data prepared for '{data.task}' cannot train a '{config.task}' denoiser"
            )
        self.config = _spatial_config(config, data)
        self.data = data
        self.seed = seed
        self.encoder = encoder
        train = config.train
        d = config.diffusion
        self.schedule = make_schedule(d.steps, d.beta_start, d.beta_end, d.schedule)
        self.tau = encoder.output_length(config.data.window)
        self.denoiser = denoiser or build_denoiser(self.config, self.tau)

        groups = [{"params": list(self.denoiser.parameters()), "lr": train.lr}]
        if train.freeze_encoder:
            self.encoder.requires_grad_(False)
        else:
            scale = train.encoder_lr_scale if train.encoder_mode == "pretrained" else 1.0
            groups.append({"params": list(self.encoder.parameters()),
                           "lr": train.lr * scale})
        self.optimizer = torch.optim.Adam(groups)
        self.generator = torch.Generator().manual_seed(seed)
        self.sign_rng = np.random.default_rng(seed)
        self.graph = data.condition_graph
        self.step = 0
        self._initial_loss: Optional[float] = None
        self._diverging_steps = 0

    def batch_loss(self, batch: Dict[str, torch.Tensor], generator: torch.Generator,
                   spatial: Optional[SpatialEmbedding] = None) -> torch.Tensor:
        """Noise-prediction loss of one batch of windows."""
        target = batch["target"]
        latent = encode(batch["condition"], self.graph, self.encoder)
        k = torch.randint(1, self.schedule.K + 1, (target.size(0),), generator=generator)
        epsilon = torch.randn(target.shape, generator=generator)
        context = self.data.context(batch.get("calendar"), spatial=spatial)
        return training_loss(target, latent.h, k, epsilon, self.denoiser,
                             self.schedule, context)

    def _check_divergence(self, loss: float) -> None:
        train = self.config.train
        if not np.isfinite(loss):
            raise NumericError(f"Denoiser loss is {loss} at step {self.step}")
        if self._initial_loss is None:
            self._initial_loss = loss
            return
        if loss > train.divergence_factor * self._initial_loss:
            self._diverging_steps += 1
        else:
            self._diverging_steps = 0
        if self._diverging_steps >= train.divergence_window:
            raise NumericError(
                f"Denoiser loss stayed above {train.divergence_factor}× its initial "
                f"value {self._initial_loss:.4g} for {self._diverging_steps} steps"
            )

    def train_epoch(self, loader: DataLoader) -> float:
        """One pass over the training windows; returns the mean loss."""
        self.denoiser.train()
        self.encoder.train()
        losses = []
        limit = self.config.train.max_steps_per_epoch
        for i, batch in enumerate(loader):
            if limit is not None and i >= limit:
                break
            spatial = None
            if self.config.graph.sign_flip:
                spatial = flip_signs(self.data.spatial, self.sign_rng)
            loss = self.batch_loss(batch, self.generator, spatial)
            self.optimizer.zero_grad()
            loss.backward()
            self.optimizer.step()
            self.step += 1
            value = loss.item()
            self._check_divergence(value)
            losses.append(value)
        return float(np.mean(losses))

    def validate(self, loader: DataLoader) -> float:
        """Validation loss with noise drawn from a fixed stream."""
        self.denoiser.eval()
        self.encoder.eval()
        generator = torch.Generator().manual_seed(self.seed + 1)
        losses = []
        with torch.no_grad():
            for batch in loader:
                losses.append(self.batch_loss(batch, generator).item())
        return float(np.mean(losses))

    def fit(self, progress: bool = False) -> TrainRun:
        """
        Train with early stopping on the validation loss.

        The best encoder/denoiser state is restored at the end.

        Returns:
            TrainRun: Loss history and stopping reason
        """
        train = self.config.train
        batch_size = self.config.data.batch_size
        loader = DataLoader(self.data.dataset("train"), batch_size=batch_size,
                            shuffle=True,
                            generator=torch.Generator().manual_seed(self.seed))
        val_loader = DataLoader(self.data.dataset("val"), batch_size=batch_size)
        run = TrainRun(task=self.config.task, config=self.config.to_dict(),
                       seed=self.seed)

        best_state = None
        best = float("inf")
        stale = 0
        run.stopped_reason = "max_epochs"
        for epoch in tqdm(range(train.max_epochs), disable=not progress, desc="train"):
            try:
                train_loss = self.train_epoch(loader)
            except NumericError as e:
                log_train_operation(self.config.task, epoch, False, error=str(e))
                raise
            val_loss = self.validate(val_loader)
            run.losses.append(train_loss)
            run.val_losses.append(val_loss)
            if val_loss < best:
                best = val_loss
                stale = 0
                best_state = (copy.deepcopy(self.encoder.state_dict()),
                              copy.deepcopy(self.denoiser.state_dict()))
            else:
                stale += 1
            log_train_operation(self.config.task, epoch, True, train_loss, val_loss, best)
            if stale >= train.patience:
                run.stopped_reason = "early_stopping"
                break

        if best_state is not None:
            self.encoder.load_state_dict(best_state[0])
            self.denoiser.load_state_dict(best_state[1])
        run.step = self.step
        run.best_val_loss = best
        return run

    def save(self, path: str, run: Optional[TrainRun] = None) -> str:
        """Write encoder, denoiser, schedule, normalizer and partition."""
        return save_checkpoint(
            path,
            kind="denoiser",
            modules={"encoder": self.encoder, "denoiser": self.denoiser},
            config=self.config.to_dict(),
            task=self.config.task,
            extra={
                "schedule": self.schedule.to_dict(),
                "normalizer": self.data.normalizer.to_dict(),
                "partition": [self.data.split.observed.tolist(),
                              self.data.split.unobserved.tolist()],
                "tau": self.tau,
                "seed": self.seed,
                "val_losses": run.val_losses if run else [],
            },
        )


def train_denoiser(
    config: RunConfig,
    data: PreparedData,
    seed: int,
    encoder_checkpoint: Optional[str] = None,
    checkpoint_path: Optional[str] = None,
    progress: bool = False,
) -> Tuple[TrainRun, DenoiserTrainer]:
    """
    Train the configured task denoiser and write its checkpoint.

    The encoder comes from the pre-training checkpoint ("pretrained"),
    a fresh initialization ("scratch") or the raw-condition stand-in ("none").

    Args:
        config: Run configuration
        data: Prepared dataset
        seed: Training seed
        encoder_checkpoint: Override of train.encoder_checkpoint
        checkpoint_path: Output path, defaults to output_dir/denoiser_<task>.pt
        progress: Show a progress bar

    Returns:
        Tuple of (TrainRun, the trainer holding the trained modules)

    Raises:
        ConfigError: If a required encoder checkpoint is missing
    """
    mode = config.train.encoder_mode
    if mode == "pretrained":
        encoder = load_encoder(config, encoder_checkpoint)
    else:
        encoder = build_encoder(config.encoder, mode)

    trainer = DenoiserTrainer(config, data, seed, encoder)
    run = trainer.fit(progress=progress)
    path = checkpoint_path or os.path.join(config.output_dir,
                                           denoiser_checkpoint_name(config.task))
    run.checkpoint_paths.append(trainer.save(path, run))
    return run, trainer


@dataclass(eq=False)
class TrainedModel:
    """Modules and statistics restored from a denoiser checkpoint."""

    config: RunConfig
    encoder: nn.Module
    denoiser: nn.Module
    schedule: NoiseSchedule
    normalizer: Normalizer
    partition: Tuple[List[int], List[int]]
    tau: int = 1


def load_trained(config: RunConfig, path: Optional[str] = None) -> TrainedModel:
    """
    Rebuild encoder and denoiser from a denoiser checkpoint.

    Raises:
        ConfigError: If the checkpoint is missing or trained for another task
    """
    path = path or config.evaluate.denoiser_checkpoint or os.path.join(
        config.output_dir, denoiser_checkpoint_name(config.task))
    checkpoint = load_checkpoint(path, kind="denoiser", task=config.task)
    stored = RunConfig.from_dict(checkpoint["config"])
    encoder = build_encoder(stored.encoder, stored.train.encoder_mode)
    encoder.load_state_dict(checkpoint["state"]["encoder"])
    denoiser = build_denoiser(stored, checkpoint["extra"]["tau"])
    denoiser.load_state_dict(checkpoint["state"]["denoiser"])
    extra = checkpoint["extra"]
    return TrainedModel(
        config=stored,
        encoder=encoder,
        denoiser=denoiser,
        schedule=NoiseSchedule.from_dict(extra["schedule"]),
        normalizer=Normalizer.from_dict(extra["normalizer"]),
        partition=(extra["partition"][0], extra["partition"][1]),
        tau=int(extra["tau"]),
    )


def infer(
    data: PreparedData,
    encoder: nn.Module,
    denoiser: nn.Module,
    schedule: NoiseSchedule,
    n_samples: int = 8,
    seed: int = 0,
    split: str = "test",
    max_windows: Optional[int] = None,
    batch_size: int = 32,
) -> List[SampleSet]:
    """
    Sample every window of a split and de-normalize the result once.

    Args:
        data: Prepared dataset
        encoder: Trained encoder
        denoiser: Trained denoiser
        schedule: Noise schedule used in training
        n_samples: Samples per window
        seed: Sampling seed; equal seeds give identical sample sets
        split: Split to sample
        max_windows: Optional cap on the number of windows
        batch_size: Windows sampled together

    Returns:
        List[SampleSet]: One de-normalized sample set per window
    """
    pairs = data.windows[split][:max_windows] if max_windows else data.windows[split]
    loader = DataLoader(WindowDataset(pairs, data.series), batch_size=batch_size)
    generator = torch.Generator().manual_seed(seed)
    encoder.eval()
    denoiser.eval()

    sample_sets = []
    with torch.no_grad():
        for batch in loader:
            latent = encode(batch["condition"], data.condition_graph, encoder)
            context = data.context(batch.get("calendar"))
            draws = sample(latent.h, denoiser, schedule, tuple(batch["target"].shape),
                           n_samples, generator, context).numpy()
            draws = data.normalizer.invert(draws.astype(np.float64))
            for i, start in enumerate(batch["start"].tolist()):
                sample_sets.append(SampleSet(samples=draws[:, i], start=start))
    return sample_sets


def evaluate_model(
    data: PreparedData,
    sample_sets: Sequence[SampleSet],
    config: RunConfig,
    model_name: str = "ustd",
    split: str = "test",
) -> MetricReport:
    """Score sample sets of a split against the raw truth and log the result."""
    pairs = data.windows[split][: len(sample_sets)]
    report = score_sample_sets(
        sample_sets, [data.truth(pair) for pair in pairs], data.task, model_name,
        split, config.evaluate.crps_normalized, config.evaluate.crps_fair,
    )
    log_evaluation_operation(data.task, model_name, True, report)
    return report


def baseline_sample_sets(
    data: PreparedData,
    n_samples: int,
    rng: np.random.Generator,
    split: str = "test",
    max_windows: Optional[int] = None,
) -> Dict[str, List[SampleSet]]:
    """
    Reference predictions for a split on the original scale.

    Forecasting gets persistence and climatology; kriging gets inverse
    distance weighting (when coordinates exist) and climatology.

    Returns:
        Dict mapping baseline name to one SampleSet per window
    """
    pairs = data.windows[split][:max_windows] if max_windows else data.windows[split]
    train_start, train_stop = data.split.segments["train"]
    mean, std = climatology_stats(
        data.raw.values[data.target_nodes, train_start:train_stop])
    raw = data.raw.values

    baselines: Dict[str, List[SampleSet]] = {"climatology": []}
    if data.task == "forecast":
        baselines["persistence"] = []
    elif data.graph.coords is not None:
        baselines["idw"] = []

    for pair in pairs:
        window = pair.condition.shape[1]
        steps = pair.target.shape[1]
        baselines["climatology"].append(SampleSet(
            baseline_climatology(mean, std, n_samples, steps, rng), pair.start))
        if data.task == "forecast":
            condition = raw[:, pair.start:pair.start + window]
            baselines["persistence"].append(SampleSet(
                baseline_persistence(condition, steps)[None], pair.start))
        elif "idw" in baselines:
            observed = raw[pair.condition_nodes, pair.start:pair.start + window]
            estimate = baseline_idw(data.graph, pair.condition_nodes, observed,
                                    pair.target_nodes)
            baselines["idw"].append(SampleSet(estimate[None], pair.start))
    return baselines


def export_predictions(path: str, sample_sets: Sequence[SampleSet],
                       data: PreparedData) -> str:
    """
    Write per-window point estimates, concatenated in time, as a signals file.

    The sidecar records the window starts and the window length so the
    stream can be cut back into windows.
    """
    points = np.concatenate([s.point_estimate for s in sample_sets], axis=1)
    steps = sample_sets[0].point_estimate.shape[1]
    series = SignalSeries(
        values=points,
        timestamps=np.arange(points.shape[1]),
        granularity=data.raw.granularity,
        metadata={
            "attribute": data.raw.metadata.get("attribute", "value"),
            "kind": "predictions",
            "task": data.task,
            "window_starts": [int(s.start) for s in sample_sets],
            "steps_per_window": int(steps),
            "nodes": [int(n) for n in data.target_nodes],
        },
    )
    save_signals(path, series)
    return path


def run_experiment(
    config: RunConfig,
    seed: int,
    graph: Optional[Graph] = None,
    series: Optional[SignalSeries] = None,
    work_dir: Optional[str] = None,
    compare_baselines: bool = False,
) -> Dict[str, MetricReport]:
    """
    Pre-train (when the encoder mode needs it), train, sample and score.

    Args:
        config: Run configuration
        seed: Seed of every random draw in the run
        graph: In-memory graph, loaded from files when absent
        series: In-memory raw series, loaded with the graph when absent
        work_dir: Checkpoint directory, defaults to config.output_dir
        compare_baselines: Score the reference baselines too

    Returns:
        Dict of MetricReport keyed by model name
    """
    config = copy.deepcopy(config)
    if work_dir:
        config.output_dir = work_dir
    rng = seed_everything(seed)
    data = prepare_data(config, rng, graph, series)

    encoder_path = os.path.join(config.output_dir, ENCODER_CHECKPOINT)
    if config.train.encoder_mode == "pretrained":
        PretrainManager(config, data, seed, encoder_path).run()
    _, trainer = train_denoiser(config, data, seed, encoder_path)

    evaluate = config.evaluate
    sample_sets = infer(data, trainer.encoder, trainer.denoiser, trainer.schedule,
                        evaluate.n_samples, seed, max_windows=evaluate.max_windows,
                        batch_size=config.data.batch_size)
    reports = {"ustd": evaluate_model(data, sample_sets, config)}
    if compare_baselines:
        baselines = baseline_sample_sets(data, evaluate.n_samples,
                                         np.random.default_rng(seed),
                                         max_windows=evaluate.max_windows)
        for name, sets in baselines.items():
            reports[name] = evaluate_model(data, sets, config, name)
    return reports


ABLATIONS: Dict[str, Dict[str, Any]] = {
    "full": {},
    "no_encoder": {"train.encoder_mode": "none"},
    "no_pretraining": {"train.encoder_mode": "scratch"},
    "no_masking": {"encoder.masking": False},
    "no_graph_sampling": {"encoder.graph_sampling": False},
    "no_self_attention": {"denoiser.self_attention": False},
    "full_attention": {"denoiser.variant": "full"},
}


def run_ablation(
    config: RunConfig,
    variant: str,
    seeds: Sequence[int],
    graph: Optional[Graph] = None,
    series: Optional[SignalSeries] = None,
    work_dir: Optional[str] = None,
) -> Dict[int, float]:
    """
    Test MAE of one ablation variant for each seed.

    Args:
        config: Base configuration
        variant: Key of ABLATIONS
        seeds: Seeds to run
        graph: In-memory graph
        series: In-memory raw series
        work_dir: Base checkpoint directory; each run gets a subdirectory

    Returns:
        Dict mapping seed to test MAE
    """
    if variant not in ABLATIONS:
        raise ConfigError(f"Unknown ablation '{variant}', expected one of {list(ABLATIONS)}")
    variant_config = ConfigManager.apply_overrides(copy.deepcopy(config), ABLATIONS[variant])
    base_dir = work_dir or config.output_dir
    results = {}
    for seed in seeds:
        run_dir = os.path.join(base_dir, f"{variant}_seed{seed}")
        reports = run_experiment(variant_config, seed, graph, series, run_dir)
        results[seed] = reports["ustd"].mae
        logger.info(f"Ablation {variant} seed {seed}: MAE {results[seed]:.6g}")
    return results


def gaussian_recovery(
    mean: float = 2.0,
    std: float = 0.5,
    steps: int = 4000,
    batch_size: int = 256,
    n_samples: int = 10_000,
    seed: int = 0,
    schedule: Optional[NoiseSchedule] = None,
    lr: float = 1e-3,
) -> Tuple[float, float]:
    """
    Fit the diffusion machinery to i.i.d. N(mean, std²) scalars and sample it.

    Args:
        mean: Target mean
        std: Target standard deviation
        steps: Optimizer steps
        batch_size: Fresh draws per step
        n_samples: Samples drawn after training
        seed: Seed of data, noise and initialization
        schedule: Noise schedule, the default quadratic one when absent
        lr: Adam learning rate

    Returns:
        Tuple of (sample mean, sample std)
    """
    torch.manual_seed(seed)
    schedule = schedule or make_schedule()
    generator = torch.Generator().manual_seed(seed)
    denoiser = ScalarDenoiser(schedule.K)
    optimizer = torch.optim.Adam(denoiser.parameters(), lr=lr)

    denoiser.train()
    for _ in range(steps):
        y0 = mean + std * torch.randn((batch_size, 1), generator=generator)
        k = torch.randint(1, schedule.K + 1, (batch_size,), generator=generator)
        epsilon = torch.randn(y0.shape, generator=generator)
        loss = training_loss(y0, None, k, epsilon, denoiser, schedule)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

    denoiser.eval()
    draws = sample(None, denoiser, schedule, (n_samples, 1), 1, generator)
    values = draws.reshape(-1).double()
    return float(values.mean()), float(values.std())


@dataclass
class BenchResult:
    """Wall-clock of one full sampling pass, over several trials."""

    name: str
    mean_seconds: float
    std_seconds: float
    n_params: int
    trials: List[float] = field(default_factory=list)


BENCH_VARIANTS = {"gated": "gated", "full_attention": "full"}


def _bench_inputs(
    config: RunConfig, n_nodes: int, tau: int
) -> Tuple[torch.Tensor, Tuple[int, ...], DenoiserContext]:
    """Random latent, target shape and spatial context of one sampling pass."""
    target_len = config.data.horizon if config.task == "forecast" else config.data.window
    n_targets = n_nodes
    n_conditions = n_nodes
    if config.task == "krige":
        n_obs, n_unobs = config.data.krige_ratio
        n_targets = max(1, int(np.floor(n_nodes * n_unobs / (n_obs + n_unobs) + 0.5)))
        n_conditions = n_nodes - n_targets
    latent = torch.randn(1, n_conditions, tau, config.encoder.latent)
    target_shape = (1, n_targets, target_len, config.encoder.input_dim)
    spatial = torch.randn(n_nodes, config.graph.spatial_dim)
    context = DenoiserContext(target_spatial=spatial[:n_targets],
                              cond_spatial=spatial[n_nodes - n_conditions:])
    return latent, target_shape, context


def benchmark_denoisers(
    config: RunConfig,
    n_nodes: Optional[int] = None,
    tau: int = 1,
    trials: Optional[int] = None,
    seed: int = 0,
    checkpoints: Optional[Dict[str, str]] = None,
) -> List[BenchResult]:
    """
    Time one full reverse chain of the gated and joint-attention denoisers.

    A denoiser named in ``checkpoints`` is restored with its trained weights,
    schedule and latent length; the other is built with random weights. When
    neither is given, the joint model's feed-forward width is solved so both
    hold the same number of parameters.

    Args:
        config: Run configuration (task, shapes, K, channels)
        n_nodes: Node count, defaults to evaluate.bench_nodes
        tau: Latent length of randomly initialized denoisers
        trials: Timed repetitions, at least 5
        seed: Seed of the weights and the noise
        checkpoints: Denoiser checkpoint path per name ("gated", "full_attention")

    Returns:
        List[BenchResult]: gated first, joint attention second

    Raises:
        ConfigError: If a checkpoint name is unknown or holds the other variant
    """
    n_nodes = n_nodes or config.evaluate.bench_nodes
    trials = max(5, trials or config.evaluate.bench_trials)
    checkpoints = checkpoints or {}
    unknown = set(checkpoints) - set(BENCH_VARIANTS)
    if unknown:
        raise ConfigError(f"Unknown bench denoisers {sorted(unknown)}, "
                          f"expected {list(BENCH_VARIANTS)}")
    torch.manual_seed(seed)
    config = copy.deepcopy(config)
    config.denoiser.zero_init_head = False

    trained: Dict[str, TrainedModel] = {}
    for name, path in checkpoints.items():
        model = load_trained(config, path)
        if model.config.denoiser.variant != BENCH_VARIANTS[name]:
            raise ConfigError(
                f"Checkpoint {path} holds a '{model.config.denoiser.variant}' "
                f"denoiser, expected '{BENCH_VARIANTS[name]}'"
            )
        logger.info(f"Timing trained {name} denoiser from {path}")
        trained[name] = model

    gated = trained["gated"].denoiser if "gated" in trained \
        else build_denoiser(config, tau, "gated")
    if "full_attention" in trained:
        full = trained["full_attention"].denoiser
    else:
        def build_full(width: int) -> nn.Module:
            candidate = copy.deepcopy(config)
            candidate.denoiser.ffn_dim = width
            return build_denoiser(candidate, tau, "full")

        config.denoiser.ffn_dim = match_ffn_dim(count_parameters(gated), build_full)
        full = build_denoiser(config, tau, "full")

    results = []
    for name, denoiser in (("gated", gated), ("full_attention", full)):
        if name in trained:
            source = trained[name]
            run_config, run_tau, schedule = source.config, source.tau, source.schedule
        else:
            run_config, run_tau = config, tau
            schedule = make_schedule(config.diffusion.steps, config.diffusion.beta_start,
                                     config.diffusion.beta_end, config.diffusion.schedule)
        latent, target_shape, context = _bench_inputs(run_config, n_nodes, run_tau)
        denoiser.eval()
        timings = []
        for trial in range(trials):
            generator = torch.Generator().manual_seed(seed + trial)
            started = time.perf_counter()
            sample(latent, denoiser, schedule, target_shape, 1, generator, context)
            timings.append(time.perf_counter() - started)
        result = BenchResult(name, float(np.mean(timings)), float(np.std(timings)),
                             count_parameters(denoiser), timings)
        log_bench_operation(name, True, result.mean_seconds, result.std_seconds,
                            result.n_params)
        results.append(result)
    return results
