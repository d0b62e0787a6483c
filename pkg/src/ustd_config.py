"""
USTD Configuration Module

Run configuration for every USTD command. A run is described by one
RunConfig made of per-module sections; the sections are stored as a JSON
file with one object per section, and the whole RunConfig is serialized
into every checkpoint and report so runs can be reproduced exactly.

Precedence is CLI flag > config file > built-in default.
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

from src.ustd_errors import ConfigError
from src.ustd_logging import logger

CONFIG_FILE = os.environ.get("USTD_CONFIG", "ustd_config.json")

TASKS = ("forecast", "krige")


@dataclass
class GraphConfig:
    """Adjacency construction and spatial embedding settings."""

    adjacency_format: str = "edges"
    sigma: Optional[float] = None
    epsilon: float = 0.1
    symmetric: bool = True
    spatial_dim: int = 8
    sign_flip: bool = False


@dataclass
class DataConfig:
    """Dataset files, windowing and splits."""

    signals_path: Optional[str] = None
    adjacency_path: Optional[str] = None
    window: int = 12
    horizon: int = 12
    stride: int = 1
    eval_stride: int = 1
    split_ratios: List[float] = field(default_factory=lambda: [0.6, 0.2, 0.2])
    krige_ratio: List[int] = field(default_factory=lambda: [2, 1])
    batch_size: int = 32


@dataclass
class SynthConfig:
    """Synthetic diffusion-coupled seasonal signal generator."""

    n_nodes: int = 16
    t_total: int = 4096
    ar_coefficient: float = 0.8
    ar_scale: float = 0.5
    snr_db: Optional[float] = 10.0
    amplitudes: List[float] = field(default_factory=lambda: [1.0, 0.5])
    periods: List[float] = field(default_factory=lambda: [24.0, 24.0 * 2 ** 0.5])
    output_dir: str = "data/synthetic"


@dataclass
class EncoderConfig:
    """Spatio-temporal encoder, decoder and masked pre-training."""

    input_dim: int = 1
    hidden: int = 32
    latent: int = 64
    kernel_size: int = 2
    dilations: List[int] = field(default_factory=lambda: [1, 2, 3, 1, 2, 2])
    gcn_depth: int = 2
    decoder_layers: int = 3
    mask_ratio: float = 0.75
    sample_rate: float = 0.8
    masking: bool = True
    graph_sampling: bool = True
    lr: float = 1e-3
    steps: int = 2000
    batch_size: int = 32
    log_every: int = 100
    checkpoint_every: int = 500


@dataclass
class DiffusionConfig:
    """Noise schedule."""

    steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.5
    schedule: str = "quadratic"


@dataclass
class DenoiserConfig:
    """Task-specific denoising network."""

    variant: str = "gated"
    channels: int = 96
    layers: int = 2
    heads: int = 4
    diffusion_embedding_dim: int = 128
    self_attention: bool = True
    zero_init_head: bool = True
    ffn_dim: int = 192


@dataclass
class TrainConfig:
    """Denoiser training with encoder finetuning."""

    lr: float = 1e-3
    encoder_lr_scale: float = 0.1
    freeze_encoder: bool = False
    encoder_mode: str = "pretrained"
    encoder_checkpoint: Optional[str] = None
    max_epochs: int = 200
    patience: int = 10
    max_steps_per_epoch: Optional[int] = None
    divergence_factor: float = 10.0
    divergence_window: int = 500


@dataclass
class EvaluateConfig:
    """Inference, metrics, plots and benchmarks."""

    n_samples: int = 8
    crps_normalized: bool = True
    crps_fair: bool = True
    compare_baselines: bool = False
    plot_nodes: List[int] = field(default_factory=lambda: [0])
    export_predictions: bool = False
    denoiser_checkpoint: Optional[str] = None
    max_windows: Optional[int] = None
    bench_trials: int = 5
    bench_nodes: int = 300


@dataclass
class RunConfig:
    """Complete configuration of one USTD run."""

    task: str = "forecast"
    seed: Optional[int] = None
    output_dir: str = "runs"
    graph: GraphConfig = field(default_factory=GraphConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        """
        Build a RunConfig from a nested dictionary.

        Missing keys keep their defaults; unknown sections or keys are
        rejected so typos never silently fall back to a default.

        Args:
            data: Nested dictionary with one object per section

        Returns:
            RunConfig: The parsed configuration

        Raises:
            ConfigError: If a section or key is unknown
        """
        if not isinstance(data, dict):
            raise ConfigError("Configuration root must be an object")

        config = cls()
        section_types = _section_types()
        for key, value in data.items():
            if key in section_types:
                if not isinstance(value, dict):
                    raise ConfigError(f"Section '{key}' must be an object")
                setattr(config, key, _build_section(section_types[key], key, value))
            elif key in ("task", "seed", "output_dir"):
                setattr(config, key, value)
            else:
                raise ConfigError(f"Unknown configuration section: {key}")
        return config

    def to_dict(self) -> Dict[str, Any]:
        """Serialize the configuration to plain JSON-compatible data."""
        return dataclasses.asdict(self)


def _section_types() -> Dict[str, type]:
    return {
        f.name: f.type if isinstance(f.type, type) else globals()[f.type]
        for f in dataclasses.fields(RunConfig)
        if f.name not in ("task", "seed", "output_dir")
    }


def _build_section(section_type: type, name: str, values: Dict[str, Any]) -> Any:
    known = {f.name for f in dataclasses.fields(section_type)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"Unknown keys in section '{name}': {sorted(unknown)}")
    return section_type(**values)


class ConfigManager:
    """
    Manages the run configuration file.

    Handles loading, saving, overriding and validating RunConfig objects
    stored as sectioned JSON. Missing files fall back to built-in defaults so
    a fresh checkout can run the synthetic pipeline without any setup.
    """

    def __init__(self, config_file: str = CONFIG_FILE):
        """
        Initialize the configuration manager.

        Args:
            config_file: Path to the configuration file
        """
        self.config_file = config_file

    def load_config(self) -> RunConfig:
        """
        Load the run configuration from the config file.

        Returns:
            RunConfig: Parsed configuration, defaults if the file is absent

        Raises:
            ConfigError: If the file is not valid JSON or has unknown keys
        """
        if not os.path.exists(self.config_file):
            logger.info(f"Config file {self.config_file} not found, using defaults")
            return RunConfig()
        try:
            with open(self.config_file, "r") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Error loading config file {self.config_file}: {e}") from e
        return RunConfig.from_dict(data)

    def save_config(self, config: RunConfig) -> bool:
        """
        Save a run configuration to the config file.

        Args:
            config: Configuration to save

        Returns:
            bool: True if save was successful, False otherwise
        """
        try:
            directory = os.path.dirname(self.config_file)
            if directory:
                os.makedirs(directory, exist_ok=True)
            with open(self.config_file, "w") as f:
                json.dump(config.to_dict(), f, indent=4)
            return True
        except OSError as e:
            logger.error(f"Error saving config file: {e}")
            return False

    @staticmethod
    def apply_overrides(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
        """
        Apply dotted-key overrides (``"encoder.mask_ratio"``) on a config.

        None values are skipped, so unset CLI flags never clobber the file.

        Args:
            config: Configuration to update in place
            overrides: Mapping of dotted keys to values

        Returns:
            RunConfig: The updated configuration
        """
        for dotted, value in overrides.items():
            if value is None:
                continue
            parts = dotted.split(".")
            target: Any = config
            for part in parts[:-1]:
                if not hasattr(target, part):
                    raise ConfigError(f"Unknown configuration section: {part}")
                target = getattr(target, part)
            if not hasattr(target, parts[-1]):
                raise ConfigError(f"Unknown configuration key: {dotted}")
            setattr(target, parts[-1], value)
        return config

    @staticmethod
    def validate_config(config: RunConfig) -> None:
        """
        Validate value ranges across all sections.

        Args:
            config: Configuration to validate

        Raises:
            ConfigError: On the first invalid value found
        """
        checks = [
            (config.task in TASKS, f"task must be one of {TASKS}"),
            (config.graph.adjacency_format in ("edges", "coords"),
             "graph.adjacency_format must be 'edges' or 'coords'"),
            (config.graph.sigma is None or config.graph.sigma > 0,
             "graph.sigma must be positive"),
            (0 <= config.graph.epsilon < 1, "graph.epsilon must be in [0, 1)"),
            (config.graph.spatial_dim >= 1, "graph.spatial_dim must be positive"),
            (config.data.window >= 1 and config.data.horizon >= 1,
             "data.window and data.horizon must be positive"),
            (config.data.stride >= 1 and config.data.eval_stride >= 1,
             "strides must be positive"),
            (len(config.data.split_ratios) == 3
             and all(r >= 0 for r in config.data.split_ratios)
             and abs(sum(config.data.split_ratios) - 1.0) < 1e-9,
             "data.split_ratios must be three non-negative values summing to 1"),
            (len(config.data.krige_ratio) == 2 and min(config.data.krige_ratio) > 0,
             "data.krige_ratio must be two positive integers"),
            (config.synth.n_nodes >= 4, "synth.n_nodes must be at least 4"),
            (-1 < config.synth.ar_coefficient < 1,
             "synth.ar_coefficient must be in (-1, 1)"),
            (config.encoder.kernel_size >= 1, "encoder.kernel_size must be positive"),
            (0 <= config.encoder.mask_ratio < 1, "encoder.mask_ratio must be in [0, 1)"),
            (0 < config.encoder.sample_rate <= 1,
             "encoder.sample_rate must be in (0, 1]"),
            (config.diffusion.schedule in ("linear", "quadratic"),
             "diffusion.schedule must be 'linear' or 'quadratic'"),
            (config.diffusion.steps >= 1, "diffusion.steps must be positive"),
            (0 < config.diffusion.beta_start < config.diffusion.beta_end < 1,
             "diffusion betas must satisfy 0 < beta_start < beta_end < 1"),
            (config.denoiser.variant in ("gated", "full"),
             "denoiser.variant must be 'gated' or 'full'"),
            (config.denoiser.channels % config.denoiser.heads == 0,
             "denoiser.channels must be divisible by denoiser.heads"),
            (config.train.encoder_mode in ("pretrained", "scratch", "none"),
             "train.encoder_mode must be 'pretrained', 'scratch' or 'none'"),
            (config.train.lr > 0, "train.lr must be positive"),
            (config.evaluate.n_samples >= 1, "evaluate.n_samples must be positive"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)


def resolve_seed(cli_seed: Optional[int], config: RunConfig) -> int:
    """
    Resolve the run seed: CLI flag, then config file, then USTD_SEED, then 0.

    Args:
        cli_seed: Seed passed on the command line (None if absent)
        config: Loaded configuration

    Returns:
        int: The seed to use
    """
    if cli_seed is not None:
        return int(cli_seed)
    if config.seed is not None:
        return int(config.seed)
    env_seed = os.environ.get("USTD_SEED")
    if env_seed:
        try:
            return int(env_seed)
        except ValueError as e:
            raise ConfigError(f"USTD_SEED must be an integer, got '{env_seed}'") from e
    return 0
