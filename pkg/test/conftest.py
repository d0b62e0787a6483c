"""
Pytest configuration and shared fixtures.

Builders for a tiny run configuration and a tiny synthetic dataset that
every module test can afford to train on in seconds. The builders are plain
functions so unittest-style test classes can import them; the fixtures wrap
them for function-style tests.
"""

import numpy as np
import pytest

from src.ustd_config import RunConfig


def tiny_config(task: str = "forecast", output_dir: str = "runs") -> RunConfig:
    """
    Smallest configuration that still exercises every code path.

    Window 4 with kernel 2 and dilations (1, 2) gives a latent length of 1.

    Args:
        task: "forecast" or "krige"
        output_dir: Checkpoint and report directory

    Returns:
        RunConfig: The configuration
    """
    config = RunConfig(task=task, seed=0, output_dir=output_dir)
    config.graph.spatial_dim = 3
    config.data.window = 4
    config.data.horizon = 3
    config.data.eval_stride = 4
    config.data.batch_size = 8
    config.synth.n_nodes = 6
    config.synth.t_total = 120
    config.encoder.hidden = 8
    config.encoder.latent = 8
    config.encoder.dilations = [1, 2]
    config.encoder.steps = 4
    config.encoder.batch_size = 4
    config.encoder.log_every = 2
    config.encoder.checkpoint_every = 2
    config.diffusion.steps = 5
    config.denoiser.channels = 8
    config.denoiser.heads = 2
    config.denoiser.layers = 1
    config.denoiser.diffusion_embedding_dim = 8
    config.denoiser.ffn_dim = 16
    config.train.max_epochs = 2
    config.train.max_steps_per_epoch = 2
    config.evaluate.n_samples = 2
    config.evaluate.max_windows = 3
    return config


def tiny_dataset(config: RunConfig, seed: int = 0):
    """Synthetic (graph, series) pair sized by config.synth."""
    from src.ustd_datasets import synthesize_graph_signal

    rng = np.random.default_rng(seed)
    return synthesize_graph_signal(config.synth.n_nodes, config.synth.t_total, rng,
                                   config.synth, config.graph)


@pytest.fixture
def forecast_config(tmp_path):
    """
    Tiny forecasting configuration writing into a temporary directory.

    Returns:
        RunConfig: Configuration with output_dir under tmp_path
    """
    return tiny_config("forecast", str(tmp_path / "runs"))


@pytest.fixture
def krige_config(tmp_path):
    """
    Tiny kriging configuration writing into a temporary directory.

    Returns:
        RunConfig: Configuration with output_dir under tmp_path
    """
    return tiny_config("krige", str(tmp_path / "runs"))


@pytest.fixture
def synthetic_dataset(forecast_config):
    """
    Tiny synthetic graph and series.

    Returns:
        tuple: (Graph, SignalSeries)
    """
    return tiny_dataset(forecast_config)
