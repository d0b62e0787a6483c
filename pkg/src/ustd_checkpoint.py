"""
USTD Checkpoint Module

Versioned checkpoint container shared by encoder and denoiser runs.

A checkpoint is a single torch file holding named state dicts, the full
RunConfig needed to rebuild the modules (including τ), the task for denoiser
checkpoints and any extra run state (step counters, optimizer state,
normalizer statistics, schedules).
"""

import os
from typing import Any, Dict, Optional

import torch
import torch.nn as nn

from src.ustd_errors import ConfigError

CHECKPOINT_FORMAT = "ustd-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(
    path: str,
    kind: str,
    modules: Dict[str, nn.Module],
    config: Dict[str, Any],
    task: Optional[str] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> str:
    """
    Write a checkpoint container.

    Args:
        path: Output file path
        kind: "encoder" or "denoiser"
        modules: Named modules whose state dicts are stored
        config: Serialized RunConfig
        task: Task guard for denoiser checkpoints
        extra: Additional run state

    Returns:
        str: The written path
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "task": task,
        "config": config,
        "state": {name: module.state_dict() for name, module in modules.items()},
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(
    path: str,
    kind: Optional[str] = None,
    task: Optional[str] = None,
) -> Dict[str, Any]:
    """
    Read and validate a checkpoint container.

    Args:
        path: Checkpoint path
        kind: Expected kind, checked when given
        task: Expected task, checked when given

    Returns:
        Dict[str, Any]: The container

    Raises:
        ConfigError: If the file is missing, of another format or version,
            or its kind/task does not match
    """
    if not path or not os.path.exists(path):
        raise ConfigError(f"Checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise ConfigError(f"Could not read checkpoint {path}: {e}") from e

    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a USTD checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(
            f"Checkpoint {path} has version {payload.get('version')}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    if kind is not None and payload["kind"] != kind:
        raise ConfigError(
            f"Checkpoint {path} holds a {payload['kind']}, expected a {kind}"
        )
    if task is not None and payload["task"] not in (None, task):
        raise ConfigError(
            f"Checkpoint {path} was trained for task '{payload['task']}', "
            f"not '{task}'"
        )
    return payload


def check_encoder_compatible(checkpoint: Dict[str, Any],
                             config: Dict[str, Any]) -> None:
    """
    Ensure a checkpoint's encoder can be rebuilt under the current config.

    Args:
        checkpoint: Loaded container
        config: Serialized current RunConfig

    Raises:
        ConfigError: If any architecture field or the window length differs
    """
    stored = checkpoint["config"]
    keys = ("input_dim", "hidden", "latent", "kernel_size", "dilations", "gcn_depth",
            "decoder_layers")
    for key in keys:
        if stored["encoder"][key] != config["encoder"][key]:
            raise ConfigError(
                f"Encoder checkpoint has {key}={stored['encoder'][key]}, "
                f"current config has {config['encoder'][key]}"
            )
    if stored["data"]["window"] != config["data"]["window"]:
        raise ConfigError(
            f"Encoder checkpoint was trained on T={stored['data']['window']}, "
            f"current config has T={config['data']['window']}"
        )
