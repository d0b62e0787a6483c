"""
USTD Diffusion Module

Conditional denoising diffusion core: the noise schedule, forward
corruption, the simplified noise-prediction loss, the reverse step with
fixed variance β_k and the full sampling loop.

Steps are numbered k = 1..K; schedule arrays are indexed with k − 1.
"""

import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterator, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

from src.ustd_errors import ContractError, InputError, NumericError

StepIndex = Union[int, torch.Tensor]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """
    Variance schedule of the forward chain.

    Attributes:
        beta: K increasing noise variances in (0, 1)
        alpha_hat: 1 − beta
        alpha: Cumulative products of alpha_hat
    """

    beta: np.ndarray
    alpha_hat: np.ndarray
    alpha: np.ndarray

    def __post_init__(self) -> None:
        beta = self.beta
        if beta.ndim != 1 or beta.size < 1:
            raise InputError("Schedule needs at least one step")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise InputError("Schedule betas must lie in (0, 1)")
        if np.any(np.diff(beta) <= 0):
            raise InputError("Schedule betas must be strictly increasing")
        for array in (self.beta, self.alpha_hat, self.alpha):
            array.setflags(write=False)

    @property
    def K(self) -> int:  # noqa: N802
        """Number of diffusion steps."""
        return self.beta.size

    def to_dict(self) -> Dict[str, Any]:
        return {"beta": self.beta.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NoiseSchedule":
        return _from_beta(np.asarray(data["beta"], dtype=np.float64))


@dataclass(eq=False)
class DiffusionState:
    """One point of the reverse chain: y_k at step k (k = 0 is the output)."""

    y_k: torch.Tensor
    k: int


def _from_beta(beta: np.ndarray) -> NoiseSchedule:
    alpha_hat = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha_hat=alpha_hat, alpha=np.cumprod(alpha_hat))


def make_schedule(
    K: int = 50,  # noqa: N803
    beta_start: float = 1e-4,
    beta_end: float = 0.5,
    shape: str = "quadratic",
) -> NoiseSchedule:
    """
    Build a linear or quadratic noise schedule.

    The quadratic shape interpolates linearly between √beta_start and
    √beta_end and squares the result.

    Args:
        K: Number of steps
        beta_start: First variance
        beta_end: Last variance
        shape: "linear" or "quadratic"

    Returns:
        NoiseSchedule: Validated schedule

    Raises:
        InputError: On K < 1, an invalid beta range or an unknown shape
    """
    if K < 1:
        raise InputError(f"Schedule needs K ≥ 1, got {K}")
    if not 0 < beta_start < beta_end < 1:
        raise InputError(
            f"Schedule requires 0 < beta_start < beta_end < 1, "
            f"got ({beta_start}, {beta_end})"
        )
    if shape == "linear":
        beta = np.linspace(beta_start, beta_end, K)
    elif shape == "quadratic":
        beta = np.linspace(beta_start ** 0.5, beta_end ** 0.5, K) ** 2
    else:
        raise InputError(f"Unknown schedule shape '{shape}'")
    return _from_beta(np.asarray(beta, dtype=np.float64))


def _check_steps(k: StepIndex, schedule: NoiseSchedule) -> None:
    if isinstance(k, torch.Tensor):
        if k.numel() == 0:
            return
        low, high = int(k.min()), int(k.max())
    else:
        low = high = int(k)
    if low < 1 or high > schedule.K:
        raise InputError(f"Diffusion step must be in [1, {schedule.K}], got {k}")


def _coefficient(values: np.ndarray, k: StepIndex, like: torch.Tensor) -> torch.Tensor:
    """Gather a schedule value at k, shaped to broadcast over a batch."""
    table = torch.as_tensor(values, dtype=like.dtype, device=like.device)
    if isinstance(k, torch.Tensor) and k.dim() > 0:
        gathered = table[k.to(like.device).long() - 1]
        return gathered.reshape(-1, *([1] * (like.dim() - 1)))
    return table[int(k) - 1]


def q_sample(
    y0: torch.Tensor,
    k: StepIndex,
    epsilon: torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """
    Corrupt clean targets in one shot: y_k = √α_k·y0 + √(1 − α_k)·ε.

    Args:
        y0: Clean targets
        k: Step, an int or one step per batch element
        epsilon: Standard normal noise shaped like y0
        schedule: Noise schedule

    Returns:
        torch.Tensor: Noisy targets y_k

    Raises:
        InputError: If k is outside [1, K] or epsilon's shape differs
    """
    if epsilon.shape != y0.shape:
        raise InputError(
            f"Noise shape {tuple(epsilon.shape)} differs from target {tuple(y0.shape)}"
        )
    _check_steps(k, schedule)
    alpha = _coefficient(schedule.alpha, k, y0)
    return alpha.sqrt() * y0 + (1.0 - alpha).sqrt() * epsilon


def training_loss(
    y0: torch.Tensor,
    condition: Optional[torch.Tensor],
    k: StepIndex,
    epsilon: torch.Tensor,
    denoiser: nn.Module,
    schedule: NoiseSchedule,
    context: Any = None,
) -> torch.Tensor:
    """
    Simplified noise-prediction loss ‖ε − ε_θ(y_k, H, k)‖² averaged over elements.

    Args:
        y0: (B, ...) clean normalized targets
        condition: Encoder latent H for the batch (None for unconditioned models)
        k: Step per batch element (LongTensor of size B) or a shared int
        epsilon: Standard normal noise shaped like y0
        denoiser: Noise predictor called as denoiser(y_k, H, k, context)
        schedule: Noise schedule
        context: Spatial/temporal embeddings handed to the denoiser

    Returns:
        torch.Tensor: Scalar loss; gradients reach the denoiser and H

    Raises:
        ContractError: If ε̂ and ε shapes differ
    """
    y_k = q_sample(y0, k, epsilon, schedule)
    steps = k if isinstance(k, torch.Tensor) else torch.full(
        (y0.size(0),), int(k), dtype=torch.long, device=y0.device)
    eps_hat = denoiser(y_k, condition, steps, context)
    if eps_hat.shape != epsilon.shape:
        raise ContractError(
            f"Denoiser output {tuple(eps_hat.shape)} does not match noise "
            f"{tuple(epsilon.shape)}"
        )
    return ((epsilon - eps_hat) ** 2).mean()


def reverse_step(
    y_k: Any,
    k: int,
    eps_hat: Any,
    z: Any,
    schedule: NoiseSchedule,
) -> Any:
    """
    One ancestral step y_k → y_{k−1} with σ_k = √β_k.

    y_{k−1} = (y_k − β_k/√(1 − α_k)·ε̂)/√α̂_k + √β_k·z, with z ignored at k = 1.
    Works on floats, numpy arrays and tensors alike.

    Args:
        y_k: Current noisy value
        k: Current step in [1, K]
        eps_hat: Predicted noise
        z: Standard normal draw shaped like y_k, or None
        schedule: Noise schedule

    Returns:
        The denoised value y_{k−1}

    Raises:
        InputError: If k is outside [1, K]
    """
    _check_steps(k, schedule)
    beta = float(schedule.beta[k - 1])
    alpha_hat = float(schedule.alpha_hat[k - 1])
    alpha = float(schedule.alpha[k - 1])
    mean = (y_k - beta / math.sqrt(1.0 - alpha) * eps_hat) / math.sqrt(alpha_hat)
    if k == 1 or z is None:
        return mean
    return mean + math.sqrt(beta) * z


def iterate_reverse_chain(
    y_K: torch.Tensor,  # noqa: N803
    predict_noise: Callable[[torch.Tensor, int], torch.Tensor],
    schedule: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
) -> Iterator[DiffusionState]:
    """
    Walk the reverse chain from step K down to 0.

    Args:
        y_K: Pure-noise start
        predict_noise: Callable (y_k, k) → ε̂
        schedule: Noise schedule
        generator: Torch generator for the z draws

    Yields:
        DiffusionState: y_{k−1} after each step, ending with k = 0

    Raises:
        NumericError: If the chain leaves the finite range, with the step index
    """
    y = y_K
    for k in range(schedule.K, 0, -1):
        eps_hat = predict_noise(y, k)
        z = None
        if k > 1:
            z = torch.randn(y.shape, generator=generator, dtype=y.dtype,
                            device=y.device)
        y = reverse_step(y, k, eps_hat, z, schedule)
        if not torch.isfinite(y).all():
            raise NumericError(f"Sampling chain produced non-finite values at step {k}")
        yield DiffusionState(y_k=y, k=k - 1)


def sample(
    condition: Optional[torch.Tensor],
    denoiser: nn.Module,
    schedule: NoiseSchedule,
    target_shape: Sequence[int],
    n_samples: int = 8,
    generator: Optional[torch.Generator] = None,
    context: Any = None,
) -> torch.Tensor:
    """
    Draw conditional samples by running the full reverse chain.

    All samples of a batch run as one enlarged batch; each sample still gets
    its own noise draws from the generator stream.

    Args:
        condition: (B, ...) encoder latent, or None
        denoiser: Noise predictor called as denoiser(y_k, H, k, context)
        schedule: Noise schedule
        target_shape: (B, ...) shape of one batch of targets
        n_samples: Samples per window
        generator: Torch generator; equal states give identical samples
        context: Denoiser context, repeated per sample when it has ``repeat``

    Returns:
        torch.Tensor: (n_samples, B, ...) normalized samples y_0
    """
    if n_samples < 1:
        raise InputError(f"n_samples must be positive, got {n_samples}")
    batch = int(target_shape[0])
    reference = condition if condition is not None else torch.zeros(())
    dtype = reference.dtype if reference.is_floating_point() else torch.float32

    if condition is not None:
        condition = condition.unsqueeze(0).expand(n_samples, *condition.shape)
        condition = condition.reshape(n_samples * batch, *condition.shape[2:])
    if context is not None and hasattr(context, "repeat"):
        context = context.repeat(n_samples)

    shape = (n_samples * batch, *target_shape[1:])
    y = torch.randn(shape, generator=generator, dtype=dtype, device=reference.device)

    def predict_noise(y_k: torch.Tensor, k: int) -> torch.Tensor:
        steps = torch.full((y_k.size(0),), k, dtype=torch.long, device=y_k.device)
        return denoiser(y_k, condition, steps, context)

    with torch.no_grad():
        for state in iterate_reverse_chain(y, predict_noise, schedule, generator):
            y = state.y_k
    return y.reshape(n_samples, batch, *target_shape[1:])
