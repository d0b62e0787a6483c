"""
USTD Encoder Module

The shared spatio-temporal encoder and its masked pre-training.

The encoder is a stack of spatio-temporal layers, each a gated dilated
temporal convolution followed by a graph convolution, with 1×1 residual and
skip projections. Temporal convolutions are unpadded, so a T-step condition
is squashed to τ = T − (c − 1)·Σ dilations latent steps. A lightweight
decoder reconstructs the condition from the latent sequence; both are
trained on masked, graph-sampled inputs with a mean absolute error measured
only at masked cells.

Tensors inside the layers use the (batch, channels, nodes, time) layout;
the public functions take and return (batch, nodes, time, channels).
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from src.ustd_config import EncoderConfig
from src.ustd_errors import InputError, NumericError, ShapeError
from src.ustd_graph import Graph, normalize_adjacency, sample_subgraph


class GatedTCN(nn.Module):
    """
    Gated dilated temporal convolution: tanh(h⋆K1) ⊙ σ(h⋆K2), no padding.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 2,
                 dilation: int = 1, bias: bool = True):
        super().__init__()
        self.kernel_size = kernel_size
        self.dilation = dilation
        self.filter_conv = nn.Conv2d(in_channels, out_channels, (1, kernel_size),
                                     dilation=(1, dilation), bias=bias)
        self.gate_conv = nn.Conv2d(in_channels, out_channels, (1, kernel_size),
                                   dilation=(1, dilation), bias=bias)

    @property
    def reduction(self) -> int:
        """Number of time steps the convolution removes."""
        return (self.kernel_size - 1) * self.dilation

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        steps = h.size(-1)
        if steps <= self.reduction:
            raise ShapeError(
                f"Gated TCN (kernel {self.kernel_size}, dilation {self.dilation}) "
                f"needs more than {self.reduction} steps, got {steps}"
            )
        return torch.tanh(self.filter_conv(h)) * torch.sigmoid(self.gate_conv(h))


class GraphConv(nn.Module):
    """
    Σ_{l=0..L} Â^l H W_l, applied independently at every time position.
    """

    def __init__(self, in_channels: int, out_channels: int, depth: int = 2,
                 bias: bool = True):
        super().__init__()
        self.depth = depth
        self.weights = nn.ModuleList([
            nn.Conv2d(in_channels, out_channels, (1, 1), bias=bias and hop == 0)
            for hop in range(depth + 1)
        ])

    def forward(self, h: torch.Tensor, norm_adj: torch.Tensor) -> torch.Tensor:
        n_nodes = h.size(2)
        if norm_adj.shape != (n_nodes, n_nodes):
            raise ShapeError(
                f"Propagation matrix must be {n_nodes}×{n_nodes}, "
                f"got {tuple(norm_adj.shape)}"
            )
        out = self.weights[0](h)
        propagated = h
        for weight in self.weights[1:]:
            propagated = torch.einsum("bcnt,mn->bcmt", propagated, norm_adj)
            out = out + weight(propagated)
        return out


class STLayer(nn.Module):
    """Gated TCN → GCN with a 1×1 residual projection and a skip tap."""

    def __init__(self, channels: int, skip_channels: int, kernel_size: int,
                 dilation: int, gcn_depth: int, bias: bool = True):
        super().__init__()
        self.tcn = GatedTCN(channels, channels, kernel_size, dilation, bias=bias)
        self.gcn = GraphConv(channels, channels, gcn_depth, bias=bias)
        self.residual_conv = nn.Conv2d(channels, channels, (1, 1), bias=bias)
        self.skip_conv = nn.Conv2d(channels, skip_channels, (1, 1), bias=bias)

    def forward(self, h: torch.Tensor, norm_adj: torch.Tensor,
                skip: Optional[torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
        x = self.tcn(h)
        tap = self.skip_conv(x)
        skip = tap if skip is None else tap + skip[..., -tap.size(-1):]
        x = self.gcn(x, norm_adj)
        x = x + self.residual_conv(h)[..., -x.size(-1):]
        return x, skip


class STEncoder(nn.Module):
    """
    Spatio-temporal encoder mapping N×T×d_x conditions to N×τ×d_h latents.

    Holds the learnable mask token used during masked pre-training.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.kernel_size = config.kernel_size
        self.dilations = list(config.dilations)
        self.latent_dim = config.latent
        self.mask_token = nn.Parameter(torch.zeros(config.input_dim))
        self.start_conv = nn.Conv2d(config.input_dim, config.hidden, (1, 1))
        self.layers = nn.ModuleList([
            STLayer(config.hidden, config.hidden, config.kernel_size, dilation,
                    config.gcn_depth)
            for dilation in self.dilations
        ])
        self.end_conv = nn.Conv2d(config.hidden, config.latent, (1, 1))

    def output_length(self, steps: int) -> int:
        """Latent length τ for a T-step input."""
        return steps - (self.kernel_size - 1) * sum(self.dilations)

    def forward(self, x: torch.Tensor, norm_adj: torch.Tensor) -> torch.Tensor:
        steps = x.size(2)
        if self.output_length(steps) < 1:
            required = (self.kernel_size - 1) * sum(self.dilations) + 1
            raise ShapeError(
                f"Encoder receptive field needs at least {required} steps, got {steps}"
            )
        h = self.start_conv(x.permute(0, 3, 1, 2))
        skip = None
        for layer in self.layers:
            h, skip = layer(h, norm_adj, skip)
        h = self.end_conv(torch.relu(skip))
        return h.permute(0, 2, 3, 1)


class RawConditionEncoder(nn.Module):
    """
    Encoder stand-in for the no-encoder ablation: a 1×1 projection of the
    raw condition, τ = T, no spatial mixing.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.latent_dim = config.latent
        self.projection = nn.Linear(config.input_dim, config.latent)

    def output_length(self, steps: int) -> int:
        return steps

    def forward(self, x: torch.Tensor, norm_adj: torch.Tensor) -> torch.Tensor:
        return self.projection(x)


class STDecoder(nn.Module):
    """
    Lightweight decoder: a small stack of bias-free spatio-temporal layers
    collapsing τ to one step, then a perceptron to T·d_x per node.
    """

    def __init__(self, config: EncoderConfig, window: int):
        super().__init__()
        self.window = window
        self.input_dim = config.input_dim
        tau = window - (config.kernel_size - 1) * sum(config.dilations)
        if tau < 1:
            raise ShapeError(f"Decoder needs τ ≥ 1, encoder config gives τ = {tau}")
        kernel_sizes = [1] * (config.decoder_layers - 1) + [tau]
        self.input_conv = nn.Conv2d(config.latent, config.hidden, (1, 1), bias=False)
        self.layers = nn.ModuleList([
            STLayer(config.hidden, config.hidden, kernel, 1, config.gcn_depth,
                    bias=False)
            for kernel in kernel_sizes
        ])
        self.perceptron = nn.Sequential(
            nn.Linear(config.hidden, config.hidden),
            nn.ReLU(),
            nn.Linear(config.hidden, window * config.input_dim),
        )

    def forward(self, latent: torch.Tensor, norm_adj: torch.Tensor) -> torch.Tensor:
        h = self.input_conv(latent.permute(0, 3, 1, 2))
        for layer in self.layers:
            h, _ = layer(h, norm_adj, None)
        h = h[..., -1].permute(0, 2, 1)
        out = self.perceptron(h)
        batch, n_nodes = out.shape[:2]
        return out.reshape(batch, n_nodes, self.window, self.input_dim)


class MaskedAutoencoder(nn.Module):
    """Encoder + decoder pair trained by masked reconstruction."""

    def __init__(self, config: EncoderConfig, window: int):
        super().__init__()
        self.encoder = STEncoder(config)
        self.decoder = STDecoder(config, window)

    def forward(self, x: torch.Tensor,
                norm_adj: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        latent = self.encoder(x, norm_adj)
        return self.decoder(latent, norm_adj), latent


@dataclass(eq=False)
class MaskSpec:
    """Binary N×T corruption mask (True = replaced by the mask token)."""

    msk: np.ndarray
    ratio: float


@dataclass(eq=False)
class LatentRep:
    """Encoder output and the parent-graph indices of its rows."""

    h: torch.Tensor
    node_index: np.ndarray


def sample_mask(n_nodes: int, n_steps: int, ratio: float,
                rng: np.random.Generator) -> MaskSpec:
    """
    Mask exactly round(ratio × N × T) cells drawn without replacement.

    Args:
        n_nodes: Number of nodes N
        n_steps: Number of time steps T
        ratio: Masking ratio in [0, 1)
        rng: Random generator

    Returns:
        MaskSpec: The sampled mask
    """
    if not 0 <= ratio < 1:
        raise InputError(f"Mask ratio must be in [0, 1), got {ratio}")
    cells = n_nodes * n_steps
    count = int(np.floor(ratio * cells + 0.5))
    flat = np.zeros(cells, dtype=bool)
    flat[rng.choice(cells, size=count, replace=False)] = True
    return MaskSpec(msk=flat.reshape(n_nodes, n_steps), ratio=ratio)


def apply_mask(x: torch.Tensor, msk: torch.Tensor, token: torch.Tensor) -> torch.Tensor:
    """
    Replace masked cells with the token; x itself is left untouched.

    Args:
        x: (..., N, T, d_x) data
        msk: (..., N, T) boolean mask
        token: d_x mask token

    Returns:
        torch.Tensor: Masked copy of x
    """
    if msk.shape != x.shape[:-1]:
        raise ShapeError(
            f"Mask shape {tuple(msk.shape)} does not match data {tuple(x.shape[:-1])}"
        )
    return torch.where(msk.unsqueeze(-1), token.to(x.dtype), x)


def masked_mae(reconstruction: torch.Tensor, target: torch.Tensor,
               msk: torch.Tensor) -> torch.Tensor:
    """
    Mean absolute error over masked cells only.

    Args:
        reconstruction: (B, N, T, d) reconstruction
        target: (B, N, T, d) ground truth, read only at masked cells
        msk: (B, N, T) boolean mask

    Returns:
        torch.Tensor: Scalar loss

    Raises:
        InputError: If the mask selects no cell
    """
    n_masked = int(msk.sum())
    if n_masked == 0:
        raise InputError("Masked loss is undefined for an empty mask")
    selected = msk.unsqueeze(-1).expand_as(target)
    errors = (reconstruction[selected] - target[selected]).abs()
    return errors.mean()


def encode(x: torch.Tensor, graph: Graph, encoder: nn.Module,
           node_index: Optional[np.ndarray] = None) -> LatentRep:
    """
    Encode a condition batch on a graph.

    Args:
        x: (B, N, T, d_x) condition
        graph: Graph over the N condition nodes
        encoder: STEncoder (or the raw-condition stand-in)
        node_index: Parent-graph indices of the rows, defaults to 0..N-1

    Returns:
        LatentRep: (B, N, τ, d_h) latent with its node map
    """
    norm_adj = torch.as_tensor(normalize_adjacency(graph), dtype=x.dtype,
                               device=x.device)
    h = encoder(x, norm_adj)
    if not torch.isfinite(h).all():
        raise NumericError("Encoder produced non-finite latents")
    index = np.arange(graph.n_nodes) if node_index is None else np.asarray(node_index)
    return LatentRep(h=h, node_index=index)


def reconstruct(latent: LatentRep, graph: Graph, decoder: STDecoder) -> torch.Tensor:
    """Decode a latent back to the (B, N, T, d_x) condition space."""
    norm_adj = torch.as_tensor(normalize_adjacency(graph), dtype=latent.h.dtype,
                               device=latent.h.device)
    return decoder(latent.h, norm_adj)


def pretrain_loss(
    batch: torch.Tensor,
    graph: Graph,
    model: MaskedAutoencoder,
    rng: np.random.Generator,
    mask_ratio: float = 0.75,
    sample_rate: float = 0.8,
    masking: bool = True,
) -> Tuple[torch.Tensor, int]:
    """
    Masked, graph-sampled reconstruction loss of one batch.

    Args:
        batch: (B, N, T, d_x) normalized conditions
        graph: Full graph over N nodes
        model: Encoder/decoder pair
        rng: Generator for the subgraph and mask draws
        mask_ratio: Fraction of masked cells per sample
        sample_rate: Graph sampling rate
        masking: Disable to reconstruct every cell without a token

    Returns:
        Tuple of (scalar loss, number of sampled nodes)
    """
    if masking and mask_ratio <= 0:
        raise InputError("Masked pre-training requires mask_ratio > 0")
    subgraph = sample_subgraph(graph, sample_rate, rng)
    kept = torch.as_tensor(subgraph.kept_indices, device=batch.device)
    x = batch.index_select(1, kept)
    n_batch, n_nodes, n_steps = x.shape[:3]

    if masking:
        masks = np.stack([
            sample_mask(n_nodes, n_steps, mask_ratio, rng).msk for _ in range(n_batch)
        ])
        msk = torch.as_tensor(masks, device=x.device)
        x_in = apply_mask(x, msk, model.encoder.mask_token)
    else:
        msk = torch.ones(x.shape[:3], dtype=torch.bool, device=x.device)
        x_in = x

    norm_adj = torch.as_tensor(
        normalize_adjacency(Graph(adjacency=subgraph.adjacency)),
        dtype=x.dtype, device=x.device,
    )
    reconstruction, _ = model(x_in, norm_adj)
    return masked_mae(reconstruction, x, msk), n_nodes


def pretrain_step(
    batch: torch.Tensor,
    graph: Graph,
    model: MaskedAutoencoder,
    optimizer: torch.optim.Optimizer,
    rng: np.random.Generator,
    mask_ratio: float = 0.75,
    sample_rate: float = 0.8,
    masking: bool = True,
) -> Tuple[float, int]:
    """
    One pre-training update: sample, mask, encode, reconstruct, step.

    Returns:
        Tuple of (loss value, number of sampled nodes)

    Raises:
        NumericError: If the loss is not finite
    """
    model.train()
    loss, n_nodes = pretrain_loss(batch, graph, model, rng, mask_ratio,
                                  sample_rate, masking)
    if not torch.isfinite(loss):
        raise NumericError(
            f"Pre-training loss is {loss.item()} (sampled nodes {n_nodes}, "
            f"batch range [{batch.min().item():.4g}, {batch.max().item():.4g}], "
            f"token {model.encoder.mask_token.detach().tolist()})"
        )
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return loss.item(), n_nodes


def build_encoder(config: EncoderConfig, mode: str = "pretrained") -> nn.Module:
    """Encoder for a training mode: the ST encoder or the raw-condition stand-in."""
    if mode == "none":
        return RawConditionEncoder(config)
    return STEncoder(config)
