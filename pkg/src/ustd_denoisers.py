"""
USTD Denoisers Module

Noise-prediction networks conditioned on encoder latents.

- TGADenoiser (forecasting): every node's flattened target attends over its
  own τ latent steps (temporal cross-attention), nodes attend to each other
  (self-attention) and a sigmoid gate fuses the two streams.
- SGADenoiser (kriging): the latent time axis is absorbed per node, then
  unobserved targets attend over observed nodes (spatial cross-attention)
  before the same self-attention and gate.
- FullAttentionDenoiser: one joint transformer over all (node, step)
  condition tokens and target tokens, kept for runtime comparisons.
- ScalarDenoiser: a small perceptron for unconditioned scalar targets.

Every denoiser is called as ``denoiser(y_k, H, k, context)`` and returns a
noise estimate shaped exactly like y_k.
"""

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.ustd_config import DenoiserConfig, RunConfig
from src.ustd_errors import ContractError, InputError, ShapeError

CALENDAR_FEATURES = 4


@dataclass(eq=False)
class DenoiserContext:
    """
    Side information for a denoiser call.

    Attributes:
        target_spatial: (nodes_t, d_s) spatial embeddings of the target nodes
        cond_spatial: (nodes_c, d_s) spatial embeddings of the condition nodes
        calendar: (B, 4) calendar features of each window, if known
    """

    target_spatial: Optional[torch.Tensor] = None
    cond_spatial: Optional[torch.Tensor] = None
    calendar: Optional[torch.Tensor] = None

    def repeat(self, n_samples: int) -> "DenoiserContext":
        """Tile per-window fields for n samples stacked sample-major."""
        if self.calendar is None:
            return self
        return replace(self, calendar=self.calendar.repeat(n_samples, 1))


class DiffusionEmbedding(nn.Module):
    """Sinusoidal table of the step k followed by a two-layer SiLU perceptron."""

    def __init__(self, num_steps: int, embedding_dim: int = 128,
                 projection_dim: Optional[int] = None):
        super().__init__()
        if projection_dim is None:
            projection_dim = embedding_dim
        self.register_buffer(
            "embedding",
            self._build_embedding(num_steps, embedding_dim // 2),
            persistent=False,
        )
        self.projection1 = nn.Linear(embedding_dim, projection_dim)
        self.projection2 = nn.Linear(projection_dim, projection_dim)

    def forward(self, diffusion_step: torch.Tensor) -> torch.Tensor:
        x = self.embedding[diffusion_step.long() - 1]
        x = F.silu(self.projection1(x))
        return F.silu(self.projection2(x))

    @staticmethod
    def _build_embedding(num_steps: int, dim: int) -> torch.Tensor:
        steps = torch.arange(1, num_steps + 1, dtype=torch.float32).unsqueeze(1)
        frequencies = 10.0 ** (torch.arange(dim) / max(dim - 1, 1) * 4.0).unsqueeze(0)
        table = steps * frequencies
        return torch.cat([torch.sin(table), torch.cos(table)], dim=1)


class TemporalEmbedding(nn.Module):
    """Fixed sinusoidal step positions plus a projection of calendar features."""

    def __init__(self, dim: int, max_len: int = 1024,
                 calendar_dim: int = CALENDAR_FEATURES):
        super().__init__()
        position = torch.arange(max_len, dtype=torch.float32).unsqueeze(1)
        div_term = torch.exp(torch.arange(0, dim, 2, dtype=torch.float32)
                             * (-math.log(10000.0) / dim))
        table = torch.zeros(max_len, dim)
        table[:, 0::2] = torch.sin(position * div_term)
        table[:, 1::2] = torch.cos(position * div_term)
        self.register_buffer("table", table, persistent=False)
        self.calendar_projection = nn.Linear(calendar_dim, dim)

    def positions(self, length: int) -> torch.Tensor:
        if length > self.table.size(0):
            raise ShapeError(
                f"Temporal embedding covers {self.table.size(0)} steps, got {length}"
            )
        return self.table[:length]

    def calendar(self, features: torch.Tensor) -> torch.Tensor:
        return self.calendar_projection(features)


class MultiHeadAttention(nn.Module):
    """
    Scaled dot-product attention with separate query, key and value maps.

    Set ``record_scores`` to keep the last (batch, heads, queries, keys)
    attention weights for inspection.
    """

    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        if dim % heads != 0:
            raise InputError(f"Channel size {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.record_scores = False
        self.last_scores: Optional[torch.Tensor] = None

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        batch, length, _ = x.shape
        return x.view(batch, length, self.heads, self.dim // self.heads).transpose(1, 2)

    def forward(self, query: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        batch, n_queries, _ = query.shape
        q = self._split(self.query(query))
        k = self._split(self.key(memory))
        v = self._split(self.value(memory))
        scores = torch.softmax(
            q @ k.transpose(-2, -1) / math.sqrt(self.dim // self.heads), dim=-1
        )
        if self.record_scores:
            self.last_scores = scores.detach()
        out = (scores @ v).transpose(1, 2).reshape(batch, n_queries, self.dim)
        return self.out(out)


class GatedFusion(nn.Module):
    """Gate = σ(R_ca·W_g1 + R_sa·W_g2 + b_g); R = Gate⊙R_ca + (1 − Gate)⊙R_sa."""

    def __init__(self, dim: int):
        super().__init__()
        self.w_g1 = nn.Linear(dim, dim, bias=True)
        self.w_g2 = nn.Linear(dim, dim, bias=False)

    def gate(self, r_ca: torch.Tensor, r_sa: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.w_g1(r_ca) + self.w_g2(r_sa))

    def forward(self, r_ca: torch.Tensor, r_sa: torch.Tensor) -> torch.Tensor:
        gate = self.gate(r_ca, r_sa)
        return gate * r_ca + (1.0 - gate) * r_sa


def flatten_targets(y: torch.Tensor, projection: nn.Linear) -> torch.Tensor:
    """
    Map each node's (steps × d_y) target slab to one d_h′ token.

    Args:
        y: (B, nodes, steps, d_y) targets
        projection: Linear layer from steps·d_y to d_h′

    Returns:
        torch.Tensor: (B, nodes, d_h′)

    Raises:
        ContractError: If steps·d_y does not match the projection
    """
    if y.dim() != 4:
        raise ContractError(f"Targets must be (B, nodes, steps, d_y), got {tuple(y.shape)}")
    batch, n_nodes, steps, channels = y.shape
    if steps * channels != projection.in_features:
        raise ContractError(
            f"Target slab {steps}×{channels} does not match the configured "
            f"{projection.in_features} inputs"
        )
    return projection(y.reshape(batch, n_nodes, steps * channels))


def cross_attention_temporal(r: torch.Tensor, h: torch.Tensor,
                             attention: MultiHeadAttention) -> torch.Tensor:
    """
    Per-node cross-attention: node i's token queries only node i's τ steps.

    Args:
        r: (B, N, D) target tokens
        h: (B, N, τ, D) projected latents

    Returns:
        torch.Tensor: (B, N, D)
    """
    batch, n_nodes, dim = r.shape
    queries = r.reshape(batch * n_nodes, 1, dim)
    memory = h.reshape(batch * n_nodes, h.size(2), dim)
    return attention(queries, memory).reshape(batch, n_nodes, dim)


def cross_attention_spatial(r: torch.Tensor, h: torch.Tensor,
                            attention: MultiHeadAttention) -> torch.Tensor:
    """
    Target nodes query the observed nodes' absorbed latents.

    Args:
        r: (B, M, D) target-node tokens
        h: (B, N, D) observed-node latents

    Returns:
        torch.Tensor: (B, M, D)

    Raises:
        InputError: If there is no target node
    """
    if r.size(1) == 0:
        raise InputError("Spatial cross-attention needs at least one target node")
    return attention(r, h)


def self_attention(r: torch.Tensor, attention: MultiHeadAttention) -> torch.Tensor:
    """Attention of the node tokens over themselves."""
    return attention(r, r)


class GatedAttentionLayer(nn.Module):
    """Cross-attention and self-attention streams fused by a sigmoid gate."""

    def __init__(self, dim: int, heads: int, mode: str = "temporal",
                 use_self_attention: bool = True):
        super().__init__()
        if mode not in ("temporal", "spatial"):
            raise InputError(f"Unknown attention mode '{mode}'")
        self.mode = mode
        self.use_self_attention = use_self_attention
        self.cross_attention = MultiHeadAttention(dim, heads)
        self.cross_norm = nn.LayerNorm(dim)
        self.self_attention = MultiHeadAttention(dim, heads)
        self.self_norm = nn.LayerNorm(dim)
        self.fusion = GatedFusion(dim)

    def forward(self, r: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        if self.mode == "temporal":
            attended = cross_attention_temporal(r, memory, self.cross_attention)
        else:
            attended = cross_attention_spatial(r, memory, self.cross_attention)
        r_ca = self.cross_norm(r + attended)
        if not self.use_self_attention:
            return r_ca
        r_sa = self.self_norm(r + self_attention(r, self.self_attention))
        return self.fusion(r_ca, r_sa)


class _ConditionedDenoiser(nn.Module):
    """Shared target embedding and output head of the attention denoisers."""

    def __init__(self, channels: int, target_len: int, target_dim: int,
                 num_steps: int, diffusion_embedding_dim: int, spatial_dim: int,
                 zero_init_head: bool):
        super().__init__()
        self.target_len = target_len
        self.target_dim = target_dim
        self.input_projection = nn.Linear(target_len * target_dim, channels)
        self.diffusion_embedding = DiffusionEmbedding(
            num_steps, diffusion_embedding_dim, channels)
        self.temporal_embedding = TemporalEmbedding(channels)
        self.spatial_projection = nn.Linear(spatial_dim, channels)
        self.head = nn.Linear(channels, target_len * target_dim)
        if zero_init_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def embed_targets(self, y_k: torch.Tensor, k: torch.Tensor,
                      context: Optional[DenoiserContext]) -> torch.Tensor:
        r = flatten_targets(y_k, self.input_projection)
        r = r + self.diffusion_embedding(k).unsqueeze(1)
        if context is not None:
            if context.target_spatial is not None:
                r = r + self.spatial_projection(context.target_spatial).unsqueeze(0)
            if context.calendar is not None:
                r = r + self.temporal_embedding.calendar(context.calendar).unsqueeze(1)
        return r

    def project_out(self, r: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        return self.head(r).reshape(like.shape)


class TGADenoiser(_ConditionedDenoiser):
    """
    Temporal gated attention denoiser for forecasting.

    y_k: (B, N, T′, d_y), H: (B, N, τ, d_h) → ε̂: (B, N, T′, d_y)
    """

    def __init__(self, config: DenoiserConfig, horizon: int, target_dim: int,
                 latent_dim: int, num_steps: int, spatial_dim: int):
        super().__init__(config.channels, horizon, target_dim, num_steps,
                         config.diffusion_embedding_dim, spatial_dim,
                         config.zero_init_head)
        self.cond_projections = nn.ModuleList([
            nn.Linear(latent_dim, config.channels) for _ in range(config.layers)
        ])
        self.layers = nn.ModuleList([
            GatedAttentionLayer(config.channels, config.heads, "temporal",
                                config.self_attention)
            for _ in range(config.layers)
        ])

    def forward(self, y_k: torch.Tensor, h: torch.Tensor, k: torch.Tensor,
                context: Optional[DenoiserContext] = None) -> torch.Tensor:
        if h.shape[:2] != y_k.shape[:2]:
            raise ContractError(
                f"Latent {tuple(h.shape)} and targets {tuple(y_k.shape)} disagree "
                f"on batch or node count"
            )
        r = self.embed_targets(y_k, k, context)
        tau = h.size(2)
        positions = self.temporal_embedding.positions(tau + self.target_len)
        # target slab covers the steps right after the condition
        r = r + positions[tau:].mean(dim=0)
        positions = positions[:tau]
        for projection, layer in zip(self.cond_projections, self.layers):
            r = layer(r, projection(h) + positions)
        return self.project_out(r, y_k)


class SGADenoiser(_ConditionedDenoiser):
    """
    Spatial gated attention denoiser for kriging.

    y_k: (B, M, T, d_y), H: (B, N, τ, d_h) → ε̂: (B, M, T, d_y)
    """

    def __init__(self, config: DenoiserConfig, window: int, target_dim: int,
                 latent_dim: int, tau: int, num_steps: int, spatial_dim: int):
        super().__init__(config.channels, window, target_dim, num_steps,
                         config.diffusion_embedding_dim, spatial_dim,
                         config.zero_init_head)
        self.tau = tau
        self.absorb = nn.Linear(tau * latent_dim, config.channels)
        self.cond_projections = nn.ModuleList([
            nn.Linear(config.channels, config.channels) for _ in range(config.layers)
        ])
        self.layers = nn.ModuleList([
            GatedAttentionLayer(config.channels, config.heads, "spatial",
                                config.self_attention)
            for _ in range(config.layers)
        ])

    def forward(self, y_k: torch.Tensor, h: torch.Tensor, k: torch.Tensor,
                context: Optional[DenoiserContext] = None) -> torch.Tensor:
        n_targets = y_k.size(1)
        if n_targets == 0:
            raise InputError("Kriging needs at least one target node")
        if context is None or context.target_spatial is None \
                or context.target_spatial.size(0) != n_targets:
            raise ContractError(
                f"Every one of the {n_targets} target nodes needs a spatial embedding"
            )
        if h.size(2) != self.tau:
            raise ContractError(f"Latent has τ={h.size(2)}, denoiser expects {self.tau}")

        r = self.embed_targets(y_k, k, context)
        batch, n_nodes = h.shape[:2]
        memory = self.absorb(h.reshape(batch, n_nodes, -1))
        if context.cond_spatial is not None:
            memory = memory + self.spatial_projection(context.cond_spatial).unsqueeze(0)
        for projection, layer in zip(self.cond_projections, self.layers):
            r = layer(r, projection(memory))
        return self.project_out(r, y_k)


class FullAttentionLayer(nn.Module):
    """Pre-norm transformer block over a joint token sequence."""

    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.attention = MultiHeadAttention(dim, heads)
        self.attention_norm = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.GELU(),
                                 nn.Linear(ffn_dim, dim))
        self.ffn_norm = nn.LayerNorm(dim)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        normed = self.attention_norm(tokens)
        tokens = tokens + self.attention(normed, normed)
        return tokens + self.ffn(self.ffn_norm(tokens))


class FullAttentionDenoiser(_ConditionedDenoiser):
    """
    Joint-attention ablation: target tokens and all (node, step) condition
    tokens share one attention, so scores grow with (N·τ + nodes_t)².
    """

    def __init__(self, config: DenoiserConfig, target_len: int, target_dim: int,
                 latent_dim: int, num_steps: int, spatial_dim: int):
        super().__init__(config.channels, target_len, target_dim, num_steps,
                         config.diffusion_embedding_dim, spatial_dim,
                         config.zero_init_head)
        self.cond_projection = nn.Linear(latent_dim, config.channels)
        self.layers = nn.ModuleList([
            FullAttentionLayer(config.channels, config.heads, config.ffn_dim)
            for _ in range(config.layers)
        ])

    def forward(self, y_k: torch.Tensor, h: torch.Tensor, k: torch.Tensor,
                context: Optional[DenoiserContext] = None) -> torch.Tensor:
        r = self.embed_targets(y_k, k, context)
        batch, n_nodes, tau = h.shape[:3]
        memory = self.cond_projection(h) + self.temporal_embedding.positions(tau)
        if context is not None and context.cond_spatial is not None:
            memory = memory + self.spatial_projection(
                context.cond_spatial).unsqueeze(0).unsqueeze(2)
        tokens = torch.cat([r, memory.reshape(batch, n_nodes * tau, -1)], dim=1)
        for layer in self.layers:
            tokens = layer(tokens)
        return self.project_out(tokens[:, : y_k.size(1)], y_k)


class ScalarDenoiser(nn.Module):
    """
    Perceptron noise predictor for small unconditioned targets.

    y_k: (B, L) → ε̂: (B, L); the condition argument is ignored.
    """

    def __init__(self, num_steps: int, target_size: int = 1, hidden: int = 64,
                 embedding_dim: int = 32):
        super().__init__()
        self.diffusion_embedding = DiffusionEmbedding(num_steps, embedding_dim)
        self.network = nn.Sequential(
            nn.Linear(target_size + embedding_dim, hidden),
            nn.SiLU(),
            nn.Linear(hidden, hidden),
            nn.SiLU(),
            nn.Linear(hidden, target_size),
        )

    def forward(self, y_k: torch.Tensor, condition: Optional[torch.Tensor],
                k: torch.Tensor, context: Optional[DenoiserContext] = None
                ) -> torch.Tensor:
        embedded = self.diffusion_embedding(k)
        return self.network(torch.cat([y_k, embedded], dim=-1))


def count_parameters(module: nn.Module) -> int:
    """Number of trainable parameters."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def match_ffn_dim(target_params: int, build: Callable[[int], nn.Module]) -> int:
    """
    Feed-forward width making ``build(width)`` hold about target_params.

    The parameter count is affine in the width, so two trial builds solve it.
    """
    base = count_parameters(build(1))
    slope = count_parameters(build(2)) - base
    return max(1, int(round((target_params - base) / slope)) + 1)


def build_denoiser(config: RunConfig, tau: int, variant: Optional[str] = None
                   ) -> nn.Module:
    """
    Build the denoiser for the configured task and variant.

    Args:
        config: Run configuration
        tau: Latent length produced by the encoder
        variant: Override of config.denoiser.variant ("gated" or "full")

    Returns:
        nn.Module: TGA/SGA for the gated variant, the joint-attention
            denoiser otherwise
    """
    variant = variant or config.denoiser.variant
    d = config.denoiser
    target_dim = config.encoder.input_dim
    latent_dim = config.encoder.latent
    steps = config.diffusion.steps
    spatial_dim = config.graph.spatial_dim
    target_len = config.data.horizon if config.task == "forecast" else config.data.window

    if variant == "full":
        return FullAttentionDenoiser(d, target_len, target_dim, latent_dim, steps,
                                     spatial_dim)
    if variant != "gated":
        raise InputError(f"Unknown denoiser variant '{variant}'")
    if config.task == "forecast":
        return TGADenoiser(d, target_len, target_dim, latent_dim, steps, spatial_dim)
    return SGADenoiser(d, target_len, target_dim, latent_dim, tau, steps, spatial_dim)
