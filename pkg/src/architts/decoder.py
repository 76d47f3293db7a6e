"""Velocity decoder: DiT stack driven by the timestep embedding plus ``h``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .encoder import ConditionState, _as_batch_time
from .layers import DiTBlock, TimestepEmbedding, frame_positions, modulate


class DecoderError(ValueError):
    pass


@dataclass
class DecoderConfig:
    blocks: int = 4
    model_dim: int = 96
    head_count: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.blocks < 1:
            raise DecoderError("decoder needs at least one block")
        if self.model_dim % self.head_count:
            raise DecoderError("model_dim must be divisible by head_count")


class VelocityDecoder(nn.Module):
    def __init__(self, config: DecoderConfig, latent_dim: int):
        super().__init__()
        self.config = config
        D = config.model_dim
        self.in_proj = nn.Linear(latent_dim, D)
        self.time_embed = TimestepEmbedding(D)
        self.blocks = nn.ModuleList(DiTBlock(D, config.head_count, config.mlp_ratio) for _ in range(config.blocks))
        self.final_norm = nn.LayerNorm(D, elementwise_affine=False, eps=1e-6)
        self.final_modulation = nn.Linear(D, 2 * D)
        nn.init.normal_(self.final_modulation.weight, std=0.02)
        nn.init.zeros_(self.final_modulation.bias)
        self.out = nn.Linear(D, latent_dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x_t: Tensor, t, state: ConditionState, frame_mask: Optional[Tensor] = None) -> Tensor:
        B, T, _ = x_t.shape
        h = state.h
        if h.shape[:2] != (B, T):
            raise DecoderError(f"x_t has {T} frames but h has {h.shape[1]}")
        t = _as_batch_time(t, B, x_t.dtype)
        cond = self.time_embed(t).unsqueeze(1) + h
        x = self.in_proj(x_t)
        positions = frame_positions(B, T, x.dtype)
        for block in self.blocks:
            x = block(x, cond, positions, frame_mask)
        shift, scale = self.final_modulation(F.silu(cond)).chunk(2, dim=-1)
        return self.out(modulate(self.final_norm(x), shift, scale))
