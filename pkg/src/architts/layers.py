"""Transformer building blocks shared by the aligner, encoder and decoder."""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .numerics import apply_rotary, attention, depthwise_conv1d, gelu, layer_norm, rotary_angles


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: Tensor, positions: Tensor, key_mask: Optional[Tensor] = None) -> Tensor:
        B, S, D = x.shape
        q, k, v = self.qkv(x).view(B, S, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        cos, sin = rotary_angles(positions.to(x.dtype), self.head_dim)
        cos, sin = cos.unsqueeze(1), sin.unsqueeze(1)
        q, k = apply_rotary(q, cos, sin), apply_rotary(k, cos, sin)
        mask = None if key_mask is None else key_mask[:, None, None, :]
        y = attention(q, k, v, mask)
        return self.out(y.transpose(1, 2).reshape(B, S, D))


class MLP(nn.Module):
    def __init__(self, dim: int, ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm block without timestep conditioning (used by the aligner)."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = MLP(dim, mlp_ratio)

    def forward(self, x: Tensor, positions: Tensor, key_mask: Optional[Tensor] = None) -> Tensor:
        x = x + self.attn(self.norm1(x), positions, key_mask)
        return x + self.mlp(self.norm2(x))


class ConvNeXtBlock(nn.Module):
    """depthwise conv -> norm -> expand -> GELU -> project, residual."""

    def __init__(self, dim: int, kernel: int = 7, ratio: float = 2.0):
        super().__init__()
        self.dw_weight = nn.Parameter(torch.randn(dim, kernel) / math.sqrt(kernel))
        self.dw_bias = nn.Parameter(torch.zeros(dim))
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.expand = nn.Linear(dim, int(dim * ratio))
        self.project = nn.Linear(int(dim * ratio), dim)
        nn.init.zeros_(self.project.weight)
        nn.init.zeros_(self.project.bias)

    def forward(self, x: Tensor, mask: Optional[Tensor] = None) -> Tensor:
        if mask is not None:
            x = x * mask.unsqueeze(-1).to(x.dtype)
        y = depthwise_conv1d(x, self.dw_weight, self.dw_bias)
        y = self.project(gelu(self.expand(self.norm(y))))
        return x + y


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1 + scale) + shift


class DiTBlock(nn.Module):
    """Pre-norm attention + MLP with scale/shift/gate from a per-frame condition.

    ``cond`` is ``(B, T, D)`` so that every frame can be modulated differently.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = MLP(dim, mlp_ratio)
        self.modulation = nn.Linear(dim, 6 * dim)
        nn.init.normal_(self.modulation.weight, std=0.02)
        nn.init.zeros_(self.modulation.bias)

    def forward(self, x: Tensor, cond: Tensor, positions: Tensor, key_mask: Optional[Tensor] = None) -> Tensor:
        shift1, scale1, gate1, shift2, scale2, gate2 = self.modulation(F.silu(cond)).chunk(6, dim=-1)
        x = x + (1 + gate1) * self.attn(modulate(self.norm1(x), shift1, scale1), positions, key_mask)
        return x + (1 + gate2) * self.mlp(modulate(self.norm2(x), shift2, scale2))


def sinusoidal_embedding(t: Tensor, dim: int, scale: float = 1000.0) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = scale * t.unsqueeze(-1) * freqs
    emb = torch.cat([args.sin(), args.cos()], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimestepEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, t: Tensor) -> Tensor:
        return self.fc2(F.silu(self.fc1(sinusoidal_embedding(t, self.dim))))


def frame_positions(batch: int, length: int, dtype=torch.float32) -> Tensor:
    return torch.arange(length, dtype=dtype).expand(batch, length)


def final_layer_norm(x: Tensor) -> Tensor:
    return layer_norm(x, None, None, 1e-6)
