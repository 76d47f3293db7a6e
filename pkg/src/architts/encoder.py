"""Condition encoder: fuses the noisy latent with prompt, semantics and speaker."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
from torch import Tensor

from .layers import DiTBlock, TimestepEmbedding, frame_positions

# columns of the per-item null flag tensor
NULL_SEMANTIC, NULL_SPEAKER, NULL_PROMPT = 0, 1, 2


class EncoderError(ValueError):
    pass


@dataclass
class EncoderConfig:
    blocks: int = 18
    model_dim: int = 96
    head_count: int = 4
    mlp_ratio: float = 4.0
    ctc_tap_layer: Optional[int] = None
    ctc_vocab: int = 17

    def __post_init__(self):
        if self.blocks < 1:
            raise EncoderError("encoder needs at least one block")
        if self.ctc_tap_layer is None:
            self.ctc_tap_layer = max(1, self.blocks // 2)
        if not 1 <= self.ctc_tap_layer <= self.blocks:
            raise EncoderError(f"ctc_tap_layer {self.ctc_tap_layer} outside [1, {self.blocks}]")
        if self.model_dim % self.head_count:
            raise EncoderError("model_dim must be divisible by head_count")


@dataclass
class ConditionState:
    h: Tensor  # (B, T, D)
    phi: Tensor  # (B, T, D) output of the CTC tap block
    t: Tensor  # (B,)


class ConditionEncoder(nn.Module):
    def __init__(self, config: EncoderConfig, latent_dim: int, semantic_dim: int, speaker_dim: int):
        super().__init__()
        self.config = config
        D = config.model_dim
        self.latent_dim = latent_dim
        self.in_proj = nn.Linear(2 * latent_dim + semantic_dim + speaker_dim, D)
        self.null_semantic = nn.Parameter(torch.randn(semantic_dim) * 0.5)
        self.null_speaker = nn.Parameter(torch.randn(speaker_dim) * 0.5)
        self.null_prompt = nn.Parameter(torch.randn(latent_dim) * 0.5)
        self.time_embed = TimestepEmbedding(D)
        self.blocks = nn.ModuleList(DiTBlock(D, config.head_count, config.mlp_ratio) for _ in range(config.blocks))
        self.norm = nn.LayerNorm(D, eps=1e-6)
        self.ctc_head = nn.Linear(D, config.ctc_vocab)

    def forward(
        self,
        x_t: Tensor,
        t: Tensor,
        x_ref: Tensor,
        z: Tensor,
        speaker: Tensor,
        null_flags: Optional[Tensor] = None,
        frame_mask: Optional[Tensor] = None,
    ) -> ConditionState:
        """Per-frame hidden states for ``(B, T, *)`` inputs.

        ``speaker`` is ``(B, D_s)`` and is replicated over frames.
        ``null_flags`` is ``(B, 3)`` bool; set columns swap the matching
        condition for its learned null embedding.
        """
        B, T, _ = x_t.shape
        if x_ref.shape[:2] != (B, T) or z.shape[:2] != (B, T):
            raise EncoderError(
                f"frame mismatch: x_t {tuple(x_t.shape[:2])}, x_ref {tuple(x_ref.shape[:2])}, z {tuple(z.shape[:2])}"
            )
        t = _as_batch_time(t, B, x_t.dtype)
        spk = speaker.to(x_t.dtype).unsqueeze(1).expand(B, T, -1)
        if null_flags is not None:
            flags = null_flags.to(torch.bool)
            z = _swap(z, flags[:, NULL_SEMANTIC], self.null_semantic)
            spk = _swap(spk, flags[:, NULL_SPEAKER], self.null_speaker)
            x_ref = _swap(x_ref, flags[:, NULL_PROMPT], self.null_prompt)
        x = self.in_proj(torch.cat([x_t, x_ref, z, spk], dim=-1))
        cond = self.time_embed(t).unsqueeze(1).expand(B, T, -1)
        positions = frame_positions(B, T, x.dtype)
        phi = None
        for i, block in enumerate(self.blocks, 1):
            x = block(x, cond, positions, frame_mask)
            if i == self.config.ctc_tap_layer:
                phi = x
        return ConditionState(self.norm(x), phi, t)

    def ctc_logits(self, phi: Tensor) -> Tensor:
        return torch.log_softmax(self.ctc_head(phi), dim=-1)


def _swap(x: Tensor, flag: Tensor, null: Tensor) -> Tensor:
    return torch.where(flag[:, None, None], null.to(x.dtype).expand_as(x), x)


def _as_batch_time(t, batch: int, dtype) -> Tensor:
    t = torch.as_tensor(t, dtype=dtype)
    if t.dim() == 0:
        t = t.expand(batch)
    return t
