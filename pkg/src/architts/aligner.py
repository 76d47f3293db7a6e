"""Semantic aligner: text tokens plus a frame count in, one feature per frame out.

The transformer reads ``[start-of-text, text..., start-of-mask, mask x N]``
with full attention and the features at the N mask slots form ``z``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
from torch import Tensor
from torch.nn.utils.rnn import pad_sequence

from .layers import ConvNeXtBlock, TransformerBlock


class AlignerError(ValueError):
    pass


@dataclass
class AlignerConfig:
    vocab_size: int = 16
    convnext_blocks: int = 2
    transformer_blocks: int = 6
    model_dim: int = 96
    head_count: int = 4
    mlp_ratio: float = 4.0
    conv_kernel: int = 7
    # "canvas" places mask slots on the text's coordinate axis; "index" uses
    # plain sequence positions.
    positions: str = "canvas"
    vq_enabled: bool = False
    codebook_size: int = 64
    commitment: float = 0.25

    def __post_init__(self):
        if self.transformer_blocks < 1:
            raise AlignerError("aligner needs at least one transformer block")
        if self.model_dim % self.head_count:
            raise AlignerError("model_dim must be divisible by head_count")
        if self.positions not in ("canvas", "index"):
            raise AlignerError(f"unknown position mode {self.positions!r}")


@dataclass
class AlignerOutput:
    z: Tensor  # (B, N_max, D)
    frame_mask: Tensor  # (B, N_max) bool
    input_length: Tensor  # (B,) transformer sequence length L + N + 2
    vq_indices: Optional[Tensor] = None
    vq_loss: Optional[Tensor] = None


class VectorQuantizer(nn.Module):
    def __init__(self, codebook_size: int, dim: int, commitment: float = 0.25):
        super().__init__()
        if codebook_size < 1:
            raise AlignerError("empty codebook")
        self.codebook = nn.Parameter(torch.randn(codebook_size, dim))
        self.commitment = commitment

    def forward(self, z: Tensor, mask: Optional[Tensor] = None):
        return quantize(z, self.codebook, self.commitment, mask)


def quantize(z: Tensor, codebook: Tensor, commitment: float = 0.25, mask: Optional[Tensor] = None):
    """Nearest-codeword quantization with a straight-through gradient.

    Returns ``(z_q, indices, vq_loss)``. ``vq_loss`` is the codebook term plus
    ``commitment`` times the commitment term, averaged over valid frames.
    """
    if codebook.numel() == 0 or codebook.shape[0] == 0:
        raise AlignerError("empty codebook")
    d2 = (z.unsqueeze(-2) - codebook).pow(2).sum(-1)
    indices = d2.argmin(dim=-1)
    chosen = codebook[indices]
    per_frame_code = (z.detach() - chosen).pow(2).sum(-1)
    per_frame_commit = (z - chosen.detach()).pow(2).sum(-1)
    per_frame = per_frame_code + commitment * per_frame_commit
    if mask is not None:
        vq_loss = per_frame[mask].mean()
    else:
        vq_loss = per_frame.mean()
    z_q = z + (chosen - z).detach()
    return z_q, indices, vq_loss


class SemanticAligner(nn.Module):
    def __init__(self, config: AlignerConfig):
        super().__init__()
        self.config = config
        D = config.model_dim
        self.embed = nn.Embedding(config.vocab_size, D)
        nn.init.normal_(self.embed.weight, std=1.0)
        self.convnext = nn.ModuleList(
            ConvNeXtBlock(D, config.conv_kernel) for _ in range(config.convnext_blocks)
        )
        self.start_text = nn.Parameter(torch.randn(D) * 0.02)
        self.start_mask = nn.Parameter(torch.randn(D) * 0.02)
        self.mask_embed = nn.Parameter(torch.randn(D) * 0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(D, config.head_count, config.mlp_ratio) for _ in range(config.transformer_blocks)
        )
        self.norm = nn.LayerNorm(D, eps=1e-6)
        self.vq = VectorQuantizer(config.codebook_size, D, config.commitment) if config.vq_enabled else None

    def embed_text(self, tokens: Tensor, token_mask: Optional[Tensor] = None) -> Tensor:
        """``(B, L)`` token ids -> ``(B, L, D)`` features."""
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        if tokens.shape[-1] == 0:
            raise AlignerError("empty token sequence")
        valid = tokens if token_mask is None else tokens[token_mask]
        if valid.numel() and (valid.min() < 0 or valid.max() >= self.config.vocab_size):
            raise AlignerError("token id out of range")
        x = self.embed(tokens.clamp(0, self.config.vocab_size - 1))
        for block in self.convnext:
            x = block(x, token_mask)
        return x

    def align(
        self,
        text_features: Tensor,
        frame_counts: Sequence[int] | Tensor,
        token_mask: Optional[Tensor] = None,
    ) -> AlignerOutput:
        B, L_max, D = text_features.shape
        counts = [int(n) for n in (frame_counts.tolist() if isinstance(frame_counts, Tensor) else frame_counts)]
        if len(counts) != B:
            raise AlignerError("one frame count per sequence required")
        if min(counts) < 1:
            raise AlignerError("frame count must be at least 1")
        lengths = [L_max] * B if token_mask is None else token_mask.sum(-1).tolist()
        seqs, pos = [], []
        dtype = text_features.dtype
        for b in range(B):
            L, N = int(lengths[b]), counts[b]
            if L < 1:
                raise AlignerError("empty token sequence")
            seqs.append(torch.cat([
                self.start_text[None].to(dtype),
                text_features[b, :L],
                self.start_mask[None].to(dtype),
                self.mask_embed[None].to(dtype).expand(N, D),
            ]))
            pos.append(self._positions(L, N, dtype))
        x = pad_sequence(seqs, batch_first=True)
        positions = pad_sequence(pos, batch_first=True)
        seq_len = torch.tensor([s.shape[0] for s in seqs])
        key_mask = torch.arange(x.shape[1]) < seq_len[:, None]
        for block in self.blocks:
            x = block(x, positions, key_mask)
        x = self.norm(x)
        z = pad_sequence([x[b, int(lengths[b]) + 2 : int(lengths[b]) + 2 + counts[b]] for b in range(B)], batch_first=True)
        frame_mask = torch.arange(z.shape[1]) < torch.tensor(counts)[:, None]
        out = AlignerOutput(z, frame_mask, seq_len)
        if self.vq is not None:
            out.z, out.vq_indices, out.vq_loss = self.vq(z, frame_mask)
        return out

    def _positions(self, L: int, N: int, dtype) -> Tensor:
        if self.config.positions == "index":
            return torch.arange(L + N + 2, dtype=dtype)
        text = 1.5 + torch.arange(L, dtype=dtype)
        canvas = 1.0 + (torch.arange(N, dtype=dtype) + 0.5) * (L / N)
        zero = torch.zeros(1, dtype=dtype)
        return torch.cat([zero, text, zero, canvas])

    def forward(self, tokens: Tensor, frame_counts, token_mask: Optional[Tensor] = None) -> AlignerOutput:
        return self.align(self.embed_text(tokens, token_mask), frame_counts, token_mask)
