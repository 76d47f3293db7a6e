"""Aligner, condition encoder and velocity decoder wired into one module."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn as nn
from torch import Tensor

from .aligner import AlignerConfig, AlignerOutput, SemanticAligner
from .decoder import DecoderConfig, VelocityDecoder
from .encoder import ConditionEncoder, ConditionState, EncoderConfig


@dataclass
class ModelConfig:
    vocab_size: int = 16
    latent_dim: int = 16
    speaker_dim: int = 4
    aligner: AlignerConfig = field(default_factory=AlignerConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    init_seed: int = 0

    def __post_init__(self):
        if isinstance(self.aligner, dict):
            self.aligner = AlignerConfig(**self.aligner)
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.decoder, dict):
            self.decoder = DecoderConfig(**self.decoder)
        self.aligner.vocab_size = self.vocab_size
        self.encoder.ctc_vocab = self.vocab_size + 1
        if self.encoder.model_dim != self.decoder.model_dim:
            raise ValueError("encoder and decoder model_dim must match (h feeds the decoder's modulation)")

    def to_dict(self) -> dict:
        return asdict(self)


class ArchiTTS(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.init_seed)
            self.aligner = SemanticAligner(config.aligner)
            self.encoder = ConditionEncoder(
                config.encoder, config.latent_dim, config.aligner.model_dim, config.speaker_dim
            )
            self.decoder = VelocityDecoder(config.decoder, config.latent_dim)

    def semantic(self, tokens: Tensor, frame_counts, token_mask: Optional[Tensor] = None) -> AlignerOutput:
        return self.aligner(tokens, frame_counts, token_mask)

    def encode_condition(self, x_t, t, x_ref, z, speaker, null_flags=None, frame_mask=None) -> ConditionState:
        return self.encoder(x_t, t, x_ref, z, speaker, null_flags, frame_mask)

    def decode_velocity(self, x_t, t, state: ConditionState, frame_mask=None) -> Tensor:
        return self.decoder(x_t, t, state, frame_mask)

    def forward(self, x_t, t, x_ref, tokens, token_mask, frame_mask, speaker, null_flags=None):
        """Training pass: ``(velocity, ctc log-probs, aligner output)``."""
        counts = frame_mask.sum(-1)
        sem = self.semantic(tokens, counts, token_mask)
        z = sem.z
        if z.shape[1] < x_t.shape[1]:
            z = nn.functional.pad(z, (0, 0, 0, x_t.shape[1] - z.shape[1]))
        state = self.encode_condition(x_t, t, x_ref, z, speaker, null_flags, frame_mask)
        v = self.decode_velocity(x_t, t, state, frame_mask)
        return v, self.encoder.ctc_logits(state.phi), sem


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
