"""Aligner / condition-encoder / velocity-decoder flow-matching TTS at desk scale."""

from .codec import CodecConfig, LatentCodec, generate_corpus, token_error_rate
from .model import ArchiTTS, ModelConfig
from .sampler import SamplerPlan, sample, zero_shot_synthesize
from .training import TrainConfig, Trainer

__version__ = "0.1.0"

__all__ = [
    "ArchiTTS",
    "CodecConfig",
    "LatentCodec",
    "ModelConfig",
    "SamplerPlan",
    "TrainConfig",
    "Trainer",
    "generate_corpus",
    "sample",
    "token_error_rate",
    "zero_shot_synthesize",
]
