"""Synthetic invertible latent codec and the on-disk corpus format.

Each token owns a fixed codeword in a content subspace; each speaker owns a
unit vector in a separate speaker subspace appended after it. A frame is

    codeword(token) (+) speaker_scale * speaker_vector(speaker) + noise

with the noise drawn uniformly from a ball of radius ``noise_scale``. Decoding
drops the speaker subspace, snaps each frame to its nearest codeword and
collapses runs, so any noise below half the smallest codeword gap is
recovered exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .seeding import derive_seed, numpy_rng


class CodecError(ValueError):
    pass


@dataclass
class CodecConfig:
    vocab_size: int = 16
    latent_dim: int = 16
    speaker_dim: int = 4
    frames_per_token_range: tuple[int, int] = (2, 4)
    speaker_count: int = 8
    speaker_scale: float = 1.0
    noise_scale: float = 0.1
    codeword_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.frames_per_token_range = tuple(int(v) for v in self.frames_per_token_range)
        lo, hi = self.frames_per_token_range
        if self.vocab_size < 2:
            raise CodecError("vocab_size must be at least 2")
        if not 1 <= lo <= hi:
            raise CodecError(f"bad frames_per_token_range {self.frames_per_token_range}")
        if not 1 <= self.speaker_dim < self.latent_dim:
            raise CodecError("speaker_dim must leave at least one content dimension")
        if self.speaker_count < 1:
            raise CodecError("speaker_count must be positive")
        if self.speaker_scale < 0 or self.noise_scale < 0:
            raise CodecError("scales must be non-negative")

    @property
    def content_dim(self) -> int:
        return self.latent_dim - self.speaker_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frames_per_token_range"] = list(self.frames_per_token_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        return cls(**d)


@dataclass
class Utterance:
    utt_id: int
    speaker: int
    tokens: list[int]
    latents: np.ndarray
    durations: list[int] | None = field(default=None, compare=False)

    @property
    def frames(self) -> int:
        return int(self.latents.shape[0])


class LatentCodec:
    def __init__(self, config: CodecConfig):
        self.config = config
        self.codewords = self._make_codewords()
        rng = numpy_rng(config.seed, "speakers")
        spk = rng.standard_normal((config.speaker_count, config.speaker_dim))
        self.speaker_vectors = spk / np.linalg.norm(spk, axis=1, keepdims=True)

    def _make_codewords(self) -> np.ndarray:
        cfg = self.config
        rng = numpy_rng(cfg.seed, "codewords")
        for _ in range(1000):
            words = cfg.codeword_scale * rng.standard_normal((cfg.vocab_size, cfg.content_dim))
            if _min_pairwise_distance(words) > 4 * cfg.noise_scale:
                return words
        raise CodecError("could not draw codewords separated by more than 4*noise_scale")

    @property
    def min_codeword_distance(self) -> float:
        return _min_pairwise_distance(self.codewords)

    def speaker_vector(self, speaker: int) -> np.ndarray:
        if not 0 <= speaker < self.config.speaker_count:
            raise CodecError(f"speaker {speaker} out of range")
        return self.speaker_vectors[speaker]

    def encode(self, tokens: Sequence[int], speaker: int, durations: Sequence[int], seed: int) -> np.ndarray:
        cfg = self.config
        tokens = self._check_tokens(tokens)
        if len(durations) != len(tokens):
            raise CodecError("one duration per token required")
        lo, hi = cfg.frames_per_token_range
        if any(not lo <= d <= hi for d in durations):
            raise CodecError(f"durations must lie in [{lo}, {hi}]")
        offset = cfg.speaker_scale * self.speaker_vector(speaker)
        rows = np.repeat(self.codewords[tokens], durations, axis=0)
        frames = np.concatenate([rows, np.broadcast_to(offset, (rows.shape[0], cfg.speaker_dim))], axis=1)
        if cfg.noise_scale > 0:
            frames = frames + cfg.noise_scale * _unit_ball(np.random.default_rng(seed), frames.shape)
        return frames.astype(np.float32)

    def frame_labels(self, latents: np.ndarray) -> np.ndarray:
        content = np.asarray(latents, dtype=np.float64)[:, : self.config.content_dim]
        d2 = ((content[:, None, :] - self.codewords[None, :, :]) ** 2).sum(-1)
        return d2.argmin(axis=1)

    def decode(self, latents: np.ndarray) -> list[int]:
        labels = self.frame_labels(latents)
        return [int(t) for i, t in enumerate(labels) if i == 0 or t != labels[i - 1]]

    def segment(self, latents: np.ndarray) -> list[tuple[int, int, int]]:
        """Runs of identical frame labels as ``(token, start, stop)``."""
        labels = self.frame_labels(latents)
        runs, start = [], 0
        for i in range(1, len(labels) + 1):
            if i == len(labels) or labels[i] != labels[start]:
                runs.append((int(labels[start]), start, i))
                start = i
        return runs

    def speaker_cosine(self, latents: np.ndarray, speaker: int) -> float:
        part = np.asarray(latents, dtype=np.float64)[:, self.config.content_dim :].mean(axis=0)
        norm = np.linalg.norm(part)
        if norm == 0:
            return 0.0
        return float(part @ self.speaker_vector(speaker) / norm)

    def _check_tokens(self, tokens: Sequence[int]) -> np.ndarray:
        arr = np.asarray(tokens, dtype=np.int64)
        if arr.ndim != 1 or arr.size == 0:
            raise CodecError("token sequence must be non-empty")
        if arr.min() < 0 or arr.max() >= self.config.vocab_size:
            raise CodecError("token id out of range")
        return arr


def _min_pairwise_distance(words: np.ndarray) -> float:
    d = np.sqrt(((words[:, None, :] - words[None, :, :]) ** 2).sum(-1))
    d[np.diag_indices_from(d)] = np.inf
    return float(d.min())


def _unit_ball(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    n, dim = shape
    direction = rng.standard_normal((n, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = rng.random(n) ** (1.0 / dim)
    return direction * radius[:, None]


def levenshtein(a: Sequence[int], b: Sequence[int]) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def token_error_rate(reference: Sequence[int], hypothesis: Sequence[int]) -> float:
    if len(reference) == 0:
        raise CodecError("reference must be non-empty")
    return levenshtein(list(reference), list(hypothesis)) / len(reference)


def generate_corpus(
    config: CodecConfig,
    utterance_count: int,
    length_range: tuple[int, int],
    seed: int,
    codec: LatentCodec | None = None,
    first_id: int = 0,
) -> list[Utterance]:
    """Random utterances with no immediately repeated tokens."""
    lo, hi = length_range
    if not 1 <= lo <= hi:
        raise CodecError(f"bad length_range {length_range}")
    codec = codec or LatentCodec(config)
    dmin, dmax = config.frames_per_token_range
    out = []
    for n in range(utterance_count):
        uid = first_id + n
        rng = numpy_rng(seed, "utterance", uid)
        length = int(rng.integers(lo, hi + 1))
        tokens = [int(rng.integers(config.vocab_size))]
        for _ in range(length - 1):
            step = int(rng.integers(1, config.vocab_size))
            tokens.append((tokens[-1] + step) % config.vocab_size)
        speaker = int(rng.integers(config.speaker_count))
        durations = [int(d) for d in rng.integers(dmin, dmax + 1, size=length)]
        latents = codec.encode(tokens, speaker, durations, derive_seed(seed, "noise", uid))
        out.append(Utterance(uid, speaker, tokens, latents, durations))
    return out


# On-disk corpus: magic, record count, then per record a header of four
# little-endian uint32 (utt id, speaker, token count, frame count), the token
# ids as uint32 and the frame matrix as float32, row-major.
MAGIC = b"ATTSDS01"
_HEADER = struct.Struct("<4I")


def write_dataset(path: str | Path, utterances: Iterable[Utterance], config: CodecConfig) -> None:
    path = Path(path)
    utterances = list(utterances)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(utterances)))
        for u in utterances:
            lat = np.ascontiguousarray(u.latents, dtype="<f4")
            if lat.ndim != 2 or lat.shape[1] != config.latent_dim:
                raise CodecError(f"utterance {u.utt_id}: latent shape {lat.shape}")
            fh.write(_HEADER.pack(u.utt_id, u.speaker, len(u.tokens), lat.shape[0]))
            fh.write(np.asarray(u.tokens, dtype="<u4").tobytes())
            fh.write(lat.tobytes())
    sidecar_path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def read_dataset(path: str | Path) -> tuple[list[Utterance], CodecConfig]:
    path = Path(path)
    config = CodecConfig.from_dict(json.loads(sidecar_path(path).read_text()))
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise CodecError(f"{path}: not a corpus file")
    (count,) = struct.unpack_from("<I", data, 8)
    pos = 12
    out = []
    for _ in range(count):
        uid, spk, n_tok, n_frames = _HEADER.unpack_from(data, pos)
        pos += _HEADER.size
        tokens = np.frombuffer(data, dtype="<u4", count=n_tok, offset=pos).astype(int).tolist()
        pos += 4 * n_tok
        n = n_frames * config.latent_dim
        lat = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(n_frames, config.latent_dim)
        pos += 4 * n
        out.append(Utterance(uid, spk, tokens, lat.astype(np.float32)))
    if pos != len(data):
        raise CodecError(f"{path}: {len(data) - pos} trailing bytes")
    return out, config
