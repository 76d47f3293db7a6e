"""Zero-shot inference: Euler integration with guidance and encoder-state reuse."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np
import torch
from torch import Tensor

from .codec import LatentCodec
from .encoder import NULL_PROMPT, NULL_SEMANTIC, NULL_SPEAKER, ConditionState
from .seeding import torch_generator


class SamplingError(RuntimeError):
    pass


class PlanError(ValueError):
    pass


@dataclass
class SamplerPlan:
    nfe: int = 32
    recompute: Optional[int] = None  # K; None means every step
    cfg_strength: float = 4.0
    timeshift: float = 3.0
    seed: int = 0
    # which null set the unconditional branch uses: "all" or "prompt_speaker"
    cfg_null: str = "all"

    def __post_init__(self):
        if self.recompute is None:
            self.recompute = self.nfe
        if self.nfe < 1:
            raise PlanError("nfe must be at least 1")
        if not 1 <= self.recompute <= self.nfe:
            raise PlanError(f"recompute count {self.recompute} outside [1, {self.nfe}]")
        if self.cfg_strength < 0:
            raise PlanError("cfg_strength must be non-negative")
        if self.timeshift <= 0:
            raise PlanError("timeshift must be positive")
        if self.cfg_null not in ("all", "prompt_speaker"):
            raise PlanError(f"unknown cfg_null {self.cfg_null!r}")

    @property
    def sharing_ratio(self) -> float:
        return 1 - self.recompute / self.nfe

    @classmethod
    def from_sharing_ratio(cls, nfe: int, ratio: float, **kw) -> "SamplerPlan":
        if not 0 <= ratio < 1:
            raise PlanError("sharing ratio must lie in [0, 1)")
        k = max(1, min(nfe, round(nfe * (1 - ratio))))
        return cls(nfe=nfe, recompute=k, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sharing_ratio"] = self.sharing_ratio
        return d


@dataclass
class DurationEstimate:
    d: int
    T_ref: int
    L_ref: int
    L_gen: int


def estimate_duration(T_ref: int, L_ref: int, L_gen: int) -> DurationEstimate:
    """Keep the reference's frames-per-token rate: ``floor(L_gen * T_ref / L_ref)``."""
    if min(T_ref, L_ref, L_gen) < 1:
        raise PlanError("T_ref, L_ref and L_gen must all be at least 1")
    return DurationEstimate((L_gen * T_ref) // L_ref, T_ref, L_ref, L_gen)


def build_schedule(nfe: int, timeshift: float = 1.0) -> list[float]:
    """Uniform grid warped by ``s*u / (1 + (s-1)*u)``; exact 0 and 1 endpoints."""
    if nfe < 1 or timeshift <= 0:
        raise PlanError("need nfe >= 1 and timeshift > 0")
    s = float(timeshift)
    out = []
    for i in range(nfe + 1):
        u = i / nfe
        out.append(s * u / (1 + (s - 1) * u))
    out[0], out[-1] = 0.0, 1.0
    return out


def cfg_velocity(v_cond: Tensor, v_uncond: Tensor, strength: float) -> Tensor:
    """Guided velocity ``(1 + w) * v_cond - w * v_uncond``."""
    if v_cond.shape != v_uncond.shape:
        raise ValueError(f"shape mismatch {tuple(v_cond.shape)} vs {tuple(v_uncond.shape)}")
    return (1 + strength) * v_cond - strength * v_uncond


def plan_sharing(nfe: int, recompute: int) -> list[int]:
    """Steps at which the encoder runs: ``floor(i * N / K)`` for ``i < K``."""
    if not 1 <= recompute <= nfe:
        raise PlanError(f"recompute count {recompute} outside [1, {nfe}]")
    return [i * nfe // recompute for i in range(recompute)]


class VelocityModel(Protocol):
    def encode_condition(self, x_t, t, x_ref, z, speaker, null_flags=None, frame_mask=None) -> ConditionState: ...

    def decode_velocity(self, x_t, t, state: ConditionState, frame_mask=None) -> Tensor: ...


@dataclass
class Conditions:
    z: Tensor  # (B, T, Dz)
    speaker: Tensor  # (B, Ds)
    x_ref: Tensor  # (B, T, D)
    frame_mask: Tensor  # (B, T)
    keys: Sequence[int] = field(default_factory=list)  # per-item noise stream ids


@dataclass
class SampleResult:
    latents: Tensor
    encoder_evals: int
    decoder_evals: int
    wall_time: float


def initial_noise(cond: Conditions, seed: int) -> Tensor:
    B, T, D = cond.x_ref.shape
    keys = list(cond.keys) or list(range(B))
    x = torch.zeros(B, T, D, dtype=cond.x_ref.dtype)
    for b, key in enumerate(keys):
        n = int(cond.frame_mask[b].sum())
        x[b, :n] = torch.randn(n, D, generator=torch_generator(seed, "sample", key)).to(x.dtype)
    return x


def null_flags(batch: int, which: str) -> tuple[Tensor, Tensor]:
    cond = torch.zeros(batch, 3, dtype=torch.bool)
    uncond = torch.zeros(batch, 3, dtype=torch.bool)
    uncond[:, [NULL_SPEAKER, NULL_PROMPT]] = True
    if which == "all":
        uncond[:, NULL_SEMANTIC] = True
    return cond, uncond


@torch.no_grad()
def sample(model: VelocityModel, cond: Conditions, plan: SamplerPlan) -> SampleResult:
    """Euler integration from noise at t=0 to data at t=1.

    The encoder runs (conditional and unconditional) only at the steps chosen
    by :func:`plan_sharing`; other steps reuse the most recent states.
    """
    start = time.perf_counter()
    times = build_schedule(plan.nfe, plan.timeshift)
    recompute = set(plan_sharing(plan.nfe, plan.recompute))
    B = cond.x_ref.shape[0]
    flags_c, flags_u = null_flags(B, plan.cfg_null)
    x = initial_noise(cond, plan.seed)
    fmask = cond.frame_mask
    enc = dec = 0
    h_c = h_u = None
    for i in range(plan.nfe):
        t = times[i]
        if i in recompute:
            h_c = model.encode_condition(x, t, cond.x_ref, cond.z, cond.speaker, flags_c, fmask)
            h_u = model.encode_condition(x, t, cond.x_ref, cond.z, cond.speaker, flags_u, fmask)
            enc += 2
        v_c = model.decode_velocity(x, t, h_c, fmask)
        v_u = model.decode_velocity(x, t, h_u, fmask)
        dec += 2
        x = x + (times[i + 1] - t) * cfg_velocity(v_c, v_u, plan.cfg_strength)
        x = x * fmask.unsqueeze(-1)
        if not torch.isfinite(x).all():
            raise SamplingError(f"non-finite state after step {i}")
    return SampleResult(x, enc, dec, time.perf_counter() - start)


@torch.no_grad()
def sample_reference(model: VelocityModel, cond: Conditions, plan: SamplerPlan) -> Tensor:
    """Plain loop that calls the encoder at every step, with no caching."""
    times = build_schedule(plan.nfe, plan.timeshift)
    flags_c, flags_u = null_flags(cond.x_ref.shape[0], plan.cfg_null)
    x = initial_noise(cond, plan.seed)
    fmask = cond.frame_mask
    for i in range(plan.nfe):
        t = times[i]
        v_c = model.decode_velocity(x, t, model.encode_condition(x, t, cond.x_ref, cond.z, cond.speaker, flags_c, fmask), fmask)
        v_u = model.decode_velocity(x, t, model.encode_condition(x, t, cond.x_ref, cond.z, cond.speaker, flags_u, fmask), fmask)
        x = x + (times[i + 1] - t) * cfg_velocity(v_c, v_u, plan.cfg_strength)
        x = x * fmask.unsqueeze(-1)
    return x


# -- zero-shot synthesis -----------------------------------------------------


@dataclass
class SynthesisRequest:
    ref_latents: np.ndarray
    ref_tokens: list[int]
    gen_tokens: list[int]
    speaker: int
    key: int = 0


@dataclass
class SynthesisResult:
    latents: np.ndarray  # generated region only, (d, D)
    decoded_tokens: list[int]
    duration: DurationEstimate
    encoder_evals: int
    decoder_evals: int
    wall_time: float


@torch.no_grad()
def synthesize_batch(model, codec: LatentCodec, requests: Sequence[SynthesisRequest], plan: SamplerPlan) -> list[SynthesisResult]:
    start = time.perf_counter()
    if not requests:
        return []
    durations, totals = [], []
    for r in requests:
        if len(r.ref_latents) == 0 or len(r.ref_tokens) == 0 or len(r.gen_tokens) == 0:
            raise PlanError("reference latents, reference tokens and target tokens must be non-empty")
        est = estimate_duration(len(r.ref_latents), len(r.ref_tokens), len(r.gen_tokens))
        if est.d < 1:
            raise PlanError("estimated duration is zero frames")
        durations.append(est)
        totals.append(len(r.ref_latents) + est.d)
    B, T, L = len(requests), max(totals), max(len(r.ref_tokens) + len(r.gen_tokens) for r in requests)
    D = codec.config.latent_dim
    tokens = torch.zeros(B, L, dtype=torch.long)
    token_mask = torch.zeros(B, L, dtype=torch.bool)
    x_ref = torch.zeros(B, T, D)
    frame_mask = torch.arange(T) < torch.tensor(totals)[:, None]
    for b, r in enumerate(requests):
        seq = list(r.ref_tokens) + list(r.gen_tokens)
        tokens[b, : len(seq)] = torch.tensor(seq)
        token_mask[b, : len(seq)] = True
        x_ref[b, : len(r.ref_latents)] = torch.from_numpy(np.asarray(r.ref_latents, dtype=np.float32))
    speaker = torch.from_numpy(np.stack([codec.speaker_vector(r.speaker) for r in requests])).float()
    sem = model.semantic(tokens, totals, token_mask)
    z = sem.z
    if z.shape[1] < T:
        z = torch.nn.functional.pad(z, (0, 0, 0, T - z.shape[1]))
    cond = Conditions(z, speaker, x_ref, frame_mask, [r.key for r in requests])
    res = sample(model, cond, plan)
    wall = time.perf_counter() - start
    out = []
    for b, r in enumerate(requests):
        t_ref = len(r.ref_latents)
        gen = res.latents[b, t_ref : totals[b]].numpy().astype(np.float32)
        out.append(SynthesisResult(gen, codec.decode(gen), durations[b], res.encoder_evals, res.decoder_evals, wall / B))
    return out


def zero_shot_synthesize(model, codec: LatentCodec, ref_latents, ref_tokens, gen_tokens, speaker: int, plan: SamplerPlan, key: int = 0) -> SynthesisResult:
    req = SynthesisRequest(np.asarray(ref_latents), list(ref_tokens), list(gen_tokens), speaker, key)
    return synthesize_batch(model, codec, [req], plan)[0]
