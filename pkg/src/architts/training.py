"""Training objective, batch construction and the optimisation loop."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .codec import LatentCodec, Utterance
from .ctc import ctc_loss_batch
from .encoder import NULL_PROMPT, NULL_SPEAKER
from .model import ArchiTTS
from .seeding import derive_seed, numpy_rng, torch_generator

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class BatchError(ValueError):
    pass


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 16
    peak_lr: float = 1e-4
    warmup_steps: int = 1000
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 1.0
    ema_decay: float = 0.999
    eta: float = 0.1
    vq_weight: float = 1.0
    mask_range: tuple[float, float] = (0.7, 1.0)
    # snap the span to token boundaries, as zero-shot prompts always end on one
    mask_align_tokens: bool = True
    p_joint: float = 0.3
    p_all: float = 0.2
    logit_mean: float = 0.0
    logit_std: float = 1.0
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 1000

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.mask_range = tuple(float(m) for m in self.mask_range)
        lo, hi = self.mask_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"bad mask_range {self.mask_range}")
        if self.warmup_steps < 0 or self.steps < 1:
            raise ValueError("steps must be positive and warmup non-negative")


@dataclass
class TrainingBatch:
    x1: Tensor  # (B, T, D) clean latents, zero-padded
    x0: Tensor  # (B, T, D) noise
    gen_mask: Tensor  # (B, T) True on frames to generate
    frame_mask: Tensor  # (B, T) True on real frames
    x_ref: Tensor  # (B, T, D) prompt, zero on generated frames
    tokens: Tensor  # (B, L) padded ids
    token_mask: Tensor  # (B, L)
    targets: list[list[int]]
    speaker: Tensor  # (B, D_s)
    t: Tensor  # (B,)
    null_flags: Tensor  # (B, 3) bool
    seed: int = 0

    @property
    def lengths(self) -> list[int]:
        return self.frame_mask.sum(-1).tolist()


@dataclass
class LossBreakdown:
    cfm: Tensor
    dir: Tensor
    ctc: Tensor
    total: Tensor
    eta: float = 0.1
    vq: Optional[Tensor] = None

    def as_floats(self) -> dict:
        out = {"cfm": self.cfm.item(), "dir": self.dir.item(), "ctc": self.ctc.item(), "total": self.total.item()}
        if self.vq is not None:
            out["vq"] = self.vq.item()
        return out


# -- flow path and timestep sampling ---------------------------------------------


def interpolate(x0: Tensor, x1: Tensor, t) -> tuple[Tensor, Tensor]:
    """Straight-line path: ``x_t = (1-t) x0 + t x1`` with velocity ``x1 - x0``.

    ``t`` is a scalar or a per-item tensor broadcast over trailing axes.
    """
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch {tuple(x0.shape)} vs {tuple(x1.shape)}")
    t = torch.as_tensor(t, dtype=x0.dtype)
    if ((t < 0) | (t > 1)).any():
        raise ValueError("t must lie in [0, 1]")
    while t.dim() and t.dim() < x0.dim():
        t = t.unsqueeze(-1)
    return (1 - t) * x0 + t * x1, x1 - x0


def sample_timestep(count: int, seed: int, mean: float = 0.0, std: float = 1.0) -> Tensor:
    """Logit-normal times: ``sigmoid(g)`` with ``g ~ N(mean, std^2)``."""
    if count < 1:
        raise ValueError("count must be positive")
    g = torch.randn(count, generator=torch_generator(seed, "timestep"), dtype=torch.float64)
    t = torch.sigmoid(mean + std * g)
    tiny = torch.finfo(torch.float64).eps
    return t.clamp(tiny, 1 - tiny)


def logit_normal_cdf(t, mean: float = 0.0, std: float = 1.0):
    from scipy.stats import norm

    t = np.asarray(t, dtype=np.float64)
    return norm.cdf((np.log(t) - np.log1p(-t) - mean) / std)


# -- masking and condition dropout ---------------------------------------------


def infill_mask(frames: int, rng: np.random.Generator, lo: float = 0.7, hi: float = 1.0) -> np.ndarray:
    """Contiguous span covering a fraction in ``[lo, hi]`` of the frames."""
    if frames < 1:
        raise BatchError("need at least one frame")
    frac = rng.uniform(lo, hi)
    floor = math.ceil(lo * frames - 1e-9)
    ceil_ = math.floor(hi * frames + 1e-9)
    span = min(max(math.ceil(frac * frames - 1e-9), floor, 1), ceil_, frames)
    start = int(rng.integers(0, frames - span + 1))
    mask = np.zeros(frames, dtype=bool)
    mask[start : start + span] = True
    return mask


def token_infill_mask(durations: Sequence[int], rng: np.random.Generator, lo: float = 0.7, hi: float = 1.0) -> np.ndarray:
    """Contiguous span of whole tokens covering a fraction in ``[lo, hi]`` of the frames.

    Picks uniformly among the qualifying token ranges; falls back to
    :func:`infill_mask` when no whole-token range qualifies.
    """
    edges = np.concatenate([[0], np.cumsum(durations)])
    frames = int(edges[-1])
    spans = [
        (int(edges[i]), int(edges[j]))
        for i in range(len(durations))
        for j in range(i + 1, len(durations) + 1)
        if lo * frames - 1e-9 <= edges[j] - edges[i] <= hi * frames + 1e-9
    ]
    if not spans:
        return infill_mask(frames, rng, lo, hi)
    start, stop = spans[int(rng.integers(len(spans)))]
    mask = np.zeros(frames, dtype=bool)
    mask[start:stop] = True
    return mask


def apply_condition_dropout(count: int, seed: int, p_joint: float = 0.3, p_all: float = 0.2) -> Tensor:
    """``(count, 3)`` null flags.

    Each item first drops every condition with probability ``p_all``; items
    that survive drop prompt and speaker together with probability ``p_joint``.
    """
    rng = numpy_rng(seed, "dropout")
    u_all = rng.random(count)
    u_joint = rng.random(count)
    flags = np.zeros((count, 3), dtype=bool)
    all_null = u_all < p_all
    joint = ~all_null & (u_joint < p_joint)
    flags[all_null] = True
    flags[joint, NULL_SPEAKER] = True
    flags[joint, NULL_PROMPT] = True
    return torch.from_numpy(flags)


def make_batch(
    utterances: Sequence[Utterance],
    codec: LatentCodec,
    seed: int,
    config: TrainConfig,
) -> TrainingBatch:
    """Pad, mask, draw noise/time and set dropout flags for one step."""
    B = len(utterances)
    if B == 0:
        raise BatchError("empty batch")
    T = max(u.frames for u in utterances)
    L = max(len(u.tokens) for u in utterances)
    D = codec.config.latent_dim
    x1 = torch.zeros(B, T, D)
    gen = torch.zeros(B, T, dtype=torch.bool)
    valid = torch.zeros(B, T, dtype=torch.bool)
    tokens = torch.zeros(B, L, dtype=torch.long)
    token_mask = torch.zeros(B, L, dtype=torch.bool)
    x0 = torch.zeros(B, T, D)
    for b, u in enumerate(utterances):
        n = u.frames
        x1[b, :n] = torch.from_numpy(np.asarray(u.latents, dtype=np.float32))
        valid[b, :n] = True
        rng = numpy_rng(seed, "mask", b)
        if config.mask_align_tokens:
            # files store frames only; the codec recovers token runs exactly
            durations = u.durations or [stop - start for _, start, stop in codec.segment(u.latents)]
            gen[b, :n] = torch.from_numpy(token_infill_mask(durations, rng, *config.mask_range))
        else:
            gen[b, :n] = torch.from_numpy(infill_mask(n, rng, *config.mask_range))
        tokens[b, : len(u.tokens)] = torch.tensor(u.tokens)
        token_mask[b, : len(u.tokens)] = True
        x0[b, :n] = torch.randn(n, D, generator=torch_generator(seed, "noise", b))
    speaker = torch.from_numpy(np.stack([codec.speaker_vector(u.speaker) for u in utterances])).float()
    x_ref = x1 * (~gen).unsqueeze(-1)
    t = sample_timestep(B, seed, config.logit_mean, config.logit_std).float()
    flags = apply_condition_dropout(B, seed, config.p_joint, config.p_all)
    targets = [[tok + 1 for tok in u.tokens] for u in utterances]
    return TrainingBatch(x1, x0, gen, valid, x_ref, tokens, token_mask, targets, speaker, t, flags, seed)


# -- losses ------------------------------------------------------------------


def flow_losses(v_pred: Tensor, v_hat: Tensor, gen_mask: Tensor) -> tuple[Tensor, Tensor]:
    """Squared-error and (1 - cosine) losses averaged over generated frames."""
    if not gen_mask.any():
        raise BatchError("no frames to generate")
    pred, ref = v_pred[gen_mask], v_hat[gen_mask]
    cfm = (pred - ref).pow(2).sum(-1).mean()
    direction = (1 - F.cosine_similarity(pred, ref, dim=-1, eps=1e-8)).mean()
    return cfm, direction


def alignment_loss(log_probs: Tensor, targets: Sequence[Sequence[int]], lengths: Sequence[int]) -> Tensor:
    """CTC loss divided by target length, averaged over the batch."""
    per_item = ctc_loss_batch(log_probs, targets, lengths)
    norm = torch.tensor([len(t) for t in targets], dtype=per_item.dtype)
    return (per_item / norm).mean()


def combine(cfm: Tensor, direction: Tensor, ctc: Tensor, eta: float, vq: Optional[Tensor] = None, vq_weight=1.0):
    total = cfm + direction + eta * ctc
    if vq is not None:
        total = total + vq_weight * vq
    return LossBreakdown(cfm, direction, ctc, total, eta, vq)


def compute_losses(model: ArchiTTS, batch: TrainingBatch, eta: float = 0.1, vq_weight: float = 1.0) -> LossBreakdown:
    for b in range(batch.gen_mask.shape[0]):
        if not batch.gen_mask[b].any():
            raise BatchError(f"item {b} has no masked frames")
    dtype = next(model.parameters()).dtype
    x_t, v_hat = interpolate(batch.x0.to(dtype), batch.x1.to(dtype), batch.t.to(dtype))
    x_t = x_t * batch.frame_mask.unsqueeze(-1)
    v_pred, log_probs, sem = model(
        x_t, batch.t.to(dtype), batch.x_ref.to(dtype), batch.tokens, batch.token_mask,
        batch.frame_mask, batch.speaker.to(dtype), batch.null_flags,
    )
    cfm, direction = flow_losses(v_pred, v_hat, batch.gen_mask)
    ctc = alignment_loss(log_probs, batch.targets, batch.lengths)
    return combine(cfm, direction, ctc, eta, sem.vq_loss, vq_weight)


# -- optimisation ------------------------------------------------------------


def lr_schedule(step: int, peak: float, warmup: int, total: int) -> float:
    """Linear warmup to ``peak`` over ``warmup`` steps, then linear decay to 0 at ``total``."""
    if step <= warmup:
        return peak * step / warmup if warmup else peak
    if total <= warmup:
        return 0.0
    return peak * max(0.0, (total - step) / (total - warmup))


def clip_gradients(parameters, max_norm: float) -> float:
    return float(torch.nn.utils.clip_grad_norm_(list(parameters), max_norm))


@torch.no_grad()
def ema_update(ema_model: torch.nn.Module, model: torch.nn.Module, decay: float) -> None:
    for e, p in zip(ema_model.parameters(), model.parameters()):
        e.mul_(decay).add_(p, alpha=1 - decay)


def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(), lr=config.peak_lr, betas=config.betas, eps=1e-8,
        weight_decay=config.weight_decay, foreach=True,
    )


@dataclass
class StepResult:
    losses: LossBreakdown
    grad_norm: float
    lr: float


def train_step(
    model: ArchiTTS,
    ema_model: ArchiTTS,
    batch: TrainingBatch,
    optimizer: torch.optim.Optimizer,
    step_index: int,
    config: TrainConfig,
) -> StepResult:
    if step_index < 1:
        raise ValueError("step_index starts at 1")
    model.train()
    optimizer.zero_grad(set_to_none=False)
    losses = compute_losses(model, batch, config.eta, config.vq_weight)
    if not torch.isfinite(losses.total):
        raise TrainingError(f"non-finite loss at step {step_index} (batch seed {batch.seed}): {losses.as_floats()}")
    losses.total.backward()
    grad_norm = clip_gradients(model.parameters(), config.grad_clip)
    lr = lr_schedule(step_index, config.peak_lr, config.warmup_steps, config.steps)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    ema_update(ema_model, model, config.ema_decay)
    return StepResult(losses, grad_norm, lr)


# -- loop ----------------------------------------------------------------------


def batch_seed(root: int, step: int) -> int:
    return derive_seed(root, "batch", step)


def select_batch(train: Sequence[Utterance], root: int, step: int, size: int) -> list[Utterance]:
    rng = numpy_rng(root, "order", step)
    idx = rng.choice(len(train), size=min(size, len(train)), replace=False)
    return [train[i] for i in sorted(idx)]


class Trainer:
    """Owns model, EMA copy and optimizer; writes checkpoints and a metrics stream."""

    def __init__(self, model: ArchiTTS, config: TrainConfig, codec: LatentCodec, run_config: dict | None = None):
        self.model = model
        self.ema = copy.deepcopy(model)
        for p in self.ema.parameters():
            p.requires_grad_(False)
        self.config = config
        self.codec = codec
        self.optimizer = make_optimizer(model, config)
        self.step = 0
        self.run_config = run_config or {}

    def fit(
        self,
        train: Sequence[Utterance],
        out_dir: str | Path | None = None,
        until: Optional[int] = None,
        metrics_path: str | Path | None = None,
    ) -> list[dict]:
        from .checkpoint import save_checkpoint

        cfg = self.config
        last = min(until or cfg.steps, cfg.steps)
        out_dir = Path(out_dir) if out_dir else None
        if out_dir:
            out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = Path(metrics_path) if metrics_path else (out_dir / "metrics.jsonl" if out_dir else None)
        records = []
        start = time.perf_counter()
        while self.step < last:
            step = self.step + 1
            seed = batch_seed(cfg.seed, step)
            batch = make_batch(select_batch(train, cfg.seed, step, cfg.batch_size), self.codec, seed, cfg)
            try:
                result = train_step(self.model, self.ema, batch, self.optimizer, step, cfg)
            except TrainingError:
                log.error("aborting at step %d; last good checkpoint kept", step)
                raise
            self.step = step
            if step % cfg.log_every == 0 or step == last:
                rec = {"step": step, "lr": result.lr, **result.losses.as_floats(),
                       "grad_norm": result.grad_norm, "wall_time": time.perf_counter() - start}
                records.append(rec)
                log.info("step %d total %.4f cfm %.4f ctc %.4f", step, rec["total"], rec["cfm"], rec["ctc"])
                if metrics_path:
                    with open(metrics_path, "a") as fh:
                        fh.write(json.dumps(rec) + "\n")
            if out_dir and (step % cfg.checkpoint_every == 0 or step == last):
                save_checkpoint(out_dir / f"step{step:06d}.ckpt", self)
                save_checkpoint(out_dir / "latest.ckpt", self, final=step == cfg.steps)
        return records

    def config_snapshot(self) -> dict:
        return {"model": self.model.config.to_dict(), "train": asdict(self.config),
                "codec": self.codec.config.to_dict(), **self.run_config}
