"""Connectionist temporal classification in log space.

Blank is index 0. Codec token ``k`` is label ``k + 1`` inside CTC space.
"""

from __future__ import annotations

import itertools
import math
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

BLANK = 0
# Finite stand-in for log(0) so that logsumexp over unreachable states keeps
# finite gradients.
_NEG = -1e30


class CTCError(ValueError):
    pass


def min_frames(target: Sequence[int]) -> int:
    """Shortest input that can emit ``target`` (repeats need a blank between)."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_loss_batch(
    log_probs: Tensor,
    targets: Sequence[Sequence[int]],
    input_lengths: Sequence[int] | None = None,
) -> Tensor:
    """Negative log-likelihood per item.

    Args:
        log_probs: ``(B, T, V)`` log-softmax rows.
        targets: label sequences over ``[1, V)``.
        input_lengths: valid frames per item (defaults to ``T``).

    Returns:
        ``(B,)`` losses, differentiable w.r.t. ``log_probs``.
    """
    B, T, V = log_probs.shape
    if len(targets) != B:
        raise CTCError("one target per batch item")
    lengths = [T] * B if input_lengths is None else [int(n) for n in input_lengths]
    for tgt, n in zip(targets, lengths):
        if any(not 1 <= y < V for y in tgt):
            raise CTCError("target labels must lie in [1, V)")
        if min_frames(tgt) > n:
            raise CTCError(f"target of length {len(tgt)} cannot be aligned to {n} frames")

    S = 2 * max((len(t) for t in targets), default=0) + 1
    ext = torch.zeros(B, S, dtype=torch.long)
    skip = torch.zeros(B, S, dtype=torch.bool)
    for b, tgt in enumerate(targets):
        for u, y in enumerate(tgt):
            ext[b, 2 * u + 1] = y
            if u > 0 and tgt[u - 1] != y:
                skip[b, 2 * u + 1] = True

    dtype = log_probs.dtype
    neg = torch.full((B, 1), _NEG, dtype=dtype)
    neg2 = torch.full((B, 2), _NEG, dtype=dtype)
    emit = torch.gather(log_probs, 2, ext.unsqueeze(1).expand(B, T, S))  # (B, T, S)
    alpha = torch.full((B, S), _NEG, dtype=dtype)
    alpha = torch.cat([emit[:, 0, :2], alpha[:, 2:]], dim=1) if S > 1 else emit[:, 0, :1].clone()
    lengths_t = torch.tensor(lengths)
    for t in range(1, T):
        prev1 = torch.cat([neg, alpha[:, :-1]], dim=1)
        prev2 = torch.cat([neg2, alpha[:, :-2]], dim=1)[:, :S]
        prev2 = torch.where(skip, prev2, torch.full_like(prev2, _NEG))
        new = torch.logsumexp(torch.stack([alpha, prev1, prev2]), dim=0) + emit[:, t]
        alpha = torch.where((t < lengths_t)[:, None], new, alpha)

    losses = []
    for b, tgt in enumerate(targets):
        last = 2 * len(tgt)
        if last == 0:
            losses.append(-alpha[b, 0])
        else:
            losses.append(-torch.logsumexp(alpha[b, last - 1 : last + 1], dim=0))
    return torch.stack(losses)


def ctc_loss(log_probs: Tensor, target: Sequence[int]) -> Tensor:
    """Single-instance loss for ``(T, V)`` log-probabilities."""
    return ctc_loss_batch(log_probs.unsqueeze(0), [list(target)])[0]


def collapse(path: Sequence[int], blank: int = BLANK) -> list[int]:
    out = []
    prev = None
    for p in path:
        if p != prev and p != blank:
            out.append(int(p))
        prev = p
    return out


def ctc_brute_force(log_probs, target: Sequence[int], max_frames: int = 8, max_vocab: int = 4) -> float:
    """Exhaustive marginalization over every frame-label path."""
    lp = np.asarray(log_probs.detach().cpu() if isinstance(log_probs, Tensor) else log_probs, dtype=np.float64)
    T, V = lp.shape
    if T > max_frames or V > max_vocab:
        raise CTCError(f"refusing to enumerate {V}^{T} paths")
    target = list(target)
    total = 0.0
    for path in itertools.product(range(V), repeat=T):
        if collapse(path) == target:
            total += math.exp(sum(lp[t, p] for t, p in enumerate(path)))
    return math.inf if total == 0.0 else -math.log(total)


def greedy_decode(log_probs: Tensor) -> list[int]:
    return collapse(log_probs.argmax(dim=-1).tolist())
