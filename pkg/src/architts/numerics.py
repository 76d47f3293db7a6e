"""Differentiable array primitives used by every network in the package.

Reverse-mode differentiation comes from torch autograd. The central
difference checker in this module is written independently of it and is what
the gradient tests compare against.
"""

from __future__ import annotations

import math
from typing import Callable, Optional

import torch
import torch.nn.functional as F
from torch import Tensor


class DimensionError(ValueError):
    """Raised when tensor shapes do not line up for an operation."""


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: Optional[Tensor] = None,
) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    Args:
        q, k, v: ``(..., T, D)`` tensors. ``k`` and ``v`` may have a different
            length from ``q`` but must agree with each other.
        mask: optional boolean tensor broadcastable to ``(..., T_q, T_k)``;
            ``True`` marks keys a query may attend to.

    Returns:
        ``(..., T_q, D_v)``, each row a convex combination of the rows of ``v``.
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key length {k.shape[-2]} != value length {v.shape[-2]}")
    if q.shape[-2] < 1 or k.shape[-2] < 1:
        raise DimensionError("attention needs at least one position")
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    return weights @ v


def causal_mask(length: int, device=None) -> Tensor:
    return torch.ones(length, length, dtype=torch.bool, device=device).tril()


def layer_norm(x: Tensor, gain: Optional[Tensor], bias: Optional[Tensor], eps: float = 1e-6) -> Tensor:
    if x.shape[-1] == 0:
        raise DimensionError("layer_norm over an empty dimension")
    if eps <= 0:
        raise ValueError("eps must be positive")
    return F.layer_norm(x, (x.shape[-1],), gain, bias, eps)


def gelu(x: Tensor) -> Tensor:
    return F.gelu(x, approximate="tanh")


def depthwise_conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Same-length depthwise convolution along time.

    ``x`` is ``(B, T, C)`` and ``weight`` is ``(C, K)`` with odd ``K``.
    """
    channels, width = weight.shape
    if x.shape[-1] != channels:
        raise DimensionError(f"input has {x.shape[-1]} channels, kernel has {channels}")
    if width % 2 != 1:
        raise DimensionError("depthwise kernel width must be odd")
    y = F.conv1d(x.transpose(1, 2), weight.unsqueeze(1), bias, padding=width // 2, groups=channels)
    return y.transpose(1, 2)


def rotary_angles(positions: Tensor, head_dim: int, base: float = 10000.0) -> tuple[Tensor, Tensor]:
    """cos/sin tables for rotary embedding at (possibly fractional) positions.

    ``positions`` is ``(..., T)``; the returned tables are ``(..., T, head_dim // 2)``.
    """
    if head_dim % 2:
        raise DimensionError("rotary embedding needs an even head dimension")
    freqs = base ** (-torch.arange(0, head_dim, 2, dtype=positions.dtype, device=positions.device) / head_dim)
    angles = positions.unsqueeze(-1) * freqs
    return angles.cos(), angles.sin()


def apply_rotary(x: Tensor, cos: Tensor, sin: Tensor) -> Tensor:
    """Rotate channel pairs ``(x[:half], x[half:])`` of the last axis."""
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


def finite_difference_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    Evaluates ``f`` at ``x +- eps * e_i`` for every coordinate. Intended for
    double-precision inputs; the input tensor is never modified.
    """
    base = x.detach().clone()
    flat = base.view(-1)
    grad = torch.zeros_like(flat)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        up = float(f(base))
        flat[i] = orig - eps
        down = float(f(base))
        flat[i] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        grad[i] = (up - down) / (2 * eps)
    return grad.view_as(x)


def relative_error(a: Tensor, b: Tensor, floor: float = 1e-12) -> float:
    """Norm-wise relative difference ``|a-b| / max(|a|, |b|)``."""
    num = (a - b).norm().item()
    den = max(a.norm().item(), b.norm().item(), floor)
    return num / den


def reverse_mode_grad(f: Callable[[Tensor], Tensor], x: Tensor) -> Tensor:
    leaf = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(leaf), leaf)
    return g
