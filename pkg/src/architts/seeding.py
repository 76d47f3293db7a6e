"""Splittable seed derivation.

Every random draw in the package is keyed by ``(root_seed, stream, index...)``
so that any piece of work can be reproduced without replaying the others.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    return int(part)


def derive_seed(root: int, *keys) -> int:
    ss = np.random.SeedSequence(entropy=int(root), spawn_key=tuple(_key(k) for k in keys))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return (int(hi) << 31) ^ int(lo)


def numpy_rng(root: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *keys))


def torch_generator(root: int, *keys) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(root, *keys))
    return g
