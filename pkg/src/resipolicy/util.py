"""Seeding helpers: every random draw flows through a named stream."""
from __future__ import annotations

import zlib

import numpy as np


def _ident(part):
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def stream(root_seed, *path):
    """Deterministic generator for (root seed, stream path).

    Example: stream(7, 3, "env-noise") is the environment-noise stream of
    rollout index 3 under root seed 7. Identical paths always reproduce
    identical draw sequences, which is what makes ablations paired.
    """
    entropy = [_ident(root_seed)] + [_ident(p) for p in path]
    return np.random.default_rng(np.random.SeedSequence(entropy))
