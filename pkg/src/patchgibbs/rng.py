"""Keyed random streams.

Every random draw in a chain comes from a generator addressed by a tuple of
non-negative integers (chain, update, block, ...) under a master seed, so the
values drawn never depend on how work is split across threads.
"""
from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["substream", "stream_digest"]


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``key`` under master ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def stream_digest(seed: int, *key: int) -> str:
    """Short hex digest identifying the state a stream starts from."""
    state = substream(seed, *key).bit_generator.state["state"]
    text = f"{state['state']}:{state['inc']}"
    return hashlib.sha256(text.encode()).hexdigest()[:16]
