"""Named, reproducible random substreams.

Every component draws randomness from substream(seed, name) so that a single
pipeline seed fully determines data generation, weight init, and batch order,
and components can be rerun independently without disturbing each other.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["substream"]


def substream(seed: int, name: str) -> np.random.Generator:
    """Derive an independent generator from (seed, name)."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))
