"""Explicit counter-based randomness.

All stochastic behavior in the package draws from Philox4x64-10 streams
keyed directly (no entropy pooling), so every stream is fully specified
by the two 64-bit key words: (seed, stream). A global run seed fans out
to per-stage streams through the STAGE table; replicate indices extend
the stream word in the high bits.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1

# Stage identifiers for deriving per-stage streams from one run seed.
STAGE = {
    "data": 1,
    "mae_image": 2,
    "mae_audio": 3,
    "mae_text": 4,
    "align_joint": 5,
    "align_audio": 6,
    "train_image": 7,
    "train_audio": 8,
    "train_text": 9,
    "sample": 10,
    "eval": 11,
    "probe": 12,
    "init": 13,
    "demo": 14,
}


def philox(seed: int, stream: int = 0) -> np.random.Generator:
    """Generator over Philox4x64-10 with key = (seed, stream)."""
    key = np.array([seed & MASK64, stream & MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def stage_rng(run_seed: int, stage: str, replicate: int = 0) -> np.random.Generator:
    """Derived stream for a pipeline stage: key = (seed, stage_id + replicate<<32)."""
    if stage not in STAGE:
        raise KeyError(f"unknown stage '{stage}'; expected one of {sorted(STAGE)}")
    return philox(run_seed, STAGE[stage] + (replicate << 32))
