"""Seeded, counter-based random streams.

Every stochastic quantity in the simulator is drawn from a Philox stream whose
128-bit key is derived from a root seed plus a tuple of coordinates (cell
values, sequence ids, ...). Streams never depend on evaluation order, so
sweeps replay identically whether cells run sequentially or on a pool.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, *coords: Any) -> int:
    """Hash ``seed`` and arbitrary JSON-able coordinates into a 64-bit seed."""
    payload = json.dumps([int(seed), *coords], sort_keys=True, default=repr)
    digest = hashlib.blake2b(payload.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def philox(seed: int, stream: int = 0) -> np.random.Generator:
    """Generator keyed by (seed, stream); cheap enough to build per sequence."""
    key = ((int(seed) & _MASK64) << 64) | (int(stream) & _MASK64)
    return np.random.Generator(np.random.Philox(key=key))


def make_rng(seed: int, *coords: Any) -> np.random.Generator:
    return philox(derive_seed(seed, *coords))
