"""Named deterministic random substreams.

Every source of randomness in a run is keyed by (root seed, stream name),
hashed into an independent counter-based Philox stream. Substreams are
order-independent: drawing from one never shifts another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}\x1f{name}".encode()).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


def normal(seed: int, name: str, shape, scale: float = 1.0) -> np.ndarray:
    gen = substream(seed, name)
    return gen.standard_normal(shape, dtype=np.float64) * scale
