"""One run seed, split into fixed per-component sub-seeds."""

from __future__ import annotations

import zlib

import numpy as np


def sub_seed(seed: int, component: str) -> int:
    """Stable 32-bit seed for ``component`` derived from the run seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(component.encode())])
    return int(ss.generate_state(1)[0])


def rng_for(seed: int, component: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(sub_seed(seed, component)))
