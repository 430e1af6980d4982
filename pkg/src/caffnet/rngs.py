"""Seed derivation.

All randomness in the library flows from one master seed.  Named substreams
are derived by hashing (master_seed, *labels) into a Philox key, so a seed
list written in a manifest reproduces the same streams on any platform and
the substreams are independent regardless of draw order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def make_rng(master_seed: int, *labels) -> np.random.Generator:
    """Counter-based generator for the substream named by `labels`."""
    tag = repr((int(master_seed),) + tuple(labels)).encode()
    key = int.from_bytes(hashlib.sha256(tag).digest()[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))
