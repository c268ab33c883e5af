"""Deterministic RNG derivation.

All randomness in the package flows through generators produced here, so a
run is fully determined by its base seed plus the string tags naming each
consumer (stage, trajectory index, ...).
"""

import hashlib

import numpy as np


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def generator(seed: int, *tags) -> np.random.Generator:
    """Generator keyed by (seed, *tags); identical arguments give identical streams."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_to_int(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))
