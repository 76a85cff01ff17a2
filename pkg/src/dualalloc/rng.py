"""Named random substreams derived from a single run seed.

Every consumer of randomness (channel draws, weight init, finite-difference
perturbations, policy sampling) gets its own generator keyed by a stable
name, so adding draws to one consumer never shifts the draws of another.
"""

import hashlib

import numpy as np

_SEED_MASK = (1 << 64) - 1


def stream_key(name):
    """Stable 64-bit key for a stream name (first 8 bytes of SHA-256)."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def named_stream(seed, name):
    """Independent generator for (seed, name), reproducible across runs."""
    entropy = [int(seed) & _SEED_MASK, stream_key(name)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def spawn_streams(seed, *names):
    """Dict of named generators sharing the same base seed."""
    return {name: named_stream(seed, name) for name in names}
