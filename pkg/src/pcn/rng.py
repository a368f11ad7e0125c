"""Seeded random streams.

All randomness flows from a single 64-bit seed. Each purpose gets its own
PCG64 stream, derived from ``(seed, offset)``, so that e.g. changing the
number of evaluation folds never perturbs training randomness.
"""

import numpy as np

STREAMS = {
    "data": 0,
    "init": 1,
    "episodes": 2,
    "folds": 3,
    "kmeans": 4,
    "split": 5,
    "ce": 6,
}

_MASK64 = (1 << 64) - 1


def stream(seed, purpose, *extra):
    """Return a Generator for ``purpose`` under ``seed``.

    ``extra`` integers further subdivide a stream (e.g. an epoch index).
    """
    if purpose not in STREAMS:
        raise KeyError(f"unknown random stream {purpose!r}")
    entropy = [int(seed) & _MASK64, STREAMS[purpose], *(int(e) & _MASK64 for e in extra)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def as_generator(rng):
    """Accept a seed, a Generator or None and return a Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        return np.random.default_rng()
    return np.random.Generator(np.random.PCG64(int(rng) & _MASK64))


def child_seed(rng):
    """Draw a 64-bit integer seed from ``rng``."""
    return int(rng.integers(0, 2**63 - 1))
