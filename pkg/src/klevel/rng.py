"""Keyed random streams.

Every random draw in the package comes from a generator keyed by
``(seed, purpose, *keys)``. Two calls with the same key give the same
stream, so datasets, neighbor replacements and index draws can be
reproduced independently of each other.
"""

import zlib

import numpy as np


def _purpose_code(purpose):
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed, purpose, *keys):
    """Return a fresh ``numpy.random.Generator`` for the given key."""
    entropy = [int(seed), _purpose_code(purpose)] + [int(k) for k in keys]
    if any(e < 0 for e in entropy):
        raise ValueError(f"stream keys must be non-negative, got {entropy}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def draw_indices(rng, n, size):
    """Draw a minibatch of ``size`` distinct indices from ``range(n)``.

    A full batch returns ``arange(n)`` without consuming randomness, so
    full-batch estimators are exact means.
    """
    if size >= n:
        return np.arange(n)
    return rng.choice(n, size=size, replace=False)
