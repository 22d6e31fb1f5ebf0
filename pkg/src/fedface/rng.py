"""Named random sub-streams derived from a single master seed."""

import zlib

import numpy as np


def _key(name):
    if isinstance(name, str):
        return zlib.crc32(name.encode("utf-8"))
    return int(name)


def stream(seed, *names):
    """Return a Generator for the sub-stream ``names`` of ``seed``.

    Streams with different name paths are statistically independent, and
    the same path always yields the same sequence, so e.g.
    ``stream(7, "client", 3, "round", 2)`` does not depend on how many
    draws other clients made.
    """
    if int(seed) < 0:
        raise ValueError("seed must be non-negative")
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.default_rng(seq)
