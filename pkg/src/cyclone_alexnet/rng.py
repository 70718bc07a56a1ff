"""Counter-based random streams.

Every stochastic routine takes an explicit ``numpy.random.Generator``. Streams
are built on Philox so that a ``(seed, *path)`` pair names one reproducible
sequence regardless of platform or of how many other streams exist.
"""

import numpy as np


def make_rng(seed, *path):
    """Return a Philox generator for the stream ``seed/path[0]/path[1]/...``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed, *path):
    """A plain integer seed for a sub-stream, for storing in manifests."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint32)[0])
