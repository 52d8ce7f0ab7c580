"""Named random substreams derived from a single master seed.

Every consumer of randomness (arrivals of user n, action draws of user n,
replay sampling, weight init, ...) gets its own ``numpy.random.Generator``
keyed by a fixed stream id, so changing how one consumer draws never shifts
the sequence seen by another.
"""

from __future__ import annotations

import numpy as np

ARRIVALS = 0
ACTIONS = 1
REPLAY = 2
WEIGHT_INIT = 3
TRAIN_ENV = 4
EVAL_ENV = 5


def substream(master_seed: int, stream: int, *index: int) -> np.random.Generator:
    """Return the generator for ``(stream, *index)`` under ``master_seed``."""
    seq = np.random.SeedSequence(master_seed, spawn_key=(stream, *index))
    return np.random.Generator(np.random.PCG64(seq))


def derive_seed(master_seed: int, stream: int, *index: int) -> int:
    """Derive a child integer seed, e.g. for the environment of a training phase."""
    seq = np.random.SeedSequence(master_seed, spawn_key=(stream, *index))
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
