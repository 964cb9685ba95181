"""Deterministic seed splitting.

Every run has one root seed; stages and candidates get child streams keyed
by stable names so that adding a stage never perturbs another stage's draws.
"""

import zlib

import numpy as np


def _key(part):
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def derive_seed(root, *keys):
    """Return a 63-bit integer seed for the stream ``root/keys...``."""
    ss = np.random.SeedSequence(int(root), spawn_key=tuple(_key(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def rng_for(root, *keys):
    return np.random.default_rng(derive_seed(root, *keys))
