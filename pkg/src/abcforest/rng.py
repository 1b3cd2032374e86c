"""Keyed random streams.

Every random draw in the package comes from a Philox generator whose key is
derived from ``(master_seed, tag, index)``.  Philox is counter-based, so the
stream of job ``m`` does not depend on which worker runs it or in what order.
"""
import zlib

import numpy as np


def tag_id(tag):
    return zlib.crc32(tag.encode("utf-8"))


def stream(seed, tag, *index):
    """Generator for job ``index`` of component ``tag`` under ``seed``."""
    key = (tag_id(tag),) + tuple(int(i) for i in index)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def child_seed(rng):
    """Draw a 63-bit seed from ``rng`` for handing to a sub-component."""
    return int(rng.integers(0, 2**63 - 1))
