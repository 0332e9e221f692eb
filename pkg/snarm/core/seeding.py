"""
Named random substreams derived from one root seed

Every consumer of randomness (bank, synthesis, jitter, init, batches, dataset)
draws from its own substream so that adding draws in one place never shifts
another.
"""

import zlib

import numpy as np


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(root_seed: int, name: str, *extra: int) -> np.random.Generator:
    """
    Build an independent generator for a named purpose

    Args:
        root_seed: Run-level seed
        name: Purpose of the stream, e.g. "bank" or "jitter"
        extra: Optional integers further separating streams (e.g. a run index)

    Returns:
        numpy Generator
    """
    seq = np.random.SeedSequence(entropy=int(root_seed), spawn_key=(_name_key(name), *map(int, extra)))
    return np.random.default_rng(seq)


def derive_seed(root_seed: int, name: str, *extra: int) -> int:
    """Integer seed for libraries that want a plain int (torch, sklearn)"""
    seq = np.random.SeedSequence(entropy=int(root_seed), spawn_key=(_name_key(name), *map(int, extra)))
    return int(seq.generate_state(1, dtype=np.uint32)[0])
