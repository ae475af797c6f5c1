"""Reproducible random streams.

Every stochastic call in the package takes a ``numpy.random.Generator``.
Generators are built on Philox (a counter-based bit generator), and
independent substreams are keyed by ``(master_seed, *keys)`` so a given
epidemic's draws do not depend on how many other epidemics were generated
before it, or on which worker generated it.
"""
from __future__ import annotations

import hashlib

import numpy as np

NEVER = -1


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key)
    digest = hashlib.sha256(str(key).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def substream(master_seed: int, *keys) -> np.random.Generator:
    """Return the generator for substream ``keys`` of ``master_seed``."""
    ss = np.random.SeedSequence(
        entropy=int(master_seed), spawn_key=tuple(_key_to_int(k) for k in keys)
    )
    return np.random.Generator(np.random.Philox(ss))


def check_rng(rng=None) -> np.random.Generator:
    """Coerce ``None``, an int seed or a Generator into a Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        return np.random.Generator(np.random.Philox())
    if isinstance(rng, (int, np.integer)):
        return substream(int(rng))
    raise TypeError(f"cannot build a Generator from {type(rng).__name__}")


def torch_seed(rng: np.random.Generator) -> int:
    """Draw a 63-bit seed for torch from a numpy stream."""
    return int(rng.integers(0, 2**63 - 1))
