"""Keyed random streams.

Every random draw in a run comes from a stream addressed by a key such as
``(master_seed, generation, "mutate", index)``.  Streams are Philox
(counter-based) generators seeded through ``SeedSequence``, so the value of a
draw depends only on its key, never on which worker or in what order it ran.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_int(part) -> int:
    if isinstance(part, (bool, np.bool_)):
        raise TypeError("boolean stream keys are ambiguous")
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream key parts must be non-negative, got {part}")
        return int(part)
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    raise TypeError(f"unsupported stream key part {part!r}")


def seed_sequence(*key) -> np.random.SeedSequence:
    return np.random.SeedSequence([_key_int(p) for p in key])


def derive_rng(*key) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed_sequence(*key)))


def derive_seed(*key) -> int:
    """A 63-bit integer seed for ``key`` (e.g. a track seed)."""
    return int(seed_sequence(*key).generate_state(1, np.uint64)[0] >> np.uint64(1))
