"""Reproducible random-number substreams.

All randomness in this package flows through :func:`substream`, which maps a
master seed plus a path of identifiers to an independent counter-based
generator (Philox, keyed through ``numpy.random.SeedSequence``).  Substreams
are stable across runs, platforms and process/thread layout, so any replicate
of a Monte Carlo experiment can be regenerated in isolation.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["substream", "derive_seed"]


def _key_part(part: int | str) -> int:
    if isinstance(part, str):
        # crc32 is stable across platforms and Python versions
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def substream(seed: int, *path: int | str) -> np.random.Generator:
    """Return the Philox generator for ``(seed, *path)``.

    Parameters
    ----------
    seed : int
        Master seed.
    *path : int or str
        Identifiers of the substream, e.g. ``substream(seed, grid, rep, "data")``.
        String components are hashed with crc32; integers are used directly.

    Returns
    -------
    numpy.random.Generator
        Independent generator; calling twice with identical arguments yields
        bitwise-identical draws.
    """
    key = tuple(_key_part(p) for p in path)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=int(seed), spawn_key=key)))


def derive_seed(seed: int, *path: int | str) -> int:
    """Derive a child master seed for ``(seed, *path)``.

    Used by the experiment runner to hand each (grid point, replicate) its own
    seed; the derivation is order-independent of execution and stable across
    platforms.
    """
    key = tuple(_key_part(p) for p in path)
    state = np.random.SeedSequence(entropy=int(seed), spawn_key=key).generate_state(2, np.uint64)
    return int(state[0])
