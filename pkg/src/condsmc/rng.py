"""Counter-based random streams.

Every random quantity in a run is addressed by a tuple of labels, e.g.
``(master_seed, "bias", N, replicate)``.  The tuple is hashed to a 128-bit
Philox key, so a replicate draws the same numbers no matter which worker
runs it or in which order.
"""
from __future__ import annotations

import hashlib
import struct

import numpy as np

_MASK64 = (1 << 64) - 1


def _encode(label) -> bytes:
    if isinstance(label, (bool, np.bool_)):
        return b"b" + (b"1" if label else b"0")
    if isinstance(label, (int, np.integer)):
        raw = str(int(label)).encode()
        return b"i" + struct.pack("<I", len(raw)) + raw
    if isinstance(label, str):
        raw = label.encode("utf-8")
        return b"s" + struct.pack("<I", len(raw)) + raw
    raise TypeError(f"stream labels must be int or str, got {type(label).__name__}")


def seed_derive(master: int, labels=()) -> int:
    """Derive a 128-bit stream key from a master seed and a label tuple.

    The encoding is length-prefixed, so ``("ab",)`` and ``("a", "b")`` give
    different keys.  Identical inputs give identical keys on every platform.
    """
    h = hashlib.blake2b(digest_size=16, person=b"condsmc-stream")
    h.update(_encode(int(master) & _MASK64))
    for label in labels:
        h.update(_encode(label))
    return int.from_bytes(h.digest(), "little")


def generator(key: int) -> np.random.Generator:
    """A numpy Generator on the Philox stream identified by ``key``."""
    words = np.array([key & _MASK64, (key >> 64) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=words))


def stream(master: int, *labels) -> np.random.Generator:
    return generator(seed_derive(master, labels))
