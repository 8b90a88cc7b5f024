"""Counter-based seed derivation.

Every random stream in a run is keyed by ``(run_seed, purpose, ...)`` so that
adding or removing an agent never shifts another agent's draws.
"""

import hashlib
import struct

import numpy as np

_MASK64 = (1 << 64) - 1


def _digest(*keys) -> bytes:
    h = hashlib.blake2b(digest_size=8)
    for k in keys:
        h.update(repr(k).encode())
        h.update(b"\x1f")
    return h.digest()


def derive_seed(*keys) -> int:
    """Derive a 63-bit seed from an arbitrary tuple of hashable keys."""
    return struct.unpack("<Q", _digest(*keys))[0] & (_MASK64 >> 1)


def uniform(*keys) -> float:
    """Deterministic U[0, 1) value for a key tuple."""
    return (struct.unpack("<Q", _digest(*keys))[0] >> 11) * (1.0 / (1 << 53))


def stream(*keys) -> np.random.Generator:
    """A sequential generator dedicated to one purpose."""
    return np.random.Generator(np.random.PCG64(derive_seed(*keys)))
