"""Deterministic seed derivation shared by every module.

All randomness in the package flows through named streams derived here.
A stream seed is a pure function of its label parts, so any run can be
reproduced from the top-level seed plus the documented stream names.
Python's builtin ``hash`` is salted per process and is never used.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1

_SEP = b"\x1f"


def derive_seed(*parts: int | str) -> int:
    """Fold labels and integers into a stable 64-bit stream seed.

    Parts may be ints or strings; they are joined with an unambiguous
    separator and hashed, so ("ab", 1) and ("a", "b1") differ.
    """
    blob = _SEP.join(str(p).encode("utf-8") for p in parts)
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


def rng_from(*parts: int | str) -> np.random.Generator:
    """A PCG64 generator seeded from the named stream."""
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))
