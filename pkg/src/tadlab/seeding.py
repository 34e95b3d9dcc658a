"""Deterministic seed derivation.

All randomness in the package flows from 64-bit master seeds through
`derive`, a splitmix64-style mixer.  Deriving a child seed per work item
(sample index, epoch, batch slot, ...) makes generation order-independent:
serial and parallel producers yield bit-identical results.
"""

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def mix64(seed: int, salt: int) -> int:
    """Mix two 64-bit integers into a well-scrambled 64-bit value."""
    x = (seed + (salt & _MASK) * _GOLDEN + _GOLDEN) & _MASK
    # splitmix64 finalizer
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return (x ^ (x >> 31)) & _MASK


def derive(seed: int, *salts: int) -> int:
    """Chain `mix64` over any number of salts: derive(s, a, b) != derive(s, b, a)."""
    out = seed & _MASK
    for salt in salts:
        out = mix64(out, salt)
    return out


def rng_from(seed: int, *salts: int) -> np.random.Generator:
    """A fresh PCG64 generator keyed by (seed, *salts)."""
    return np.random.default_rng(derive(seed, *salts))
