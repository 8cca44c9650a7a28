"""Deterministic random streams.

All sampling in the package draws from SplitMix64 streams.  A stream is a
pure function of its 64-bit seed: output j is ``mix64(seed + (j+1)*GAMMA)``
where ``mix64`` is the SplitMix64 finalizer (Steele, Lea & Flood 2014) and
GAMMA is the golden-ratio increment.  Per-sample seeds are derived from a
master seed with the same mixer, so any (master_seed, sample_index) pair
addresses an independent stream regardless of scheduling.
"""

from __future__ import annotations

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    """SplitMix64 avalanche finalizer on a 64-bit integer."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(master_seed: int, index: int) -> int:
    """Seed for the index-th substream of a master seed."""
    return mix64((master_seed + (index + 1) * _GAMMA) & _MASK)


class SplitMix64:
    """Sequential view of a SplitMix64 stream."""

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK
        return mix64(self._state)

    def uniform(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (2.0 ** -53)
