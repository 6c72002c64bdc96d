"""Counter-based random numbers.

Every draw is a pure function of ``(seed, step, position, stream)`` so results
never depend on evaluation order, batching or thread count.
"""

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z):
    # splitmix64 finalizer
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def counter_bits(seed, step, positions, stream=0):
    """64-bit hashes for each position under key (seed, step, stream)."""
    positions = np.asarray(positions, dtype=np.uint64)
    with np.errstate(over="ignore"):
        key = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + _GOLDEN)
        key = _mix(key ^ (np.uint64(step & 0xFFFFFFFFFFFFFFFF) * _GOLDEN))
        key = _mix(key ^ (np.uint64(stream & 0xFFFFFFFFFFFFFFFF) + _M1))
        return _mix(key ^ (positions * _GOLDEN + _M2))


def counter_uniform(seed, step, positions, stream=0):
    """Uniform floats in [0, 1) with 53 bits of resolution."""
    bits = counter_bits(seed, step, positions, stream)
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def derive_seed(seed, *keys):
    """Fold extra integer keys into a seed (for per-item / per-step streams)."""
    z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        for k in keys:
            z = _mix(z ^ (np.uint64(k & 0xFFFFFFFFFFFFFFFF) + _GOLDEN))
    return int(z & np.uint64(0x7FFFFFFFFFFFFFFF))
