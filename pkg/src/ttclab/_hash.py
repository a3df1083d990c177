"""Deterministic 64-bit mixing, independent of PYTHONHASHSEED.

Used for seeding per-state pseudo-random logits and for bucketing sparse
feature keys into dense tables. splitmix64 constants.
"""

MASK64 = (1 << 64) - 1


def mix64(x: int) -> int:
    x &= MASK64
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def chain(h: int, v: int) -> int:
    """Fold value v into running hash h."""
    return mix64(h ^ mix64(v + 0x632BE59BD9B4E019))


def hash_ints(seed: int, values) -> int:
    h = mix64(seed)
    for v in values:
        h = chain(h, int(v))
    return h


def _mix64_np(x):
    import numpy as np

    x = (x + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(MASK64)
    z = x
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def hash_arrays(seed: int, *columns):
    """Vectorized hash_ints over aligned integer arrays.

    hash_arrays(s, a, b)[i] == hash_ints(s, (a[i], b[i])) for every row.
    """
    import numpy as np

    with np.errstate(over="ignore"):
        h = np.full(np.broadcast(*columns).shape, mix64(seed), dtype=np.uint64)
        for col in columns:
            v = _mix64_np(col.astype(np.uint64) + np.uint64(0x632BE59BD9B4E019))
            h = _mix64_np(h ^ v)
        return h
