"""Independent reference implementations used by the tests."""

import numpy as np

from upix.tokens import SegmentKind


def mask_rule(kinds):
    """Brute force: query i may read key j iff i is Generation or j <= i."""
    n = len(kinds)
    out = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            out[i, j] = kinds[i] == SegmentKind.GENERATION or j <= i
    return out


def random_kinds(rng, max_len=32):
    counts = rng.multinomial(int(rng.integers(1, max_len + 1)), [0.25] * 4)
    return [SegmentKind(k) for k, c in enumerate(counts) for _ in range(c)]


def rotate_reference(vec, pos, base, split):
    """Rotate one head vector pair by pair with explicit 2x2 matrices."""
    out = np.empty_like(vec)
    start = 0
    for axis, dim in enumerate(split):
        p = max(pos[axis], 0)
        for i in range(0, dim, 2):
            theta = p * base ** (-i / dim)
            c, s = np.cos(theta), np.sin(theta)
            a, b = vec[start + i], vec[start + i + 1]
            out[start + i] = c * a - s * b
            out[start + i + 1] = s * a + c * b
        start += dim
    return out
