"""Seedable, portable random numbers.

Only the PCG64 bit stream and SeedSequence are used, both of which numpy
keeps stable across releases. Uniform doubles are built from the top 53 bits
of each raw word here rather than through ``Generator`` methods, whose
streams numpy does not promise to freeze.
"""

from __future__ import annotations

import numpy as np

_INV_2_53 = 1.0 / (1 << 53)


class PortableRng:
    def __init__(self, seed: int, *stream: int):
        seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(s) for s in stream))
        self._bits = np.random.PCG64(seq)

    def uniform(self, size=None):
        """Doubles in [0, 1)."""
        n = 1 if size is None else int(np.prod(size))
        raw = self._bits.random_raw(n)
        u = (raw >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size):
        """Standard normals via Box-Muller."""
        n = int(np.prod(size))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1]
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n].reshape(size)


def derive_seed(seed: int, *stream: int) -> int:
    """A 32-bit child seed for a named sub-stream (case, rater, ...)."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(s) for s in stream))
    return int(seq.generate_state(1, dtype=np.uint32)[0])
