"""Counter-based random streams.

Every stream is a Philox generator keyed by ``(base_seed, replicate, purpose)``
through :class:`numpy.random.SeedSequence`, so a replicate's draws do not
depend on which worker runs it or in what order.
"""

from __future__ import annotations

import numpy as np

# sub-stream ids inside one replicate
TREATMENT = 0
SUBGROUP = 1
RANDOM_EFFECTS = 2
NOISE = 3
BOOTSTRAP = 4


def stream(base_seed: int, *key: int) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=int(base_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(base_seed: int, *key: int) -> int:
    """A 63-bit integer seed for nested use (e.g. bootstrap inside a replicate)."""
    seq = np.random.SeedSequence(entropy=int(base_seed), spawn_key=tuple(int(k) for k in key))
    lo, hi = (int(v) for v in seq.generate_state(2, dtype=np.uint32))
    return ((hi << 32) | lo) & (2 ** 63 - 1)
