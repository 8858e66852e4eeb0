"""Counter-based random streams.

Every consumer draws from ``stream(root_seed, *path)``: a Philox generator
keyed by ``SeedSequence([root_seed, *path])``.  Distinct paths give
statistically independent streams and the same path always reproduces the
same draws, independent of how many other streams were created before.
"""

from __future__ import annotations

import numpy as np


def stream(root_seed: int, *path: int) -> np.random.Generator:
    seq = np.random.SeedSequence([int(root_seed), *(int(p) for p in path)])
    return np.random.Generator(np.random.Philox(seq))
