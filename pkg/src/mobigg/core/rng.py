"""Counter-based random streams keyed by (master seed, trial index, purpose).

Every trial owns independent Philox substreams, so results never depend on the
order or the thread on which trials run.
"""

from __future__ import annotations

import numpy as np

# Purpose tags; distinct values give statistically independent substreams.
NODES = 0
TARGET = 1
COUPLING = 2
AUX = 3
MOTION = 4


def stream(seed: int, trial: int = 0, purpose: int = NODES, *extra: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(trial), int(purpose), *map(int, extra)))
    return np.random.Generator(np.random.Philox(ss))
