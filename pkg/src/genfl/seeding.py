"""Deterministic random streams keyed by (global seed, purpose, ids...).

Every consumer of randomness gets its own generator derived from a key
tuple, so results do not depend on execution order or parallel schedule.
"""

import numpy as np

# purpose tags, part of every stream key
CLIENT_SAMPLING = 1
POSTERIOR_UPDATE = 2
PRIOR_UPDATE = 3
PRIOR_INIT = 4
MONTE_CARLO = 5
PERSONALISE = 6
DATA = 7
PARTITION = 8
TEST_EVAL = 9


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, key)])))
