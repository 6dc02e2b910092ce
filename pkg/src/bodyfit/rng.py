"""Deterministic, splittable random streams.

All randomness in the package flows through counter-based Philox generators
keyed by (seed, domain, index...). Streams for different keys are
statistically independent and can be created in any order, so dataset
records, weight initializations, and noise draws are reproducible
independently of generation order or parallelism.
"""

import numpy as np

# Stream domains. Keeping these distinct guarantees that, say, record 7's
# pose draw never collides with record 7's noise draw.
DOMAIN_POSE = 0
DOMAIN_SHAPE = 1
DOMAIN_NOISE = 2
DOMAIN_INIT = 3
DOMAIN_DROPOUT = 4
DOMAIN_BATCH = 5
DOMAIN_PROBLEM = 6
DOMAIN_FIELD = 7


def stream(seed, *path):
    """Return an independent Generator for the given seed and key path.

    Parameters
    ----------
    seed : int
        Top-level experiment seed.
    path : ints
        Hierarchical sub-key, e.g. (DOMAIN_POSE, record_index).
    """
    key = tuple(int(p) for p in path)
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))
