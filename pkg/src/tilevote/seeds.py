"""Seed derivation.

One master seed drives an experiment; every stochastic stage derives its own
seed from the master by a fixed, documented offset so stages stay decoupled
(re-running one stage never perturbs another) while the whole experiment
remains a deterministic function of the master seed.
"""

import numpy as np

# Fixed per-purpose offsets added to the master seed.
SYNTH_OFFSET = 1_000
SPLIT_OFFSET = 2_000
FOLD_OFFSET = 3_000
INIT_OFFSET = 4_000
SHUFFLE_OFFSET = 5_000  # per-epoch shuffles add the epoch index on top
SIM_OFFSET = 9_000


def derive(master_seed: int, offset: int, index: int = 0) -> int:
    """Seed for one purpose (and optional sub-index, e.g. image or epoch)."""
    return int(master_seed) + int(offset) + int(index)


def rng_for(master_seed: int, offset: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive(master_seed, offset, index))
