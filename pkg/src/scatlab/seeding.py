"""Deterministic random-number plumbing.

Every pipeline stage derives its generator from the single 64-bit run
seed through a counted spawn key, so stages can be re-run independently
and still reproduce bit-identical draws.
"""

import numpy as np

STAGE_DATASET = 1
STAGE_TRAINING_SET = 2
STAGE_TRAINING = 3
STAGE_INVERSION = 4
STAGE_NOISE = 5


def stage_rng(seed: int, stage: int, index: int = 0) -> np.random.Generator:
    """Generator for (seed, stage, index); identical inputs, identical stream."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stage), int(index)))
    )
