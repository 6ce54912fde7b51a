"""Counter-based seed splitting.

Every random stream is keyed by ``(seed, stage, *keys)`` so per-prompt work
draws the same numbers regardless of the order in which prompts are processed.
"""
import numpy as np

PRETRAIN = 1
GENERATE = 2
FINETUNE = 3
EVALUATE = 4
VALIDATE = 5
INIT = 6
HOLDOUT = 7


def stage_rng(seed: int, stage: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stage), *(int(k) for k in keys)])
