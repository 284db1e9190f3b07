"""Keyed random streams so every (seed, frame, purpose) triple is reproducible
independently of worker count or evaluation order."""
import numpy as np

GENERATOR_NAME = "numpy Generator(Philox4x64) keyed by SeedSequence; ziggurat normals"

TX = 1
CHANNEL = 2
DETECTOR = 3
EXCESS = 4
FADING = 5


def stream(seed: int, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed), *[int(k) for k in keys]])
    return np.random.Generator(np.random.Philox(ss))
