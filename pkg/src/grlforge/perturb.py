"""Robust-training input perturbation: fresh uniform L-infinity noise, clipped.

Training inputs get a fresh draw every call (i.e. every epoch); validation and
test data are always evaluated clean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RobustConfig:
    epsilon: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


def perturb(batch: np.ndarray, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """clip(v + u, 0, 1) with u ~ U(-epsilon, epsilon) i.i.d. per pixel per example."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    batch = np.asarray(batch, dtype=np.float64)
    if epsilon == 0.0:
        return batch
    noise = rng.uniform(-epsilon, epsilon, size=batch.shape)
    return np.clip(batch + noise, 0.0, 1.0)
