"""Framework-free evaluators for the two adversarial training objectives.

Both objectives share a standard adversarial term over discriminator
probabilities plus an L1 reconstruction term: the "realistic" objective pulls
the generator's output back toward the blended image it was fed, and the
abnormal-to-normal objective pulls the generated normal toward the realistic
pseudo-normal target. Scores are clamped away from {0, 1} before the log so
every value is finite and bit-reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .image import Image, l1_mean

_CLAMP = 1e-7


@dataclass(frozen=True)
class DiscriminatorScores:
    real_scores: tuple[float, ...]
    fake_scores: tuple[float, ...]

    def __post_init__(self):
        for name, scores in (("real", self.real_scores), ("fake", self.fake_scores)):
            if not scores:
                raise ValueError(f"{name}_scores must be non-empty")
            arr = np.asarray(scores, dtype=np.float64)
            if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
                raise ValueError(f"{name}_scores must be probabilities in [0, 1]")
        object.__setattr__(self, "real_scores", tuple(float(s) for s in self.real_scores))
        object.__setattr__(self, "fake_scores", tuple(float(s) for s in self.fake_scores))


def adversarial_term(s: DiscriminatorScores) -> float:
    """mean(log real) + mean(log (1 - fake)), clamped to [1e-7, 1 - 1e-7]."""
    real = np.clip(np.asarray(s.real_scores), _CLAMP, 1.0 - _CLAMP)
    fake = np.clip(1.0 - np.asarray(s.fake_scores), _CLAMP, 1.0 - _CLAMP)
    return float(np.mean(np.log(real)) + np.mean(np.log(fake)))


def realistic_loss(s: DiscriminatorScores, i_b: Image, g_ib: Image) -> float:
    """Adversarial term plus L1 between the blended image and its regeneration."""
    return adversarial_term(s) + l1_mean(i_b, g_ib)


def abn2nor_loss(s: DiscriminatorScores, g_realistic_ib: Image, g_x: Image) -> float:
    """Adversarial term plus L1 between the pseudo-normal target and the generation."""
    return adversarial_term(s) + l1_mean(g_realistic_ib, g_x)
