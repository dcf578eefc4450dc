"""Triplet uncertainty scores, the class-entropy baseline and ranked selection.

Lower triplet scores mean higher uncertainty.  Entropy runs the other way:
higher entropy is more uncertain.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

PROB_SUM_TOL = 1e-6


@dataclass(frozen=True)
class TripletScores:
    cls: float
    box: float
    mask: float

    def __post_init__(self):
        for name in ("cls", "box", "mask"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} score must lie in [0, 1], got {v}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.cls, self.box, self.mask)


def _penalized_mean(values) -> float:
    # exp(-std) * mean with population std
    arr = np.asarray(values, dtype=float)
    return float(math.exp(-arr.std()) * arr.mean())


def instance_score(t: TripletScores) -> float:
    return _penalized_mean(t.as_tuple())


def image_score(instance_scores: Sequence[float]) -> float:
    """Aggregate instance scores of one image; an empty image scores 0."""
    if len(instance_scores) == 0:
        return 0.0
    return _penalized_mean(instance_scores)


def shannon_entropy(probs) -> float:
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("probability vector must be 1-D and non-empty")
    if np.any(p < 0) or abs(p.sum() - 1.0) > PROB_SUM_TOL:
        raise ValueError(f"probability vector is not normalized (sum={p.sum():.8f})")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def entropy_image_score(class_probs: Iterable, num_classes: int) -> float:
    """Mean softmax entropy (nats) over an image's instances.

    An image without instances gets the maximum entropy ``ln(num_classes)``.
    """
    ents = [shannon_entropy(p) for p in class_probs]
    if not ents:
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        return math.log(num_classes)
    return float(np.mean(ents))


def select_most_uncertain(
    scores: Mapping[str, float], b: int, higher_is_uncertain: bool = False
) -> list[str]:
    """Ids of the ``b`` most uncertain images, most uncertain first.

    Ties are broken by ascending id.
    """
    if b < 0:
        raise ValueError(f"selection size must be non-negative, got {b}")
    if b > len(scores):
        raise ValueError(f"cannot select {b} images from a pool of {len(scores)}")
    sign = -1.0 if higher_is_uncertain else 1.0
    ranked = sorted(scores, key=lambda i: (sign * scores[i], i))
    return ranked[:b]
