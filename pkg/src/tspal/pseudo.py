"""Threshold-gated pseudo-labels over the unlabeled remainder of a cycle."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .geometry import DEFAULT_MASK_THRESHOLD, binarize
from .records import Annotation, InstancePrediction, annotations_to_json
from .scoring import TripletScores

# "all": keep only if every score clears its threshold.
# "any": drop only if every score falls below its threshold.
GATE_RULES = ("all", "any")


@dataclass(frozen=True)
class GateThresholds:
    sigma_c: float = 0.9
    sigma_b: float = 0.9
    sigma_m: float = 0.8

    def __post_init__(self):
        for name in ("sigma_c", "sigma_b", "sigma_m"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def to_json(self) -> dict:
        return {"sigma_c": self.sigma_c, "sigma_b": self.sigma_b, "sigma_m": self.sigma_m}


def gate_instance(t: TripletScores, g: GateThresholds, rule: str = "all") -> bool:
    if rule == "all":
        return t.cls > g.sigma_c and t.box > g.sigma_b and t.mask > g.sigma_m
    if rule == "any":
        return not (t.cls < g.sigma_c and t.box < g.sigma_b and t.mask < g.sigma_m)
    raise ValueError(f"unknown gate rule {rule!r}; expected one of {GATE_RULES}")


@dataclass
class PseudoLabelSet:
    images: dict[str, list[Annotation]] = field(default_factory=dict)

    @property
    def instance_count(self) -> int:
        return sum(len(v) for v in self.images.values())

    def to_json(self) -> dict:
        return annotations_to_json(self.images)


def _as_binary(mask, threshold: float) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype == bool:
        return mask
    return binarize(mask, threshold)


def build_pseudo_set(
    predictions: Mapping[str, list[InstancePrediction]],
    d_semi: Iterable[str],
    thresholds: GateThresholds = GateThresholds(),
    rule: str = "all",
    mask_threshold: float = DEFAULT_MASK_THRESHOLD,
    drop_empty: bool = False,
) -> PseudoLabelSet:
    """Gate every instance predicted on ``d_semi`` and keep the survivors.

    Images whose instances all fail stay in the set with no annotations
    unless ``drop_empty`` is set.
    """
    d_semi = set(d_semi)
    unknown = sorted(set(predictions) - d_semi)
    if unknown:
        raise ValueError(f"predictions reference images outside the pseudo-label pool: {unknown}")
    out: dict[str, list[Annotation]] = {}
    for image_id in sorted(d_semi):
        kept = [
            Annotation(
                class_id=p.class_id,
                box=p.box,
                mask=_as_binary(p.mask, mask_threshold),
                provenance="pseudo",
                scores=p.scores,
            )
            for p in predictions.get(image_id, [])
            if gate_instance(p.scores, thresholds, rule)
        ]
        if kept or not drop_empty:
            out[image_id] = kept
    return PseudoLabelSet(out)
