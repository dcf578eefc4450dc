"""mAP@0.5 for instance segmentation (mask IoU) or detection (box IoU).

Predictions are ranked by their classification score.  Within an image and
class, predictions are visited by descending score and each takes the
still-unmatched ground truth with the highest IoU at or above the threshold.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .geometry import box_iou, mask_iou

IOU_THRESHOLD = 0.5
KINDS = ("mask", "box")
INTERPOLATIONS = ("all", "101")


@dataclass
class MatchResult:
    """Per-prediction outcome, in flattened input order (image order, then instance)."""

    class_ids: list[int] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)
    tp: list[bool] = field(default_factory=list)
    image_ids: list[str] = field(default_factory=list)
    n_gt: dict[int, int] = field(default_factory=dict)


@dataclass
class EvalResult:
    ap: dict[int, float]
    n_gt: dict[int, int]
    kind: str = "mask"
    # exact per-class AP; when present the mean is taken before rounding
    exact: dict[int, Fraction] = field(default_factory=dict, repr=False)

    @property
    def map(self) -> float:
        if self.exact:
            return float(sum(self.exact.values()) / len(self.exact))
        return float(np.mean(list(self.ap.values())))

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "iou_threshold": IOU_THRESHOLD,
            "per_class": [
                {"class_id": c, "ap": self.ap[c], "n_gt": self.n_gt[c]} for c in sorted(self.ap)
            ],
            "mAP": self.map,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class_id", "ap", "n_gt"])
        for c in sorted(self.ap):
            w.writerow([c, repr(self.ap[c]), self.n_gt[c]])
        w.writerow(["mAP", repr(self.map), sum(self.n_gt.values())])
        return buf.getvalue()


def _ranking_score(p) -> float:
    return p.scores.cls


def _iou(pred, gt, kind: str) -> float:
    if kind == "mask":
        return mask_iou(pred.mask, gt.mask)
    if kind == "box":
        return box_iou(pred.box, gt.box)
    raise ValueError(f"unknown IoU kind {kind!r}; expected one of {KINDS}")


def match_image(preds: Sequence, gts: Sequence, kind: str = "mask",
                iou_threshold: float = IOU_THRESHOLD) -> list[bool]:
    """TP flags for one image's predictions, in input order."""
    flags = [False] * len(preds)
    matched = [False] * len(gts)
    order = sorted(range(len(preds)), key=lambda i: (-_ranking_score(preds[i]), i))
    for i in order:
        p = preds[i]
        best, best_iou = -1, iou_threshold
        for j, g in enumerate(gts):
            if matched[j] or g.class_id != p.class_id:
                continue
            iou = _iou(p, g, kind)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = j, iou
        if best >= 0:
            matched[best] = True
            flags[i] = True
    return flags


def _check_ids(preds: Mapping, gts: Mapping) -> None:
    extra = set(preds) - set(gts)
    if extra:
        shown = sorted(extra)[:5]
        raise ValueError(f"predictions for images without ground truth: {shown} ({len(extra)} total)")


def match_predictions(preds: Mapping[str, Sequence], gts: Mapping[str, Sequence],
                      kind: str = "mask", iou_threshold: float = IOU_THRESHOLD) -> MatchResult:
    if kind not in KINDS:
        raise ValueError(f"unknown IoU kind {kind!r}; expected one of {KINDS}")
    _check_ids(preds, gts)
    res = MatchResult()
    for image_id in sorted(gts):
        for g in gts[image_id]:
            res.n_gt[g.class_id] = res.n_gt.get(g.class_id, 0) + 1
        image_preds = preds.get(image_id, [])
        flags = match_image(image_preds, gts[image_id], kind, iou_threshold)
        for p, f in zip(image_preds, flags):
            res.class_ids.append(p.class_id)
            res.scores.append(_ranking_score(p))
            res.tp.append(f)
            res.image_ids.append(image_id)
    return res


def _block_counts(scores: Sequence[float], tp: Sequence[bool]) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative TP count and rank at the end of each equal-score block, descending."""
    scores = np.asarray(scores, dtype=float)
    tp = np.asarray(tp, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    ctp = np.cumsum(tp[order])
    n = np.arange(1, len(s) + 1)
    last = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    return ctp[last], n[last]


def precision_recall(scores: Sequence[float], tp: Sequence[bool], n_gt: int):
    """Precision and recall at each distinct score threshold, descending.

    Equal-score predictions enter the ranking together.
    """
    ctp, n = _block_counts(scores, tp)
    return ctp / n, ctp / n_gt


def exact_average_precision(match: MatchResult, class_id: int,
                            interpolation: str = "all") -> Fraction:
    """AP in rational arithmetic; counts are integers, so this is exact."""
    if interpolation not in INTERPOLATIONS:
        raise ValueError(f"unknown interpolation {interpolation!r}; expected one of {INTERPOLATIONS}")
    n_gt = match.n_gt.get(class_id, 0)
    if n_gt == 0:
        raise ValueError(f"class {class_id} has no ground truth")
    sel = [i for i, c in enumerate(match.class_ids) if c == class_id]
    if not sel:
        return Fraction(0)
    ctp, n = _block_counts([match.scores[i] for i in sel], [match.tp[i] for i in sel])
    ctp, n = ctp.tolist(), n.tolist()
    precision = [Fraction(t, k) for t, k in zip(ctp, n)]
    if interpolation == "all":
        # running max from the right, then sum precision over recall steps
        interp = precision[:]
        for k in range(len(interp) - 2, -1, -1):
            interp[k] = max(interp[k], interp[k + 1])
        steps = [b - a for a, b in zip([0] + ctp[:-1], ctp)]
        return sum((Fraction(d, n_gt) * p for d, p in zip(steps, interp)), Fraction(0))
    total = Fraction(0)
    for i in range(101):
        # recall >= i/100
        reached = [p for t, p in zip(ctp, precision) if 100 * t >= i * n_gt]
        total += max(reached, default=Fraction(0))
    return total / 101


def average_precision(match: MatchResult, class_id: int, interpolation: str = "all") -> float:
    return float(exact_average_precision(match, class_id, interpolation))


def map50(preds: Mapping[str, Sequence], gts: Mapping[str, Sequence], kind: str = "mask",
          interpolation: str = "all", iou_threshold: float = IOU_THRESHOLD) -> EvalResult:
    if preds and gts and not set(preds) & set(gts):
        raise ValueError("prediction and ground-truth image id sets are disjoint")
    match = match_predictions(preds, gts, kind, iou_threshold)
    if not match.n_gt:
        raise ValueError("ground truth contains no instances")
    exact = {c: exact_average_precision(match, c, interpolation) for c in sorted(match.n_gt)}
    return EvalResult(ap={c: float(v) for c, v in exact.items()},
                      n_gt=dict(sorted(match.n_gt.items())), kind=kind, exact=exact)
