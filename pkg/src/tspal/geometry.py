"""Boxes, binary masks, the COCO-style uncompressed RLE codec, IoU and NMS.

Masks are plain numpy arrays: ``bool`` of shape ``(H, W)`` for binary masks
and floating point in ``[0, 1]`` for soft masks.  Boxes are continuous
``(x1, y1, x2, y2)`` corner coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_MASK_THRESHOLD = 0.3
DEFAULT_NMS_THRESHOLD = 0.5


class GeometryError(ValueError):
    """Malformed geometric input (bad RLE, mismatched shapes, bad threshold)."""


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) and c >= 0 for c in coords):
            raise GeometryError(f"box coordinates must be finite and non-negative: {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise GeometryError(f"box corners out of order: {coords}")

    @classmethod
    def from_list(cls, xs: Sequence[float]) -> "Box":
        if len(xs) != 4:
            raise GeometryError(f"box needs 4 coordinates, got {len(xs)}")
        return cls(*(float(x) for x in xs))

    def to_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True)
class RleMask:
    """Uncompressed run-length encoding, column-major, leading background run."""

    height: int
    width: int
    counts: tuple[int, ...]

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise GeometryError(f"mask dimensions must be >= 1, got {self.height}x{self.width}")
        if any(c < 0 for c in self.counts):
            raise GeometryError("RLE counts must be non-negative")
        total = sum(self.counts)
        if total != self.height * self.width:
            raise GeometryError(
                f"RLE counts sum to {total}, expected {self.height * self.width}"
            )

    def to_json(self) -> dict:
        return {"size": [self.height, self.width], "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: dict) -> "RleMask":
        try:
            h, w = obj["size"]
            counts = tuple(int(c) for c in obj["counts"])
        except (KeyError, TypeError, ValueError) as exc:
            raise GeometryError(f"malformed RLE object: {obj!r}") from exc
        return cls(int(h), int(w), counts)


def as_binary_mask(mask) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise GeometryError(f"mask must be a non-empty 2-D grid, got shape {arr.shape}")
    return arr.astype(bool, copy=False)


def rle_encode(mask) -> RleMask:
    mask = as_binary_mask(mask)
    h, w = mask.shape
    flat = mask.ravel(order="F")
    # positions where the value changes, plus both ends
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return RleMask(h, w, tuple(counts))


def rle_decode(rle: RleMask) -> np.ndarray:
    if sum(rle.counts) != rle.height * rle.width:
        raise GeometryError("RLE counts do not cover the mask")
    values = np.arange(len(rle.counts)) % 2 == 1
    flat = np.repeat(values, rle.counts)
    return flat.reshape((rle.height, rle.width), order="F")


def binarize(soft, threshold: float = DEFAULT_MASK_THRESHOLD) -> np.ndarray:
    """Foreground where the soft value is strictly above ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise GeometryError(f"binarization threshold must lie in (0, 1), got {threshold}")
    soft = np.asarray(soft, dtype=float)
    if soft.ndim != 2 or soft.size == 0:
        raise GeometryError(f"soft mask must be a non-empty 2-D grid, got shape {soft.shape}")
    if soft.min() < 0.0 or soft.max() > 1.0:
        raise GeometryError("soft mask values must lie in [0, 1]")
    return soft > threshold


def mask_iou(a, b) -> float:
    a = as_binary_mask(a)
    b = as_binary_mask(b)
    if a.shape != b.shape:
        raise GeometryError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 0.0
    return int(np.count_nonzero(a & b)) / union


def soft_mask_iou(soft, b) -> float:
    """Fuzzy Jaccard index sum(min)/sum(max); equals ``mask_iou`` on 0/1 inputs."""
    soft = np.asarray(soft, dtype=float)
    b = np.asarray(b, dtype=float)
    if soft.shape != b.shape:
        raise GeometryError(f"mask shapes differ: {soft.shape} vs {b.shape}")
    if soft.size and (min(soft.min(), b.min()) < 0.0 or max(soft.max(), b.max()) > 1.0):
        raise GeometryError("soft mask values must lie in [0, 1]")
    union = float(np.maximum(soft, b).sum())
    if union == 0.0:
        return 0.0
    return float(np.minimum(soft, b).sum()) / union


def box_iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def nms(
    boxes: Sequence[Box],
    scores: Sequence[float],
    class_ids: Sequence[int],
    iou_threshold: float = DEFAULT_NMS_THRESHOLD,
) -> list[int]:
    """Greedy per-class non-maximum suppression.

    Candidates are visited by descending score (lower index first on ties);
    a candidate is suppressed when its IoU with an already kept box of the
    same class exceeds ``iou_threshold``.  Returns kept indices in visiting
    order.
    """
    if not len(boxes) == len(scores) == len(class_ids):
        raise GeometryError("boxes, scores and class_ids must have equal length")
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept: list[int] = []
    kept_by_class: dict[int, list[int]] = {}
    for i in order:
        same = kept_by_class.setdefault(class_ids[i], [])
        if any(box_iou(boxes[i], boxes[j]) > iou_threshold for j in same):
            continue
        same.append(i)
        kept.append(i)
    return kept


def rasterize_box(box: Box, height: int, width: int) -> np.ndarray:
    """Pixels whose centres fall inside ``box``."""
    ys = np.arange(height) + 0.5
    xs = np.arange(width) + 0.5
    inside_y = (ys >= box.y1) & (ys < box.y2)
    inside_x = (xs >= box.x1) & (xs < box.x2)
    return inside_y[:, None] & inside_x[None, :]


def rasterize_ellipse(box: Box, height: int, width: int) -> np.ndarray:
    """Pixels whose centres fall inside the ellipse inscribed in ``box``."""
    if box.width <= 0 or box.height <= 0:
        return np.zeros((height, width), dtype=bool)
    cy = (box.y1 + box.y2) / 2
    cx = (box.x1 + box.x2) / 2
    ry = box.height / 2
    rx = box.width / 2
    ys = (np.arange(height) + 0.5 - cy) / ry
    xs = (np.arange(width) + 0.5 - cx) / rx
    return ys[:, None] ** 2 + xs[None, :] ** 2 <= 1.0


def mask_to_box(mask) -> Box | None:
    """Tight pixel-aligned box around the foreground, or None if empty."""
    mask = as_binary_mask(mask)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return Box(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))
