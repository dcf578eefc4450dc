"""Reference numerics for the supervised, pseudo-label and total losses.

Component forms follow Faster/Mask R-CNN: cross-entropy for classification,
smooth-L1 summed over the four box deltas, mean per-pixel binary
cross-entropy for the mask, and squared error for both IoU heads.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import (
    DEFAULT_MASK_THRESHOLD,
    Box,
    GeometryError,
    binarize,
    box_iou,
    mask_iou,
    soft_mask_iou,
)

EPS = 1e-7
POSITIVE_IOU = 0.5
COMPONENTS = ("cls", "box", "mask", "box_iou", "mask_iou")


def _clamp(p):
    return np.clip(p, EPS, 1.0 - EPS)


def cross_entropy(p, label: int) -> float:
    p = np.asarray(p, dtype=float)
    return float(-np.log(_clamp(p[label])))


def smooth_l1(t, t_star) -> float:
    d = np.abs(np.asarray(t, dtype=float) - np.asarray(t_star, dtype=float))
    return float(np.where(d < 1.0, 0.5 * d * d, d - 0.5).sum())


def smooth_l1_grad(t, t_star) -> np.ndarray:
    """d smooth_l1 / d t."""
    d = np.asarray(t, dtype=float) - np.asarray(t_star, dtype=float)
    return np.where(np.abs(d) < 1.0, d, np.sign(d))


def mask_bce(m, m_star) -> float:
    m = _clamp(np.asarray(m, dtype=float))
    y = np.asarray(m_star, dtype=float)
    if m.shape != y.shape:
        raise GeometryError(f"mask shapes differ: {m.shape} vs {y.shape}")
    return float(-(y * np.log(m) + (1 - y) * np.log(1 - m)).mean())


def l2(x: float, x_star: float) -> float:
    return (x - x_star) ** 2


def l2_grad(x: float, x_star: float) -> float:
    """d l2 / d x."""
    return 2.0 * (x - x_star)


@dataclass
class RoiRecord:
    """One sampled RoI / anchor.

    ``label`` is the classification target index; it defaults to ``p_star``
    (binary objectness).  Regression, mask and IoU fields may be omitted for
    negatives because every term that reads them is gated by ``p_star``.
    """

    p: np.ndarray
    p_star: int
    label: Optional[int] = None
    t: Optional[np.ndarray] = None
    t_star: Optional[np.ndarray] = None
    m: Optional[np.ndarray] = None
    m_star: Optional[np.ndarray] = None
    biou: float = 0.0
    biou_star: float = 0.0
    miou: float = 0.0
    miou_star: float = 0.0

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        if self.p_star not in (0, 1):
            raise ValueError(f"p_star must be 0 or 1, got {self.p_star}")
        if abs(self.p.sum() - 1.0) > 1e-6:
            raise ValueError(f"class probabilities must sum to 1, got {self.p.sum()}")
        for name in ("biou", "biou_star", "miou", "miou_star"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.label is None:
            self.label = self.p_star
        if self.p_star == 1 and (self.t is None or self.t_star is None or self.m is None or self.m_star is None):
            raise ValueError("positive records need t, t_star, m and m_star")
        if self.t is not None:
            self.t = np.asarray(self.t, dtype=float)
        if self.t_star is not None:
            self.t_star = np.asarray(self.t_star, dtype=float)


@dataclass
class LossBatch:
    records: list[RoiRecord]
    n_cls: float = 1.0
    n_box: float = 1.0
    n_mask: float = 1.0
    lam: float = 1.0
    beta: float = 0.01

    def __post_init__(self):
        for name in ("n_cls", "n_box", "n_mask"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lam < 0 or self.beta < 0:
            raise ValueError("lambda and beta must be non-negative")


def _check(batch: LossBatch) -> None:
    if not batch.records:
        raise ValueError("loss batch is empty")


def supervised_components(batch: LossBatch) -> dict[str, float]:
    """Per-term values of the supervised loss, each already normalized.

    The IoU-head terms are reported before multiplication by lambda.
    """
    _check(batch)
    cls = box = mask = biou = miou = 0.0
    for r in batch.records:
        cls += cross_entropy(r.p, r.label)
        if r.p_star:
            box += smooth_l1(r.t, r.t_star)
            mask += mask_bce(r.m, r.m_star)
            biou += l2(r.biou, r.biou_star)
            miou += l2(r.miou, r.miou_star)
    return {
        "cls": cls / batch.n_cls,
        "box": box / batch.n_box,
        "mask": mask / batch.n_mask,
        "box_iou": biou / batch.n_box,
        "mask_iou": miou / batch.n_mask,
    }


def supervised_loss(batch: LossBatch) -> float:
    c = supervised_components(batch)
    return c["cls"] + c["box"] + c["mask"] + batch.lam * (c["box_iou"] + c["mask_iou"])


def semi_components(batch: LossBatch) -> dict[str, float]:
    _check(batch)
    cls = box = mask = 0.0
    for r in batch.records:
        if r.p_star:
            cls += cross_entropy(r.p, r.label)
            box += smooth_l1(r.t, r.t_star)
            mask += mask_bce(r.m, r.m_star)
    return {"cls": cls / batch.n_cls, "box": box / batch.n_box, "mask": mask / batch.n_mask}


def semi_loss(batch: LossBatch) -> float:
    return sum(semi_components(batch).values())


def total_loss(l_sup: float, l_semi: float, beta: float = 0.01) -> float:
    if l_sup < 0 or l_semi < 0:
        raise ValueError("loss components must be non-negative")
    return l_sup + beta * l_semi


def beta_at_cycle(beta: float, cycle: int, max_cycles: int, schedule: str = "constant") -> float:
    """Balance weight for ``cycle`` (1-based).

    ``linear`` decays from ``beta`` at cycle 1 towards zero at ``max_cycles + 1``.
    """
    if schedule == "constant":
        return beta
    if schedule == "linear":
        if max_cycles < 1:
            raise ValueError("max_cycles must be >= 1")
        return beta * max(0.0, 1.0 - (cycle - 1) / max_cycles)
    raise ValueError(f"unknown beta schedule {schedule!r}")


@dataclass
class SupervisedGradients:
    biou: list[float] = field(default_factory=list)
    miou: list[float] = field(default_factory=list)
    t: list[np.ndarray] = field(default_factory=list)


def supervised_gradients(batch: LossBatch) -> SupervisedGradients:
    """Analytic d(supervised_loss) w.r.t. each record's biou, miou and t."""
    _check(batch)
    g = SupervisedGradients()
    for r in batch.records:
        if r.p_star:
            g.biou.append(batch.lam * l2_grad(r.biou, r.biou_star) / batch.n_box)
            g.miou.append(batch.lam * l2_grad(r.miou, r.miou_star) / batch.n_mask)
            g.t.append(smooth_l1_grad(r.t, r.t_star) / batch.n_box)
        else:
            g.biou.append(0.0)
            g.miou.append(0.0)
            g.t.append(np.zeros(4) if r.t is None else np.zeros_like(r.t))
    return g


def iou_targets(
    pred_box: Box,
    pred_mask,
    gt_box: Box,
    gt_mask,
    mask_threshold: float = DEFAULT_MASK_THRESHOLD,
    mask_mode: str = "binary",
) -> tuple[float, float]:
    """Training targets for the box-IoU and mask-IoU heads.

    ``mask_mode="binary"`` binarizes a soft ``pred_mask`` at ``mask_threshold``
    (a boolean mask is taken as already binarized); ``"soft"`` uses the fuzzy
    Jaccard index of the probabilities instead.
    """
    pred_mask = np.asarray(pred_mask)
    if mask_mode == "soft":
        return box_iou(pred_box, gt_box), soft_mask_iou(pred_mask, gt_mask)
    if mask_mode != "binary":
        raise ValueError(f"unknown mask_mode {mask_mode!r}; expected 'binary' or 'soft'")
    if pred_mask.dtype != bool:
        pred_mask = binarize(pred_mask, mask_threshold)
    return box_iou(pred_box, gt_box), mask_iou(pred_mask, gt_mask)


def is_positive(pred_box: Box, gt_box: Box) -> bool:
    return box_iou(pred_box, gt_box) > POSITIVE_IOU


# JSON fixtures -------------------------------------------------------------

def record_from_json(obj: dict) -> RoiRecord:
    def arr(key):
        v = obj.get(key)
        return None if v is None else np.asarray(v, dtype=float)

    m_star = obj.get("m_star")
    return RoiRecord(
        p=np.asarray(obj["p"], dtype=float),
        p_star=int(obj["p_star"]),
        label=obj.get("label"),
        t=arr("t"),
        t_star=arr("t_star"),
        m=arr("m"),
        m_star=None if m_star is None else np.asarray(m_star, dtype=bool),
        biou=float(obj.get("biou", 0.0)),
        biou_star=float(obj.get("biou_star", 0.0)),
        miou=float(obj.get("miou", 0.0)),
        miou_star=float(obj.get("miou_star", 0.0)),
    )


def batch_from_json(obj: dict, lam: float = 1.0, beta: float = 0.01) -> LossBatch:
    return LossBatch(
        records=[record_from_json(r) for r in obj["records"]],
        n_cls=float(obj.get("n_cls", 1)),
        n_box=float(obj.get("n_box", 1)),
        n_mask=float(obj.get("n_mask", 1)),
        lam=float(obj.get("lambda", lam)),
        beta=float(obj.get("beta", beta)),
    )


def evaluate_fixture(obj: dict) -> dict:
    """Evaluate a loss fixture ``{"lambda", "beta", "supervised": batch, "semi": batch}``.

    Either batch may be absent; a missing one contributes zero.
    """
    if obj.get("supervised") is None and obj.get("semi") is None:
        raise ValueError("loss fixture needs a 'supervised' and/or 'semi' batch")
    lam = float(obj.get("lambda", 1.0))
    beta = float(obj.get("beta", 0.01))
    out: dict = {"lambda": lam, "beta": beta}
    l_sup = l_semi = 0.0
    if obj.get("supervised") is not None:
        batch = batch_from_json(obj["supervised"], lam, beta)
        out["supervised_components"] = supervised_components(batch)
        l_sup = supervised_loss(batch)
    if obj.get("semi") is not None:
        batch = batch_from_json(obj["semi"], lam, beta)
        out["semi_components"] = semi_components(batch)
        l_semi = semi_loss(batch)
    out["supervised"] = l_sup
    out["semi"] = l_semi
    out["total"] = total_loss(l_sup, l_semi, beta)
    return out
