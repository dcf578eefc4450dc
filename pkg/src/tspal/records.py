"""Instance records and the JSON file protocol shared with external trainers.

Prediction dump::

    {"cycle": k, "images": [{"image_id": str, "instances": [
        {"class_id": int, "scores": {"cls": f, "box": f, "mask": f},
         "class_probs": [f, ...], "box": [x1, y1, x2, y2],
         "mask_rle": {"size": [H, W], "counts": [...]}}]}]}

Annotation / pseudo-label file::

    {"images": [{"image_id": str, "instances": [
        {"class_id": int, "box": [...], "mask_rle": {...},
         "provenance": "human" | "pseudo"}]}]}
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .geometry import Box, GeometryError, RleMask, rle_decode, rle_encode
from .scoring import TripletScores


class SchemaError(ValueError):
    """Input file does not follow the expected schema."""


@dataclass
class InstancePrediction:
    class_id: int
    scores: TripletScores
    box: Box
    mask: np.ndarray
    class_probs: tuple[float, ...] = ()

    def to_json(self) -> dict:
        return {
            "class_id": int(self.class_id),
            "scores": {"cls": self.scores.cls, "box": self.scores.box, "mask": self.scores.mask},
            "class_probs": [float(p) for p in self.class_probs],
            "box": self.box.to_list(),
            "mask_rle": rle_encode(self.mask).to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "InstancePrediction":
        try:
            s = obj["scores"]
            return cls(
                class_id=int(obj["class_id"]),
                scores=TripletScores(float(s["cls"]), float(s["box"]), float(s["mask"])),
                box=Box.from_list(obj["box"]),
                mask=rle_decode(RleMask.from_json(obj["mask_rle"])),
                class_probs=tuple(float(p) for p in obj.get("class_probs", ())),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad prediction instance: {exc}") from exc


@dataclass
class Annotation:
    class_id: int
    box: Box
    mask: np.ndarray
    provenance: str = "human"
    scores: TripletScores | None = None

    def to_json(self) -> dict:
        out: dict[str, Any] = {
            "class_id": int(self.class_id),
            "box": self.box.to_list(),
            "mask_rle": rle_encode(self.mask).to_json(),
            "provenance": self.provenance,
        }
        if self.scores is not None:
            out["scores"] = {"cls": self.scores.cls, "box": self.scores.box, "mask": self.scores.mask}
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Annotation":
        try:
            prov = obj.get("provenance", "human")
            if prov not in ("human", "pseudo"):
                raise SchemaError(f"unknown provenance {prov!r}")
            s = obj.get("scores")
            return cls(
                class_id=int(obj["class_id"]),
                box=Box.from_list(obj["box"]),
                mask=rle_decode(RleMask.from_json(obj["mask_rle"])),
                provenance=prov,
                scores=TripletScores(float(s["cls"]), float(s["box"]), float(s["mask"])) if s else None,
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, SchemaError):
                raise
            raise SchemaError(f"bad annotation instance: {exc}") from exc


@dataclass
class PredictionDump:
    cycle: int
    images: dict[str, list[InstancePrediction]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "cycle": self.cycle,
            "images": [
                {"image_id": i, "instances": [p.to_json() for p in insts]}
                for i, insts in self.images.items()
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PredictionDump":
        if not isinstance(obj, dict) or "images" not in obj:
            raise SchemaError("prediction dump needs an 'images' list")
        images: dict[str, list[InstancePrediction]] = {}
        for entry in obj["images"]:
            try:
                image_id = str(entry["image_id"])
                insts = entry["instances"]
            except (KeyError, TypeError) as exc:
                raise SchemaError(f"bad image entry in prediction dump: {exc}") from exc
            if image_id in images:
                raise SchemaError(f"duplicate image id {image_id!r} in prediction dump")
            images[image_id] = [InstancePrediction.from_json(p) for p in insts]
        return cls(int(obj.get("cycle", 0)), images)


def annotations_to_json(images: dict[str, list[Annotation]]) -> dict:
    return {
        "images": [
            {"image_id": i, "instances": [a.to_json() for a in anns]} for i, anns in images.items()
        ]
    }


def annotations_from_json(obj: dict) -> dict[str, list[Annotation]]:
    if not isinstance(obj, dict) or "images" not in obj:
        raise SchemaError("annotation file needs an 'images' list")
    out: dict[str, list[Annotation]] = {}
    for entry in obj["images"]:
        try:
            image_id = str(entry["image_id"])
            insts = entry["instances"]
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"bad image entry in annotation file: {exc}") from exc
        if image_id in out:
            raise SchemaError(f"duplicate image id {image_id!r} in annotation file")
        out[image_id] = [Annotation.from_json(a) for a in insts]
    return out


def read_json(path) -> Any:
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from exc


def dumps(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_atomic(path, text: str) -> None:
    """Write ``text`` to ``path`` via a temp file in the same directory and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj: Any) -> None:
    write_atomic(path, dumps(obj))


__all__ = [
    "Annotation",
    "GeometryError",
    "InstancePrediction",
    "PredictionDump",
    "SchemaError",
    "annotations_from_json",
    "annotations_to_json",
    "dumps",
    "read_json",
    "write_atomic",
    "write_json",
]
