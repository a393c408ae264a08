"""Axis-aligned box arithmetic shared by every stage of the pipeline.

Boxes are half-open rectangles ``[x1, x2) x [y1, y2)`` in continuous pixel
coordinates, so a box with integer corners covers exactly
``(x2 - x1) * (y2 - y1)`` pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class InvalidBoxError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidBoxError(f"non-finite coordinate in {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InvalidBoxError(f"box {coords} has no area")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def to_dict(self) -> dict[str, float]:
        return {"x1": self.x1, "y1": self.y1, "x2": self.x2, "y2": self.y2}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundingBox":
        return cls(float(d["x1"]), float(d["y1"]), float(d["x2"]), float(d["y2"]))

    def translate(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def clip(self, width: float, height: float) -> "BoundingBox | None":
        """Clamp to ``[0, width) x [0, height)``; None if nothing is left."""
        x1, y1 = max(self.x1, 0.0), max(self.y1, 0.0)
        x2, y2 = min(self.x2, float(width)), min(self.y2, float(height))
        if x1 >= x2 or y1 >= y2:
            return None
        return BoundingBox(x1, y1, x2, y2)


@dataclass(frozen=True)
class ScoredBox:
    box: BoundingBox
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def area(b: BoundingBox) -> float:
    return (b.x2 - b.x1) * (b.y2 - b.y1)


def intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection area over union area; exactly 1.0 for identical boxes."""
    if a == b:
        return 1.0
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (area(a) + area(b) - inter)


def coverage(gt: BoundingBox, prop: BoundingBox) -> float:
    """Fraction of ``gt`` that lies inside ``prop``."""
    return intersection_area(gt, prop) / area(gt)


def max_iou(prop: BoundingBox, gts: Sequence[BoundingBox]) -> tuple[float, int]:
    """Best IoU of ``prop`` against ``gts`` and the lowest index attaining it.

    Returns ``(0.0, -1)`` when ``gts`` is empty.
    """
    best, best_idx = 0.0, -1
    for k, gt in enumerate(gts):
        v = iou(prop, gt)
        if v > best or best_idx < 0:
            best, best_idx = v, k
    return best, best_idx


def max_coverage(prop: BoundingBox, gts: Sequence[BoundingBox]) -> float:
    return max((coverage(gt, prop) for gt in gts), default=0.0)


def nms(dets: Sequence[ScoredBox], thresh: float) -> list[int]:
    """Greedy non-maximum suppression.

    Boxes are visited by descending score (lower index first on ties). A box
    is dropped when its IoU with any already kept box is ``>= thresh``.
    Returns the kept indices in the order they were kept.
    """
    if not 0.0 <= thresh <= 1.0:
        raise ValueError(f"nms threshold {thresh} outside [0, 1]")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    keep: list[int] = []
    for i in order:
        if all(iou(dets[i].box, dets[k].box) < thresh for k in keep):
            keep.append(i)
    return keep


def boxes_to_array(boxes: Iterable[BoundingBox]) -> np.ndarray:
    arr = np.array([b.as_tuple() for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)
