"""Axis-aligned bounding boxes in continuous scene coordinates.

Boxes use the corner convention ``(x1, y1, x2, y2)`` with no pixel
quantization, so ``area = (x2 - x1) * (y2 - y1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence, TypeVar


@dataclass(frozen=True, order=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = tuple(float(c) for c in (self.x1, self.y1, self.x2, self.y2))
        for name, c in zip(("x1", "y1", "x2", "y2"), coords):
            object.__setattr__(self, name, c)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"inverted box: {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


def area(b: BBox) -> float:
    return b.area


def intersection(a: BBox, b: BBox) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0.0 or h <= 0.0:
        return 0.0
    return w * h


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 when the union has zero area."""
    inter = intersection(a, b)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def scale_box(b: BBox, s: float) -> BBox:
    """Scale ``b`` about the scene origin by ``s`` in both axes."""
    if not math.isfinite(s) or s <= 0.0:
        raise ValueError(f"scale factor must be finite and positive, got {s}")
    return BBox(b.x1 * s, b.y1 * s, b.x2 * s, b.y2 * s)


T = TypeVar("T")


def nms_order_key(det) -> tuple:
    """Total order used by :func:`nms`: confidence desc, category asc, box asc."""
    return (-det.confidence, det.category, det.box.as_tuple())


def nms(dets: Sequence[T], iou_thresh: float = 0.5,
        key: Callable[[T], tuple] = nms_order_key) -> list[T]:
    """Class-wise greedy non-maximum suppression.

    Items must expose ``box``, ``category`` and ``confidence``. A candidate is
    kept iff its IoU with every already-kept item of the same category is
    strictly below ``iou_thresh``. Survivors are returned in the sort order.
    """
    kept: list[T] = []
    kept_by_cat: dict[int, list[BBox]] = {}
    for det in sorted(dets, key=key):
        same = kept_by_cat.setdefault(det.category, [])
        if all(iou(det.box, k) < iou_thresh for k in same):
            kept.append(det)
            same.append(det.box)
    return kept
