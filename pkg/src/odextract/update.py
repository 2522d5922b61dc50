"""Scale-consistency annotation updating.

A substitute detection that reappears at every scale of the same scene is
probably a real object. Such detections, when they do not overlap an
existing label, are appended to the query dataset as extra ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Collection, Mapping, Sequence

import numpy as np

from .detection import Annotation, Detection, QueryDataset
from .geometry import iou
from .substitute import PrototypeDetector
from .world import Scene

DEFAULT_SCALES = (0.5, 1.0, 1.5)


@dataclass(frozen=True)
class ConsistencyScore:
    value: float
    best_ious: tuple[float, ...]


def scale_consistency(o: Detection, per_scale: Sequence[Sequence[Detection]],
                      class_aware: bool = True) -> ConsistencyScore:
    """Min over scales of the best IoU between ``o`` and that scale's boxes.

    ``per_scale`` boxes must already be in ``o``'s reference frame. A scale
    without (matching) detections contributes 0. With ``class_aware`` only
    boxes of ``o``'s category count, so a detection whose label flips at
    some scale scores 0 there.
    """
    if len(per_scale) == 0:
        raise ValueError("need at least one scale")
    cat = o.category
    best = tuple(max((iou(o.box, d.box) for d in dets if not class_aware or d.category == cat),
                     default=0.0) for dets in per_scale)
    return ConsistencyScore(min(best), best)


def reference_index(scales: Sequence[float]) -> int:
    """Index of the scale closest to 1.0 (first one on ties)."""
    return int(np.argmin([abs(s - 1.0) for s in scales]))


def update_annotations(model: PrototypeDetector, dataset: QueryDataset, scenes: Mapping[str, Scene],
                       scales: Sequence[float] = DEFAULT_SCALES, theta_u: float = 0.5,
                       match_iou: float = 0.5, categories: Collection[int] | None = None,
                       log: list | None = None, guard_rejected: bool = True,
                       class_aware: bool = True, thresholds=None) -> QueryDataset:
    """Return a copy of ``dataset`` with scale-consistent detections added.

    Existing annotations are never changed. No victim query is issued, so the
    ledger carries over unchanged. When ``log`` is given, one record per
    touched sample is appended to it. ``thresholds`` (indexable by category)
    additionally holds each added label to the same class-confidence bar that
    victim answers had to pass.
    """
    if len(scales) == 0:
        raise ValueError("scales must be non-empty")
    out = dataset.copy()
    ref = reference_index(scales)
    for sample in dataset:
        per_scale = model.detect_multiscale(scenes[sample.sample_id], scales)
        existing = list(sample.annotations) + (list(sample.rejected) if guard_rejected else [])
        added: list[Annotation] = []
        consistency: list[float] = []
        for o in per_scale[ref]:
            if categories is not None and o.category not in categories:
                continue
            c = scale_consistency(o, per_scale, class_aware).value
            if c < theta_u:
                continue
            if thresholds is not None and o.objectness * o.p_max < thresholds[o.category]:
                continue
            if any(iou(o.box, a.box) >= match_iou for a in existing):
                continue
            ann = Annotation(o.box, o.category, float(min(c * o.objectness, 1.0)))
            added.append(ann)
            existing.append(ann)
            consistency.append(c)
        if added:
            out.extend_annotations(sample.sample_id, added)
            if log is not None:
                log.append({"sample_id": sample.sample_id,
                            "added": [a.to_row() for a in added],
                            "consistency": consistency})
    return out
