"""Detection-domain vocabulary shared by the victim, the substitute and the
evaluator, plus the query dataset container and its JSON-lines snapshot."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .geometry import BBox, iou

PROVENANCES = ("stage-1", "stage-2", "updated")


@dataclass(frozen=True)
class Detection:
    """Substitute-side detection with full class posterior."""

    box: BBox
    objectness: float
    class_probs: np.ndarray = field(compare=False)

    def __post_init__(self) -> None:
        if not 0.0 <= self.objectness <= 1.0:
            raise ValueError(f"objectness outside [0, 1]: {self.objectness}")
        if np.any(np.asarray(self.class_probs) < 0):
            raise ValueError("class_probs must be non-negative")
        total = float(np.sum(self.class_probs))
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"class_probs sum to {total}, expected 1")

    @property
    def category(self) -> int:
        return int(np.argmax(self.class_probs))

    @property
    def confidence(self) -> float:
        return self.objectness

    @property
    def p_max(self) -> float:
        return float(np.max(self.class_probs))

    def to_annotation(self, score: float | None = None) -> "Annotation":
        """Collapse to the black-box triple; default score is objectness * p_max."""
        if score is None:
            score = self.objectness * self.p_max
        return Annotation(self.box, self.category, float(min(max(score, 0.0), 1.0)))


@dataclass(frozen=True)
class Annotation:
    """A (box, category, score) triple, as returned by the victim API."""

    box: BBox
    category: int
    score: float

    def __post_init__(self) -> None:
        if self.category < 0:
            raise ValueError(f"negative category {self.category}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score outside [0, 1]: {self.score}")

    @property
    def confidence(self) -> float:
        return self.score

    def to_row(self) -> list:
        return [self.box.x1, self.box.y1, self.box.x2, self.box.y2, self.category, self.score]

    @classmethod
    def from_row(cls, row: Sequence) -> "Annotation":
        x1, y1, x2, y2, c, s = row
        return cls(BBox(float(x1), float(y1), float(x2), float(y2)), int(c), float(s))


@dataclass(frozen=True)
class CandidateGroup:
    """The highest-confidence detection of one target and its other boxes."""

    primary: Detection
    candidates: tuple[BBox, ...] = ()


@dataclass
class LabeledSample:
    sample_id: str
    annotations: list[Annotation]
    provenance: str = "stage-1"
    # leading annotations that came from the victim; the rest were added later
    n_victim: int | None = None
    # victim answers dropped by the confidence filter
    rejected: list[Annotation] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.n_victim is None:
            self.n_victim = len(self.annotations)


class QueryDataset:
    """Ordered collection of labeled samples with a monotone query ledger."""

    def __init__(self, num_categories: int):
        self.num_categories = num_categories
        self._samples: list[LabeledSample] = []
        self._index: dict[str, int] = {}
        self._counts = np.zeros(num_categories, dtype=np.int64)
        self._ledger = 0

    def __len__(self) -> int:
        return len(self._samples)

    def __iter__(self) -> Iterator[LabeledSample]:
        return iter(self._samples)

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._index

    def __getitem__(self, sample_id: str) -> LabeledSample:
        return self._samples[self._index[sample_id]]

    @property
    def sample_ids(self) -> list[str]:
        return [s.sample_id for s in self._samples]

    @property
    def ledger(self) -> int:
        return self._ledger

    @property
    def category_counts(self) -> np.ndarray:
        return self._counts.copy()

    @property
    def num_annotations(self) -> int:
        return int(self._counts.sum())

    def record_queries(self, n: int) -> None:
        if n < 0:
            raise ValueError("ledger never decreases")
        self._ledger += n

    def _check(self, anns: Iterable[Annotation]) -> None:
        for a in anns:
            if a.category >= self.num_categories:
                raise ValueError(f"category {a.category} out of range")

    def add(self, sample: LabeledSample) -> None:
        if sample.sample_id in self._index:
            raise ValueError(f"duplicate sample_id {sample.sample_id!r}")
        self._check(sample.annotations)
        self._index[sample.sample_id] = len(self._samples)
        self._samples.append(sample)
        for a in sample.annotations:
            self._counts[a.category] += 1

    def extend_annotations(self, sample_id: str, new: Sequence[Annotation]) -> None:
        """Append annotations to an existing sample, marking it as updated."""
        if not new:
            return
        self._check(new)
        s = self[sample_id]
        s.annotations.extend(new)
        s.provenance = "updated"
        for a in new:
            self._counts[a.category] += 1

    def recount(self) -> np.ndarray:
        counts = Counter(a.category for s in self._samples for a in s.annotations)
        return np.array([counts.get(c, 0) for c in range(self.num_categories)], dtype=np.int64)

    def copy(self) -> "QueryDataset":
        out = QueryDataset(self.num_categories)
        for s in self._samples:
            out.add(LabeledSample(s.sample_id, list(s.annotations), s.provenance, s.n_victim,
                                  list(s.rejected)))
        out._ledger = self._ledger
        return out

    # -- snapshot -----------------------------------------------------------

    def to_jsonl(self) -> str:
        lines = []
        for s in self._samples:
            lines.append(json.dumps({
                "sample_id": s.sample_id,
                "annotations": [a.to_row() for a in s.annotations],
                "provenance": s.provenance,
                "n_victim": s.n_victim,
                "rejected": [a.to_row() for a in s.rejected],
            }))
        return "".join(line + "\n" for line in lines)

    @classmethod
    def from_jsonl(cls, text: str, num_categories: int, ledger: int | None = None) -> "QueryDataset":
        ds = cls(num_categories)
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            anns = [Annotation.from_row(r) for r in rec["annotations"]]
            rejected = [Annotation.from_row(r) for r in rec.get("rejected", [])]
            ds.add(LabeledSample(rec["sample_id"], anns, rec["provenance"], rec.get("n_victim"), rejected))
        ds._ledger = len(ds) if ledger is None else ledger
        return ds

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def load(cls, path: str | Path, num_categories: int) -> "QueryDataset":
        return cls.from_jsonl(Path(path).read_text(), num_categories)


def score_order(items: Sequence) -> list[int]:
    """Indices sorted by confidence descending, then category, then box."""
    return sorted(range(len(items)),
                  key=lambda i: (-items[i].confidence, getattr(items[i], "category", 0),
                                 items[i].box.as_tuple(), i))


def match_predictions(preds: Sequence, gts: Sequence, iou_thresh: float = 0.5,
                      class_agnostic: bool = False) -> list[tuple[int, int | None]]:
    """Greedy one-to-one matching of predictions to ground truths.

    Predictions are visited by descending score; each takes the unmatched
    ground truth of the same category with the largest IoU, provided that IoU
    is at least ``iou_thresh``. Ties in IoU go to the lower gt index.

    Returns:
        ``(pred_index, gt_index or None)`` pairs in visiting order.
    """
    taken = [False] * len(gts)
    out: list[tuple[int, int | None]] = []
    for i in score_order(preds):
        p = preds[i]
        best, best_iou = None, iou_thresh
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            if not class_agnostic and g.category != p.category:
                continue
            v = iou(p.box, g.box)
            if v >= best_iou and (best is None or v > best_iou):
                best, best_iou = j, v
        if best is not None:
            taken[best] = True
        out.append((i, best))
    return out
