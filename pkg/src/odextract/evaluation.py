"""COCO-style detection metrics over per-image prediction and ground-truth
lists: 101-point interpolated AP per category, mAP@50 and mAP@50:95,
the relative extraction ratio, and top-n restricted evaluation."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .detection import Annotation, match_predictions

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
_RECALL_EPS = 1e-12

Batch = Mapping[str, Sequence[Annotation]]


def _pr_curve(preds: Batch, gts: Batch, iou_thresh: float, category: int):
    n_gt = sum(1 for anns in gts.values() for a in anns if a.category == category)
    scored: list[tuple[float, str, int, bool]] = []
    for sid in sorted(set(preds) | set(gts)):
        p = [a for a in preds.get(sid, ()) if a.category == category]
        g = [a for a in gts.get(sid, ()) if a.category == category]
        for i, j in match_predictions(p, g, iou_thresh):
            scored.append((p[i].score, sid, i, j is not None))
    # stable global order: score desc, then image id, then within-image rank
    scored.sort(key=lambda t: (-t[0], t[1], t[2]))
    tp = np.cumsum([s[3] for s in scored], dtype=float)
    fp = np.cumsum([not s[3] for s in scored], dtype=float)
    return n_gt, tp, fp


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """101-point AP: mean over r of max precision at recall >= r."""
    if recall.size == 0:
        return 0.0
    # running max from the right gives the precision envelope
    env = np.maximum.accumulate(precision[::-1])[::-1]
    # tolerance keeps e.g. recall 3/10 from falling just below the 0.30 point
    idx = np.searchsorted(recall, RECALL_POINTS - _RECALL_EPS, side="left")
    q = np.where(idx < recall.size, env[np.minimum(idx, recall.size - 1)], 0.0)
    return float(q.mean())


def average_precision(preds: Batch, gts: Batch, iou_thresh: float, category: int) -> float | None:
    """AP for one category, or ``None`` if the category has no ground truth."""
    n_gt, tp, fp = _pr_curve(preds, gts, iou_thresh, category)
    if n_gt == 0:
        return None
    if tp.size == 0:
        return 0.0
    return interpolated_ap(tp / n_gt, tp / (tp + fp))


def categories_with_gt(gts: Batch) -> list[int]:
    return sorted({a.category for anns in gts.values() for a in anns})


@dataclass
class EvalReport:
    ap: dict[float, dict[int, float]]
    map50: float | None
    map50_95: float | None
    relative: float | None = None
    ranking: list[int] = field(default_factory=list)

    def ap50(self, category: int) -> float | None:
        return self.ap[0.5].get(category)

    def mean_ap50(self, categories: Sequence[int]) -> float | None:
        vals = [self.ap[0.5][c] for c in categories if c in self.ap[0.5]]
        return float(np.mean(vals)) if vals else None

    def to_dict(self) -> dict:
        return {
            "map50": self.map50,
            "map50_95": self.map50_95,
            "relative": self.relative,
            "ranking": list(self.ranking),
            "ap": {f"{t:.2f}": {str(c): v for c, v in sorted(d.items())} for t, d in self.ap.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def csv_row(self, **extra) -> dict:
        row = dict(extra)
        row.update(map50=self.map50, map50_95=self.map50_95, relative=self.relative)
        return row


def frequency_ranking(gts: Batch) -> list[int]:
    counts: dict[int, int] = {}
    for anns in gts.values():
        for a in anns:
            counts[a.category] = counts.get(a.category, 0) + 1
    return sorted(counts, key=lambda c: (-counts[c], c))


def evaluate(preds: Batch, gts: Batch, categories: Sequence[int] | None = None) -> EvalReport:
    cats = categories_with_gt(gts) if categories is None else sorted(
        c for c in categories if c in set(categories_with_gt(gts)))
    ap: dict[float, dict[int, float]] = {}
    for t in IOU_THRESHOLDS:
        ap[t] = {}
        for c in cats:
            v = average_precision(preds, gts, t, c)
            if v is not None:
                ap[t][c] = v
    if not cats:
        return EvalReport(ap, None, None, None, frequency_ranking(gts))
    per_t = [float(np.mean(list(ap[t].values()))) for t in IOU_THRESHOLDS]
    return EvalReport(ap, per_t[0], float(np.mean(per_t)), None, frequency_ranking(gts))


def map_range(preds: Batch, gts: Batch) -> tuple[float | None, float | None]:
    r = evaluate(preds, gts)
    return r.map50, r.map50_95


def relative_extraction(sub_map50: float | None, victim_map50: float | None) -> float | None:
    if sub_map50 is None or not victim_map50:
        return None
    return sub_map50 / victim_map50


def partial_eval(preds: Batch, gts: Batch, top_n: int) -> EvalReport:
    ranking = frequency_ranking(gts)
    if not 1 <= top_n <= max(len(ranking), 1):
        raise ValueError(f"top_n={top_n} outside [1, {len(ranking)}]")
    rep = evaluate(preds, gts, ranking[:top_n])
    rep.ranking = ranking
    return rep


def rows_to_csv(rows: Sequence[Mapping], columns: Sequence[str] | None = None) -> str:
    if not rows:
        return ""
    columns = list(columns or rows[0].keys())
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in columns})
    return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v
