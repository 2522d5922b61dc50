"""The attacker's substitute detector.

A nearest-prototype detector over world blobs. Each category keeps the mean
appearance of the blobs its training annotations were associated with, the
mean box residual between annotation and blob, and the residual spread. The
spread drives the synthetic candidate boxes used for localization
uncertainty, so poorly supported categories look less certain.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .detection import Annotation, CandidateGroup, Detection, QueryDataset, match_predictions
from .geometry import BBox, iou, nms
from .world import Scene, World, derive_seed, observe

SUBSTITUTE_DETECTOR_SEED = 1

_HYPER = ("temp", "beta", "d_bg", "k_cand", "nms_thresh", "s_floor", "s_uninit_mult",
          "jitter_scale", "group_iou", "min_objectness", "assoc_iou", "detector_seed")


@dataclass(frozen=True)
class _Box:
    """Lightweight pseudo-annotation used for blob association."""

    box: BBox
    category: int = 0
    confidence: float = 0.0


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    h = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.where((w > 0) & (h > 0), w * h, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def _iou4(a: Sequence[float], b: Sequence[float]) -> float:
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    if w <= 0.0 or h <= 0.0:
        return 0.0
    inter = w * h
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0.0 else 0.0


def _rows_to_boxes(arr: np.ndarray) -> list[BBox]:
    lo = np.minimum(arr[:, :2], arr[:, 2:])
    hi = np.maximum(arr[:, :2], arr[:, 2:])
    return [BBox(float(a), float(b), float(c), float(d)) for (a, b), (c, d) in zip(lo, hi)]


@dataclass(frozen=True, eq=False)
class PrototypeDetector:
    num_categories: int
    dim: int
    prototypes: np.ndarray = field(repr=False)       # (K, d), zero rows when uninitialised
    counts: np.ndarray = field(repr=False)           # (K,)
    residual_mean: np.ndarray = field(repr=False)    # (K, 4)
    residual_std: np.ndarray = field(repr=False)     # (K, 4), floored at s_floor
    temp: float = 4.0
    beta: float = 1.5
    d_bg: float = 7.5
    k_cand: int = 5
    nms_thresh: float = 0.5
    s_floor: float = 0.1
    s_uninit_mult: float = 5.0
    jitter_scale: float = 1.0
    group_iou: float = 0.3
    min_objectness: float = 0.05
    assoc_iou: float = 0.5
    detector_seed: int = SUBSTITUTE_DETECTOR_SEED
    world: World | None = field(default=None, repr=False, compare=False)

    @classmethod
    def empty(cls, num_categories: int, dim: int, world: World | None = None, **hyper) -> "PrototypeDetector":
        """The untrained model: no category initialised."""
        k = num_categories
        s_floor = hyper.get("s_floor", 0.1)
        return cls(k, dim, np.zeros((k, dim)), np.zeros(k, dtype=np.int64), np.zeros((k, 4)),
                   np.full((k, 4), s_floor), world=world, **hyper)

    @property
    def initialized(self) -> np.ndarray:
        return self.counts > 0

    @property
    def s_uninit(self) -> float:
        return self.s_uninit_mult * self.s_floor

    def spread(self, category: int) -> np.ndarray:
        """Per-axis localization spread; categories with < 2 supports use ``s_uninit``."""
        if self.counts[category] < 2:
            return np.full(4, self.s_uninit)
        return np.maximum(self.residual_std[category], self.s_floor)

    def hyperparameters(self) -> dict:
        return {k: getattr(self, k) for k in _HYPER}

    # -- training -------------------------------------------------------------

    def train(self, dataset: QueryDataset, scenes: Mapping[str, Scene]) -> "PrototypeDetector":
        """Full refit from ``dataset``; returns a new model."""
        k, d = self.num_categories, self.dim
        feats: list[list[np.ndarray]] = [[] for _ in range(k)]
        resid: list[list[np.ndarray]] = [[] for _ in range(k)]
        for sample in dataset:
            if not sample.annotations:
                continue
            boxes, app = observe(self._world(), scenes[sample.sample_id], 1.0, self.detector_seed)
            blobs = [_Box(b) for b in _rows_to_boxes(boxes)] if len(boxes) else []
            anns = sample.annotations
            for i, j in match_predictions(anns, blobs, self.assoc_iou, class_agnostic=True):
                if j is None:
                    continue
                c = anns[i].category
                feats[c].append(app[j])
                resid[c].append(np.array(anns[i].box.as_tuple()) - boxes[j])
        protos = np.zeros((k, d))
        counts = np.zeros(k, dtype=np.int64)
        rmean = np.zeros((k, 4))
        rstd = np.full((k, 4), self.s_floor)
        for c in range(k):
            if feats[c]:
                protos[c] = np.mean(feats[c], axis=0)
                counts[c] = len(feats[c])
                r = np.asarray(resid[c])
                rmean[c] = r.mean(axis=0)
                rstd[c] = np.maximum(r.std(axis=0), self.s_floor)
        for a in (protos, counts, rmean, rstd):
            a.setflags(write=False)
        return replace(self, prototypes=protos, counts=counts, residual_mean=rmean, residual_std=rstd)

    def _world(self) -> World:
        if self.world is None:
            raise RuntimeError("detector is not bound to a world; use bind(world)")
        return self.world

    def bind(self, world: World) -> "PrototypeDetector":
        return replace(self, world=world)

    # -- inference ------------------------------------------------------------

    def _infer(self, scene: Scene, scale: float):
        """Array form of the detector head before NMS.

        Returns corrected boxes (n, 4), full class posteriors (n, K) and
        objectness (n,), restricted to blobs above ``min_objectness``.
        """
        k = self.num_categories
        init = np.flatnonzero(self.initialized)
        boxes, app = observe(self._world(), scene, scale, self.detector_seed) if init.size else (np.zeros((0, 4)), None)
        if len(boxes) == 0:
            return np.zeros((0, 4)), np.zeros((0, k)), np.zeros(0)
        mu = self.prototypes[init]
        d2 = ((app[:, None, :] - mu[None, :, :]) ** 2).sum(-1)
        logits = -d2 / self.temp
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        obj = _sigmoid(self.beta * (self.d_bg - np.sqrt(d2.min(axis=1))))
        cats = init[np.argmax(p, axis=1)]
        corrected = boxes + scale * self.residual_mean[cats]
        corrected = np.concatenate([np.minimum(corrected[:, :2], corrected[:, 2:]),
                                    np.maximum(corrected[:, :2], corrected[:, 2:])], axis=1)
        keep = obj >= self.min_objectness
        full = np.zeros((len(boxes), k))
        full[:, init] = p
        return corrected[keep], full[keep], obj[keep]

    def _pre_nms(self, scene: Scene, scale: float) -> list[Detection]:
        boxes, probs, obj = self._infer(scene, scale)
        return [Detection(BBox(float(b[0]), float(b[1]), float(b[2]), float(b[3])), float(o), pr)
                for b, pr, o in zip(boxes, probs, obj)]

    def detect(self, scene: Scene, scale: float = 1.0) -> list[Detection]:
        return nms(self._pre_nms(scene, scale), self.nms_thresh)

    def _synthetic_jitter(self, scene: Scene, n_primary: int) -> np.ndarray:
        n_syn = max(self.k_cand - 1, 0)
        rng = np.random.default_rng(derive_seed(scene.seed, self.detector_seed, 31))
        return rng.normal(size=(n_primary, n_syn, 4)) * self.jitter_scale

    def detect_raw(self, scene: Scene) -> list[CandidateGroup]:
        """Post-NMS primaries, each with up to ``k_cand - 1`` other boxes.

        Suppressed boxes attach to the primary they overlap most (IoU at
        least ``group_iou``) and fill the slots first, highest IoU first;
        synthetic jittered copies of the primary fill whatever is left.
        """
        pre = self._pre_nms(scene, 1.0)
        primaries = nms(pre, self.nms_thresh)
        kept = {id(p) for p in primaries}
        attached: list[list[tuple[float, int, BBox]]] = [[] for _ in primaries]
        for k, det in enumerate(pre):
            if id(det) in kept:
                continue
            best, best_iou = None, self.group_iou
            for i, p in enumerate(primaries):
                v = iou(det.box, p.box)
                if v >= best_iou and (best is None or v > best_iou):
                    best, best_iou = i, v
            if best is not None:
                attached[best].append((best_iou, k, det.box))
        n_slots = max(self.k_cand - 1, 0)
        jit = self._synthetic_jitter(scene, len(primaries))
        groups = []
        for i, p in enumerate(primaries):
            real = [b for _, _, b in sorted(attached[i], key=lambda t: (-t[0], t[1]))][:n_slots]
            n_syn = n_slots - len(real)
            base = np.array(p.box.as_tuple())
            syn = _rows_to_boxes(base + jit[i, :n_syn] * self.spread(p.category)) if n_syn else []
            groups.append(CandidateGroup(p, tuple(real) + tuple(syn)))
        return groups

    def uncertainty(self, scene: Scene) -> float:
        return self.uncertainty_many([scene])[0]

    def uncertainty_many(self, scenes: Sequence[Scene]) -> list[float]:
        """Sample uncertainty per scene, batched over blobs.

        Gives the same values as scoring each scene's :meth:`detect_raw`
        groups, without materialising detections.
        """
        init = np.flatnonzero(self.initialized)
        if init.size == 0 or not scenes:
            return [0.0] * len(scenes)
        world = self._world()
        obs = [observe(world, s, 1.0, self.detector_seed) for s in scenes]
        sizes = np.array([len(b) for b, _ in obs])
        if sizes.sum() == 0:
            return [0.0] * len(scenes)
        boxes = np.concatenate([b for b, _ in obs])
        app = np.concatenate([f for _, f in obs])
        mu = self.prototypes[init]
        d2 = ((app[:, None, :] - mu[None, :, :]) ** 2).sum(-1)
        logits = -d2 / self.temp
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        obj = _sigmoid(self.beta * (self.d_bg - np.sqrt(d2.min(axis=1))))
        cats = init[np.argmax(p, axis=1)]
        corr = boxes + self.residual_mean[cats]
        corr = np.concatenate([np.minimum(corr[:, :2], corr[:, 2:]),
                               np.maximum(corr[:, :2], corr[:, 2:])], axis=1)
        p_sorted = np.sort(p, axis=1)
        second = p_sorted[:, -2] if p.shape[1] > 1 else np.zeros(len(p))
        u_c = obj * (1.0 - (p_sorted[:, -1] - second)) ** 2
        keep = obj >= self.min_objectness
        spreads = {int(c): self.spread(int(c)) for c in init}
        n_slots = max(self.k_cand - 1, 0)

        out = []
        start = 0
        corr_l, obj_l, cats_l, uc_l, keep_l = corr.tolist(), obj.tolist(), cats.tolist(), u_c.tolist(), keep.tolist()
        for scene, n in zip(scenes, sizes):
            idx = [i for i in range(start, start + n) if keep_l[i]]
            start += n
            if not idx:
                out.append(0.0)
                continue
            idx.sort(key=lambda i: (-obj_l[i], cats_l[i], tuple(corr_l[i])))
            prim: list[int] = []
            for i in idx:
                if all(_iou4(corr_l[i], corr_l[j]) < self.nms_thresh for j in prim if cats_l[j] == cats_l[i]):
                    prim.append(i)
            att: list[list[tuple[float, int]]] = [[] for _ in prim]
            pset = set(prim)
            for i in idx:
                if i in pset:
                    continue
                best, best_iou = None, self.group_iou
                for g, j in enumerate(prim):
                    v = _iou4(corr_l[i], corr_l[j])
                    if v >= best_iou and (best is None or v > best_iou):
                        best, best_iou = g, v
                if best is not None:
                    att[best].append((best_iou, i))
            u_p = [0.0] * len(prim)
            jit = self._synthetic_jitter(scene, len(prim)) if n_slots else None
            for g, j in enumerate(prim):
                real = sorted(att[g], key=lambda t: (-t[0], t[1]))[:n_slots]
                u_p[g] = sum(1.0 - v for v, _ in real)
                k = n_slots - len(real)
                if k:
                    base = np.array(corr_l[j])
                    syn = base + jit[g, :k] * spreads[cats_l[j]]
                    syn = np.concatenate([np.minimum(syn[:, :2], syn[:, 2:]),
                                          np.maximum(syn[:, :2], syn[:, 2:])], axis=1)
                    u_p[g] += float(np.sum(1.0 - _iou_matrix(base[None, :], syn)[0]))
            out.append(float(sum(uc_l[j] * u_p[g] for g, j in enumerate(prim))))
        return out

    def detect_multiscale(self, scene: Scene, scales: Sequence[float]) -> list[list[Detection]]:
        """Detections per scale with boxes divided back into the reference frame."""
        if len(scales) == 0:
            raise ValueError("scales must be non-empty")
        out = []
        for s in scales:
            dets = self.detect(scene, s)
            out.append([Detection(BBox(d.box.x1 / s, d.box.y1 / s, d.box.x2 / s, d.box.y2 / s),
                                  d.objectness, d.class_probs) for d in dets])
        return out

    def predict(self, scene: Scene) -> list[Annotation]:
        """Black-box style output used for evaluation."""
        return [d.to_annotation() for d in self.detect(scene)]

    # -- persistence ----------------------------------------------------------

    def to_json(self) -> str:
        return json.dumps({
            "num_categories": self.num_categories,
            "dim": self.dim,
            "prototypes": self.prototypes.tolist(),
            "counts": self.counts.tolist(),
            "residual_mean": self.residual_mean.tolist(),
            "residual_std": self.residual_std.tolist(),
            "hyperparameters": self.hyperparameters(),
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str, world: World | None = None) -> "PrototypeDetector":
        rec = json.loads(text)
        return cls(rec["num_categories"], rec["dim"],
                   np.array(rec["prototypes"], dtype=float).reshape(rec["num_categories"], rec["dim"]),
                   np.array(rec["counts"], dtype=np.int64),
                   np.array(rec["residual_mean"], dtype=float).reshape(-1, 4),
                   np.array(rec["residual_std"], dtype=float).reshape(-1, 4),
                   world=world, **rec["hyperparameters"])


def train(model: PrototypeDetector, dataset: QueryDataset, scenes: Mapping[str, Scene]) -> PrototypeDetector:
    return model.train(dataset, scenes)


def detect(model: PrototypeDetector, scene: Scene, scale: float = 1.0) -> list[Detection]:
    return model.detect(scene, scale)


def detect_raw(model: PrototypeDetector, scene: Scene) -> list[CandidateGroup]:
    return model.detect_raw(scene)


def detect_multiscale(model: PrototypeDetector, scene: Scene, scales: Sequence[float]) -> list[list[Detection]]:
    return model.detect_multiscale(scene, scales)
