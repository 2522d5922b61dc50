"""Synthetic detection world: prototypes, long-tail scenes, perception,
the black-box victim oracle and the simulated search index.

Objects live in an appearance space. Each category has a prototype; an
object's appearance is its prototype plus isotropic noise. Detectors do not
see objects directly but *blobs*: one per true object (box jitter fixed per
object and detector, hence consistent across scales) plus clutter blobs that
are redrawn on every call.
"""

from __future__ import annotations

import math
import threading
from functools import lru_cache
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .detection import Annotation
from .geometry import BBox, nms

VICTIM_DETECTOR_SEED = 0

# stream tags for seed derivation
_POOL, _TEST, _NET, _PROTO = 11, 12, 13, 14
_JITTER, _CLUTTER, _VICTIM, _VIEW = 21, 22, 23, 24


@lru_cache(maxsize=1 << 16)
def derive_seed(*keys: int) -> int:
    """Stable 63-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(2, np.uint64)[0] >> np.uint64(1))


def _scale_key(scale: float) -> int:
    return int(round(scale * 1_000_000))


@dataclass
class WorldConfig:
    num_categories: int = 10
    dim: int = 16
    sigma_app: float = 1.3
    sigma_bg: float = 3.0
    min_separation: float = 3.0
    zipf_s: float = 1.0
    lambda_obj: float = 1.0
    canvas_w: float = 100.0
    canvas_h: float = 100.0
    p_miss: float = 0.1
    p_ghost: float = 0.05
    victim_conf_temp: float = 4.0
    victim_nms: float = 0.5
    defense_p: float = 0.0
    seed: int = 0
    prototype_scale: float = 1.0
    box_min: float = 8.0
    box_max: float = 24.0
    jitter_frac: float = 0.05
    scale_jitter_frac: float = 0.01
    view_noise: float = 0.5
    lambda_clutter: float = 2.0
    tail_suppression: float = 0.1
    rho_rel: float = 0.6
    ood_shift: float = 3.0
    score_ghost_lo: float = 0.1
    score_ghost_hi: float = 0.6
    defense_cutoff: float = 0.7
    defense_lo: float = 0.05
    defense_hi: float = 0.15
    max_rejection_rounds: int = 1000

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.num_categories < 2:
            raise ValueError("num_categories must be >= 2")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        for name in ("p_miss", "p_ghost", "defense_p", "rho_rel", "tail_suppression"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("sigma_app", "sigma_bg", "view_noise", "jitter_frac", "scale_jitter_frac",
                     "lambda_obj", "lambda_clutter", "ood_shift"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.prototype_scale <= 0 or self.victim_conf_temp <= 0:
            raise ValueError("prototype_scale and victim_conf_temp must be > 0")
        if not 0.0 <= self.score_ghost_lo <= self.score_ghost_hi <= 1.0:
            raise ValueError("need 0 <= score_ghost_lo <= score_ghost_hi <= 1")
        if not 0.0 <= self.defense_lo <= self.defense_hi <= 1.0:
            raise ValueError("need 0 <= defense_lo <= defense_hi <= 1")
        if self.min_separation <= 0:
            raise ValueError("min_separation must be > 0")
        if self.zipf_s < 0:
            raise ValueError("zipf_s must be >= 0")
        if not 0.0 < self.victim_nms < 1.0:
            raise ValueError("victim_nms must lie in (0, 1)")
        if self.box_min <= 0 or self.box_max < self.box_min:
            raise ValueError("need 0 < box_min <= box_max")
        if self.box_max > min(self.canvas_w, self.canvas_h) * 0.5:
            raise ValueError("boxes must fit in a quarter-scale canvas")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class World:
    cfg: WorldConfig
    prototypes: np.ndarray = field(repr=False)
    frequencies: np.ndarray
    # perception memo; perception is a pure function of (scene, scale, detector)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_categories(self) -> int:
        return self.cfg.num_categories

    @property
    def seed(self) -> int:
        return self.cfg.seed


@dataclass(frozen=True, eq=False)
class Scene:
    """A synthetic image: canvas plus ground-truth objects.

    Attacker-side code only ever passes scenes to detectors; ``boxes``,
    ``categories`` and ``ood`` are the hidden ground truth.
    """

    sample_id: str
    width: float
    height: float
    boxes: np.ndarray = field(repr=False)        # (n, 4) true corners
    categories: np.ndarray = field(repr=False)   # (n,)
    appearances: np.ndarray = field(repr=False)  # (n, d)
    seed: int = 0
    ood: bool = False

    @property
    def num_objects(self) -> int:
        return len(self.categories)

    def ground_truth(self) -> list[Annotation]:
        return [Annotation(BBox(*map(float, b)), int(c), 1.0)
                for b, c in zip(self.boxes, self.categories)]

    def contains(self, category: int) -> bool:
        return not self.ood and bool(np.any(self.categories == category))


@dataclass(frozen=True)
class Blob:
    box: BBox
    appearance: np.ndarray = field(repr=False)
    is_clutter: bool = False


def zipf_frequencies(k: int, s: float) -> np.ndarray:
    ranks = np.arange(1, k + 1, dtype=float)
    w = ranks ** (-s)
    return w / w.sum()


def generate_world(cfg: WorldConfig) -> World:
    """Sample separated prototypes and Zipf category frequencies.

    Raises:
        ValueError: if no prototype set with pairwise distance >= the minimum
            separation is found within ``max_rejection_rounds`` draws.
    """
    cfg.validate()
    rng = np.random.default_rng(derive_seed(cfg.seed, _PROTO))
    k = cfg.num_categories
    iu = np.triu_indices(k, 1)
    for _ in range(cfg.max_rejection_rounds):
        mu = rng.normal(0.0, cfg.prototype_scale, size=(k, cfg.dim))
        dist = np.linalg.norm(mu[:, None, :] - mu[None, :, :], axis=-1)[iu]
        if dist.min() >= cfg.min_separation:
            mu.setflags(write=False)
            return World(cfg, mu, zipf_frequencies(k, cfg.zipf_s))
    raise ValueError(
        f"min_separation={cfg.min_separation} too large for dim={cfg.dim}: "
        f"no valid prototypes after {cfg.max_rejection_rounds} rounds")


def make_scene(world: World, sample_id: str, seed: int, freqs: np.ndarray,
               area_ratio: float = 1.0, forced: int | None = None,
               ood: bool = False, n_objects: int | None = None) -> Scene:
    cfg = world.cfg
    rng = np.random.default_rng(seed)
    side = math.sqrt(area_ratio)
    w, h = cfg.canvas_w * side, cfg.canvas_h * side
    if n_objects is None:
        n_objects = int(rng.poisson(cfg.lambda_obj * area_ratio))
    cats = rng.choice(cfg.num_categories, size=n_objects, p=freqs) if n_objects else np.zeros(0, int)
    if forced is not None:
        cats = np.concatenate([[forced], cats]).astype(int)
    n = len(cats)
    bw = rng.uniform(cfg.box_min, cfg.box_max, size=n)
    bh = rng.uniform(cfg.box_min, cfg.box_max, size=n)
    x1 = rng.uniform(0.0, 1.0, size=n) * (w - bw)
    y1 = rng.uniform(0.0, 1.0, size=n) * (h - bh)
    boxes = np.stack([x1, y1, x1 + bw, y1 + bh], axis=1) if n else np.zeros((0, 4))
    app = world.prototypes[cats] + rng.normal(0.0, cfg.sigma_app, size=(n, cfg.dim))
    if ood and n:
        signs = rng.choice([-1.0, 1.0], size=cfg.dim)
        app = app + cfg.ood_shift * cfg.sigma_app * signs
    for a in (boxes, cats, app):
        a.setflags(write=False)
    return Scene(sample_id, w, h, boxes, cats.astype(int), app, seed, ood)


def attacker_frequencies(world: World, tail_suppression: float) -> np.ndarray:
    """World frequencies with the rarest ceil(K/5) categories down-weighted."""
    k = world.num_categories
    f = world.frequencies.copy()
    n_tail = math.ceil(k / 5)
    tail = np.argsort(f, kind="stable")[:n_tail]
    f[tail] *= tail_suppression
    return f / f.sum()


def tail_categories(world: World) -> list[int]:
    n_tail = math.ceil(world.num_categories / 5)
    return sorted(int(c) for c in np.argsort(world.frequencies, kind="stable")[:n_tail])


class SearchResult(list):
    """List of scenes; ``truncated`` is set when the pool ran out."""

    truncated: bool = False


@dataclass
class InternetIndex:
    pools: dict[int, list[Scene]]

    def pool_size(self, category: int) -> int:
        return len(self.pools[category])


@dataclass
class Pools:
    attacker: list[Scene]
    test: list[Scene]
    internet: InternetIndex

    def scene_map(self) -> dict[str, Scene]:
        out = {s.sample_id: s for s in self.attacker}
        for scenes in self.internet.pools.values():
            out.update((s.sample_id, s) for s in scenes)
        return out


def generate_pools(world: World, n_attacker: int, n_test: int, n_internet_per_cat: int,
                   seed: int | None = None, tail_suppression: float | None = None,
                   rho_rel: float | None = None) -> Pools:
    """Draw the attacker pool, the held-out test set and the search index."""
    cfg = world.cfg
    if min(n_attacker, n_test, n_internet_per_cat) <= 0:
        raise ValueError("pool sizes must be positive")
    seed = cfg.seed if seed is None else seed
    sup = cfg.tail_suppression if tail_suppression is None else tail_suppression
    rho = cfg.rho_rel if rho_rel is None else rho_rel

    att_f = attacker_frequencies(world, sup)
    attacker = [make_scene(world, f"pool-{i:05d}", derive_seed(seed, _POOL, i), att_f)
                for i in range(n_attacker)]
    test = [make_scene(world, f"test-{i:05d}", derive_seed(seed, _TEST, i), world.frequencies)
            for i in range(n_test)]

    pools: dict[int, list[Scene]] = {}
    for c in range(cfg.num_categories):
        rng = np.random.default_rng(derive_seed(seed, _NET, c))
        n_rel = int(round(rho * n_internet_per_cat))
        relevant = np.zeros(n_internet_per_cat, dtype=bool)
        relevant[rng.permutation(n_internet_per_cat)[:n_rel]] = True
        scenes = []
        for i in range(n_internet_per_cat):
            area = float(np.exp(rng.uniform(math.log(0.25), math.log(4.0))))
            sid = f"net-{c:02d}-{i:05d}"
            s_seed = derive_seed(seed, _NET, c, i)
            if relevant[i]:
                scenes.append(make_scene(world, sid, s_seed, world.frequencies, area, forced=c))
            elif rng.random() < 0.5:
                scenes.append(make_scene(world, sid, s_seed, world.frequencies, area, n_objects=0))
            else:
                n_obj = max(1, int(rng.poisson(cfg.lambda_obj * area)))
                scenes.append(make_scene(world, sid, s_seed, world.frequencies, area,
                                         ood=True, n_objects=n_obj))
        pools[c] = scenes
    return Pools(attacker, test, InternetIndex(pools))


def internet_search(index: InternetIndex, category: int, k: int, seed: int) -> SearchResult:
    """Sample ``k`` scenes without replacement from a category's search pool."""
    pool = index.pools[category]
    out = SearchResult()
    if k <= 0:
        return out
    rng = np.random.default_rng(derive_seed(seed, _NET, category, 999))
    take = min(k, len(pool))
    out.extend(pool[i] for i in rng.permutation(len(pool))[:take])
    out.truncated = take < k
    return out


# -- perception ---------------------------------------------------------------

def _perceive_arrays(world: World, scene: Scene, scale: float, detector_seed: int):
    cfg = world.cfg
    if not math.isfinite(scale) or scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    n = scene.num_objects
    boxes = scene.boxes
    if n:
        wh = np.stack([boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1]], axis=1)
        wh4 = np.concatenate([wh, wh], axis=1)
        jit = np.random.default_rng(derive_seed(scene.seed, _JITTER, detector_seed))
        obj = boxes + jit.normal(size=(n, 4)) * cfg.jitter_frac * wh4
        if cfg.scale_jitter_frac > 0:
            sj = np.random.default_rng(derive_seed(scene.seed, _JITTER, detector_seed, _scale_key(scale)))
            obj = obj + sj.normal(size=(n, 4)) * cfg.scale_jitter_frac * wh4
        obj = np.concatenate([np.minimum(obj[:, :2], obj[:, 2:]), np.maximum(obj[:, :2], obj[:, 2:])], axis=1)
        obj = obj * scale
        app = scene.appearances
        if cfg.view_noise > 0:
            vn = np.random.default_rng(derive_seed(scene.seed, _VIEW, detector_seed, _scale_key(scale)))
            app = app + vn.normal(0.0, cfg.view_noise, size=app.shape)
    else:
        obj = np.zeros((0, 4))
        app = scene.appearances

    rng = np.random.default_rng(derive_seed(scene.seed, _CLUTTER, detector_seed, _scale_key(scale)))
    area_ratio = scene.width * scene.height / (cfg.canvas_w * cfg.canvas_h)
    m = int(rng.poisson(cfg.lambda_clutter * area_ratio))
    if m:
        bw = rng.uniform(cfg.box_min, cfg.box_max, size=m)
        bh = rng.uniform(cfg.box_min, cfg.box_max, size=m)
        x1 = rng.uniform(0.0, 1.0, size=m) * (scene.width - bw)
        y1 = rng.uniform(0.0, 1.0, size=m) * (scene.height - bh)
        clut = np.stack([x1, y1, x1 + bw, y1 + bh], axis=1) * scale
        clut_app = rng.normal(0.0, cfg.sigma_bg, size=(m, cfg.dim))
    else:
        clut = np.zeros((0, 4))
        clut_app = np.zeros((0, cfg.dim))
    return obj, app, clut, clut_app


def perceive(world: World, scene: Scene, scale: float = 1.0,
             detector_seed: int = VICTIM_DETECTOR_SEED) -> list[Blob]:
    """Blobs a detector sees in ``scene`` at ``scale`` (world-internal view)."""
    obj, app, clut, clut_app = _perceive_arrays(world, scene, scale, detector_seed)
    blobs = [Blob(BBox(*map(float, b)), a, False) for b, a in zip(obj, app)]
    blobs += [Blob(BBox(*map(float, b)), a, True) for b, a in zip(clut, clut_app)]
    return blobs


def observe(world: World, scene: Scene, scale: float = 1.0,
            detector_seed: int = VICTIM_DETECTOR_SEED) -> tuple[np.ndarray, np.ndarray]:
    """Attacker-facing perception: ``(boxes (n, 4), appearances (n, d))``.

    Object blobs and clutter blobs are interleaved in a seeded order so the
    position of a blob carries no information about what produced it.
    """
    key = (scene.sample_id, scene.seed, _scale_key(scale), detector_seed)
    hit = world._cache.get(key)
    if hit is None:
        obj, app, clut, clut_app = _perceive_arrays(world, scene, scale, detector_seed)
        boxes = np.concatenate([obj, clut])
        feats = np.concatenate([app, clut_app])
        order = np.random.default_rng(derive_seed(scene.seed, detector_seed, 77)).permutation(len(boxes))
        boxes, feats = boxes[order], feats[order]
        boxes.setflags(write=False)
        feats.setflags(write=False)
        hit = world._cache[key] = (boxes, feats)
    return hit


# -- victim -------------------------------------------------------------------

def _softmax_neg_sqdist(feats: np.ndarray, protos: np.ndarray, temp: float) -> np.ndarray:
    d2 = ((feats[:, None, :] - protos[None, :, :]) ** 2).sum(-1)
    logits = -d2 / temp
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


class BudgetExceededError(RuntimeError):
    pass


class Victim:
    """Black-box detection API backed by the true prototypes.

    ``queries`` counts calls to :meth:`detect`. When ``budget`` is set, a
    call that would exceed it raises :class:`BudgetExceededError` instead of
    answering.
    """

    def __init__(self, world: World, cfg: WorldConfig | None = None, budget: int | None = None):
        self.world = world
        self.cfg = cfg or world.cfg
        self.budget = budget
        self._queries = 0
        self._lock = threading.Lock()

    @property
    def queries(self) -> int:
        return self._queries

    def _charge(self) -> None:
        with self._lock:
            if self.budget is not None and self._queries + 1 > self.budget:
                raise BudgetExceededError(
                    f"query {self._queries + 1} would exceed budget {self.budget}")
            self._queries += 1

    def detect(self, scene: Scene) -> list[Annotation]:
        self._charge()
        return respond(self.world, scene, self.cfg)

    def detect_many(self, scenes: Iterable[Scene]) -> list[list[Annotation]]:
        return [self.detect(s) for s in scenes]


def respond(world: World, scene: Scene, cfg: WorldConfig) -> list[Annotation]:
    """The victim's answer for one scene, without touching any query counter."""
    blobs = perceive(world, scene, 1.0, VICTIM_DETECTOR_SEED)
    rng = np.random.default_rng(derive_seed(scene.seed, _VICTIM))
    objs = [b for b in blobs if not b.is_clutter]
    clut = [b for b in blobs if b.is_clutter]
    out: list[Annotation] = []
    miss = rng.random(len(objs)) < cfg.p_miss
    if objs:
        probs = _softmax_neg_sqdist(np.stack([b.appearance for b in objs]),
                                    world.prototypes, cfg.victim_conf_temp)
        for b, p, m in zip(objs, probs, miss):
            if not m:
                c = int(np.argmax(p))
                out.append(Annotation(b.box, c, float(min(p[c], 1.0))))
    ghost = rng.random(len(clut)) < cfg.p_ghost
    ghost_scores = rng.uniform(cfg.score_ghost_lo, cfg.score_ghost_hi, size=len(clut))
    # a ghost, like any other output, can also be dropped
    ghost &= rng.random(len(clut)) >= cfg.p_miss
    for b, g, s in zip(clut, ghost, ghost_scores):
        if g:
            d2 = ((world.prototypes - b.appearance) ** 2).sum(-1)
            out.append(Annotation(b.box, int(np.argmin(d2)), float(s)))
    out = nms(out, cfg.victim_nms)
    if cfg.defense_p > 0:
        flip = rng.random(len(out)) < cfg.defense_p
        low = rng.uniform(cfg.defense_lo, cfg.defense_hi, size=len(out))
        out = [Annotation(a.box, a.category, float(lo)) if (f and a.score > cfg.defense_cutoff) else a
               for a, f, lo in zip(out, flip, low)]
    return out


def victim_detect(world: World, scene: Scene, cfg: WorldConfig | None = None,
                  victim: Victim | None = None) -> list[Annotation]:
    """Functional entry point; counts the query on ``victim`` when given."""
    if victim is not None:
        return victim.detect(scene)
    return respond(world, scene, cfg or world.cfg)
