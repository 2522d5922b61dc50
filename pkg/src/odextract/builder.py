"""Two-stage query dataset construction.

Stage 1 grows the query dataset from the attacker's own pool by repeatedly
querying the scenes the current substitute is least certain about. Stage 2
tops up under-represented categories with search results ranked by fitness.
Victim answers pass a per-category confidence filter whose bar rises as the
category accumulates labels.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Collection, Mapping, Sequence

import numpy as np

from .detection import Annotation, LabeledSample, QueryDataset
from .scoring import fitness_score, sample_uncertainty
from .substitute import PrototypeDetector
from .update import DEFAULT_SCALES, update_annotations
from .world import InternetIndex, Scene, Victim, derive_seed, internet_search


@dataclass
class AttackConfig:
    budget: int = 600
    stage_ratio: tuple[int, int] = (3, 2)
    iterations: int = 5
    alpha: float = 1.0
    theta_u: float = 0.5
    scales: tuple[float, ...] = DEFAULT_SCALES
    theta_0: float = 0.3
    theta_max: float = 0.7
    kappa: float = 50.0
    rare_cutoff: float = 0.5
    # first stage-1 iteration that runs an update pass; None: only the final pass
    update_start: int | None = None
    update_match_iou: float = 0.5
    search_k: int = 200
    seed: int = 0

    def __post_init__(self) -> None:
        self.stage_ratio = tuple(self.stage_ratio)
        self.scales = tuple(float(s) for s in self.scales)
        self.validate()

    def validate(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.budget < self.iterations:
            raise ValueError("budget must allow at least one sample per iteration")
        if not 0.0 <= self.theta_0 <= self.theta_max <= 1.0:
            raise ValueError("need 0 <= theta_0 <= theta_max <= 1")
        if self.kappa <= 0:
            raise ValueError("kappa must be > 0")
        if len(self.stage_ratio) != 2 or min(self.stage_ratio) < 0 or sum(self.stage_ratio) <= 0:
            raise ValueError("stage_ratio must be two non-negative weights")
        if not self.scales or min(self.scales) <= 0:
            raise ValueError("scales must be non-empty and positive")

    def split(self, enhancement: bool = True) -> tuple[int, int]:
        """``(k_a, k_s)``; without enhancement stage 1 receives the whole budget."""
        if enhancement:
            s1 = self.budget * self.stage_ratio[0] // sum(self.stage_ratio)
        else:
            s1 = self.budget
        k_a = s1 // self.iterations
        k_s = self.budget - k_a * self.iterations if enhancement else 0
        return k_a, k_s

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_ratio"] = list(self.stage_ratio)
        d["scales"] = list(self.scales)
        return d


# -- confidence filtering -----------------------------------------------------

def dynamic_threshold(count: float, theta_0: float, theta_max: float, kappa: float) -> float:
    """Saturating per-category acceptance bar: theta_0 at 0, theta_max as count grows."""
    if count < 0 or kappa <= 0:
        raise ValueError("need count >= 0 and kappa > 0")
    return theta_0 + (theta_max - theta_0) * count / (count + kappa)


@dataclass(frozen=True)
class CategoryThresholds:
    values: np.ndarray

    @classmethod
    def from_counts(cls, counts: Sequence[int], cfg: AttackConfig) -> "CategoryThresholds":
        return cls(np.array([dynamic_threshold(n, cfg.theta_0, cfg.theta_max, cfg.kappa) for n in counts]))

    def __getitem__(self, category: int) -> float:
        return float(self.values[category])


def filter_annotations(response: Sequence[Annotation], thresholds: CategoryThresholds,
                       categories: Collection[int] | None = None) -> list[Annotation]:
    return [a for a in response
            if a.score >= thresholds[a.category] and (categories is None or a.category in categories)]


# -- rare categories ----------------------------------------------------------

@dataclass(frozen=True)
class RareCategoryReport:
    counts: tuple[int, ...]
    rare: tuple[int, ...]
    frequent: tuple[int, ...]


def identify_rare(dataset: QueryDataset, cutoff_fraction: float = 0.5,
                  categories: Collection[int] | None = None) -> RareCategoryReport:
    """Categories whose label count falls below ``cutoff_fraction`` of the mean share."""
    cats = sorted(range(dataset.num_categories) if categories is None else categories)
    counts = dataset.category_counts
    total = sum(int(counts[c]) for c in cats)
    bar = cutoff_fraction * total / len(cats)
    rare = tuple(c for c in cats if counts[c] < bar)
    return RareCategoryReport(tuple(int(counts[c]) for c in cats), rare,
                              tuple(c for c in cats if c not in rare))


# -- stages -------------------------------------------------------------------

@dataclass
class BuildState:
    dataset: QueryDataset
    model: PrototypeDetector
    log: list[dict] = field(default_factory=list)
    update_log: list[dict] = field(default_factory=list)


def _query(victim: Victim, scenes: Sequence[Scene], dataset: QueryDataset, provenance: str,
           cfg: AttackConfig, categories: Collection[int] | None = None) -> int:
    thresholds = CategoryThresholds.from_counts(dataset.category_counts, cfg)
    rejected = 0
    for s in scenes:
        resp = victim.detect(s)
        kept = filter_annotations(resp, thresholds, categories)
        dropped = [a for a in resp if a not in kept]
        rejected += len(dropped)
        dataset.add(LabeledSample(s.sample_id, kept, provenance, rejected=dropped))
    dataset.record_queries(len(scenes))
    return rejected


def _quantiles(u: Sequence[float]) -> list[float]:
    if len(u) == 0:
        return []
    return [float(q) for q in np.quantile(np.asarray(u, dtype=float), [0.0, 0.25, 0.5, 0.75, 1.0])]


def select_uncertain(model: PrototypeDetector, candidates: Sequence[Scene], k: int) -> tuple[list[Scene], list[float]]:
    """Top-``k`` by uncertainty, ties broken by ascending sample id."""
    u = model.uncertainty_many(candidates)
    order = sorted(range(len(candidates)), key=lambda i: (-u[i], candidates[i].sample_id))
    return [candidates[i] for i in order[:k]], u


def stage1(model: PrototypeDetector, victim: Victim, pool: Sequence[Scene], cfg: AttackConfig,
           scenes: Mapping[str, Scene], active_learning: bool = True, annotation_update: bool = False,
           enhancement: bool = True, categories: Collection[int] | None = None,
           dataset: QueryDataset | None = None) -> BuildState:
    """Iterative uncertainty-driven construction of the query dataset."""
    k_a, _ = cfg.split(enhancement)
    if len(pool) < k_a * cfg.iterations:
        raise ValueError(f"pool of {len(pool)} cannot supply {k_a} x {cfg.iterations} samples")
    ds = dataset if dataset is not None else QueryDataset(model.num_categories)
    state = BuildState(ds, model)
    taken: set[str] = set(ds.sample_ids)
    for it in range(1, cfg.iterations + 1):
        remaining = [s for s in pool if s.sample_id not in taken]
        cold = not state.model.initialized.any()
        if active_learning and it > 1 and not cold:
            selected, u = select_uncertain(state.model, remaining, k_a)
        else:
            rng = np.random.default_rng(derive_seed(cfg.seed, 101, it))
            idx = np.sort(rng.choice(len(remaining), size=k_a, replace=False))
            selected, u = [remaining[i] for i in idx], []
        rejected = _query(victim, selected, state.dataset, "stage-1", cfg, categories)
        taken.update(s.sample_id for s in selected)
        state.model = state.model.train(state.dataset, scenes)
        n_added = 0
        if annotation_update and cfg.update_start is not None and it >= cfg.update_start:
            before = state.dataset.num_annotations
            state.dataset = update_annotations(state.model, state.dataset, scenes, cfg.scales,
                                               cfg.theta_u, cfg.update_match_iou, categories,
                                               log=state.update_log,
                                               thresholds=CategoryThresholds.from_counts(
                                                   state.dataset.category_counts, cfg))
            n_added = state.dataset.num_annotations - before
        state.log.append({
            "stage": 1, "iteration": it,
            "selected": [s.sample_id for s in selected],
            "u_quantiles": _quantiles(u),
            "rejected": rejected,
            "updated_added": n_added,
            "ledger": state.dataset.ledger,
        })
    return state


def stage2(state: BuildState, victim: Victim, index: InternetIndex, report: RareCategoryReport,
           cfg: AttackConfig, scenes: Mapping[str, Scene], k_s: int,
           categories: Collection[int] | None = None) -> BuildState:
    """Enhance rare categories with the fittest search results."""
    if not report.rare or k_s <= 0:
        state.log.append({"stage": 2, "rare": list(report.rare), "selected": [],
                          "ledger": state.dataset.ledger})
        return state
    world = state.model.world
    canvas = world.cfg.canvas_w * world.cfg.canvas_h
    retrieved: dict[str, Scene] = {}
    truncated = []
    for c in report.rare:
        res = internet_search(index, c, cfg.search_k, cfg.seed)
        truncated.append(res.truncated)
        for s in res:
            if s.sample_id not in state.dataset:
                retrieved.setdefault(s.sample_id, s)
    cands = list(retrieved.values())
    fitness = [fitness_score([d.objectness for d in state.model.detect(s)],
                             s.width * s.height / canvas, cfg.alpha).value for s in cands]
    order = sorted(range(len(cands)), key=lambda i: (-fitness[i], cands[i].sample_id))
    selected = [cands[i] for i in order[:k_s]]
    rejected = _query(victim, selected, state.dataset, "stage-2", cfg, categories)
    state.model = state.model.train(state.dataset, scenes)
    state.log.append({
        "stage": 2, "rare": list(report.rare),
        "retrieved": len(cands), "truncated": any(truncated),
        "selected": [s.sample_id for s in selected],
        "fitness_quantiles": _quantiles([fitness[i] for i in order[:k_s]]),
        "rejected": rejected,
        "ledger": state.dataset.ledger,
    })
    return state
