"""Seeded experiment orchestration: one attack, the six-way ablation, budget
sweeps, defense sweeps and partial attacks. Every comparison is paired: all
arms of one repetition share the same world and pools."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .builder import AttackConfig, CategoryThresholds, identify_rare, stage1, stage2
from .detection import QueryDataset
from .evaluation import EvalReport, evaluate, frequency_ranking, partial_eval, relative_extraction, rows_to_csv
from .substitute import PrototypeDetector
from .update import update_annotations
from .world import Pools, Victim, World, WorldConfig, generate_pools, generate_world, respond

log = logging.getLogger(__name__)

ABLATION_SETS = {
    "none": (False, False, False),
    "A": (True, False, False),
    "B": (False, True, False),
    "AB": (True, True, False),
    "AC": (True, False, True),
    "ABC": (True, True, True),
}


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    active_learning: bool = True
    enhancement: bool = True
    annotation_update: bool = True
    gray_box: bool = True
    substitute: dict = field(default_factory=dict)
    budgets: list = field(default_factory=lambda: [200, 400, 600, 800, 1000])
    partial_top: list = field(default_factory=lambda: [3])
    defense_levels: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 1.0])
    repetitions: int = 5
    seed: int = 0
    n_attacker: int = 2000
    n_test: int = 500
    n_internet_per_cat: int = 300
    output_dir: str = "runs"

    def __post_init__(self) -> None:
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if any(b <= 0 for b in self.budgets) or list(self.budgets) != sorted(self.budgets):
            raise ValueError("budgets must be positive and ascending")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "world" in d:
            d["world"] = _build(WorldConfig, d["world"])
        if "attack" in d:
            d["attack"] = _build(AttackConfig, d["attack"])
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def to_dict(self) -> dict:
        d = {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self)}
        d["world"] = self.world.to_dict()
        d["attack"] = self.attack.to_dict()
        return d

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def with_toggles(self, active_learning: bool, enhancement: bool, annotation_update: bool) -> "ExperimentConfig":
        return replace(self, active_learning=active_learning, enhancement=enhancement,
                       annotation_update=annotation_update)

    @property
    def toggle_label(self) -> str:
        s = "".join(t for t, on in zip("ABC", (self.active_learning, self.enhancement,
                                                self.annotation_update)) if on)
        return s or "none"


def _build(cls, d: Mapping[str, Any]):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def repetition_seeds(cfg: ExperimentConfig) -> list[int]:
    return [cfg.seed + r for r in range(cfg.repetitions)]


# -- shared setup -------------------------------------------------------------

_SETUP_CACHE: dict[str, tuple[World, Pools]] = {}


def setup(cfg: ExperimentConfig, seed: int) -> tuple[World, Pools]:
    """World and pools for one repetition (memoised; both are immutable)."""
    wcfg = replace(cfg.world, seed=seed, defense_p=0.0)
    key = json.dumps([wcfg.to_dict(), cfg.n_attacker, cfg.n_test, cfg.n_internet_per_cat], sort_keys=True)
    if key not in _SETUP_CACHE:
        world = generate_world(wcfg)
        pools = generate_pools(world, cfg.n_attacker, cfg.n_test, cfg.n_internet_per_cat, seed)
        if len(_SETUP_CACHE) > 16:
            _SETUP_CACHE.clear()
        _SETUP_CACHE[key] = (world, pools)
    return _SETUP_CACHE[key]


def substitute_hyperparameters(cfg: ExperimentConfig) -> dict:
    """Gray box aligns temperature and NMS with the victim; black box does not."""
    hp = {"temp": cfg.world.victim_conf_temp, "nms_thresh": cfg.world.victim_nms}
    if not cfg.gray_box:
        hp = {"temp": 2.0 * cfg.world.victim_conf_temp,
              "nms_thresh": min(cfg.world.victim_nms + 0.15, 0.9), "k_cand": 3}
    hp.update(cfg.substitute)
    return hp


def test_ground_truth(pools: Pools) -> dict:
    return {s.sample_id: s.ground_truth() for s in pools.test}


def predict_all(model: PrototypeDetector, scenes) -> dict:
    return {s.sample_id: model.predict(s) for s in scenes}


def victim_map(world: World, pools: Pools, wcfg: WorldConfig) -> EvalReport:
    preds = {s.sample_id: respond(world, s, wcfg) for s in pools.test}
    return evaluate(preds, test_ground_truth(pools))


def target_categories(pools: Pools, top_n: int | None) -> list[int] | None:
    """The categories a top-n partial attack goes after.

    Uses the same test-set frequency ranking that ``partial_eval`` scores
    against, so attack and evaluation agree on the target set.
    """
    if top_n is None:
        return None
    return sorted(frequency_ranking(test_ground_truth(pools))[:top_n])


# -- single attack ------------------------------------------------------------

@dataclass
class ExperimentReport:
    config_hash: str
    seed: int
    toggles: str
    budget: int
    defense_p: float
    top_n: int | None
    ledger: int
    victim: EvalReport
    final: EvalReport
    stage1: EvalReport
    rare: list[int]
    partial: EvalReport | None = None
    build_log: list = field(default_factory=list, repr=False)
    update_log: list = field(default_factory=list, repr=False)
    dataset: QueryDataset | None = field(default=None, repr=False)
    model: PrototypeDetector | None = field(default=None, repr=False)

    def row(self) -> dict:
        r = {
            "config_hash": self.config_hash, "seed": self.seed, "toggles": self.toggles,
            "budget": self.budget, "defense_p": self.defense_p,
            "top_n": "" if self.top_n is None else self.top_n,
            "ledger": self.ledger,
            "map50": self.final.map50, "map50_95": self.final.map50_95,
            "relative": self.final.relative,
            "victim_map50": self.victim.map50,
        }
        if self.partial is not None:
            r["partial_map50"] = self.partial.map50
            r["partial_map50_95"] = self.partial.map50_95
        return r

    def to_dict(self) -> dict:
        d = self.row()
        d.update(final=self.final.to_dict(), stage1=self.stage1.to_dict(),
                 victim=self.victim.to_dict(), rare=self.rare,
                 partial=None if self.partial is None else self.partial.to_dict())
        return d


# number of times check_budget has fired in this process
budget_violations = 0


def check_budget(ledger: int, budget: int) -> None:
    global budget_violations
    if ledger > budget:
        budget_violations += 1
        raise AssertionError(f"ledger {ledger} exceeds budget {budget}")


def run_attack(cfg: ExperimentConfig, seed: int | None = None, top_n: int | None = None) -> ExperimentReport:
    """Full pipeline for one seed: build the query set, train, evaluate."""
    seed = cfg.seed if seed is None else seed
    world, pools = setup(cfg, seed)
    wcfg = replace(cfg.world, seed=seed)
    acfg = replace(cfg.attack, seed=seed)
    k_a, k_s = acfg.split(cfg.enhancement)
    if k_a * acfg.iterations > len(pools.attacker):
        raise ValueError(f"budget {acfg.budget} infeasible for a pool of {len(pools.attacker)}")
    victim = Victim(world, wcfg, budget=acfg.budget)
    scenes = pools.scene_map()
    cats = target_categories(pools, top_n)
    gts = test_ground_truth(pools)

    model = PrototypeDetector.empty(world.num_categories, world.cfg.dim, world=world,
                                    **substitute_hyperparameters(cfg))
    state = stage1(model, victim, pools.attacker, acfg, scenes, cfg.active_learning,
                   cfg.annotation_update, cfg.enhancement, cats)
    stage1_model = state.model.train(state.dataset, scenes)
    stage1_eval = evaluate(predict_all(stage1_model, pools.test), gts)
    report = identify_rare(state.dataset, acfg.rare_cutoff, cats)
    if cfg.enhancement:
        state = stage2(state, victim, pools.internet, report, acfg, scenes, k_s, cats)
    if cfg.annotation_update:
        state.dataset = update_annotations(state.model, state.dataset, scenes, acfg.scales,
                                           acfg.theta_u, acfg.update_match_iou, cats,
                                           log=state.update_log,
                                           thresholds=CategoryThresholds.from_counts(
                                               state.dataset.category_counts, acfg))
    final_model = state.model.train(state.dataset, scenes)
    check_budget(state.dataset.ledger, acfg.budget)
    check_budget(victim.queries, acfg.budget)

    vrep = victim_map(world, pools, wcfg)
    preds = predict_all(final_model, pools.test)
    final = evaluate(preds, gts)
    final.relative = relative_extraction(final.map50, vrep.map50)
    stage1_eval.relative = relative_extraction(stage1_eval.map50, vrep.map50)
    partial = None
    if top_n is not None:
        partial = partial_eval(preds, gts, top_n)
        partial.relative = relative_extraction(partial.map50, partial_eval(
            {s.sample_id: respond(world, s, wcfg) for s in pools.test}, gts, top_n).map50)
    return ExperimentReport(cfg.config_hash(), seed, cfg.toggle_label, acfg.budget, wcfg.defense_p,
                            top_n, state.dataset.ledger, vrep, final, stage1_eval, list(report.rare),
                            partial, state.log, state.update_log, state.dataset, final_model)


# -- tables -------------------------------------------------------------------

# table rows by (config hash, seed); runs are pure, so arms shared between
# tables (e.g. defense_p = 0 and the ABC ablation arm) are computed once
_ROW_CACHE: dict[tuple[str, int], dict] = {}


def clear_caches() -> None:
    _ROW_CACHE.clear()
    _SETUP_CACHE.clear()


def _attack_row(cfg: ExperimentConfig, seed: int, label: str | None = None) -> dict:
    key = (cfg.config_hash(), seed)
    if key not in _ROW_CACHE:
        _ROW_CACHE[key] = run_attack(cfg, seed).row()
    row = dict(_ROW_CACHE[key])
    if label is not None:
        row["toggles"] = label
    return row


def _partial_rows(base: ExperimentConfig, seed: int, n: int) -> list[dict]:
    _, pools = setup(base, seed)
    gts = test_ground_truth(pools)
    full = run_attack(base, seed)
    part = run_attack(base, seed, top_n=n)
    full_partial = partial_eval(predict_all(full.model, pools.test), gts, n)
    rows = []
    for arm, rep, ev in (("full", full, full_partial), ("partial", part, part.partial)):
        row = rep.row()
        row.update(arm=arm, top_n=n, partial_map50=ev.map50, partial_map50_95=ev.map50_95)
        rows.append(row)
    return rows


def _starmap(fn, jobs: list[tuple], workers: int) -> list:
    """Run independent jobs, in order, optionally in a process pool."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def run_ablation(cfg: ExperimentConfig, workers: int = 1) -> list[dict]:
    jobs = [(cfg.with_toggles(*toggles), seed, label)
            for seed in repetition_seeds(cfg) for label, toggles in ABLATION_SETS.items()]
    return _starmap(_attack_row, jobs, workers)


def run_budget_sweep(cfg: ExperimentConfig, workers: int = 1) -> list[dict]:
    if len(cfg.budgets) < 2:
        raise ValueError("a sweep needs at least two budgets")
    jobs = [(replace(cfg, attack=replace(cfg.attack, budget=int(b))), seed)
            for b in cfg.budgets for seed in repetition_seeds(cfg)]
    return _starmap(_attack_row, jobs, workers)


def run_defense(cfg: ExperimentConfig, levels: Sequence[float] | None = None,
                workers: int = 1) -> list[dict]:
    levels = cfg.defense_levels if levels is None else levels
    for p in levels:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"defense_p {p} outside [0, 1]")
    jobs = [(replace(cfg, world=replace(cfg.world, defense_p=float(p))), seed)
            for p in levels for seed in repetition_seeds(cfg)]
    return _starmap(_attack_row, jobs, workers)


def run_partial(cfg: ExperimentConfig, top_ns: Sequence[int] | None = None,
                workers: int = 1) -> list[dict]:
    """Partial versus full attack, both scored on the top-n categories only.

    Both arms skip search enhancement so that each spends its whole budget
    on the attacker pool.
    """
    top_ns = cfg.partial_top if top_ns is None else top_ns
    base = replace(cfg, enhancement=False)
    jobs = [(base, seed, int(n)) for n in top_ns for seed in repetition_seeds(cfg)]
    return [row for rows in _starmap(_partial_rows, jobs, workers) for row in rows]


def mean_by(rows: Sequence[Mapping], key: str, value: str = "map50") -> dict:
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r[value])
    return {k: float(np.mean(v)) for k, v in groups.items()}


# -- persistence --------------------------------------------------------------

TABLE_COLUMNS = ["config_hash", "seed", "toggles", "budget", "defense_p", "top_n", "ledger",
                 "map50", "map50_95", "relative", "victim_map50"]
PARTIAL_COLUMNS = TABLE_COLUMNS + ["arm", "partial_map50", "partial_map50_95"]


def write_jsonl(path: Path, records: Sequence[Mapping]) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def write_table(path: Path, rows: Sequence[Mapping], columns: Sequence[str]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(rows_to_csv(rows, columns))
    return path


def save_attack(rep: ExperimentReport, out: str | Path, cfg: ExperimentConfig | None = None) -> Path:
    """Write one attack's report, logs, dataset snapshot and model to ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(rep.to_dict(), sort_keys=True, indent=2) + "\n")
    cols = TABLE_COLUMNS + (["partial_map50", "partial_map50_95"] if rep.partial is not None else [])
    (out / "report.csv").write_text(rows_to_csv([rep.row()], cols))
    write_jsonl(out / "build_log.jsonl", rep.build_log)
    write_jsonl(out / "update_log.jsonl", rep.update_log)
    rep.dataset.save(out / "dataset.jsonl")
    (out / "model.json").write_text(rep.model.to_json() + "\n")
    if cfg is not None:
        run = {"config": cfg.to_dict(), "seed": rep.seed, "top_n": rep.top_n}
        (out / "run.json").write_text(json.dumps(run, sort_keys=True, indent=2) + "\n")
    return out


@dataclass
class SnapshotCheck:
    report: EvalReport
    retrained: EvalReport
    ledger: int
    num_samples: int
    consistent: bool

    def row(self) -> dict:
        return {"map50": self.report.map50, "map50_95": self.report.map50_95,
                "retrained_map50": self.retrained.map50, "ledger": self.ledger,
                "num_samples": self.num_samples, "consistent": self.consistent}


def eval_snapshot(run_dir: str | Path) -> SnapshotCheck:
    """Re-evaluate a saved attack from its run record, dataset and model.

    The stored model is scored on the regenerated test set, and a fresh fit
    on the stored dataset is scored alongside it; ``consistent`` says whether
    both agree.
    """
    run_dir = Path(run_dir)
    run = json.loads((run_dir / "run.json").read_text())
    cfg = ExperimentConfig.from_dict(run["config"])
    seed, top_n = int(run["seed"]), run["top_n"]
    world, pools = setup(cfg, seed)
    dataset = QueryDataset.load(run_dir / "dataset.jsonl", world.num_categories)
    model = PrototypeDetector.from_json((run_dir / "model.json").read_text(), world=world)
    gts = test_ground_truth(pools)
    wcfg = replace(cfg.world, seed=seed)
    vrep = victim_map(world, pools, wcfg)
    rep = evaluate(predict_all(model, pools.test), gts)
    fresh = model.train(dataset, pools.scene_map())
    again = evaluate(predict_all(fresh, pools.test), gts)
    rep.relative = relative_extraction(rep.map50, vrep.map50)
    again.relative = relative_extraction(again.map50, vrep.map50)
    if top_n is not None:
        rep = partial_eval(predict_all(model, pools.test), gts, int(top_n))
        again = partial_eval(predict_all(fresh, pools.test), gts, int(top_n))
    return SnapshotCheck(rep, again, dataset.ledger, len(dataset), rep.to_dict() == again.to_dict())
