"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Tolerances and seed counts are the gate's own; nothing here is relaxed to
make a result pass. Runs on the shipped reference config.
"""

import time
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from scipy.stats import spearmanr

from odextract import runner
from odextract.builder import dynamic_threshold
from odextract.detection import Annotation, CandidateGroup, Detection
from odextract.evaluation import average_precision, relative_extraction, rows_to_csv
from odextract.geometry import BBox, iou, nms
from odextract.runner import (ABLATION_SETS, PARTIAL_COLUMNS, TABLE_COLUMNS, mean_by,
                              run_ablation, run_attack, run_budget_sweep, run_defense,
                              run_partial, setup)
from odextract.scoring import (classification_uncertainty, fitness_score,
                               localization_uncertainty, sample_uncertainty)
from odextract.update import scale_consistency

import oracles

SEEDS = 5
RESULTS: list[str] = []


def record(capsys, n: int, title: str, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    RESULTS.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


@pytest.fixture(scope="module")
def cfg(reference_cfg):
    assert reference_cfg.repetitions == SEEDS
    runner.clear_caches()
    return reference_cfg


@pytest.fixture(scope="module")
def tables(cfg):
    """All four experiment tables, computed once and shared."""
    t0 = time.perf_counter()
    ablation = run_ablation(cfg)
    t_ablation = time.perf_counter() - t0
    return {
        "ablation": ablation,
        "t_ablation": t_ablation,
        "sweep": run_budget_sweep(cfg),
        "defense": run_defense(cfg),
        "partial": run_partial(cfg),
    }


def _box(rng):
    return oracles.random_rational_box(rng, 4, 12)


def _bbox(t):
    return BBox(*map(float, t))


def _probs(rng, k):
    p = rng.random(k)
    return p / p.sum()


# -- 1 --------------------------------------------------------------------------

def test_formula_oracles(capsys):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = {}
    n = 1000

    def check(name, got, want):
        worst[name] = max(worst.get(name, 0.0), abs(got - want))

    for _ in range(n):
        a, b = _box(rng), _box(rng)
        check("iou", iou(_bbox(a), _bbox(b)), float(oracles.frac_iou(a, b)))

        obj, probs = float(rng.random()), _probs(rng, int(rng.integers(1, 6)))
        g = CandidateGroup(Detection(_bbox(a), obj, probs), ())
        check("eq1", classification_uncertainty(g), oracles.u_class(obj, list(probs)))

        cands = [_box(rng) for _ in range(rng.integers(0, 5))]
        g = CandidateGroup(Detection(_bbox(a), obj, probs), tuple(_bbox(c) for c in cands))
        check("eq2", localization_uncertainty(g), oracles.u_loc(a, cands))

        groups, ref = [], []
        for _ in range(rng.integers(0, 4)):
            o, p, pb = float(rng.random()), _probs(rng, 3), _box(rng)
            cs = [_box(rng) for _ in range(rng.integers(0, 4))]
            groups.append(CandidateGroup(Detection(_bbox(pb), o, p), tuple(_bbox(c) for c in cs)))
            ref.append((o, list(p), pb, cs))
        check("eq3", sample_uncertainty(groups), oracles.u_sample(ref))

        conf = list(rng.random(rng.integers(0, 8)))
        size, alpha = float(rng.uniform(0.25, 4)), float(rng.uniform(0, 3))
        check("eq4", fitness_score(conf, size, alpha).value, oracles.fitness(conf, size, alpha))

        per = [[_box(rng) for _ in range(rng.integers(0, 4))] for _ in range(rng.integers(1, 4))]
        det = Detection(_bbox(a), 0.9, np.array([1.0]))
        per_d = [[Detection(_bbox(x), 0.9, np.array([1.0])) for x in s] for s in per]
        check("eq5", scale_consistency(det, per_d).value, oracles.consistency(a, per))

        cnt = int(rng.integers(0, 5000))
        t0_, tm = sorted(Fraction(int(v), 100) for v in rng.integers(0, 101, 2))
        kappa = Fraction(int(rng.integers(1, 500)), 4)
        check("threshold", dynamic_threshold(cnt, float(t0_), float(tm), float(kappa)),
              float(oracles.threshold(cnt, t0_, tm, kappa)))
    dt = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-9 and dt < 10
    record(capsys, 1, "formula oracles", ok,
           f"{n} inputs x {len(worst)} formulas, max err {max(worst.values()):.2e}, {dt:.1f}s")


# -- 2 --------------------------------------------------------------------------

def _instance(rng):
    gts, preds = {}, {}
    for img in ("i0", "i1"):
        gts[img] = [(_box(rng), int(rng.integers(0, 2))) for _ in range(rng.integers(0, 3))]
        preds[img] = [(_box(rng), int(rng.integers(0, 2)), float(rng.random()))
                      for _ in range(rng.integers(0, 3))]
    return preds, gts


def test_nms_and_ap_equivalence(capsys):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    nms_bad = 0
    for _ in range(1000):
        raw = [(_box(rng), int(rng.integers(0, 3)), float(rng.random()))
               for _ in range(rng.integers(0, 12))]
        dets = [Annotation(_bbox(b), c, s) for b, c, s in raw]
        got = [(a.box.as_tuple(), a.category, a.score) for a in nms(dets, 0.5)]
        want = [(tuple(map(float, b)), c, s) for b, c, s in oracles.naive_nms(raw, 0.5)]
        nms_bad += got != want
    ap_worst, checked = 0.0, 0
    for _ in range(300):
        preds, gts = _instance(rng)
        assert sum(map(len, preds.values())) <= 5 and sum(map(len, gts.values())) <= 5
        P = {k: [Annotation(_bbox(b), c, s) for b, c, s in v] for k, v in preds.items()}
        G = {k: [Annotation(_bbox(b), c, 1.0) for b, c in v] for k, v in gts.items()}
        for c in (0, 1):
            for t in (0.5, 0.75, 0.95):
                want = oracles.brute_ap(preds, gts, c, t)
                got = average_precision(P, G, t, c)
                if (want is None) != (got is None):
                    ap_worst = float("inf")
                elif want is not None:
                    ap_worst = max(ap_worst, abs(got - want))
                    checked += 1
    dt = time.perf_counter() - t0
    ok = nms_bad == 0 and ap_worst <= 1e-9 and dt < 30
    record(capsys, 2, "NMS and AP equivalence", ok,
           f"NMS mismatches {nms_bad}/1000, AP max err {ap_worst:.2e} over {checked} cases, {dt:.1f}s")


# -- 3 --------------------------------------------------------------------------

def test_reported_relative_ratios(capsys):
    pairs = [((0.457, 0.641), 71.3), ((0.579, 0.719), 80.5)]
    got = [100 * relative_extraction(s, v) for (s, v), _ in pairs]
    ok = all(abs(g - w) <= 0.1 for g, (_, w) in zip(got, pairs))
    record(capsys, 3, "relative extraction ratios", ok,
           ", ".join(f"{g:.2f}% (want {w}%)" for g, (_, w) in zip(got, pairs)))


# -- 4 --------------------------------------------------------------------------

def _by_toggle(rows):
    out = {k: {} for k in ABLATION_SETS}
    for r in rows:
        out[r["toggles"]][r["seed"]] = r["map50"]
    return {k: np.array([v[s] for s in sorted(v)]) for k, v in out.items()}


def test_ablation_ordering(capsys, tables):
    m = _by_toggle(tables["ablation"])
    wins = {"A>none": int(np.sum(m["A"] > m["none"])),
            "AB>A": int(np.sum(m["AB"] > m["A"])),
            "ABC>=AB": int(np.sum(m["ABC"] >= m["AB"]))}
    means = {k: round(float(v.mean()), 4) for k, v in m.items()}
    ok = (means["A"] > means["none"] and means["AB"] > means["A"] and means["ABC"] >= means["AB"]
          and all(w >= 4 for w in wins.values()) and tables["t_ablation"] < 300)
    record(capsys, 4, "ablation ordering", ok,
           f"wins {wins} of {SEEDS}, means {means}, {tables['t_ablation']:.0f}s")


# -- 5 --------------------------------------------------------------------------

def test_rare_category_repair(capsys, cfg):
    out = []
    for seed in runner.repetition_seeds(cfg):
        rep = run_attack(cfg.with_toggles(True, True, False), seed)
        before = [rep.stage1.ap50(c) for c in rep.rare]
        after = [rep.final.ap50(c) for c in rep.rare]
        keep = [i for i in range(len(before)) if before[i] is not None and after[i] is not None]
        out.append((np.mean([before[i] for i in keep]), np.mean([after[i] for i in keep])) if keep
                   else (np.nan, np.nan))
    wins = sum(b > a for a, b in out)
    record(capsys, 5, "rare-category repair", wins >= 4,
           f"{wins}/{SEEDS} seeds improve; " + ", ".join(f"{a:.3f}->{b:.3f}" for a, b in out))


# -- 6 --------------------------------------------------------------------------

def test_annotation_update_quality(capsys, cfg):
    noisy = replace(cfg, world=replace(cfg.world, p_miss=0.3))
    stats = []
    for seed in runner.repetition_seeds(noisy):
        rep = run_attack(noisy.with_toggles(True, False, True), seed)
        _, pools = setup(noisy, seed)
        scenes = pools.scene_map()
        hits = added = missed = recovered = 0
        for s in rep.dataset:
            gt = scenes[s.sample_id].ground_truth()
            victim = s.annotations[:s.n_victim]
            new = s.annotations[s.n_victim:]
            withheld = [g for g in gt if not any(iou(a.box, g.box) >= 0.5 for a in victim)]

            def match(a, g):
                return iou(a.box, g.box) >= 0.5 and a.category == g.category
            added += len(new)
            hits += sum(any(match(a, g) for g in withheld) for a in new)
            missed += len(withheld)
            recovered += sum(any(match(a, g) for a in new) for g in withheld)
        stats.append((hits / added if added else 0.0, recovered / missed if missed else 0.0))
    ok = all(p >= 0.8 and r > 0 for p, r in stats)
    record(capsys, 6, "annotation update quality", ok,
           "precision/recall per seed " + ", ".join(f"{p:.3f}/{r:.3f}" for p, r in stats))


# -- 7 --------------------------------------------------------------------------

def test_budget_sweep(capsys, tables, cfg):
    means = mean_by(tables["sweep"], "budget")
    rho = spearmanr(list(means), list(means.values()))[0]
    ok = list(means) == [200, 400, 600, 800, 1000] and rho >= 0.8
    record(capsys, 7, "budget sweep", ok,
           f"Spearman {rho:.2f}; means " + ", ".join(f"{b}:{v:.3f}" for b, v in means.items()))


# -- 8 --------------------------------------------------------------------------

def test_partial_attack(capsys, tables):
    rows = [r for r in tables["partial"] if r["top_n"] == 3]
    full = {r["seed"]: r["partial_map50"] for r in rows if r["arm"] == "full"}
    part = {r["seed"]: r["partial_map50"] for r in rows if r["arm"] == "partial"}
    wins = sum(part[s] > full[s] for s in full)
    record(capsys, 8, "partial attack", wins >= 4 and len(full) == SEEDS,
           f"{wins}/{SEEDS} seeds; " + ", ".join(f"{full[s]:.3f}->{part[s]:.3f}" for s in sorted(full)))


# -- 9 --------------------------------------------------------------------------

def test_defense_sensitivity(capsys, tables):
    means = mean_by(tables["defense"], "defense_p")
    levels = [0.0, 0.25, 0.5, 1.0]
    vals = [means[p] for p in levels]
    ok = list(means) == levels and all(b <= a for a, b in zip(vals, vals[1:])) and vals[-1] < vals[0]
    record(capsys, 9, "defense sensitivity", ok,
           ", ".join(f"p={p}:{v:.3f}" for p, v in zip(levels, vals)))


# -- 10 -------------------------------------------------------------------------

def _csvs(t):
    return {
        "ablation": rows_to_csv(t["ablation"], TABLE_COLUMNS),
        "sweep": rows_to_csv(t["sweep"], TABLE_COLUMNS),
        "defense": rows_to_csv(t["defense"], TABLE_COLUMNS),
        "partial": rows_to_csv(t["partial"], PARTIAL_COLUMNS),
    }


def test_reproducibility_and_budget_law(capsys, cfg, tables, tmp_path):
    first = _csvs(tables)
    for name, text in first.items():
        (tmp_path / f"{name}.csv").write_text(text)
    runner.clear_caches()
    again = _csvs({"ablation": run_ablation(cfg), "sweep": run_budget_sweep(cfg),
                   "defense": run_defense(cfg), "partial": run_partial(cfg)})
    same = [n for n in first if (tmp_path / f"{n}.csv").read_bytes() == again[n].encode()]
    rows = [r for t in ("ablation", "sweep", "defense", "partial") for r in tables[t]]
    over = sum(r["ledger"] > r["budget"] for r in rows)
    ok = len(same) == len(first) and over == 0 and runner.budget_violations == 0
    record(capsys, 10, "reproducibility and budget law", ok,
           f"{len(same)}/{len(first)} CSVs byte-identical, {len(rows)} rows, "
           f"{over} over budget, assertion fired {runner.budget_violations} times")


def test_summary(capsys):
    with capsys.disabled():
        print("\n" + "\n".join(RESULTS))
    assert len(RESULTS) == 10
