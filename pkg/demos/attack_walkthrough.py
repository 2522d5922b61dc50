"""
One Attack, Step by Step
========================

The full pipeline behind ``odextract attack``, unrolled: uncertainty-driven
querying from the attacker's own pool, rare-category detection, search-based
enhancement, scale-consistent label repair and a final evaluation.
"""
import numpy as np

from odextract.builder import CategoryThresholds, identify_rare, stage1, stage2
from odextract.evaluation import evaluate, relative_extraction
from odextract.runner import ExperimentConfig, setup, substitute_hyperparameters, victim_map
from odextract.substitute import PrototypeDetector
from odextract.update import update_annotations
from odextract.world import Victim

cfg = ExperimentConfig()
acfg = cfg.attack
world, pools = setup(cfg, seed=0)
scenes = pools.scene_map()
gts = {s.sample_id: s.ground_truth() for s in pools.test}


def test_map(model):
    return evaluate({s.sample_id: model.predict(s) for s in pools.test}, gts)


victim = Victim(world, cfg.world, budget=acfg.budget)
model = PrototypeDetector.empty(world.num_categories, world.cfg.dim, world=world,
                                **substitute_hyperparameters(cfg))
k_a, k_s = acfg.split()
print(f"budget {acfg.budget}: {acfg.iterations} rounds of {k_a} pool queries, then {k_s} search queries")

###############################################################################
# Stage 1: query what the substitute is unsure about
# --------------------------------------------------
# Round one is random (an empty model is equally unsure of everything).

state = stage1(model, victim, pools.attacker, acfg, scenes)
for rec in state.log:
    q = rec["u_quantiles"]
    spread = f"U median {q[2]:.3f}, max {q[4]:.3f}" if q else "random"
    print(f"  round {rec['iteration']}: ledger {rec['ledger']:4d}, rejected {rec['rejected']:3d}, {spread}")
print("stage 1 mAP@50:", round(test_map(state.model).map50, 3))

###############################################################################
# Which categories are starved?

report = identify_rare(state.dataset, acfg.rare_cutoff)
print("labels per category:", report.counts)
print("rare categories:", report.rare)

###############################################################################
# Stage 2: top up rare categories from search results
# ---------------------------------------------------

state = stage2(state, victim, pools.internet, report, acfg, scenes, k_s)
rec = state.log[-1]
print(f"retrieved {rec['retrieved']} scenes, queried {len(rec['selected'])}; ledger {rec['ledger']}")
print("after stage 2 mAP@50:", round(test_map(state.model).map50, 3))

###############################################################################
# Label repair by scale consistency
# ---------------------------------
# Detections that persist across scales and overlap no existing label are
# added as extra ground truth. No queries are spent.

log = []
repaired = update_annotations(state.model, state.dataset, scenes, acfg.scales, acfg.theta_u,
                              acfg.update_match_iou, log=log,
                              thresholds=CategoryThresholds.from_counts(
                                  state.dataset.category_counts, acfg))
added = repaired.num_annotations - state.dataset.num_annotations
print(f"added {added} labels to {len(log)} scenes; ledger still {repaired.ledger}")

final = state.model.train(repaired, scenes)
rep = test_map(final)
vic = victim_map(world, pools, cfg.world).map50
print(f"\nfinal mAP@50 {rep.map50:.3f}, mAP@50:95 {rep.map50_95:.3f}, victim {vic:.3f}, "
      f"relative {relative_extraction(rep.map50, vic):.1%}")
print("per-category AP@50:", np.round([rep.ap50(c) or 0.0 for c in range(10)], 2))
