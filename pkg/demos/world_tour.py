"""
A Tour of the Synthetic World
=============================

The attack never touches pixels. A scene is a canvas holding a few objects,
each with a box and an appearance vector drawn around its category
prototype. Detectors see noisy "blobs", and the victim answers queries with
boxes, labels and scores. This script walks through those pieces.
"""
from dataclasses import replace

import numpy as np

from odextract.geometry import iou
from odextract.runner import ExperimentConfig, setup, victim_map
from odextract.world import Victim, perceive, respond, tail_categories

print("World tour")
print("=" * 40)

###############################################################################
# Build the reference world
# -------------------------
# The shipped config has 10 categories with Zipf-distributed frequencies.

cfg = ExperimentConfig()
world, pools = setup(cfg, seed=0)
print("category frequencies:", np.round(world.frequencies, 3))
print("tail categories (suppressed in the attacker pool):", tail_categories(world))

counts = np.bincount(np.concatenate([s.categories for s in pools.attacker]), minlength=10)
print("objects per category in the attacker pool:", counts)

###############################################################################
# One scene, three views
# ----------------------
# Perception at scales 0.5, 1 and 1.5. Real objects keep their place across
# scales; clutter blobs are redrawn each time.

scene = next(s for s in pools.test if s.num_objects >= 2)
print(f"\nscene {scene.sample_id}: {scene.num_objects} objects, categories {scene.categories}")
for scale in (0.5, 1.0, 1.5):
    blobs = perceive(world, scene, scale)
    n_clutter = sum(b.is_clutter for b in blobs)
    print(f"  scale {scale}: {len(blobs)} blobs ({n_clutter} clutter)")

###############################################################################
# What the victim says
# --------------------
# The victim sometimes misses objects and sometimes reports clutter as
# low-confidence "ghosts".

for a in respond(world, scene, cfg.world):
    best = max((iou(a.box, g.box) for g in scene.ground_truth()), default=0.0)
    kind = "object" if best >= 0.5 else "ghost"
    print(f"  category {a.category}  score {a.score:.2f}  best IoU with truth {best:.2f}  ({kind})")

print(f"\nvictim mAP@50 on the test set: {victim_map(world, pools, cfg.world).map50:.3f}")

###############################################################################
# Budgeted access
# ---------------
# Every query goes through a counter; going over budget raises.

victim = Victim(world, cfg.world, budget=3)
victim.detect_many(pools.attacker[:3])
try:
    victim.detect(pools.attacker[3])
except RuntimeError as exc:
    print("fourth query refused:", exc)

###############################################################################
# The confidence-confusion defense
# --------------------------------
# With ``defense_p = 1`` every confident answer is rescored into a low band.

guarded = replace(cfg.world, defense_p=1.0)
before = [a.score for a in respond(world, scene, cfg.world)]
after = [a.score for a in respond(world, scene, guarded)]
print("scores without defense:", np.round(before, 2))
print("scores with defense:   ", np.round(after, 2))
