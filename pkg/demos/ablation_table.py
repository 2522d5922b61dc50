"""
Ablation Over the Three Components
==================================

Active learning (A), search enhancement (B) and label repair (C) switched
on and off over paired seeds. Two repetitions keep this quick; the CLI's
``ablation`` subcommand runs the full five.
"""
from dataclasses import replace

import numpy as np

from odextract.runner import ExperimentConfig, mean_by, run_ablation

cfg = replace(ExperimentConfig(), repetitions=2)
rows = run_ablation(cfg)

print(f"{'toggles':8s} {'mAP@50':>8s} {'mAP@50:95':>10s} {'relative':>9s}")
for label in ("none", "A", "B", "AB", "AC", "ABC"):
    mine = [r for r in rows if r["toggles"] == label]
    print(f"{label:8s} {np.mean([r['map50'] for r in mine]):8.3f} "
          f"{np.mean([r['map50_95'] for r in mine]):10.3f} "
          f"{np.mean([r['relative'] for r in mine]):9.1%}")

###############################################################################
# Per-seed view
# -------------
# Each repetition uses its own world; within a repetition every arm shares it.

by_seed = {s: mean_by([r for r in rows if r["seed"] == s], "toggles") for s in (0, 1)}
for s, m in by_seed.items():
    print(f"seed {s}: " + ", ".join(f"{k}={v:.3f}" for k, v in m.items()))
