"""Command-line front end for the experiment runner.

Every subcommand writes CSV tables (and JSON lines for logs) under ``--out``
and prints a one-line JSON summary on stdout. Failures exit nonzero with a
JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import runner
from .runner import ExperimentConfig

SUMMARY_COLUMNS = ["group", "runs", "map50", "map50_95", "relative"]


def _summarise(rows: Sequence[dict], key: str) -> list[dict]:
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r)
    out = []
    for k, rs in groups.items():
        def mean(col):
            vals = [r[col] for r in rs if r.get(col) is not None]
            return float(np.mean(vals)) if vals else None
        out.append({"group": k, "runs": len(rs), "map50": mean("map50"),
                    "map50_95": mean("map50_95"), "relative": mean("relative")})
    return out


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.reps is not None:
        cfg = replace(cfg, repetitions=args.reps)
    if args.out is not None:
        cfg = replace(cfg, output_dir=args.out)
    if args.no_active_learning:
        cfg = replace(cfg, active_learning=False)
    if args.no_enhancement:
        cfg = replace(cfg, enhancement=False)
    if args.no_update:
        cfg = replace(cfg, annotation_update=False)
    return cfg


def cmd_attack(args, cfg: ExperimentConfig) -> dict:
    if args.defense_p is not None:
        cfg = replace(cfg, world=replace(cfg.world, defense_p=args.defense_p))
    top_n = args.partial_top[0] if args.partial_top else None
    rep = runner.run_attack(cfg, cfg.seed, top_n=top_n)
    out = Path(cfg.output_dir) / f"attack-{cfg.config_hash()}-s{cfg.seed}"
    if top_n is not None:
        out = out.with_name(out.name + f"-top{top_n}")
    runner.save_attack(rep, out, cfg)
    return {"out": str(out), **rep.row()}


def _table(cfg: ExperimentConfig, name: str, rows: list[dict], columns, key: str) -> dict:
    out = Path(cfg.output_dir)
    runner.write_table(out / f"{name}.csv", rows, columns)
    summary = _summarise(rows, key)
    runner.write_table(out / f"{name}_summary.csv", summary, SUMMARY_COLUMNS)
    return {"out": str(out / f"{name}.csv"), "config_hash": cfg.config_hash(),
            "summary": {str(s["group"]): s["map50"] for s in summary}}


def cmd_ablation(args, cfg: ExperimentConfig) -> dict:
    rows = runner.run_ablation(cfg, workers=args.workers)
    return _table(cfg, "ablation", rows, runner.TABLE_COLUMNS, "toggles")


def cmd_sweep(args, cfg: ExperimentConfig) -> dict:
    if args.budgets:
        cfg = replace(cfg, budgets=list(args.budgets))
    rows = runner.run_budget_sweep(cfg, workers=args.workers)
    return _table(cfg, "sweep", rows, runner.TABLE_COLUMNS, "budget")


def cmd_defense(args, cfg: ExperimentConfig) -> dict:
    levels = args.defense_p_levels or ([args.defense_p] if args.defense_p is not None else None)
    rows = runner.run_defense(cfg, levels, workers=args.workers)
    return _table(cfg, "defense", rows, runner.TABLE_COLUMNS, "defense_p")


def cmd_partial(args, cfg: ExperimentConfig) -> dict:
    rows = runner.run_partial(cfg, args.partial_top or None, workers=args.workers)
    out = Path(cfg.output_dir)
    runner.write_table(out / "partial.csv", rows, runner.PARTIAL_COLUMNS)
    means = {}
    for r in rows:
        means.setdefault(f"top{r['top_n']}-{r['arm']}", []).append(r["partial_map50"])
    return {"out": str(out / "partial.csv"), "config_hash": cfg.config_hash(),
            "summary": {k: float(np.mean(v)) for k, v in means.items()}}


def cmd_eval_snapshot(args, cfg: ExperimentConfig) -> dict:
    check = runner.eval_snapshot(args.run_dir)
    out = Path(args.run_dir) / "snapshot_eval.csv"
    row = check.row()
    runner.write_table(out, [row], list(row))
    if not check.consistent:
        raise RuntimeError("stored model disagrees with a refit on the stored dataset")
    return {"out": str(out), **row}


COMMANDS = {
    "attack": cmd_attack,
    "ablation": cmd_ablation,
    "sweep": cmd_sweep,
    "defense": cmd_defense,
    "partial": cmd_partial,
    "eval-snapshot": cmd_eval_snapshot,
}


class _Parser(argparse.ArgumentParser):
    """Reports usage errors as a JSON record too."""

    def error(self, message: str):
        record = {"ok": False, "command": None, "error": "UsageError", "message": message}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        self.exit(2)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML file mirroring ExperimentConfig fields")
    common.add_argument("--seed", type=int, help="base seed (repetition r uses seed + r)")
    common.add_argument("--reps", type=int, help="number of paired repetitions")
    common.add_argument("--out", help="output directory")
    common.add_argument("--no-active-learning", action="store_true")
    common.add_argument("--no-enhancement", action="store_true")
    common.add_argument("--no-update", action="store_true")
    common.add_argument("--partial-top", type=int, nargs="+", metavar="N",
                        help="restrict the attack to the N most frequent categories")
    common.add_argument("--defense-p", type=float, help="victim confidence-perturbation rate")
    common.add_argument("--workers", type=int, default=1, help="process pool size for tables")

    p = _Parser(prog="odextract", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("attack", parents=[common], help="one full attack for one seed")
    sub.add_parser("ablation", parents=[common], help="all six toggle sets over paired seeds")
    sp = sub.add_parser("sweep", parents=[common], help="query budget sweep")
    sp.add_argument("--budgets", type=int, nargs="+")
    dp = sub.add_parser("defense", parents=[common], help="defense_p sweep")
    dp.add_argument("--levels", dest="defense_p_levels", type=float, nargs="+")
    sub.add_parser("partial", parents=[common], help="partial versus full attack")
    ep = sub.add_parser("eval-snapshot", parents=[common], help="re-evaluate a saved attack")
    ep.add_argument("run_dir", help="directory written by the attack subcommand")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        result = COMMANDS[args.command](args, cfg)
    except Exception as exc:  # noqa: BLE001 - reported as a record
        record = {"ok": False, "command": args.command, "error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 1
    print(json.dumps({"ok": True, "command": args.command, **result}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
