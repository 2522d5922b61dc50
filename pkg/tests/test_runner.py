from dataclasses import replace

import pytest
import yaml

from odextract import runner
from odextract.evaluation import rows_to_csv
from odextract.runner import (ABLATION_SETS, TABLE_COLUMNS, ExperimentConfig, check_budget,
                              eval_snapshot, run_ablation, run_attack, run_budget_sweep,
                              run_defense, run_partial, save_attack)


@pytest.fixture(scope="module")
def small():
    base = ExperimentConfig()
    return replace(base, n_attacker=300, n_test=80, n_internet_per_cat=40, repetitions=2,
                   attack=replace(base.attack, budget=100, search_k=40),
                   budgets=[60, 100], defense_levels=[0.0, 1.0])


def test_report_rows_are_attributed(small):
    rep = run_attack(small, 0)
    row = rep.row()
    assert row["config_hash"] == small.config_hash() and row["seed"] == 0
    assert row["ledger"] == rep.dataset.ledger <= small.attack.budget
    assert set(TABLE_COLUMNS) <= set(row)


def test_attack_is_deterministic(small):
    runner.clear_caches()
    a = run_attack(small, 1)
    runner.clear_caches()
    b = run_attack(small, 1)
    assert a.to_dict() == b.to_dict()
    assert a.dataset.to_jsonl() == b.dataset.to_jsonl()
    assert a.model.to_json() == b.model.to_json()


def test_ablation_shape_and_consistency(small):
    rows = run_ablation(small)
    assert len(rows) == 6 * small.repetitions
    assert [r["toggles"] for r in rows[:6]] == list(ABLATION_SETS)
    seed = rows[0]["seed"]
    alone = run_attack(small.with_toggles(False, False, False), seed).row()
    assert rows[0] == alone


def test_sweep_rows_ascend(small):
    rows = run_budget_sweep(replace(small, repetitions=1))
    assert [r["budget"] for r in rows] == [60, 100]
    assert all(r["ledger"] <= r["budget"] for r in rows)
    with pytest.raises(ValueError):
        run_budget_sweep(replace(small, budgets=[100]))


def test_defense_zero_matches_attack(small):
    one = replace(small, repetitions=1)
    rows = run_defense(one)
    assert [r["defense_p"] for r in rows] == [0.0, 1.0]
    assert rows[0] == run_attack(one, one.seed).row()
    with pytest.raises(ValueError):
        run_defense(small, [1.5])


def test_partial_rows(small):
    rows = run_partial(replace(small, repetitions=1))
    assert [r["arm"] for r in rows] == ["full", "partial"]
    assert all(r["top_n"] == 3 for r in rows)


def test_infeasible_budget_fails_early(small):
    big = replace(small, enhancement=False, attack=replace(small.attack, budget=5000))
    with pytest.raises(ValueError, match="infeasible"):
        run_attack(big, 0)


def test_budget_check_counts_violations():
    before = runner.budget_violations
    check_budget(10, 10)
    assert runner.budget_violations == before
    with pytest.raises(AssertionError):
        check_budget(11, 10)
    assert runner.budget_violations == before + 1
    runner.budget_violations = before


def test_config_roundtrip(tmp_path, small):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(small.to_dict()))
    back = ExperimentConfig.load(path)
    assert back == small and back.config_hash() == small.config_hash()
    assert replace(small, output_dir="elsewhere").config_hash() == small.config_hash()


@pytest.mark.parametrize("bad", [{"bogus": 1}, {"world": {"bogus": 1}}, {"attack": {"nope": 2}},
                                 {"repetitions": 0}, {"budgets": [400, 200]}])
def test_config_rejects_bad_documents(bad):
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict(bad)


def test_reference_config_is_the_default(reference_cfg):
    assert reference_cfg.config_hash() == ExperimentConfig().config_hash()


def test_gray_and_black_box_hyperparameters(small):
    gray = runner.substitute_hyperparameters(small)
    black = runner.substitute_hyperparameters(replace(small, gray_box=False))
    assert gray["temp"] == small.world.victim_conf_temp
    assert black["temp"] != gray["temp"] and black["nms_thresh"] != gray["nms_thresh"]
    assert runner.substitute_hyperparameters(replace(small, substitute={"temp": 9.0}))["temp"] == 9.0


def test_snapshot_roundtrip(tmp_path, small):
    rep = run_attack(small, 0)
    out = save_attack(rep, tmp_path / "run", small)
    for name in ("report.json", "report.csv", "build_log.jsonl", "update_log.jsonl",
                 "dataset.jsonl", "model.json", "run.json"):
        assert (out / name).exists()
    check = eval_snapshot(out)
    assert check.consistent
    assert check.report.map50 == rep.final.map50
    assert check.ledger == rep.ledger and check.num_samples == len(rep.dataset)


def test_tables_are_byte_stable(small):
    cfg = replace(small, repetitions=1)
    runner.clear_caches()
    a = rows_to_csv(run_ablation(cfg), TABLE_COLUMNS)
    runner.clear_caches()
    b = rows_to_csv(run_ablation(cfg), TABLE_COLUMNS)
    assert a == b
