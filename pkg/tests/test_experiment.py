import json
import math

import numpy as np
import pytest

from memlpos import experiment as X
from memlpos import report as R

TINY = {
    "strategies": ["scratch", "MEML", "MEML/gu"],
    "source_losses": ["NLL"],
    "target_losses": ["MSE", "NLL"],
    "env_types": ["LOS", "NLOS"],
    "fractions": [0.5, 1.0],
    "seeds": [0],
    "folds": 2,
    "scenario": {"n_source_samples": 30, "n_target_train": 16, "n_target_val": 4, "n_target_test": 10},
    "source_train": {"max_epochs": 2, "batch_size": 16},
    "target_train": {"max_epochs": 2, "batch_size": 16},
    "target_train_nll": {"max_epochs": 2, "batch_size": 16},
}


@pytest.fixture(scope="module")
def tiny_table():
    return X.run_sweep(X.sweep_from_dict(TINY))


def test_config_invariants():
    with pytest.raises(X.ConfigError):
        X.ExperimentConfig(strategy="scratch", source_loss="NLL")
    with pytest.raises(X.ConfigError):
        X.ExperimentConfig(strategy="MEML", source_loss="none")
    with pytest.raises(X.ConfigError):
        X.ExperimentConfig(strategy="DTL", n_sources=2)
    with pytest.raises(X.ConfigError):
        X.ExperimentConfig(fractions=(0.0, 1.0))
    with pytest.raises(X.ConfigError):
        X.ExperimentConfig(fractions=(1.2,))
    with pytest.raises(X.ConfigError):
        X.ExperimentConfig(strategy="scratch", source_loss="none", target_mode="gradual")
    assert X.ExperimentConfig(strategy="DTL").resolved_sources == 1
    assert X.ExperimentConfig(strategy="MEML").resolved_sources == 4


def test_strategy_labels():
    assert X.parse_strategy("MEML/gu") == ("MEML", "gradual")
    assert X.parse_strategy("DTL") == ("DTL", "finetune")
    with pytest.raises(X.ConfigError):
        X.parse_strategy("MAML")
    assert X.ExperimentConfig(target_mode="gradual").label == "MEML/gu"


def test_sweep_cells():
    cells = list(X.sweep_from_dict(TINY).experiments())
    # scratch once per target loss, the others once per (source, target) loss pair
    assert len(cells) == 2 + 2 + 2
    assert {c.source_loss for c in cells if c.strategy == "scratch"} == {"none"}


def test_sweep_from_dict_rejects_unknown_keys():
    for bad in ({"strategy": ["MEML"]}, {"scenario": {"n_rooms": 3}}, {"target_train": {"momentum": 0.9}},
                {"scenario": {"sources": [{"seed": 1, "colour": "red"}]}}, {"strategies": ["MAML"]}):
        with pytest.raises(X.ConfigError):
            X.sweep_from_dict(bad)


def test_sweep_dict_round_trip():
    sweep = X.sweep_from_dict(TINY)
    again = X.sweep_from_dict(json.loads(json.dumps(X.sweep_to_dict(sweep))))
    assert again == sweep


def test_target_config_per_loss():
    sweep = X.sweep_from_dict({"target_train": {"lr": 0.01}, "target_train_nll": {"lr": 0.002}})
    assert sweep.target_config("MSE").lr == 0.01 and sweep.target_config("MSE").loss == "MSE"
    assert sweep.target_config("NLL").lr == 0.002 and sweep.target_config("NLL").loss == "NLL"
    cell = next(c for c in sweep.experiments() if c.target_loss == "NLL")
    assert cell.target_config("NLL") == sweep.target_config("NLL")


def test_seed_override():
    assert X.sweep_from_dict(TINY, seeds=(7,)).seeds == (7,)


def test_test_split_constant_across_fractions():
    sc = X.Scenario(n_source_samples=10, n_target_train=16, n_target_val=4, n_target_test=10)
    ds = X.Workspace().target_dataset(sc, "LOS")
    pool_a, test_a = X.split_target(sc, ds, 0.2)
    pool_b, test_b = X.split_target(sc, ds, 1.0)
    assert len(pool_a) == 4 and len(pool_b) == 20
    assert np.array_equal(test_a.H, test_b.H) and len(test_a) == 10
    # pool and test never overlap
    keys = {p.tobytes() for p in pool_b.positions}
    assert not keys & {p.tobytes() for p in test_a.positions}


def test_rows_cover_the_matrix(tiny_table):
    t = tiny_table
    assert len(t) == 6 * 2 * 2 * 1 * 2  # cells x envs x fractions x seeds x folds
    assert {r.strategy for r in t.rows} == {"scratch", "MEML", "MEML/gu"}
    assert all((r.crps is not None) == (r.target_loss == "NLL") for r in t.rows)
    assert all(math.isfinite(r.me_m) and r.me_m >= 0 for r in t.rows)
    assert t.pool_sizes == {0.5: 10, 1.0: 20}
    for idx in t.test_indices.values():
        assert np.array_equal(idx, np.arange(20, 30))


def test_scratch_trains_no_source():
    cfg = X.sweep_from_dict(dict(TINY, strategies=["scratch"], target_losses=["MSE"], env_types=["LOS"]))
    ws = X.Workspace()
    table = X.run_sweep(cfg, ws)
    assert table.source_curves == {} and ws.sources == {}
    assert len(table) == 4


def test_source_model_shared_between_finetune_and_gradual(tiny_table):
    ws = X.Workspace()
    X.run_sweep(X.sweep_from_dict(dict(TINY, env_types=["LOS"], fractions=[1.0])), ws)
    assert len(ws.sources) == 1


def test_sweep_is_deterministic(tiny_table):
    again = X.run_sweep(X.sweep_from_dict(TINY))
    assert R.results_csv(again) == R.results_csv(tiny_table)


def test_partial_rows_flushed_before_abort(tmp_path):
    # the second fraction leaves a single sample for two folds
    cfg = X.sweep_from_dict(dict(TINY, strategies=["scratch"], target_losses=["MSE"], env_types=["LOS"],
                                 fractions=[1.0, 0.05]))
    path = tmp_path / "results.csv"
    with pytest.raises(X.ConfigError):
        with R.CsvSink(path) as sink:
            X.run_sweep(cfg, on_row=sink)
    rows = R.read_results_csv(path)
    assert len(rows) == 2 and all(r.fraction == 1.0 for r in rows)


def test_result_row_crps_contract():
    with pytest.raises(ValueError):
        X.ResultRow("MEML", "NLL", "NLL", "LOS", 1.0, 0, 0, 1.0, None)
    with pytest.raises(ValueError):
        X.ResultRow("MEML", "NLL", "MSE", "LOS", 1.0, 0, 0, 1.0, 0.3)


def test_toy_study_orderings_and_determinism():
    a = X.toy_crps_experiment(20_000, seed=1)
    b = X.toy_crps_experiment(20_000, seed=1)
    assert a == b
    assert all(c["passed"] for c in a["checks"])
    assert a["best_reported"] == {"M1": "S1", "M2": "S2"}
    for c in a["calibration"]:
        assert c["expected"] == pytest.approx(c["sigma"] / math.sqrt(math.pi))
        assert c["at_mean"] == pytest.approx(0.2336950 * c["sigma"], rel=1e-6)


def test_toy_study_rejects_few_draws():
    with pytest.raises(ValueError):
        X.toy_crps_experiment(100)
