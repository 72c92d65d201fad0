import json
import math
from dataclasses import replace
from pathlib import Path

import pandas as pd
import pytest

from retention import cli
from retention.baselines import CemConfig
from retention.config import Algorithm, ExperimentConfig, apply_overrides, from_dict, load_json, parse_override
from retention.core import ConfigError, RetentionError
from retention.harness import (
    Comparison,
    ResultRow,
    ToyMdp,
    check_acceptance,
    compare,
    comparison_table,
    run,
    toy_mdp_check,
)
from retention.rlur import TrainerConfig
from retention.simenv import METRICS_COLUMNS, SimConfig

EXPERIMENT_JSON = Path(__file__).resolve().parents[2] / "experiment.json"


def tiny(algorithm, out_dir, seed=0, episodes=2):
    return ExperimentConfig(
        algorithm=algorithm,
        seed=seed,
        episodes=episodes,
        window=episodes,
        output_dir=str(out_dir),
        sim=SimConfig(population=20, episode_days=2),
        trainer=TrainerConfig(hidden=(8,), batch_size=16, min_fill=32, train_every=4, buffer_capacity=2000),
        cem=CemConfig(population_size=4, eval_users=10),
    )


# -- toy chain --

@pytest.mark.parametrize("gamma", [0.0, 0.9, 0.95])
def test_retention_critic_matches_the_toy_chain(gamma):
    report = toy_mdp_check(gamma=gamma)
    assert report.expected == pytest.approx(2.0 + gamma * 4.0)
    assert report.passed, f"Q={report.estimate} expected={report.expected}"


def test_toy_chain_rejects_undiscounted_returns():
    with pytest.raises(ConfigError):
        toy_mdp_check(gamma=1.0)


def test_toy_chain_value_scales_with_the_returns():
    assert ToyMdp(first_return=1.0, second_return=3.0).expected_value(0.5) == pytest.approx(2.5)


# -- config --

def test_experiment_file_loads():
    config = load_json(EXPERIMENT_JSON).validate()
    assert config.algorithm is Algorithm.RLUR
    assert config.trainer.hidden == (32, 32)
    assert config == ExperimentConfig().validate()
    assert config.sim.return_logits_high == SimConfig().return_logits_high


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError):
        from_dict({"nonsense": 1})
    with pytest.raises(ConfigError):
        from_dict({"sim": {"populaton": 10}})
    with pytest.raises(ConfigError):
        from_dict({"algorithm": "PPO"})


def test_overrides_parse_json_values():
    assert parse_override("trainer.hidden=[32, 32]") == {"trainer": {"hidden": [32, 32]}}
    assert parse_override("algorithm=TD3") == {"algorithm": "TD3"}
    with pytest.raises(ConfigError):
        parse_override("sim.population")
    with pytest.raises(ConfigError):
        parse_override("a.b.c=1")


def test_overrides_apply_last():
    base = from_dict({"seed": 3, "sim": {"population": 50}})
    config = apply_overrides(base, ["sim.population=80", "trainer.hidden=[16]", "seed=7"])
    assert config.sim.population == 80 and config.trainer.hidden == (16,) and config.seed == 7
    assert base.sim.population == 50


def test_window_must_fit_the_episodes():
    with pytest.raises(ConfigError):
        ExperimentConfig(episodes=5, window=6).validate()


def test_digest_tracks_content():
    a = ExperimentConfig()
    assert a.digest() == ExperimentConfig().digest()
    assert a.digest() != replace(a, seed=1).digest()
    assert a.run_name == "RLUR_seed0"


# -- runs --

@pytest.mark.parametrize("algorithm", list(Algorithm))
def test_run_writes_its_artifacts(tmp_path, algorithm):
    row = run(tiny(algorithm, tmp_path))
    assert row.algorithm == algorithm.value and row.episodes == 2
    assert math.isfinite(row.avg_returning_day) and 0.0 <= row.day1_retention <= 1.0

    metrics = pd.read_csv(tmp_path / "metrics.csv")
    assert tuple(metrics.columns) == METRICS_COLUMNS and len(metrics) == 2
    assert row.avg_returning_day == pytest.approx(metrics["avg_return_day"].mean())
    assert json.loads((tmp_path / "config.json").read_text())["algorithm"] == algorithm.value
    assert json.loads((tmp_path / "result.json").read_text())["seed"] == 0
    has_agent = algorithm is not Algorithm.CEM
    assert (tmp_path / "checkpoint.npz").exists() == has_agent
    assert (tmp_path / "losses.csv").exists() == has_agent


def test_runs_are_reproducible(tmp_path):
    first = run(tiny(Algorithm.RLUR, tmp_path / "a", seed=4))
    second = run(tiny(Algorithm.RLUR, tmp_path / "b", seed=4))
    assert first.avg_returning_day == second.avg_returning_day
    assert first.day1_retention == second.day1_retention
    assert (tmp_path / "a" / "metrics.csv").read_text() == (tmp_path / "b" / "metrics.csv").read_text()
    assert (tmp_path / "a" / "losses.csv").read_text() == (tmp_path / "b" / "losses.csv").read_text()


def test_summary_averages_the_final_window(tmp_path):
    config = replace(tiny(Algorithm.CEM, tmp_path, episodes=3), window=2)
    row = run(config)
    metrics = pd.read_csv(tmp_path / "metrics.csv")
    assert row.episodes == 3
    assert row.day1_retention == pytest.approx(metrics["day1_retention"].tail(2).mean())


# -- comparison --

def test_comparison_table_ranks_algorithms():
    rows = [
        ResultRow("A", 0, 3.0, 0.5, 10),
        ResultRow("A", 1, 3.2, 0.6, 10),
        ResultRow("B", 0, 2.0, 0.4, 10),
        ResultRow("B", 1, 2.2, 0.4, 10),
    ]
    table = comparison_table(rows)
    assert table["algorithm"].tolist() == ["B", "A"]
    assert table["seeds"].tolist() == [2, 2]
    assert table["avg_returning_day_mean"].tolist() == pytest.approx([2.1, 3.1])
    assert table["avg_returning_day_rank"].tolist() == [1, 2]
    assert table["day1_retention_rank"].tolist() == [2, 1]


def test_compare_continues_past_a_failed_run(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory")
    configs = [
        tiny(Algorithm.CEM, tmp_path / "cem0", seed=0),
        tiny(Algorithm.CEM, tmp_path / "cem1", seed=1),
        tiny(Algorithm.TD3, blocker / "td3", seed=0),
    ]
    result = compare(configs, output_dir=tmp_path / "cmp")
    assert result.partial and result.failures == ["TD3_seed0"]
    assert result.table["algorithm"].tolist() == ["CEM"]
    assert result.table["seeds"].tolist() == [2]

    summary = json.loads((tmp_path / "cmp" / "summary.json").read_text())
    assert summary["partial"] is True and summary["failed_runs"] == ["TD3_seed0"]
    assert len(pd.read_csv(tmp_path / "cmp" / "runs.csv")) == 2
    assert result.acceptance is None and summary["acceptance"] is None


def test_compare_needs_two_runs(tmp_path):
    with pytest.raises(ConfigError):
        compare([tiny(Algorithm.CEM, tmp_path)])


def test_compare_fails_when_every_run_fails(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    configs = [tiny(Algorithm.CEM, blocker / "a"), tiny(Algorithm.CEM, blocker / "b", seed=1)]
    with pytest.raises(RetentionError):
        compare(configs, output_dir=tmp_path / "cmp")


# -- command line --

def test_cli_toy_check_passes(capsys):
    assert cli.main(["toy-check", "--gamma", "0.9"]) == cli.EXIT_OK
    assert "ok" in capsys.readouterr().out


def test_cli_maps_config_errors(tmp_path):
    assert cli.main(["train", "--output-dir", str(tmp_path), "--set", "sim.bogus=1"]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--output-dir", str(tmp_path), "--set", "nodots"]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--episodes", "2", "--window", "3"]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_CONFIG


def test_cli_rejects_a_bad_log(tmp_path):
    path = tmp_path / "log.csv"
    path.write_text("user_id,session_id\n1,2\n")
    assert cli.main(["calibrate", str(path)]) == cli.EXIT_ERROR


def test_cli_train_runs_end_to_end(tmp_path, capsys):
    out_dir = tmp_path / "run"
    code = cli.main([
        "train", "--algorithm", "CEM", "--episodes", "1", "--window", "1", "--seed", "2",
        "--output-dir", str(out_dir),
        "--set", "sim.population=20", "--set", "sim.episode_days=2",
        "--set", "cem.population_size=2", "--set", "cem.eval_users=10",
    ])
    assert code == cli.EXIT_OK
    printed = json.loads(capsys.readouterr().out)
    assert printed["algorithm"] == "CEM" and printed["seed"] == 2
    assert (out_dir / "result.json").exists()


# -- acceptance --

def table_of(results):
    """results: algorithm -> (avg_returning_day, day1_retention), two identical seeds each."""
    return comparison_table([
        ResultRow(name, seed, day, day1, 40) for name, (day, day1) in results.items() for seed in (0, 1)
    ])


GOOD = {
    "RLUR": (1.90, 0.62),
    "RLUR_NAIVE_G09": (1.95, 0.60),
    "RLUR_NAIVE_G0": (2.00, 0.59),
    "TD3": (1.98, 0.60),
    "CEM": (2.04, 0.59),
}


def test_acceptance_passes_on_the_expected_ordering():
    report = check_acceptance(table_of(GOOD))
    assert report.passed
    assert all(report.orderings.values()) and report.missing == []
    assert report.return_day_gain == pytest.approx((2.04 - 1.90) / 2.04)
    assert report.day1_gain == pytest.approx((0.62 - 0.59) / 0.59)


def test_acceptance_fails_on_a_broken_ordering():
    swapped = dict(GOOD, RLUR_NAIVE_G09=(2.00, 0.59), RLUR_NAIVE_G0=(1.95, 0.60))
    report = check_acceptance(table_of(swapped))
    assert not report.passed
    assert report.orderings == {"RLUR < RLUR_NAIVE_G09 < RLUR_NAIVE_G0": False, "RLUR < TD3 < CEM": True}


def test_acceptance_fails_on_a_small_gain():
    close = {
        "RLUR": (2.00, 0.62),
        "RLUR_NAIVE_G09": (2.01, 0.60),
        "RLUR_NAIVE_G0": (2.02, 0.59),
        "TD3": (2.03, 0.60),
        "CEM": (2.04, 0.59),
    }
    report = check_acceptance(table_of(close))
    assert all(report.orderings.values())
    assert report.return_day_gain < 0.03 and not report.passed

    flat_day1 = dict(GOOD, RLUR=(1.90, 0.595))
    assert not check_acceptance(table_of(flat_day1)).passed


def test_acceptance_fails_when_an_algorithm_is_missing():
    partial = {k: v for k, v in GOOD.items() if k != "TD3"}
    report = check_acceptance(table_of(partial))
    assert report.missing == ["TD3"] and not report.passed
    assert report.orderings["RLUR < TD3 < CEM"] is False


@pytest.mark.parametrize("results, code", [(GOOD, cli.EXIT_OK), (dict(GOOD, RLUR=(2.10, 0.50)), cli.EXIT_ACCEPTANCE)])
def test_cli_compare_exit_code_follows_acceptance(monkeypatch, tmp_path, capsys, results, code):
    def fake_compare(configs, workers=1, output_dir=None):
        assert len(configs) == 25
        table = table_of(results)
        return Comparison(runs=pd.DataFrame(), table=table, partial=False, failures=[],
                          acceptance=check_acceptance(table))

    monkeypatch.setattr(cli, "compare", fake_compare)
    assert cli.main(["compare", "--output-dir", str(tmp_path)]) == code
    assert '"passed"' in capsys.readouterr().out
