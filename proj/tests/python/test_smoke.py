import json
import math
import pathlib

import pytest

kfbc = pytest.importorskip("kfbc")

ROOT = pathlib.Path(__file__).resolve().parents[2]


def test_toycar_expert_reaches_goal():
    env = kfbc.ToyCar()
    env.reset(seed=3)
    done, events = False, {}
    while not done:
        _, _, done, events = env.step(env.expert_action())
    assert events["reached_goal"]
    assert not events["red_violation"]


def test_weights():
    w = kfbc.softmax_weights([0.0, math.log(3.0)], 1.0)
    assert w == pytest.approx([0.25, 0.75])
    assert kfbc.step_weights(list(range(1, 11)), 10.0, 5.0) == [1.0] * 9 + [5.0]
    probs = kfbc.bcpd_changepoint_probabilities([0.0] * 8 + [1.0] * 4)
    assert max(range(12), key=probs.__getitem__) == 8
    actions = [[0.0]] * 9 + [[1.0]]
    assert kfbc.actfreq_weights(actions, 2) == [10 / 9] * 9 + [10.0]
    with pytest.raises(kfbc.ConfigError):
        kfbc.step_weights([1.0], 0.0, 5.0)


def test_keyframes_on_demonstrations():
    trajs = kfbc.collect_demonstrations(6, noise_rate=0.1, seed=1)
    assert len(trajs) == 6
    spec = {"hidden_dims": [8], "folds": 2, "train": {"iterations": 200}}
    scores = kfbc.score_keyframes(trajs, spec)
    assert len(scores["samples"]) == sum(len(t["steps"]) for t in trajs)
    assert scores["max"] >= scores["p90"] >= scores["p50"] >= 0.0
    verdict = kfbc.copycat_condition(scores["mean"], 1.0)
    assert verdict["copycat_preferred"] == (scores["mean"] < 1.0)


def test_run_experiment(tmp_path):
    config = json.loads((ROOT / "tests/data/cli_tiny.json").read_text())
    config["methods"] = config["methods"][:2]
    config["seeds"] = [0]
    result = kfbc.run_experiment(config, out=tmp_path, jobs=2)
    assert all(r["ok"] for r in result["runs"])
    assert result["aggregate_csv"].startswith("method,n_runs")
    assert (tmp_path / "aggregate.csv").read_text() == result["aggregate_csv"]
    assert result["config_hash"] == kfbc.config_hash(config)
    with pytest.raises(kfbc.ConfigError):
        kfbc.run_experiment({"methods": []}, out=tmp_path / "bad")
