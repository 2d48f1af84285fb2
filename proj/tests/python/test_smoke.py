import json
import math

import pytest

import dpfl

TINY = {
    "name": "py_tiny",
    "dataset": {"num_classes": 3, "input_dim": 6, "samples_per_class": 40},
    "model": {"hidden": [8]},
    "num_clients": 4,
    "participation": {"type": "timed_random", "probability": 0.5},
    "strategy": {"name": "fedavg", "local_epochs": 1, "batch_size": 16},
    "rounds": 5,
    "seeds": [1],
}


def test_metrics():
    assert dpfl.windowed_eval([1, 2, 3, 4, 5], 5, 4) == 3.0
    assert dpfl.intransigence([8, 16], [10, 20]) == 3.0
    assert abs(dpfl.instability([0, 2, 0, 2], 0, 4) - 0.8) < 1e-12
    with pytest.raises(dpfl.ValidationError):
        dpfl.instability([1.0], 0, 1)


def test_kl_and_markov():
    kl = dpfl.softmax_kl([[0.0, 0.0]], [[0.0, math.log(3.0)]])
    assert abs(kl - (0.5 * math.log(2) + 0.5 * math.log(2 / 3))) < 1e-14
    pi = dpfl.stationary_distribution([[0.8, 0.2], [0.2, 0.8]])
    assert pi["active"] == pytest.approx(0.5)
    assert dpfl.heterogeneity_alpha("heavy_niid") == 0.1


def test_config_errors():
    with pytest.raises(dpfl.ConfigError):
        dpfl.resolve_config('{"rounds": 0}')
    resolved = json.loads(dpfl.resolve_config("{}"))
    assert resolved["rounds"] == 100
    assert resolved["strategy"]["batch_size"] == 128


def test_simulate_is_deterministic():
    a = dpfl.simulate(TINY, 1)
    b = dpfl.simulate(TINY, 1)
    assert a["rounds_csv"] == b["rounds_csv"]
    assert len(a["psi"]) == 5
    assert sum(map(sum, a["partition_counts"])) == 96


def test_run_and_report(tmp_path):
    cell = dpfl.run_experiment(TINY, str(tmp_path))
    assert (cell / "seed_1" / "rounds.csv").exists()
    table = dpfl.report(str(tmp_path))
    assert "fedavg" in table
    assert "IDP" in table
