import csv
import json
import math

import jsonschema
import numpy as np
import pytest

from roster.bench import (
    bench_latency, config_hash, modeled_activation_bytes, modeled_cache_bytes, plot_report, route_stats,
    strip_timing, sweep_temperature, tau_grid, validate_report, write_csv,
)
from roster.engine import RoEConfig, generate
from roster.model import ModelConfig
from roster.routing import RoutingError


def test_modeled_cache_bytes():
    cfg = ModelConfig()
    one = modeled_cache_bytes(cfg, 1, "clean", 100)
    assert one == 100 * 4 * 2 * 64 * 4
    assert all(modeled_cache_bytes(cfg, n, "clean", 100) == one for n in (1, 8, 64))
    assert modeled_cache_bytes(cfg, 8, "standard", 100) == 8 * modeled_cache_bytes(cfg, 1, "standard", 100)
    assert modeled_cache_bytes(cfg, 8, "clean", 100, caching=False) == 0


def test_modeled_activation_bytes_grow_with_n_and_context():
    cfg = ModelConfig()
    a = modeled_activation_bytes(cfg, 1, 64)
    assert modeled_activation_bytes(cfg, 4, 64) > a
    assert modeled_activation_bytes(cfg, 1, 64, caching=False) > a
    assert modeled_activation_bytes(cfg, 1, 64) == a


def test_config_hash_is_canonical():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


@pytest.fixture(scope="module")
def latency_report(toy_model):
    return bench_latency(toy_model, [1, 2, 3], [1, 4], ["clean", "standard"], [True, False], reps=2,
                         max_new_tokens=8, warmup=0)


def test_latency_report_shape(latency_report, toy_model):
    obj = latency_report.to_json()
    validate_report(obj)
    assert len(obj["records"]) == 8 and obj["summary"]["identical_outputs"]
    assert len({r["output_sha"] for r in obj["records"]}) == 1
    for r in obj["records"]:
        assert r["tokens_generated"] == 8 and len(r["per_position_seconds"]) == 8
        stores = 1 if r["cache_mode"] == "clean" else r["n_samples"]
        expect = stores * (3 - 1 + 8) * 4 * 2 * 64 * 4 if r["caching_enabled"] else 0
        assert r["modeled_cache_bytes"] == expect
    env = obj["environment"]
    assert env["config_hash"] == config_hash(obj["config"]) and env["engine_version"]


def test_latency_bytes_replay_exact(latency_report, toy_model):
    again = bench_latency(toy_model, [1, 2, 3], [1, 4], ["clean", "standard"], [True, False], reps=1,
                          max_new_tokens=8, warmup=0)
    key = lambda o: [(r["modeled_cache_bytes"], r["modeled_activation_bytes"]) for r in o.records]  # noqa: E731
    assert key(again) == key(latency_report)


def test_schema_rejects_bad_reports(latency_report):
    obj = latency_report.to_json()
    bad = json.loads(json.dumps(obj))
    bad["records"][0]["cache_mode"] = "paged"
    with pytest.raises(jsonschema.ValidationError):
        validate_report(bad)
    bad = json.loads(json.dumps(obj))
    bad["schema_version"] = "roster.bench/0"
    with pytest.raises(jsonschema.ValidationError):
        validate_report(bad)


def test_batched_samples_cheaper_than_sequential(toy_model):
    prompt = [1, 2, 3, 4]

    def per_token(n):
        cfg = RoEConfig(n_samples=n, max_new_tokens=24)
        generate(toy_model, prompt, cfg)
        return float(np.median([np.mean(generate(toy_model, prompt, cfg).step_seconds) for _ in range(3)]))

    base = per_token(1)
    for n in (4, 8, 16):
        assert per_token(n) < n * base


def test_tau_grid():
    g = tau_grid(0.0, 0.5, 0.05)
    assert len(g) == 11 and g[0] == 0.0 and g[-1] == 0.5 and g[3] == 0.15


def test_sweep_temperature(toy_model, toy_corpus):
    rep = sweep_temperature(toy_model, toy_corpus[:500], [0.0, 0.2, 10.0], n_samples=4, seed=0)
    validate_report(rep.to_json())
    by_tau = {r["tau"]: r["perplexity"] for r in rep.records}
    assert by_tau[0.0] == rep.summary["baseline_perplexity"]
    assert by_tau[10.0] >= by_tau[0.0]
    with pytest.raises(ValueError):
        sweep_temperature(toy_model, toy_corpus[:50], [], 2)
    with pytest.raises(ValueError):
        sweep_temperature(toy_model, toy_corpus[:50], [-1.0], 2)


def test_route_stats_oracle():
    rep = route_stats([3, 1, 0.5, -2], 2, 1.0, 200_000, seed=0)
    validate_report(rep.to_json())
    assert rep.summary["tvd_ordered"] <= 0.01 and rep.summary["tvd_subset"] <= 0.01
    assert rep.summary["n_ordered_outcomes"] == 12 and rep.summary["n_subsets"] == 6
    experts = [r for r in rep.records if r["kind"] == "expert"]
    assert sum(r["oracle"] for r in experts) == pytest.approx(2.0)


def test_route_stats_tau_zero():
    rep = route_stats([3, 1, 0.5, -2], 2, 0.0, 10_000)
    subsets = [r for r in rep.records if r["kind"] == "subset"]
    assert len(subsets) == 1 and subsets[0]["key"] == [0, 1] and subsets[0]["empirical"] == 1.0


def test_route_stats_uniform_logits_equiprobable():
    draws = 60_000
    rep = route_stats([0.5] * 5, 2, 0.7, draws, seed=3)
    p = 1 / 10
    sigma = math.sqrt(p * (1 - p) / draws)
    for r in rep.records:
        if r["kind"] == "subset":
            assert abs(r["empirical"] - p) <= 3 * sigma


def test_route_stats_limits():
    with pytest.raises(RoutingError):
        route_stats(list(range(11)), 2, 1.0, 10_000)
    with pytest.raises(RoutingError):
        route_stats(list(range(6)), 5, 1.0, 10_000)
    with pytest.raises(ValueError):
        route_stats([1, 2], 1, 1.0, 100)


def test_csv_and_strip_timing(tmp_path, latency_report):
    obj = latency_report.to_json()
    write_csv(obj, tmp_path / "r.csv")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert len(rows) == 8 and ";" in rows[0]["per_position_seconds"]
    stripped = strip_timing(obj)
    assert "wall_seconds_per_token" not in stripped["records"][0] and "modeled_cache_bytes" in stripped["records"][0]


def test_plot_is_deterministic(tmp_path):
    rep = route_stats([3, 1, 0.5, -2], 2, 1.0, 10_000)
    rep.save(tmp_path / "r.json")
    plot_report(tmp_path / "r.json", tmp_path / "a.svg")
    plot_report(tmp_path / "r.json", tmp_path / "b.svg")
    a = (tmp_path / "a.svg").read_bytes()
    assert a.startswith(b"<?xml") and a == (tmp_path / "b.svg").read_bytes()
