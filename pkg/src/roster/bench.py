"""Benchmarks and diagnostics: latency vs. sample count, modeled memory,
uniform-temperature sweeps and routing-frequency checks."""

from __future__ import annotations

import csv
import hashlib
import json
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from roster import __version__
from roster.cache import CacheMode
from roster.engine import RoEConfig, evaluate_nll, generate
from roster.model import MoEModel, ModelConfig
from roster.routing import (
    MAX_ENUM_EXPERTS,
    MAX_ENUM_K,
    RoutingError,
    TemperatureProfile,
    gumbel_batch,
    plackett_luce_ordered,
    select_experts,
    topk_indices,
    total_variation,
)
from roster.kernels import softmax

SCHEMA_VERSION = "roster.bench/1"
DEFAULT_TOKEN_BUDGET = 128
TIMING_FIELDS = frozenset({
    "wall_seconds_per_token", "wall_seconds_iqr", "per_position_seconds", "wall_time", "elapsed_seconds",
})

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "scenario", "records", "environment"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "scenario": {"enum": ["latency", "sweep_temperature", "route_stats"]},
        "records": {"type": "array", "items": {"type": "object"}},
        "summary": {"type": "object"},
        "config": {"type": "object"},
        "environment": {
            "type": "object",
            "required": ["engine_version", "seed", "config_hash"],
            "properties": {
                "engine_version": {"type": "string"},
                "seed": {"type": "integer"},
                "config_hash": {"type": "string"},
                "parallel": {"type": "integer", "minimum": 1},
            },
        },
    },
    "allOf": [
        {
            "if": {"properties": {"scenario": {"const": "latency"}}},
            "then": {"properties": {"records": {"items": {
                "required": ["n_samples", "cache_mode", "caching_enabled", "tokens_generated",
                             "wall_seconds_per_token", "reps", "modeled_cache_bytes", "modeled_activation_bytes"],
                "properties": {
                    "n_samples": {"type": "integer", "minimum": 1},
                    "cache_mode": {"enum": ["standard", "clean"]},
                    "caching_enabled": {"type": "boolean"},
                    "tokens_generated": {"type": "integer", "minimum": 0},
                    "wall_seconds_per_token": {"type": "number", "minimum": 0},
                    "wall_seconds_iqr": {"type": "number", "minimum": 0},
                    "reps": {"type": "integer", "minimum": 1},
                    "modeled_cache_bytes": {"type": "integer", "minimum": 0},
                    "modeled_activation_bytes": {"type": "integer", "minimum": 0},
                    "per_position_seconds": {"type": "array", "items": {"type": "number"}},
                },
            }}}},
        },
        {
            "if": {"properties": {"scenario": {"const": "sweep_temperature"}}},
            "then": {"properties": {"records": {"items": {
                "required": ["tau", "perplexity", "n_samples", "cache_mode"],
                "properties": {"tau": {"type": "number", "minimum": 0}, "perplexity": {"type": "number"}},
            }}}},
        },
        {
            "if": {"properties": {"scenario": {"const": "route_stats"}}},
            "then": {"properties": {"records": {"items": {
                "required": ["kind", "key", "empirical", "oracle"],
                "properties": {"kind": {"enum": ["expert", "ordered", "subset"]}},
            }}}},
        },
    ],
}


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class BenchReport:
    scenario: str
    records: list[dict] = field(default_factory=list)
    environment: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "scenario": self.scenario,
            "config": self.config,
            "environment": self.environment,
            "summary": self.summary,
            "records": self.records,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


def validate_report(obj: dict) -> None:
    """Raise ``jsonschema.ValidationError`` unless ``obj`` is a valid report."""
    import jsonschema

    jsonschema.validate(obj, REPORT_SCHEMA)


def _environment(seed: int, config: dict, parallel: int = 1) -> dict:
    return {
        "engine_version": __version__,
        "seed": int(seed),
        "config_hash": config_hash(config),
        "parallel": parallel,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }


def modeled_cache_bytes(config: ModelConfig, n_samples: int, mode: CacheMode | str, positions: int,
                        caching: bool = True) -> int:
    """K/V bytes persisted after ``positions`` cached positions."""
    if not caching:
        return 0
    stores = 1 if CacheMode(mode) is CacheMode.CLEAN else n_samples
    return stores * positions * config.n_layers * 2 * config.d_model * 4


def modeled_activation_bytes(config: ModelConfig, n_samples: int, context: int, caching: bool = True) -> int:
    """Peak float32 working set of one layer in the largest decode step.

    Counts per-row hidden-size buffers (residual, norm, q, k, v, attention
    output, FFN output), attention scores and probabilities, the
    concatenated keys/values, routed expert activations, router logits and
    the output logits.
    """
    t = 1 if caching else context
    rows = n_samples
    c = config
    floats = rows * t * (
        7 * c.d_model
        + 2 * c.n_heads * context
        + c.top_k * c.d_ff
        + c.n_experts
        + c.vocab_size
    ) + rows * 2 * context * c.d_model
    return int(floats * 4)


def _iqr(x) -> float:
    q75, q25 = np.percentile(x, [75, 25])
    return float(q75 - q25)


def bench_latency(model: MoEModel, prompt: Sequence[int], n_values: Iterable[int],
                  cache_modes: Iterable[str] = ("clean",), caching_enabled: Iterable[bool] = (True,),
                  reps: int = 5, max_new_tokens: int = DEFAULT_TOKEN_BUDGET, warmup: int = 1,
                  seed: int = 0) -> BenchReport:
    """Time zero-temperature RoE generation for every (caching, mode, n) cell.

    All temperatures are zero, so every cell must emit the same tokens; the
    summary flags whether they did.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    prompt = [int(t) for t in prompt]
    settings = {
        "model": model.config.to_dict(), "prompt": prompt, "n_values": [int(n) for n in n_values],
        "cache_modes": [CacheMode(m).value for m in cache_modes], "caching_enabled": [bool(c) for c in caching_enabled],
        "reps": reps, "warmup": warmup, "max_new_tokens": max_new_tokens, "seed": seed,
    }
    report = BenchReport("latency", config=settings, environment=_environment(seed, settings))
    outputs = set()
    for caching in settings["caching_enabled"]:
        for mode in settings["cache_modes"]:
            for n in settings["n_values"]:
                cfg = RoEConfig(n_samples=n, profile=TemperatureProfile(), cache_mode=mode, master_seed=seed,
                                max_new_tokens=max_new_tokens, use_cache=caching)
                for _ in range(warmup):
                    generate(model, prompt, cfg)
                runs = [generate(model, prompt, cfg) for _ in range(reps)]
                per_token = [float(np.mean(r.step_seconds)) for r in runs]
                per_pos = np.median(np.array([r.step_seconds for r in runs]), axis=0)
                tokens = runs[0].tokens
                outputs.add(tuple(tokens))
                positions = len(prompt) - 1 + len(tokens)
                predicted = modeled_cache_bytes(model.config, n, mode, positions, caching)
                if caching and runs[0].cache_bytes != predicted:
                    raise AssertionError(f"cache accounting drifted: {runs[0].cache_bytes} != {predicted}")
                report.records.append({
                    "n_samples": n,
                    "cache_mode": mode,
                    "caching_enabled": caching,
                    "tokens_generated": len(tokens),
                    "reps": reps,
                    "wall_seconds_per_token": float(np.median(per_token)),
                    "wall_seconds_iqr": _iqr(per_token),
                    "per_position_seconds": [float(x) for x in per_pos],
                    "modeled_cache_bytes": predicted,
                    "modeled_activation_bytes": modeled_activation_bytes(model.config, n, positions, caching),
                    "output_sha": hashlib.sha256(json.dumps(tokens).encode()).hexdigest()[:16],
                })
    report.summary = {"identical_outputs": len(outputs) <= 1, "cells": len(report.records)}
    return report


def tau_grid(start: float = 0.0, stop: float = 0.5, step: float = 0.05) -> list[float]:
    """Inclusive grid; values are rounded to suppress float drift (0.15000000000000002)."""
    n = int(round((stop - start) / step))
    return [round(start + i * step, 10) for i in range(n + 1)]


def sweep_temperature(model: MoEModel, corpus, tau_values: Sequence[float], n_samples: int, seed: int = 0,
                      cache_mode: str = "clean") -> BenchReport:
    """Ensemble perplexity with one uniform temperature on every MoE layer."""
    taus = [float(t) for t in tau_values]
    if not taus:
        raise ValueError("tau_values must be nonempty")
    if any(t < 0 for t in taus):
        raise ValueError("temperatures must be >= 0")
    corpus = np.asarray(corpus, dtype=np.int64)
    settings = {"model": model.config.to_dict(), "tau_values": taus, "n_samples": n_samples, "seed": seed,
                "cache_mode": CacheMode(cache_mode).value, "corpus_sha": hashlib.sha256(corpus.tobytes()).hexdigest()[:16],
                "corpus_tokens": int(corpus.size)}
    report = BenchReport("sweep_temperature", config=settings, environment=_environment(seed, settings))
    baseline = evaluate_nll(model, corpus).perplexity
    for tau in taus:
        cfg = RoEConfig(n_samples=n_samples, profile=TemperatureProfile.uniform(model.config.moe_layer_indices, tau),
                        cache_mode=cache_mode, master_seed=seed)
        report.records.append({"tau": tau, "perplexity": evaluate_nll(model, corpus, cfg).perplexity,
                               "n_samples": n_samples, "cache_mode": settings["cache_mode"]})
    best = min(report.records, key=lambda r: (r["perplexity"], r["tau"]))
    report.summary = {"baseline_perplexity": baseline, "best_tau": best["tau"], "best_perplexity": best["perplexity"]}
    return report


def sample_routes(logits, k: int, tau: float, draws: int, seed: int) -> np.ndarray:
    """``draws`` independent Gumbel-Top-K selections ``[draws, k]``; draw ``i``
    uses stream ``(seed, layer 0, step i, sample 0)``."""
    r = np.broadcast_to(np.asarray(logits, dtype=np.float64), (draws, len(logits)))
    steps = np.arange(draws)
    selected, _, _ = select_experts(
        r, k, np.full(draws, float(tau)),
        noise_fn=lambda rows: gumbel_batch(seed, 0, steps[rows], 0, r.shape[1]),
    )
    return selected


def route_oracle(logits, k: int, tau: float) -> dict[tuple[int, ...], float]:
    """Exact ordered-selection probabilities of Gumbel-Top-K at ``tau``."""
    logits = np.asarray(logits, dtype=np.float64)
    if tau == 0:
        return {tuple(int(i) for i in topk_indices(logits, k)): 1.0}
    return plackett_luce_ordered(softmax(logits / tau), k)


def _freq(keys: np.ndarray) -> dict[tuple[int, ...], float]:
    uniq, counts = np.unique(keys, axis=0, return_counts=True)
    total = counts.sum()
    return {tuple(int(x) for x in u): c / total for u, c in zip(uniq, counts)}


def route_stats(logits, k: int, tau: float, draws: int, seed: int = 0, min_draws: int = 10_000) -> BenchReport:
    """Empirical Gumbel-Top-K frequencies next to the enumerated oracle."""
    logits = [float(x) for x in logits]
    E = len(logits)
    if E > MAX_ENUM_EXPERTS or k > MAX_ENUM_K:
        raise RoutingError(f"enumeration limited to n_experts <= {MAX_ENUM_EXPERTS} and k <= {MAX_ENUM_K}; got {E}, {k}")
    if not 1 <= k <= E:
        raise RoutingError(f"k={k} invalid for {E} experts")
    if draws < min_draws:
        raise ValueError(f"draws must be >= {min_draws}")
    if tau < 0:
        raise ValueError("tau must be >= 0")
    settings = {"logits": logits, "k": k, "tau": tau, "draws": draws, "seed": seed}
    report = BenchReport("route_stats", config=settings, environment=_environment(seed, settings))
    sel = sample_routes(logits, k, tau, draws, seed)
    ordered_emp = _freq(sel)
    subset_emp = _freq(np.sort(sel, axis=1))
    ordered_or = route_oracle(logits, k, tau)
    subset_or: dict[tuple[int, ...], float] = {}
    for key, p in ordered_or.items():
        s = tuple(sorted(key))
        subset_or[s] = subset_or.get(s, 0.0) + p
    expert_emp = {(e,): float(np.mean(np.any(sel == e, axis=1))) for e in range(E)}
    expert_or = {(e,): sum(p for s, p in subset_or.items() if e in s) for e in range(E)}
    for kind, emp, orc in (("expert", expert_emp, expert_or), ("ordered", ordered_emp, ordered_or),
                           ("subset", subset_emp, subset_or)):
        for key in sorted(set(emp) | set(orc)):
            report.records.append({"kind": kind, "key": list(key), "empirical": float(emp.get(key, 0.0)),
                                   "oracle": float(orc.get(key, 0.0))})
    report.summary = {
        "tvd_ordered": total_variation(ordered_emp, ordered_or),
        "tvd_subset": total_variation(subset_emp, subset_or),
        "n_ordered_outcomes": len(ordered_or),
        "n_subsets": len(subset_or),
    }
    return report


def write_csv(report: dict, path) -> None:
    """Flatten ``records`` to CSV; list values are joined with ``;``."""
    records = report["records"]
    cols: list[str] = []
    for r in records:
        for key in r:
            if key not in cols:
                cols.append(key)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in records:
            w.writerow({k: ";".join(str(x) for x in v) if isinstance(v, list) else v for k, v in r.items()})


def strip_timing(obj):
    """Copy of a report/history object without wall-clock fields."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if k not in TIMING_FIELDS}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


def plot_report(src, out_svg) -> None:
    """Render a bench report (JSON) or tuning history (JSON-lines) to SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "roster"
    text = Path(src).read_text()
    fig, ax = plt.subplots(figsize=(6, 4))
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        obj = None
    if obj is None or "scenario" not in obj:
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        best = [r.get("best_so_far") for r in rows]
        vals = [r.get("objective_value") for r in rows]
        ax.plot([r["trial_id"] for r in rows], [v if v is not None else np.nan for v in vals], "o", ms=3, label="trial")
        ax.plot([r["trial_id"] for r in rows], [b if b is not None else np.nan for b in best], "-", label="best so far")
        ax.set_xlabel("trial")
        ax.set_ylabel("objective")
        ax.legend()
    elif obj["scenario"] == "latency":
        groups: dict[str, list] = {}
        for r in obj["records"]:
            label = f"{r['cache_mode']}, cache {'on' if r['caching_enabled'] else 'off'}"
            groups.setdefault(label, []).append((r["n_samples"], r["wall_seconds_per_token"] * 1e3))
        for label, pts in groups.items():
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)
        ax.set_xscale("log", base=2)
        ax.set_xlabel("samples n")
        ax.set_ylabel("ms / token")
        ax.legend()
    elif obj["scenario"] == "sweep_temperature":
        recs = sorted(obj["records"], key=lambda r: r["tau"])
        ax.plot([r["tau"] for r in recs], [r["perplexity"] for r in recs], marker="o")
        ax.axhline(obj["summary"]["baseline_perplexity"], ls="--", color="grey", label="top-k baseline")
        ax.set_xlabel("uniform tau")
        ax.set_ylabel("ensemble perplexity")
        ax.legend()
    else:
        recs = [r for r in obj["records"] if r["kind"] == "subset"]
        x = np.arange(len(recs))
        ax.bar(x - 0.2, [r["empirical"] for r in recs], 0.4, label="empirical")
        ax.bar(x + 0.2, [r["oracle"] for r in recs], 0.4, label="oracle")
        ax.set_xticks(x, ["".join(map(str, r["key"])) for r in recs])
        ax.set_ylabel("probability")
        ax.legend()
    fig.tight_layout()
    fig.savefig(out_svg, format="svg", metadata={"Date": None})
    plt.close(fig)
