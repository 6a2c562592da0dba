"""``roster`` command line.

Every subcommand accepts ``--config FILE`` (JSON object keyed by option
name, e.g. ``{"n": 8, "cache": "clean"}``); explicit flags override it. The
``ROSTER_CONFIG`` environment variable names a default config file. Each run
prints its fully resolved options as JSON (``--echo-config`` also writes
them to a file), and that JSON can be fed back through ``--config`` to replay
the run.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from roster import FORMAT_VERSIONS, __version__
from roster.cache import CacheMode

ENV_CONFIG = "ROSTER_CONFIG"
_META = {"config", "echo_config", "func", "command"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of option values (flags override)")
    p.add_argument("--echo-config", help="write the resolved options to this JSON file")


def _roe_flags(p: argparse.ArgumentParser, n_default: int = 1) -> None:
    p.add_argument("--n", type=int, default=n_default, help="RoE samples per token")
    p.add_argument("--profile", help="temperature profile JSON (layer -> tau)")
    p.add_argument("--tau", type=float, help="uniform temperature on every MoE layer (instead of --profile)")
    p.add_argument("--cache", choices=[m.value for m in CacheMode], default="clean")
    p.add_argument("--seed", type=int, default=0, help="master seed of the routing noise")
    p.add_argument("--gate", choices=["original", "perturbed"], default="original")
    p.add_argument("--aggregation", choices=["prob", "logit"], default="prob")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="roster", description="Roster-of-Experts decoding for toy MoE transformers")
    parser.add_argument("--version", action="version",
                        version=f"roster {__version__} ({', '.join(f'{k} {v}' for k, v in FORMAT_VERSIONS.items())})")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("init-model", help="create a seeded random checkpoint")
    _common(p)
    p.add_argument("--vocab", type=int, default=256)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--experts", type=int, default=8)
    p.add_argument("--top-k", type=int, default=2)
    p.add_argument("--d-ff", type=int, default=128)
    p.add_argument("--max-seq-len", type=int, default=256)
    p.add_argument("--moe-layers", type=_int_list, help="comma-separated MoE layer indices (default: all)")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_model)

    p = sub.add_parser("make-corpus", help="sample a token corpus from a checkpoint")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--tokens", type=int, default=2000)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help=".bin for uint32, anything else for text")
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser("make-items", help="prompt/reference JSON-lines from baseline greedy decoding")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--items", type=int, default=10)
    p.add_argument("--prompt-len", type=int, default=4)
    p.add_argument("--ref-len", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_items)

    p = sub.add_parser("generate", help="greedy RoE generation")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt-ids", type=_int_list, required=True)
    p.add_argument("--max-new", type=int, default=16)
    _roe_flags(p)
    p.add_argument("--eos", type=int)
    p.add_argument("--no-cache", action="store_true", help="recompute the whole sequence every step")
    p.add_argument("--top-m", type=int, default=5, help="aggregate probabilities kept per step in --out")
    p.add_argument("--out", help="write the generation result JSON here")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("perplexity", help="teacher-forced (ensemble) perplexity")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    _roe_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_perplexity)

    p = sub.add_parser("tune", help="TPE search over per-layer temperatures")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--objective", choices=["ppl", "accuracy"], default="ppl")
    p.add_argument("--data", required=True, help="token corpus (ppl) or JSON-lines items (accuracy)")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--tau-max", type=float, default=0.5)
    p.add_argument("--skip-edges", type=int, default=1, help="MoE layers kept at tau=0 at each end")
    p.add_argument("--cache", choices=[m.value for m in CacheMode], default="clean")
    p.add_argument("--seed", type=int, default=0, help="master seed of the routing noise")
    p.add_argument("--search-seed", type=int, default=0, help="seed of the TPE sampler")
    p.add_argument("--gamma", type=float, default=0.25)
    p.add_argument("--n-startup", type=int, default=10)
    p.add_argument("--candidates", type=int, default=24)
    p.add_argument("--parallel", type=int, default=1, help="trials evaluated concurrently")
    p.add_argument("--history", required=True, help="JSON-lines trial history output")
    p.add_argument("--best-profile", required=True, help="best temperature profile output")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("bench", help="latency and modeled memory vs. sample count")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt-ids", type=_int_list, default=[1, 2, 3, 4])
    p.add_argument("--n-values", type=_int_list, default=[1, 4, 8, 16])
    p.add_argument("--cache-modes", type=_str_list, default=["clean", "standard"])
    p.add_argument("--caching", type=_str_list, default=["on", "off"], help="comma list of on/off")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--max-new", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--parallel", type=int, default=1, help="sample-parallel width recorded in the environment stamp; samples always run as one batched array pass")
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep-temp", help="ensemble perplexity vs. uniform temperature")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--taus", type=_float_list, help="explicit temperatures (default: 0 to 0.5 step 0.05)")
    p.add_argument("--tau-start", type=float, default=0.0)
    p.add_argument("--tau-stop", type=float, default=0.5)
    p.add_argument("--tau-step", type=float, default=0.05)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--cache", choices=[m.value for m in CacheMode], default="clean")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_sweep_temp)

    p = sub.add_parser("route-stats", help="Gumbel-Top-K frequencies vs. the exact oracle")
    _common(p)
    p.add_argument("--logits", type=_float_list, required=True)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--draws", type=int, default=200_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_route_stats)

    p = sub.add_parser("plot", help="SVG chart from a report or tuning history")
    _common(p)
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def _subparsers(parser):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


def parse_args(argv: list[str]) -> argparse.Namespace:
    """Resolve options: defaults, then config file, then explicit flags."""
    # first pass only locates the subcommand and config file
    probe = build_parser()
    for sub in _subparsers(probe).values():
        for action in sub._actions:
            action.required = False
    first = probe.parse_args(argv)
    path = first.config or os.environ.get(ENV_CONFIG)
    parser = build_parser()
    if not path:
        return parser.parse_args(argv)
    try:
        values = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    if not isinstance(values, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    if values.get("command", first.command) != first.command:
        raise UsageError(f"config file {path} is for '{values['command']}', not '{first.command}'")
    sub = _subparsers(parser)[first.command]
    known = {a.dest for a in sub._actions}
    values = {k.replace("-", "_"): v for k, v in values.items() if k != "command"}
    unknown = sorted(set(values) - known - _META)
    if unknown:
        raise UsageError(f"config file {path} has unknown options for '{first.command}': {unknown}")
    for action in sub._actions:
        if action.dest in values:
            action.required = False
    sub.set_defaults(**{k: v for k, v in values.items() if k not in _META})
    args = parser.parse_args(argv)
    args.config = path
    return args


def resolved(args: argparse.Namespace) -> dict:
    out = {"command": args.command}
    out.update({k: v for k, v in sorted(vars(args).items()) if k not in _META})
    return out


def _emit(args, summary: dict) -> None:
    cfg = resolved(args)
    if args.echo_config:
        Path(args.echo_config).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    summary = dict(summary)
    summary["config"] = cfg
    print(json.dumps(summary, sort_keys=True))


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise UsageError(message)


def _profile(args):
    from roster.routing import TemperatureProfile

    _require(not (args.profile and args.tau is not None), "--profile and --tau are mutually exclusive")
    _require(args.tau is None or args.tau >= 0, "--tau must be >= 0")
    if args.profile:
        try:
            return TemperatureProfile.load(args.profile)
        except FileNotFoundError:
            raise UsageError(f"profile file not found: {args.profile}") from None
        except ValueError as exc:
            raise UsageError(f"bad profile {args.profile}: {exc}") from None
    return None


def _load_model(path):
    from roster.model import load_checkpoint

    if not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _roe_config(args, model, profile, **extra):
    from roster.engine import RoEConfig
    from roster.routing import TemperatureProfile

    _require(args.n >= 1, "--n must be >= 1")
    if profile is None:
        profile = TemperatureProfile.uniform(model.config.moe_layer_indices, args.tau) if args.tau else TemperatureProfile()
    try:
        profile.validate_layers(model.config.moe_layer_indices)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return RoEConfig(n_samples=args.n, profile=profile, cache_mode=args.cache, master_seed=args.seed,
                     gate_source=args.gate, aggregation=args.aggregation, **extra)


def cmd_init_model(args) -> None:
    from roster.model import ModelConfig, init_model, save_checkpoint

    cfg = ModelConfig(vocab_size=args.vocab, d_model=args.d_model, n_layers=args.layers, n_heads=args.heads,
                      n_experts=args.experts, top_k=args.top_k, d_ff=args.d_ff, max_seq_len=args.max_seq_len,
                      moe_layer_indices=tuple(args.moe_layers) if args.moe_layers is not None else None)
    violations = cfg.violations()
    if violations:
        raise UsageError("invalid model config: " + "; ".join(violations))
    save_checkpoint(init_model(cfg, args.seed), args.out)
    _emit(args, {"checkpoint": args.out, "model": cfg.to_dict()})


def cmd_make_corpus(args) -> None:
    from roster.corpus import sample_corpus, write_tokens

    _require(args.tokens >= 2, "--tokens must be >= 2")
    _require(args.temperature > 0, "--temperature must be > 0")
    model = _load_model(args.ckpt)
    write_tokens(args.out, sample_corpus(model, args.tokens, args.seed, args.temperature))
    _emit(args, {"corpus": args.out, "tokens": args.tokens})


def cmd_make_items(args) -> None:
    from roster.engine import greedy_decode

    _require(args.items >= 1 and args.prompt_len >= 1 and args.ref_len >= 1, "--items, --prompt-len, --ref-len must be >= 1")
    model = _load_model(args.ckpt)
    rng = np.random.Generator(np.random.PCG64(args.seed))
    lines = []
    for _ in range(args.items):
        prompt = [int(t) for t in rng.integers(model.config.vocab_size, size=args.prompt_len)]
        lines.append(json.dumps({"prompt_ids": prompt, "reference_ids": greedy_decode(model, prompt, args.ref_len)}))
    Path(args.out).write_text("".join(line + "\n" for line in lines))
    _emit(args, {"items": args.out, "count": args.items})


def cmd_generate(args) -> None:
    from roster.engine import generate

    _require(args.max_new >= 0, "--max-new must be >= 0")
    _require(len(args.prompt_ids) >= 1, "--prompt-ids needs at least one id")
    profile = _profile(args)
    model = _load_model(args.ckpt)
    cfg = _roe_config(args, model, profile, max_new_tokens=args.max_new, eos_id=args.eos, use_cache=not args.no_cache)
    result = generate(model, args.prompt_ids, cfg, retain_aggregates=args.out is not None and args.top_m > 0)
    print(",".join(str(t) for t in result.tokens))
    if args.out:
        obj = result.to_json(top_m=args.top_m)
        obj["run_config"] = resolved(args)
        _write_json(args.out, obj)
    _emit(args, {"tokens": result.tokens})


def cmd_perplexity(args) -> None:
    from roster.corpus import read_tokens
    from roster.engine import evaluate_nll

    profile = _profile(args)
    model = _load_model(args.ckpt)
    cfg = _roe_config(args, model, profile)
    tokens = read_tokens(args.corpus)
    baseline = evaluate_nll(model, tokens).perplexity
    report = evaluate_nll(model, tokens, cfg)
    summary = {"perplexity": report.perplexity, "baseline_perplexity": baseline, "positions": int(report.aggregate_nll.size),
               "roe": cfg.to_dict()}
    if args.out:
        _write_json(args.out, dict(summary, run_config=resolved(args)))
    _emit(args, summary)


def cmd_tune(args) -> None:
    from roster.engine import RoEConfig
    from roster.routing import TemperatureProfile
    from roster.tuner import ObjectiveSpec, SearchSpace, TPESettings, tune, write_history

    _require(args.trials >= 1, "--trials must be >= 1")
    _require(args.n >= 1, "--n must be >= 1")
    _require(args.tau_max > 0, "--tau-max must be > 0")
    _require(args.skip_edges >= 0, "--skip-edges must be >= 0")
    _require(args.parallel >= 1, "--parallel must be >= 1")
    _require(0 < args.gamma <= 1, "--gamma must be in (0, 1]")
    _require(Path(args.data).exists(), f"data file not found: {args.data}")
    model = _load_model(args.ckpt)
    space = SearchSpace.from_model(model.config, args.skip_edges, args.tau_max)
    base = RoEConfig(n_samples=args.n, cache_mode=args.cache, master_seed=args.seed)
    settings = TPESettings(gamma=args.gamma, n_startup=args.n_startup, n_candidates=args.candidates)
    result = tune(model, ObjectiveSpec(args.objective, args.data), space, args.trials, base, seed=args.search_seed,
                  settings=settings, width=args.parallel)
    write_history(args.history, result.history)
    best = result.best_profile if result.best_value is not None else TemperatureProfile()
    full = TemperatureProfile({l: best.tau(l) for l in model.config.moe_layer_indices})
    full.save(args.best_profile)
    baseline = result.history[0].objective_value
    if result.best_value is None:
        raise RuntimeError("every trial failed; see " + args.history)
    _emit(args, {"best_objective": result.best_value, "baseline_objective": baseline,
                 "best_profile": full.to_json(), "tunable_layers": list(space.tunable_layers),
                 "trials": len(result.history), "failed": sum(not r.ok for r in result.history)})


def _flags(values: list[str]) -> list[bool]:
    table = {"on": True, "off": False, "true": True, "false": False, "1": True, "0": False}
    out = []
    for v in values:
        _require(v.lower() in table, f"--caching values must be on/off, got {v!r}")
        out.append(table[v.lower()])
    return out


def cmd_bench(args) -> None:
    from roster.bench import bench_latency, write_csv

    for m in args.cache_modes:
        _require(m in [c.value for c in CacheMode], f"unknown cache mode {m!r}")
    _require(all(n >= 1 for n in args.n_values) and args.n_values, "--n-values must be positive integers")
    _require(args.reps >= 1, "--reps must be >= 1")
    caching = _flags(args.caching)
    model = _load_model(args.ckpt)
    report = bench_latency(model, args.prompt_ids, args.n_values, args.cache_modes, caching, reps=args.reps,
                           max_new_tokens=args.max_new, warmup=args.warmup, seed=args.seed)
    report.environment["parallel"] = args.parallel
    obj = report.to_json()
    obj["run_config"] = resolved(args)
    _write_json(args.out, obj)
    if args.csv:
        write_csv(obj, args.csv)
    _emit(args, {"report": args.out, "cells": len(report.records), **report.summary})


def cmd_sweep_temp(args) -> None:
    from roster.bench import sweep_temperature, tau_grid, write_csv
    from roster.corpus import read_tokens

    taus = args.taus if args.taus else tau_grid(args.tau_start, args.tau_stop, args.tau_step)
    _require(bool(taus) and all(t >= 0 for t in taus), "temperatures must be nonempty and >= 0")
    _require(args.n >= 1, "--n must be >= 1")
    model = _load_model(args.ckpt)
    report = sweep_temperature(model, read_tokens(args.corpus), taus, args.n, args.seed, args.cache)
    obj = report.to_json()
    obj["run_config"] = resolved(args)
    _write_json(args.out, obj)
    if args.csv:
        write_csv(obj, args.csv)
    _emit(args, {"report": args.out, **report.summary})


def cmd_route_stats(args) -> None:
    from roster.bench import route_stats, write_csv

    _require(len(args.logits) >= 1, "--logits needs at least one value")
    _require(1 <= args.k <= len(args.logits), "--k must be between 1 and the number of logits")
    _require(args.tau >= 0, "--tau must be >= 0")
    _require(args.draws >= 10_000, "--draws must be >= 10000")
    report = route_stats(args.logits, args.k, args.tau, args.draws, args.seed)
    obj = report.to_json()
    obj["run_config"] = resolved(args)
    if args.out:
        _write_json(args.out, obj)
    if args.csv:
        write_csv(obj, args.csv)
    _emit(args, dict(report.summary))


def cmd_plot(args) -> None:
    from roster.bench import plot_report

    _require(Path(args.report).exists(), f"report not found: {args.report}")
    plot_report(args.report, args.out)
    _emit(args, {"svg": args.out})


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"roster: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"roster {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"roster {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
