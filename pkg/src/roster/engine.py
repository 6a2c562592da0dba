"""Roster-of-Experts decoding: n stochastic routing samples per token,
averaged in probability space, decoded greedily."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from roster.cache import CacheMode, DecodeCache
from roster.kernels import log_softmax
from roster.model import (
    MoEModel,
    RoutingPlan,
    SequenceOverflowError,
    check_tokens,
    forward_batch,
    forward_clean_branches,
    forward_deterministic,
)
from roster.routing import GATE_SOURCES, TemperatureProfile

AGGREGATIONS = ("prob", "logit")
NORM_TOL = 1e-5


class AggregationError(ValueError):
    pass


class CorpusError(ValueError):
    pass


@dataclass
class RoEConfig:
    n_samples: int = 1
    profile: TemperatureProfile = field(default_factory=TemperatureProfile)
    cache_mode: CacheMode = CacheMode.CLEAN
    master_seed: int = 0
    max_new_tokens: int = 16
    eos_id: int | None = None
    gate_source: str = "original"
    # "logit" averages raw logits before the softmax; diagnostic only
    aggregation: str = "prob"
    use_cache: bool = True

    def __post_init__(self):
        self.cache_mode = CacheMode(self.cache_mode)
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.max_new_tokens < 0:
            raise ValueError("max_new_tokens must be >= 0")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        if self.gate_source not in GATE_SOURCES:
            raise ValueError(f"gate_source must be one of {GATE_SOURCES}")

    def sample_taus(self, layer: int) -> np.ndarray:
        """Effective temperature of every sample at ``layer``."""
        taus = np.full(self.n_samples, self.profile.tau(layer), dtype=np.float64)
        if self.cache_mode is CacheMode.CLEAN:
            taus[0] = 0.0
        return taus

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "profile": self.profile.to_json(),
            "cache_mode": self.cache_mode.value,
            "master_seed": self.master_seed,
            "max_new_tokens": self.max_new_tokens,
            "eos_id": self.eos_id,
            "gate_source": self.gate_source,
            "aggregation": self.aggregation,
            "use_cache": self.use_cache,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RoEConfig":
        d = dict(d)
        d["profile"] = TemperatureProfile.from_json(d.get("profile", {}))
        return cls(**d)


def _plan(model: MoEModel, config: RoEConfig, steps: np.ndarray, tau_columns=None) -> RoutingPlan:
    taus = {}
    for layer in model.config.moe_layer_indices:
        col = config.sample_taus(layer)
        if np.any(col > 0):
            taus[layer] = col[:, None] if tau_columns is None else tau_columns(col)
    return RoutingPlan(config.master_seed, taus, np.asarray(steps, dtype=np.int64), config.gate_source)


def aggregate(sample_probs) -> np.ndarray:
    """Elementwise mean of per-sample next-token distributions ``[n, vocab]``."""
    p = np.asarray(sample_probs, dtype=np.float64)
    if p.ndim == 1:
        p = p[None]
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > NORM_TOL) or np.any(p < 0):
        raise AggregationError(f"rows are not probability distributions (row sums {sums.tolist()})")
    return p.mean(axis=0)


def _probs(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _combine(logits: np.ndarray, aggregation: str) -> np.ndarray:
    if aggregation == "logit":
        return _probs(np.mean(np.asarray(logits, dtype=np.float64), axis=0))
    return aggregate(_probs(logits))


def _entropy(probs: np.ndarray) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.sum(np.where(probs > 0, probs * np.log(probs), 0.0), axis=-1)
    return float(np.mean(h))


@dataclass
class StepOutput:
    next_token: int
    aggregate: np.ndarray  # [vocab] float64
    sample_logits: np.ndarray  # [n, vocab] float32

    def __iter__(self) -> Iterator:
        return iter((self.next_token, self.aggregate))


def roe_step(model: MoEModel, cache: DecodeCache | None, last_token: int, step: int, config: RoEConfig,
             history=None) -> StepOutput:
    """One batched RoE decoding step.

    With a cache, ``last_token`` is fed at position ``cache.length`` and the
    cache is appended according to its mode. Without one, ``history`` (the
    full token sequence ending in ``last_token``) is recomputed from scratch;
    earlier positions route deterministically.
    """
    n = config.n_samples
    samples = np.arange(n)
    if cache is not None:
        if cache.n_samples != n or cache.mode is not config.cache_mode:
            raise ValueError("cache does not match config (mode / n_samples)")
        ids = np.full((n, 1), int(last_token), dtype=np.int64)
        plan = _plan(model, config, np.array([step]))
        logits = forward_batch(model, ids, cache=cache, plan=plan, sample_ids=samples)[:, -1]
    else:
        seq = np.asarray(history if history is not None else [last_token], dtype=np.int64)
        t = seq.shape[0]

        def last_only(col):
            m = np.zeros((n, t))
            m[:, -1] = col
            return m

        plan = _plan(model, config, np.full(t, step), tau_columns=last_only)
        ids = np.broadcast_to(seq[None], (n, t))
        logits = forward_batch(model, ids, plan=plan, sample_ids=samples)[:, -1]
    agg = _combine(logits, config.aggregation)
    return StepOutput(int(np.argmax(agg)), agg, logits)


@dataclass
class GenerationResult:
    prompt: list[int]
    tokens: list[int]
    config: RoEConfig
    aggregates: np.ndarray | None = None  # [steps, vocab]
    sample_entropy: list[float] = field(default_factory=list)
    step_seconds: list[float] = field(default_factory=list)
    cache_bytes: int = 0  # K/V bytes persisted at the end of generation

    def to_json(self, top_m: int = 5) -> dict:
        out = {
            "schema": "roster.generation/1",
            "prompt_ids": list(self.prompt),
            "tokens": list(self.tokens),
            "seeds": {"master_seed": self.config.master_seed},
            "config": self.config.to_dict(),
            "sample_entropy": [round(h, 8) for h in self.sample_entropy],
        }
        if self.aggregates is not None and top_m > 0:
            top = []
            for row in self.aggregates:
                idx = np.argsort(-row, kind="stable")[:top_m]
                top.append([[int(i), round(float(row[i]), 8)] for i in idx])
            out["per_step_top"] = top
        return out


def _check_budget(model: MoEModel, prompt: list[int], max_new: int) -> None:
    if not prompt:
        raise ValueError("prompt must contain at least one token")
    need = len(prompt) - 1 + max_new
    if need > model.config.max_seq_len:
        raise SequenceOverflowError(
            f"prompt of {len(prompt)} tokens plus {max_new} new tokens needs {need} positions; "
            f"max_seq_len is {model.config.max_seq_len}"
        )


def generate(model: MoEModel, prompt_tokens, config: RoEConfig, retain_aggregates: bool = False) -> GenerationResult:
    """Greedy RoE generation.

    All prompt tokens but the last are prefilled deterministically; every
    emitted token then comes from :func:`roe_step`.
    """
    prompt = [int(t) for t in prompt_tokens]
    result = GenerationResult(prompt, [], config)
    if config.max_new_tokens == 0:
        if retain_aggregates:
            result.aggregates = np.zeros((0, model.config.vocab_size))
        return result
    _check_budget(model, prompt, config.max_new_tokens)
    check_tokens(model.config, np.asarray(prompt))
    cache = None
    if config.use_cache:
        cache = DecodeCache.for_model(model.config, config.cache_mode, config.n_samples)
        if len(prompt) > 1:
            forward_deterministic(model, prompt[:-1], cache)
    seq = list(prompt)
    rows = []
    last = prompt[-1]
    for step in range(config.max_new_tokens):
        t0 = time.perf_counter()
        out = roe_step(model, cache, last, step, config, history=None if cache is not None else seq)
        result.step_seconds.append(time.perf_counter() - t0)
        result.tokens.append(out.next_token)
        result.sample_entropy.append(_entropy(_probs(out.sample_logits)))
        if retain_aggregates:
            rows.append(out.aggregate)
        seq.append(out.next_token)
        last = out.next_token
        if config.eos_id is not None and out.next_token == config.eos_id:
            break
    if retain_aggregates:
        result.aggregates = np.array(rows)
    if cache is not None:
        result.cache_bytes = cache.persisted_bytes()
    return result


def greedy_decode(model: MoEModel, prompt_tokens, max_new_tokens: int, eos_id: int | None = None) -> list[int]:
    """Baseline single-path greedy decoding with a plain cache."""
    prompt = [int(t) for t in prompt_tokens]
    if max_new_tokens == 0:
        return []
    _check_budget(model, prompt, max_new_tokens)
    cache = DecodeCache.for_model(model.config, CacheMode.STANDARD, 1)
    logits = forward_deterministic(model, prompt, cache)[-1]
    out = []
    for i in range(max_new_tokens):
        tok = int(np.argmax(logits))
        out.append(tok)
        if (eos_id is not None and tok == eos_id) or i == max_new_tokens - 1:
            break
        logits = forward_deterministic(model, [tok], cache)[-1]
    return out


@dataclass
class NLLReport:
    """Per-position negative log-likelihoods of a teacher-forced pass."""

    aggregate_nll: np.ndarray  # [positions]
    sample_nll: np.ndarray  # [n, positions]

    @property
    def perplexity(self) -> float:
        return float(np.exp(np.mean(self.aggregate_nll)))

    def sample_perplexities(self) -> np.ndarray:
        return np.exp(np.mean(self.sample_nll, axis=1))


def nll_from_logits(logits, targets) -> np.ndarray:
    """``-ln softmax(logits)[target]`` per row."""
    lp = log_softmax(logits)
    return -np.take_along_axis(lp, np.asarray(targets, dtype=np.int64)[:, None], axis=-1)[:, 0]


def perplexity_from_logits(logits, targets) -> float:
    return float(np.exp(np.mean(nll_from_logits(logits, targets))))


def _windows(n_tokens: int, width: int):
    for start in range(0, n_tokens - 1, width):
        stop = min(start + width, n_tokens - 1)
        yield start, stop


def evaluate_nll(model: MoEModel, corpus_tokens, config: RoEConfig | None = None) -> NLLReport:
    """Teacher-forced NLL over ``corpus_tokens``.

    The corpus is cut into consecutive windows of ``max_seq_len`` inputs;
    every token after the first is predicted exactly once. With a config,
    each position's probability is the RoE aggregate: in clean mode every
    position branches off the deterministic history, in standard mode each
    sample carries its own stochastic history through the window. An
    all-zero profile reproduces the deterministic result exactly.
    """
    tokens = np.asarray(corpus_tokens, dtype=np.int64).ravel()
    if tokens.size < 2:
        raise CorpusError("corpus needs at least 2 tokens")
    check_tokens(model.config, tokens)
    agg_parts, sample_parts = [], []
    for start, stop in _windows(tokens.size, model.config.max_seq_len):
        inp = tokens[start:stop]
        tgt = tokens[start + 1:stop + 1]
        if config is None:
            logits = forward_deterministic(model, inp)[None]
        elif config.profile.is_zero():
            # every sample routes deterministically; skip the redundant passes
            logits = np.broadcast_to(forward_deterministic(model, inp)[None], (config.n_samples, inp.size, model.config.vocab_size))
        else:
            n = config.n_samples
            samples = np.arange(n)
            plan = _plan(model, config, start + np.arange(inp.size))
            if config.cache_mode is CacheMode.CLEAN:
                logits = forward_clean_branches(model, inp, plan, samples)
            else:
                logits = forward_batch(model, np.broadcast_to(inp[None], (n, inp.size)), plan=plan,
                                       sample_ids=samples)
        lp = log_softmax(logits)  # [n, t, vocab]
        tlp = np.take_along_axis(lp, np.broadcast_to(tgt[None, :, None], lp.shape[:2] + (1,)), axis=-1)[..., 0]
        if config is not None and config.aggregation == "logit":
            mean_lp = log_softmax(np.mean(np.asarray(logits, dtype=np.float64), axis=0))
            agg = -mean_lp[np.arange(tgt.size), tgt]
        else:
            m = np.max(tlp, axis=0)
            agg = -(m + np.log(np.mean(np.exp(tlp - m), axis=0)))
        agg_parts.append(agg)
        sample_parts.append(-tlp)
    return NLLReport(np.concatenate(agg_parts), np.concatenate(sample_parts, axis=1))


def perplexity(model: MoEModel, corpus_tokens, config: RoEConfig | None = None) -> float:
    """``exp`` of the mean next-token NLL (natural log)."""
    return evaluate_nll(model, corpus_tokens, config).perplexity


def with_profile(config: RoEConfig, profile: TemperatureProfile) -> RoEConfig:
    return replace(config, profile=profile)
