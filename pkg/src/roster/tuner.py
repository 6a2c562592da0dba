"""Per-layer temperature search with a Tree-structured Parzen Estimator.

Trial 0 always evaluates the all-zero profile, so the returned best is never
worse than plain top-k routing on the tuning data.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import truncnorm

from roster.corpus import read_tokens
from roster.engine import RoEConfig, evaluate_nll, generate
from roster.model import MoEModel, ModelConfig
from roster.routing import TemperatureProfile

DEFAULT_TAU_MAX = 0.5


class EmptySearchSpaceError(ValueError):
    pass


class ObjectiveError(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchSpace:
    tunable_layers: tuple[int, ...]
    tau_max: float = DEFAULT_TAU_MAX

    def __post_init__(self):
        object.__setattr__(self, "tunable_layers", tuple(int(l) for l in self.tunable_layers))
        if not (self.tau_max > 0 and math.isfinite(self.tau_max)):
            raise ValueError(f"tau_max must be a positive finite number, got {self.tau_max}")

    @classmethod
    def from_model(cls, config: ModelConfig, skip_edges: int = 1, tau_max: float = DEFAULT_TAU_MAX) -> "SearchSpace":
        """Every MoE layer except the first and last ``skip_edges`` ones."""
        if skip_edges < 0:
            raise ValueError("skip_edges must be >= 0")
        layers = list(config.moe_layer_indices)
        if 2 * skip_edges >= len(layers):
            return cls((), tau_max)
        return cls(tuple(layers[skip_edges:len(layers) - skip_edges]), tau_max)

    @property
    def bounds(self) -> dict[int, tuple[float, float]]:
        return {layer: (0.0, self.tau_max) for layer in self.tunable_layers}

    def contains(self, profile: TemperatureProfile) -> bool:
        for layer, tau in profile.taus.items():
            if tau != 0.0 and (layer not in self.tunable_layers or not 0.0 <= tau <= self.tau_max):
                return False
        return True

    def to_json(self) -> dict:
        return {"tunable_layers": list(self.tunable_layers), "tau_max": self.tau_max}


@dataclass
class TrialRecord:
    trial_id: int
    profile: TemperatureProfile
    objective_value: float | None  # lower is better; None when the trial failed
    wall_time: float
    seed: int
    state: str = "complete"
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.state == "complete"

    def to_json(self) -> dict:
        out = {
            "trial_id": self.trial_id,
            "state": self.state,
            "objective_value": self.objective_value,
            "profile": self.profile.to_json(),
            "wall_time": self.wall_time,
            "seed": self.seed,
        }
        if self.error is not None:
            out["error"] = self.error
        return out

    @classmethod
    def from_json(cls, d: dict) -> "TrialRecord":
        return cls(d["trial_id"], TemperatureProfile.from_json(d["profile"]), d["objective_value"],
                   d["wall_time"], d["seed"], d.get("state", "complete"), d.get("error"))


@dataclass(frozen=True)
class TPESettings:
    gamma: float = 0.25
    n_startup: int = 10
    n_candidates: int = 24
    bandwidth_floor: float = 0.01  # fraction of the bound width


class ParzenEstimator:
    """Equal-weight mixture of Gaussians truncated to ``[low, high]``.

    One kernel per observation. The shared bandwidth is Scott's normal
    reference rule, ``1.059 * spread * m**(-1/5)``, with the robust spread
    ``min(std, IQR / 1.34)``, clipped to ``[floor * width, width]``. The robust
    spread keeps the bad-trial density from flattening out once most trials
    cluster, which would otherwise stall the search at the mode of l(x).
    """

    def __init__(self, observations: Sequence[float], low: float, high: float, floor: float = 0.01):
        self.mus = np.asarray(observations, dtype=np.float64)
        self.low, self.high = low, high
        width = high - low
        m = self.mus.size
        scott = 0.0
        if m > 1:
            spread = float(np.std(self.mus))
            q75, q25 = np.percentile(self.mus, [75, 25])
            if q75 > q25:
                spread = min(spread, (q75 - q25) / 1.34)
            scott = 1.059 * spread * m ** (-0.2)
        self.sigma = float(np.clip(scott, floor * width, width))
        self._a = (low - self.mus) / self.sigma
        self._b = (high - self.mus) / self.sigma

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        comp = rng.integers(self.mus.size, size=size)
        return truncnorm.rvs(self._a[comp], self._b[comp], loc=self.mus[comp], scale=self.sigma, random_state=rng)

    def logpdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)[:, None]
        comp = truncnorm.logpdf(x, self._a[None], self._b[None], loc=self.mus[None], scale=self.sigma)
        return logsumexp(comp, axis=1) - math.log(self.mus.size)


def uniform_profile(space: SearchSpace, rng: np.random.Generator) -> TemperatureProfile:
    return TemperatureProfile({layer: float(rng.uniform(0.0, space.tau_max)) for layer in space.tunable_layers})


def _split(history: Sequence[TrialRecord], gamma: float):
    ordered = sorted(history, key=lambda r: (r.objective_value, r.trial_id))
    n_good = max(1, math.ceil(gamma * len(ordered)))
    return ordered[:n_good], ordered[n_good:]


def tpe_suggest(history: Sequence[TrialRecord], space: SearchSpace, rng: np.random.Generator,
                settings: TPESettings = TPESettings()) -> TemperatureProfile:
    """Next profile to try given completed trials (failed ones are ignored)."""
    if not space.tunable_layers:
        raise EmptySearchSpaceError("search space has no tunable layers")
    done = [r for r in history if r.ok]
    if len(done) < settings.n_startup:
        return uniform_profile(space, rng)
    good, bad = _split(done, settings.gamma)
    taus = {}
    for layer in space.tunable_layers:
        lo, hi = 0.0, space.tau_max
        l_est = ParzenEstimator([r.profile.tau(layer) for r in good], lo, hi, settings.bandwidth_floor)
        cand = l_est.sample(rng, settings.n_candidates)
        score = l_est.logpdf(cand)
        if bad:
            score = score - ParzenEstimator([r.profile.tau(layer) for r in bad], lo, hi,
                                            settings.bandwidth_floor).logpdf(cand)
        taus[layer] = float(np.clip(cand[int(np.argmax(score))], lo, hi))
    return TemperatureProfile(taus)


def best_so_far(history: Sequence[TrialRecord]) -> list[float | None]:
    out, best = [], None
    for r in history:
        if r.ok and (best is None or r.objective_value < best):
            best = r.objective_value
        out.append(best)
    return out


@dataclass
class SearchResult:
    best_profile: TemperatureProfile
    best_value: float | None
    history: list[TrialRecord] = field(default_factory=list)

    def __iter__(self):
        return iter((self.best_profile, self.history))


def _evaluate(trial_id: int, objective: Callable[[TemperatureProfile], float], profile: TemperatureProfile,
              seed: int) -> TrialRecord:
    t0 = time.perf_counter()
    try:
        value = float(objective(profile))
        if not math.isfinite(value):
            raise ObjectiveError(f"objective returned non-finite value {value}")
    except Exception as exc:  # failed trials are recorded and skipped
        return TrialRecord(trial_id, profile, None, time.perf_counter() - t0, seed, "failed", f"{type(exc).__name__}: {exc}")
    return TrialRecord(trial_id, profile, value, time.perf_counter() - t0, seed)


def run_search(objective: Callable[[TemperatureProfile], float], space: SearchSpace, budget_trials: int,
               seed: int = 0, settings: TPESettings = TPESettings(), width: int = 1, anchor: bool = True,
               trial_seed: int = 0, on_trial: Callable[[TrialRecord], None] | None = None) -> SearchResult:
    """Minimize ``objective`` over temperature profiles in ``space``.

    With ``width > 1`` trials run in synchronous batches: every member of a
    batch is suggested from the trials completed before the batch started,
    and records are appended in trial-id order, so results stay reproducible.
    """
    if budget_trials < 1:
        raise ValueError("budget_trials must be >= 1")
    if width < 1:
        raise ValueError("width must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    history: list[TrialRecord] = []

    def record(rec: TrialRecord):
        history.append(rec)
        if on_trial is not None:
            on_trial(rec)

    if anchor:
        record(_evaluate(0, objective, TemperatureProfile(), trial_seed))
    if space.tunable_layers:
        pool = ThreadPoolExecutor(width) if width > 1 else None
        try:
            while len(history) < budget_trials:
                batch = min(width, budget_trials - len(history))
                profiles = [tpe_suggest(history, space, rng, settings) for _ in range(batch)]
                ids = range(len(history), len(history) + batch)
                if pool is None:
                    recs = [_evaluate(i, objective, p, trial_seed) for i, p in zip(ids, profiles)]
                else:
                    recs = list(pool.map(lambda a: _evaluate(a[0], objective, a[1], trial_seed), zip(ids, profiles)))
                for rec in recs:
                    record(rec)
        finally:
            if pool is not None:
                pool.shutdown()
    done = [r for r in history if r.ok]
    if not done:
        return SearchResult(TemperatureProfile(), None, history)
    best = min(done, key=lambda r: (r.objective_value, r.trial_id))
    return SearchResult(best.profile, best.objective_value, history)


@dataclass
class ObjectiveSpec:
    """What a trial is scored on.

    ``kind`` is ``"ppl"`` (ensemble perplexity over a token corpus) or
    ``"accuracy"`` (exact-match greedy generation over prompt/reference
    pairs, negated). Data comes from ``data_path`` or is passed inline.
    """

    kind: str
    data_path: str | None = None
    tokens: np.ndarray | None = None
    items: list[dict] | None = None

    def to_json(self) -> dict:
        return {"kind": self.kind, "data_path": self.data_path}


def read_items(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"validation file not found: {path}")
    items = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        obj = json.loads(line)
        if "prompt_ids" not in obj or "reference_ids" not in obj:
            raise ValueError(f"{path}:{n}: expected prompt_ids and reference_ids")
        items.append({"prompt_ids": [int(t) for t in obj["prompt_ids"]],
                      "reference_ids": [int(t) for t in obj["reference_ids"]]})
    return items


def _ppl_objective(model: MoEModel, spec: ObjectiveSpec, config: RoEConfig) -> float:
    tokens = spec.tokens if spec.tokens is not None else read_tokens(spec.data_path)
    if len(tokens) < 2:
        raise ValueError("validation corpus needs at least 2 tokens")
    return evaluate_nll(model, tokens, config).perplexity


def exact_match_accuracy(model: MoEModel, items: Sequence[dict], config: RoEConfig) -> float:
    if not items:
        raise ValueError("validation set is empty")
    hits = 0
    for item in items:
        ref = list(item["reference_ids"])
        out = generate(model, item["prompt_ids"], replace(config, max_new_tokens=len(ref)))
        hits += out.tokens[:len(ref)] == ref
    return hits / len(items)


def _accuracy_objective(model: MoEModel, spec: ObjectiveSpec, config: RoEConfig) -> float:
    items = spec.items if spec.items is not None else read_items(spec.data_path)
    return -exact_match_accuracy(model, items, config)


OBJECTIVES: dict[str, Callable[[MoEModel, ObjectiveSpec, RoEConfig], float]] = {
    "ppl": _ppl_objective,
    "accuracy": _accuracy_objective,
}


def evaluate_objective(model: MoEModel, objective_spec: ObjectiveSpec, profile: TemperatureProfile,
                       base_config: RoEConfig) -> float:
    try:
        fn = OBJECTIVES[objective_spec.kind]
    except KeyError:
        raise ValueError(f"unknown objective {objective_spec.kind!r}; choose from {sorted(OBJECTIVES)}") from None
    return fn(model, objective_spec, replace(base_config, profile=profile))


def tune(model: MoEModel, objective_spec: ObjectiveSpec, space: SearchSpace, budget_trials: int,
         base_config: RoEConfig, seed: int = 0, settings: TPESettings = TPESettings(), width: int = 1,
         on_trial=None) -> SearchResult:
    """TPE search over ``space`` scored by ``objective_spec``; unpacks to
    ``(best_profile, history)``."""
    if objective_spec.kind not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective_spec.kind!r}; choose from {sorted(OBJECTIVES)}")
    return run_search(
        lambda prof: evaluate_objective(model, objective_spec, prof, base_config),
        space, budget_trials, seed=seed, settings=settings, width=width,
        trial_seed=base_config.master_seed, on_trial=on_trial,
    )


def write_history(path, history: Sequence[TrialRecord]) -> None:
    lines = []
    for rec, best in zip(history, best_so_far(history)):
        obj = rec.to_json()
        obj["best_so_far"] = best
        lines.append(json.dumps(obj, sort_keys=True))
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_history(path) -> list[TrialRecord]:
    return [TrialRecord.from_json(json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]


def profile_matrix(history: Sequence[TrialRecord], layers: Sequence[int]) -> np.ndarray:
    """``[trials, layers]`` temperatures, for heatmaps of the search."""
    return np.array([[r.profile.tau(l) for l in layers] for r in history], dtype=np.float64).reshape(len(history), len(layers))
