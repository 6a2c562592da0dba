"""Gumbel-Top-K expert routing with reproducible noise streams.

Every Gumbel draw is addressed by ``(master_seed, layer, step, sample)`` plus
an element counter, and hashed with a SplitMix64 finalizer. No generator
state is carried between calls, so a batch of tokens can be routed in one
vectorized call and any single row can be replayed on its own.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from roster.kernels import softmax

UNIFORM_CLAMP = 1e-12
GATE_SOURCES = ("original", "perturbed")

_MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
# distinct odd multipliers per key field
_FIELD_SALTS = (
    np.uint64(0xD6E8FEB86659FD93),
    np.uint64(0xA0761D6478BD642F),
    np.uint64(0xE7037ED1A0B428DB),
)


class RoutingError(ValueError):
    pass


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _u64(x) -> np.ndarray:
    arr = np.asarray(x)
    if arr.dtype == np.uint64:
        return arr
    if arr.dtype.kind in "iu":
        return arr.astype(np.int64).astype(np.uint64)
    return np.asarray(int(x) & _MASK64, dtype=np.uint64)


def stream_base(seed, layer, step, sample) -> np.ndarray:
    """Hash a stream key (broadcastable integer arrays) to a 64-bit stream id."""
    with np.errstate(over="ignore"):
        h = _mix64(_u64(int(seed) & _MASK64) ^ _GOLDEN)
        for salt, part in zip(_FIELD_SALTS, (layer, step, sample)):
            h = _mix64(h ^ ((_u64(part) + np.uint64(1)) * salt))
    return h


def uniform_from_stream(base: np.ndarray, count: int) -> np.ndarray:
    """``count`` uniforms per stream id, shape ``base.shape + (count,)``."""
    base = np.asarray(base, dtype=np.uint64)
    ctr = np.arange(1, count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        bits = _mix64(base[..., None] + ctr * _GOLDEN)
    u = (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    return np.clip(u, UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)


def gumbel_from_uniform(u: np.ndarray) -> np.ndarray:
    return -np.log(-np.log(u))


@dataclass(frozen=True)
class RngStreamKey:
    master_seed: int
    layer_index: int
    decode_step: int
    sample_index: int

    def base(self) -> np.ndarray:
        return stream_base(self.master_seed, self.layer_index, self.decode_step, self.sample_index)


def gumbel_noise(count: int, key: RngStreamKey) -> np.ndarray:
    """``count`` i.i.d. Gumbel(0, 1) draws for ``key`` (float64)."""
    if count < 0:
        raise ValueError("count must be nonnegative")
    return gumbel_from_uniform(uniform_from_stream(key.base(), count))


def gumbel_batch(seed: int, layer: int, steps, samples, count: int) -> np.ndarray:
    """Gumbel draws for many keys that share ``seed`` and ``layer``.

    ``steps`` and ``samples`` are broadcastable integer arrays; the result has
    their broadcast shape plus a trailing axis of length ``count``. Row ``i``
    is bitwise equal to ``gumbel_noise(count, RngStreamKey(seed, layer,
    steps[i], samples[i]))``.
    """
    base = stream_base(seed, layer, np.asarray(steps), np.asarray(samples))
    return gumbel_from_uniform(uniform_from_stream(base, count))


@dataclass
class TemperatureProfile:
    """Per-MoE-layer Gumbel temperatures; missing layers mean zero."""

    taus: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for layer, tau in self.taus.items():
            tau = float(tau)
            if not math.isfinite(tau) or tau < 0:
                raise ValueError(f"temperature for layer {layer} must be finite and >= 0, got {tau}")
            clean[int(layer)] = tau
        self.taus = dict(sorted(clean.items()))

    def tau(self, layer: int) -> float:
        return self.taus.get(layer, 0.0)

    def is_zero(self) -> bool:
        return all(t == 0.0 for t in self.taus.values())

    @classmethod
    def uniform(cls, layers, tau: float) -> "TemperatureProfile":
        return cls({int(l): tau for l in layers})

    def validate_layers(self, moe_layers) -> None:
        bad = sorted(set(self.taus) - set(moe_layers))
        if bad:
            raise ValueError(f"temperature profile names non-MoE layers {bad}")

    def to_json(self) -> dict[str, float]:
        return {str(k): v for k, v in self.taus.items()}

    @classmethod
    def from_json(cls, obj: Mapping[str, float]) -> "TemperatureProfile":
        if not isinstance(obj, Mapping):
            raise ValueError("temperature profile must be a JSON object")
        return cls({int(k): float(v) for k, v in obj.items()})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "TemperatureProfile":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class RoutingDecision:
    selected: np.ndarray  # [k] expert indices, best first
    gates: np.ndarray  # [k], sums to 1
    perturbed_logits: np.ndarray  # [n_experts]


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries along the last axis, best first.

    Ties go to the lowest index.
    """
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k]


def select_experts(router_logits: np.ndarray, k: int, taus: np.ndarray, noise_fn=None,
                   gate_source: str = "original"):
    """Batched Gumbel-Top-K over rows of ``router_logits``.

    Args:
        router_logits: ``[N, E]`` router outputs.
        k: experts per token.
        taus: ``[N]`` temperatures, one per row.
        noise_fn: callable ``(row_indices) -> [len(rows), E]`` Gumbel draws for
            the rows with positive temperature. Never called when all taus
            are zero.
        gate_source: ``"original"`` softmaxes the unperturbed logits of the
            selected experts, ``"perturbed"`` the perturbed ones.

    Returns:
        ``(selected [N, k], gates [N, k] float32, perturbed [N, E] float64)``.
    """
    n_experts = router_logits.shape[-1]
    if k > n_experts or k < 1:
        raise RoutingError(f"top_k={k} is invalid for {n_experts} experts")
    if gate_source not in GATE_SOURCES:
        raise RoutingError(f"unknown gate source {gate_source!r}")
    logits = np.asarray(router_logits, dtype=np.float64)
    perturbed = logits.copy()
    taus = np.asarray(taus, dtype=np.float64)
    hot = np.flatnonzero(taus > 0)
    if hot.size:
        perturbed[hot] += taus[hot, None] * noise_fn(hot)
    selected = topk_indices(perturbed, k)
    gate_src = perturbed if gate_source == "perturbed" else logits
    gates = softmax(np.take_along_axis(gate_src, selected, axis=-1)).astype(np.float32)
    return selected, gates, perturbed


def route(router_logits, k: int, tau: float, key: RngStreamKey, gate_source: str = "original") -> RoutingDecision:
    """Route one token: ``TopK(R + tau * G, k)`` with G drawn from ``key``."""
    logits = np.asarray(router_logits, dtype=np.float64).reshape(1, -1)
    if not np.all(np.isfinite(logits)):
        raise RoutingError("router logits must be finite")
    if tau < 0:
        raise RoutingError(f"tau must be >= 0, got {tau}")
    n_experts = logits.shape[1]
    selected, gates, perturbed = select_experts(
        logits, k, np.array([tau]),
        noise_fn=lambda rows: gumbel_noise(n_experts, key)[None, :],
        gate_source=gate_source,
    )
    return RoutingDecision(selected[0], gates[0], perturbed[0])


MAX_ENUM_EXPERTS = 10
MAX_ENUM_K = 4


def plackett_luce_ordered(probs, k: int) -> dict[tuple[int, ...], float]:
    """Exact probabilities of every ordered k-tuple under sequential sampling
    without replacement from ``probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.shape[0]
    if n > MAX_ENUM_EXPERTS or k > MAX_ENUM_K:
        raise RoutingError(
            f"enumeration limited to n_experts <= {MAX_ENUM_EXPERTS} and k <= {MAX_ENUM_K}; got {n}, {k}"
        )
    out = {}
    for perm in itertools.permutations(range(n), k):
        p, used = 1.0, 0.0
        for idx in perm:
            remaining = 1.0 - used
            p *= probs[idx] / remaining if remaining > 0 else 0.0
            used += probs[idx]
        out[perm] = p
    return out


def plackett_luce_subsets(probs, k: int) -> dict[tuple[int, ...], float]:
    out: dict[tuple[int, ...], float] = {}
    for perm, p in plackett_luce_ordered(probs, k).items():
        key = tuple(sorted(perm))
        out[key] = out.get(key, 0.0) + p
    return out


def total_variation(p: Mapping, q: Mapping) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(x, 0.0) - q.get(x, 0.0)) for x in keys)
