"""Toy decoder-only transformer with mixture-of-experts feed-forward blocks.

Blocks are pre-norm (RMS norm), with learned absolute positions, multi-head
causal attention and two-layer GELU experts. Weights live in a flat
``name -> float32 array`` mapping so the checkpoint container can stream them
in manifest order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from roster.cache import CacheMode, CacheOverflowError, DecodeCache
from roster.kernels import gelu, matmul, rms_norm, softmax
from roster.routing import gumbel_batch, select_experts

MAGIC = b"MOECKPT1"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Invalid model configuration; ``violations`` lists every broken rule."""

    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("invalid model config: " + "; ".join(violations))


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class CorruptHeaderError(CheckpointError):
    pass


class ManifestMismatchError(CheckpointError):
    pass


class PayloadSizeError(CheckpointError):
    pass


class TruncatedPayloadError(PayloadSizeError):
    pass


class TokenRangeError(ValueError):
    pass


class SequenceOverflowError(CacheOverflowError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    n_experts: int = 8
    top_k: int = 2
    d_ff: int = 128
    max_seq_len: int = 256
    moe_layer_indices: tuple[int, ...] | None = None
    head_dim: int | None = None

    def __post_init__(self):
        if self.moe_layer_indices is None:
            object.__setattr__(self, "moe_layer_indices", tuple(range(self.n_layers)))
        else:
            object.__setattr__(self, "moe_layer_indices", tuple(int(i) for i in self.moe_layer_indices))
        if self.head_dim is None and self.n_heads > 0:
            object.__setattr__(self, "head_dim", self.d_model // self.n_heads)

    def violations(self) -> list[str]:
        out = []
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "n_experts", "top_k", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        if not 1 <= self.top_k <= max(self.n_experts, 1) or self.top_k > self.n_experts:
            out.append(f"top_k ({self.top_k}) must satisfy 1 <= top_k <= n_experts ({self.n_experts})")
        if self.n_heads >= 1 and self.d_model % self.n_heads:
            out.append(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.n_heads >= 1 and self.head_dim is not None and self.head_dim * self.n_heads != self.d_model:
            out.append(f"head_dim ({self.head_dim}) x n_heads ({self.n_heads}) must equal d_model ({self.d_model})")
        bad = [i for i in self.moe_layer_indices if not 0 <= i < self.n_layers]
        if bad:
            out.append(f"moe_layer_indices {bad} outside [0, {self.n_layers})")
        if len(set(self.moe_layer_indices)) != len(self.moe_layer_indices) or list(self.moe_layer_indices) != sorted(
            self.moe_layer_indices
        ):
            out.append("moe_layer_indices must be strictly increasing")
        return out

    def validate(self) -> "ModelConfig":
        v = self.violations()
        if v:
            raise ConfigError(v)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["moe_layer_indices"] = list(self.moe_layer_indices)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**{k: (tuple(v) if k == "moe_layer_indices" else v) for k, v in d.items()})


def tensor_manifest(config: ModelConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """``(name, shape, fan_in)`` for every weight, in checkpoint order."""
    d, f, E = config.d_model, config.d_ff, config.n_experts
    out = [
        ("tok_emb", (config.vocab_size, d), d),
        ("pos_emb", (config.max_seq_len, d), d),
    ]
    moe = set(config.moe_layer_indices)
    for i in range(config.n_layers):
        p = f"layers.{i}."
        out.append((p + "attn_norm", (d,), 0))
        for w in ("wq", "wk", "wv", "wo"):
            out.append((p + w, (d, d), d))
        out.append((p + "ffn_norm", (d,), 0))
        if i in moe:
            out.append((p + "router", (d, E), d))
            for e in range(E):
                out.append((p + f"experts.{e}.w1", (d, f), d))
                out.append((p + f"experts.{e}.w2", (f, d), f))
        else:
            out.append((p + "mlp.w1", (d, f), d))
            out.append((p + "mlp.w2", (f, d), f))
    out.append(("final_norm", (d,), 0))
    out.append(("unembed", (d, config.vocab_size), d))
    return out


@dataclass
class MoEModel:
    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        for arr in self.tensors.values():
            arr.flags.writeable = False

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def replace_tensors(self, **updates: np.ndarray) -> "MoEModel":
        """Copy of the model with some weights swapped (names use ``__`` for ``.``)."""
        tensors = dict(self.tensors)
        for key, arr in updates.items():
            name = key.replace("__", ".")
            if name not in tensors:
                raise KeyError(name)
            arr = np.array(arr, dtype=np.float32)
            if arr.shape != tensors[name].shape:
                raise ValueError(f"{name}: shape {arr.shape} != {tensors[name].shape}")
            tensors[name] = arr
        return MoEModel(self.config, tensors)


def init_model(config: ModelConfig, seed: int) -> MoEModel:
    """Seeded Gaussian init scaled by ``1/sqrt(fan_in)``; norm gains start at one."""
    config.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    tensors = {}
    for name, shape, fan_in in tensor_manifest(config):
        if fan_in == 0:
            tensors[name] = np.ones(shape, dtype=np.float32)
        else:
            tensors[name] = (rng.standard_normal(shape) / math.sqrt(fan_in)).astype(np.float32)
    return MoEModel(config, tensors)


def checkpoint_bytes(model: MoEModel) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, shape, _ in tensor_manifest(model.config):
        raw = np.ascontiguousarray(model.tensors[name], dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"format_version": FORMAT_VERSION, "config": model.config.to_dict(), "tensors": manifest}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def save_checkpoint(model: MoEModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def parse_checkpoint(data: bytes) -> MoEModel:
    if data[:8] != MAGIC:
        raise BadMagicError(f"bad magic {data[:8]!r}, expected {MAGIC!r}")
    if len(data) < 16:
        raise CorruptHeaderError("missing header length")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise CorruptHeaderError(f"header length {hlen} exceeds file size {len(data)}")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        manifest = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptHeaderError(f"unreadable header: {exc}") from exc
    try:
        config.validate()
    except ConfigError as exc:
        raise CorruptHeaderError(str(exc)) from exc
    expected = tensor_manifest(config)
    if len(manifest) != len(expected):
        raise ManifestMismatchError(f"manifest lists {len(manifest)} tensors, config implies {len(expected)}")
    offset = 0
    for entry, (name, shape, _) in zip(manifest, expected):
        if entry.get("name") != name or tuple(entry.get("shape", ())) != shape:
            raise ManifestMismatchError(
                f"manifest entry {entry.get('name')!r} {entry.get('shape')} does not match expected {name!r} {list(shape)}"
            )
        nbytes = 4 * math.prod(shape)
        if entry.get("offset") != offset or entry.get("nbytes") != nbytes:
            raise ManifestMismatchError(f"manifest entry {name!r} has inconsistent offset/nbytes")
        offset += nbytes
    payload = memoryview(data)[16 + hlen:]
    if len(payload) < offset:
        raise TruncatedPayloadError(f"payload truncated: expected {offset} bytes, got {len(payload)}")
    if len(payload) > offset:
        raise PayloadSizeError(f"payload has trailing data: expected {offset} bytes, got {len(payload)}")
    tensors = {}
    for entry, (name, shape, _) in zip(manifest, expected):
        start = entry["offset"]
        arr = np.frombuffer(payload[start:start + entry["nbytes"]], dtype="<f4").astype(np.float32).reshape(shape)
        tensors[name] = arr
    return MoEModel(config, tensors)


def load_checkpoint(path) -> MoEModel:
    return parse_checkpoint(Path(path).read_bytes())


@dataclass
class RoutingPlan:
    """Stochastic routing instructions for one batched forward pass.

    ``taus`` maps MoE layer index to temperatures of shape ``[rows, t]``;
    layers missing from it route deterministically. ``steps`` gives the
    RNG-stream step for each of the ``t`` positions.
    """

    seed: int
    taus: Mapping[int, np.ndarray]
    steps: np.ndarray
    gate_source: str = "original"


def check_tokens(config: ModelConfig, ids: np.ndarray) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        bad = int(ids.max()) if ids.max() >= config.vocab_size else int(ids.min())
        raise TokenRangeError(f"token id {bad} outside [0, {config.vocab_size})")


def _heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    rows, t, d = x.shape
    return x.reshape(rows, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    rows, h, t, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(rows, t, h * hd)


def _dense_ffn(model: MoEModel, layer: int, h: np.ndarray) -> np.ndarray:
    p = f"layers.{layer}.mlp."
    return matmul(gelu(matmul(h, model[p + "w1"])), model[p + "w2"])


def moe_ffn(model: MoEModel, layer: int, h: np.ndarray, plan: RoutingPlan | None = None,
            sample_ids: np.ndarray | None = None, trace: dict | None = None) -> np.ndarray:
    """Routed expert mixture for ``h`` of shape ``[rows, t, d_model]``."""
    cfg = model.config
    rows, t, d = h.shape
    flat = h.reshape(rows * t, d)
    router_logits = matmul(flat, model[f"layers.{layer}.router"])
    gate_source = "original"
    taus = np.zeros(rows * t)
    noise_fn = None
    if plan is not None:
        gate_source = plan.gate_source
        if layer in plan.taus:
            taus = np.broadcast_to(np.asarray(plan.taus[layer], dtype=np.float64), (rows, t)).ravel()
            if sample_ids is None:
                sample_ids = np.arange(rows)
            steps = np.broadcast_to(np.asarray(plan.steps)[None, :], (rows, t)).ravel()
            samples = np.broadcast_to(np.asarray(sample_ids)[:, None], (rows, t)).ravel()

            def noise_fn(hot):
                return gumbel_batch(plan.seed, layer, steps[hot], samples[hot], cfg.n_experts)

    selected, gates, _ = select_experts(router_logits, cfg.top_k, taus, noise_fn, gate_source)
    if trace is not None:
        trace.setdefault("selected", {})[layer] = selected.reshape(rows, t, cfg.top_k)
        trace.setdefault("gates", {})[layer] = gates.reshape(rows, t, cfg.top_k)
    out = np.zeros_like(flat)
    for e in range(cfg.n_experts):
        tok, slot = np.nonzero(selected == e)
        if tok.size == 0:
            continue
        p = f"layers.{layer}.experts.{e}."
        y = matmul(gelu(matmul(flat[tok], model[p + "w1"])), model[p + "w2"])
        out[tok] += gates[tok, slot][:, None] * y
    return out.reshape(rows, t, d)


def _ffn(model, layer, h, plan, sample_ids, trace):
    if layer in model.config.moe_layer_indices:
        return moe_ffn(model, layer, h, plan, sample_ids, trace)
    return _dense_ffn(model, layer, h)


def _qkv(model: MoEModel, layer: int, h: np.ndarray):
    p = f"layers.{layer}."
    H = model.config.n_heads
    return tuple(_heads(matmul(h, model[p + w]), H) for w in ("wq", "wk", "wv"))


def _embed(model: MoEModel, ids: np.ndarray, start: int) -> np.ndarray:
    t = ids.shape[1]
    return (model["tok_emb"][ids] + model["pos_emb"][start:start + t][None]).astype(np.float32)


def _unembed(model: MoEModel, x: np.ndarray) -> np.ndarray:
    return matmul(rms_norm(x, model["final_norm"]), model["unembed"])


def forward_batch(model: MoEModel, ids, cache: DecodeCache | None = None, plan: RoutingPlan | None = None,
                  sample_ids=None, commit: bool = True, trace: dict | None = None) -> np.ndarray:
    """Batched forward pass; returns logits ``[rows, t, vocab]``.

    Args:
        ids: ``[rows, t]`` token ids; every row sits at the same positions,
            starting at ``cache.length`` (or 0 without a cache).
        cache: history to attend over. Rows read the store belonging to their
            sample and, when ``commit`` is set, append their keys/values to it
            (clean caches keep only sample 0).
        plan: stochastic routing; ``None`` routes deterministically.
        sample_ids: sample index of each row, used for the cache store and the
            noise stream. ``None`` means rows are shared deterministic
            history: they read store 0 and, if committing, a single row is
            broadcast to every store.
        trace: if given, filled with per-layer routing choices.
    """
    cfg = model.config
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ValueError(f"ids must be [rows, t], got shape {ids.shape}")
    rows, t = ids.shape
    check_tokens(cfg, ids)
    start = cache.length if cache is not None else 0
    if start + t > cfg.max_seq_len:
        raise SequenceOverflowError(f"sequence of {start + t} positions exceeds max_seq_len {cfg.max_seq_len}")
    if t == 0:
        return np.zeros((rows, 0, cfg.vocab_size), dtype=np.float32)
    shared = sample_ids is None
    if not shared:
        sample_ids = np.asarray(sample_ids, dtype=np.int64)
        if sample_ids.shape != (rows,):
            raise ValueError("sample_ids must have one entry per row")
    if shared and commit and cache is not None and rows != 1:
        raise ValueError("shared history commits need exactly one row")

    x = _embed(model, ids, start)
    H, hd = cfg.n_heads, cfg.head_dim
    scale = np.float32(1.0 / math.sqrt(hd))
    mask = None
    if cache is not None and start > 0 or t > 1:
        qpos = start + np.arange(t)
        kpos = np.arange(start + t)
        mask = kpos[None, :] <= qpos[:, None]
    for layer in range(cfg.n_layers):
        p = f"layers.{layer}."
        h = rms_norm(x, model[p + "attn_norm"])
        q, k, v = _qkv(model, layer, h)
        if cache is not None and start > 0:
            hk, hv = cache.history(layer)  # [stores, L, H, hd]
            if cache.n_stores == 1 or shared:
                hk, hv = hk[:1], hv[:1]
            else:
                hk, hv = hk[sample_ids], hv[sample_ids]
            hk = np.broadcast_to(hk.transpose(0, 2, 1, 3), (rows, H, start, hd))
            hv = np.broadcast_to(hv.transpose(0, 2, 1, 3), (rows, H, start, hd))
            keys = np.concatenate([hk, k], axis=2)
            vals = np.concatenate([hv, v], axis=2)
        else:
            keys, vals = k, v
        scores = np.matmul(q, keys.transpose(0, 1, 3, 2)) * scale
        if mask is not None:
            scores = np.where(mask, scores, np.float32(-np.inf))
        att = np.matmul(softmax(scores), vals)
        x = x + matmul(_merge_heads(att), model[p + "wo"])
        if cache is not None and commit:
            kt, vt = k.transpose(0, 2, 1, 3), v.transpose(0, 2, 1, 3)
            if shared:
                cache.append(layer, kt[0], vt[0], None)
            else:
                for r in range(rows):
                    if cache.mode is CacheMode.CLEAN and sample_ids[r] != 0:
                        continue
                    cache.append(layer, kt[r], vt[r], int(sample_ids[r]))
        x = x + _ffn(model, layer, rms_norm(x, model[p + "ffn_norm"]), plan, sample_ids, trace)
    return _unembed(model, x)


def forward_deterministic(model: MoEModel, token_ids, cache: DecodeCache | None = None) -> np.ndarray:
    """Logits ``[seq, vocab]`` with plain top-k routing.

    With a cache, ``token_ids`` continue the cached history and are appended
    to it.
    """
    ids = np.asarray(token_ids, dtype=np.int64).reshape(1, -1)
    return forward_batch(model, ids, cache=cache)[0]


def forward_clean_branches(model: MoEModel, ids, plan: RoutingPlan, sample_ids) -> np.ndarray:
    """Teacher-forced logits where each position is a fresh stochastic branch
    off a shared deterministic history.

    Position ``i`` of sample ``s`` attends to the deterministic keys/values of
    positions ``< i`` plus its own keys/values at ``i``, and its experts are
    routed with ``plan``. This equals running one clean-cache decode step per
    position, but costs a single batched pass.

    Returns logits ``[n, t, vocab]``.
    """
    cfg = model.config
    ids = np.asarray(ids, dtype=np.int64).reshape(1, -1)
    sample_ids = np.asarray(sample_ids, dtype=np.int64)
    n, t = sample_ids.shape[0], ids.shape[1]
    clean = DecodeCache.for_model(cfg, CacheMode.CLEAN, 1)
    forward_batch(model, ids, cache=clean)
    x = np.broadcast_to(_embed(model, ids, 0), (n, t, cfg.d_model)).copy()
    H, hd = cfg.n_heads, cfg.head_dim
    scale = np.float32(1.0 / math.sqrt(hd))
    strict = np.arange(t)[None, :] < np.arange(t)[:, None]
    for layer in range(cfg.n_layers):
        p = f"layers.{layer}."
        h = rms_norm(x, model[p + "attn_norm"])
        q, k, v = _qkv(model, layer, h)
        ck, cv = clean.history(layer)
        ck = ck[:1].transpose(0, 2, 1, 3)  # [1, H, t, hd]
        cv = cv[:1].transpose(0, 2, 1, 3)
        prefix = np.where(strict, np.matmul(q, ck.transpose(0, 1, 3, 2)) * scale, np.float32(-np.inf))
        own = np.sum(q * k, axis=-1, keepdims=True) * scale
        probs = softmax(np.concatenate([prefix, own], axis=-1))
        att = np.matmul(probs[..., :t], cv) + probs[..., t:] * v
        x = x + matmul(_merge_heads(att), model[p + "wo"])
        x = x + _ffn(model, layer, rms_norm(x, model[p + "ffn_norm"]), plan, sample_ids, None)
    return _unembed(model, x)
