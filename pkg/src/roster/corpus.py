"""Token corpora: little-endian uint32 binaries or whitespace-separated text."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from roster.cache import CacheMode, DecodeCache
from roster.kernels import log_softmax
from roster.model import MoEModel, forward_deterministic


def read_tokens(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"token file not found: {path}")
    if path.suffix == ".bin":
        raw = path.read_bytes()
        if len(raw) % 4:
            raise ValueError(f"{path}: size {len(raw)} is not a multiple of 4 bytes")
        return np.frombuffer(raw, dtype="<u4").astype(np.int64)
    text = path.read_text()
    try:
        return np.array([int(tok) for tok in text.split()], dtype=np.int64)
    except ValueError as exc:
        raise ValueError(f"{path}: not a whitespace-separated id list ({exc})") from exc


def write_tokens(path, tokens) -> None:
    path = Path(path)
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= 2**32):
        raise ValueError("token ids must fit in uint32")
    if path.suffix == ".bin":
        path.write_bytes(arr.astype("<u4").tobytes())
    else:
        path.write_text(" ".join(str(int(t)) for t in arr) + "\n")


def sample_corpus(model: MoEModel, n_tokens: int, seed: int, temperature: float = 1.0) -> np.ndarray:
    """Ancestral samples from the deterministic model.

    The context restarts every ``max_seq_len`` tokens from a random first
    token. A corpus drawn this way is "structured" for the model that made
    it: its own deterministic routing is the true generating process.
    """
    cfg = model.config
    rng = np.random.Generator(np.random.PCG64(seed))
    out: list[int] = []
    while len(out) < n_tokens:
        cache = DecodeCache.for_model(cfg, CacheMode.STANDARD, 1)
        tok = int(rng.integers(cfg.vocab_size))
        out.append(tok)
        for _ in range(cfg.max_seq_len - 1):
            if len(out) >= n_tokens:
                break
            logits = forward_deterministic(model, [tok], cache)[-1]
            p = np.exp(log_softmax(np.asarray(logits, dtype=np.float64) / temperature))
            tok = int(rng.choice(cfg.vocab_size, p=p / p.sum()))
            out.append(tok)
    return np.array(out[:n_tokens], dtype=np.int64)
