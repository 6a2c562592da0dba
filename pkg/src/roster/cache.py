"""Key/value history for incremental decoding.

A ``DecodeCache`` owns fixed-capacity float32 buffers. In ``standard`` mode
there is one store per sample; in ``clean`` mode there is exactly one store,
written only by sample 0 (the temperature-zero path) and read by everyone.
"""

from __future__ import annotations

from enum import Enum

import numpy as np


class CacheMode(str, Enum):
    STANDARD = "standard"
    CLEAN = "clean"


class CacheError(RuntimeError):
    pass


class CacheOverflowError(CacheError):
    pass


class CacheOrderError(CacheError):
    pass


class DecodeCache:
    """Per-layer K/V buffers of shape ``[stores, max_seq_len, n_heads, head_dim]``.

    Each layer keeps its own length per store. A decode step appends layers in
    order ``0 .. n_layers-1``; once the last layer is written every layer
    agrees on the length again.

    ``sample_index=None`` in :meth:`append` marks deterministic history that
    every sample shares (prompt prefill): it is broadcast to all stores in
    standard mode.
    """

    def __init__(self, n_layers: int, n_heads: int, head_dim: int, max_seq_len: int,
                 mode: CacheMode | str = CacheMode.CLEAN, n_samples: int = 1):
        self.mode = CacheMode(mode)
        if n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        self.n_samples = n_samples
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.max_seq_len = max_seq_len
        self.n_stores = 1 if self.mode is CacheMode.CLEAN else n_samples
        shape = (self.n_stores, max_seq_len, n_heads, head_dim)
        self._keys = [np.zeros(shape, dtype=np.float32) for _ in range(n_layers)]
        self._values = [np.zeros(shape, dtype=np.float32) for _ in range(n_layers)]
        self._lengths = np.zeros((n_layers, self.n_stores), dtype=np.int64)

    @classmethod
    def for_model(cls, config, mode: CacheMode | str = CacheMode.CLEAN, n_samples: int = 1) -> "DecodeCache":
        return cls(config.n_layers, config.n_heads, config.head_dim, config.max_seq_len, mode, n_samples)

    @property
    def length(self) -> int:
        """Number of fully committed positions (all layers written)."""
        return int(self._lengths[-1].min())

    def _store_for(self, sample_index: int) -> int:
        if sample_index < 0 or sample_index >= self.n_samples:
            raise IndexError(f"sample_index {sample_index} out of range for {self.n_samples} samples")
        return 0 if self.mode is CacheMode.CLEAN else sample_index

    def append(self, layer: int, keys: np.ndarray, values: np.ndarray, sample_index: int | None = 0) -> None:
        """Append ``keys``/``values`` of shape ``[t, n_heads, head_dim]`` at ``layer``.

        In clean mode only ``sample_index`` 0 (or ``None``) is persisted; other
        samples are validated and dropped.
        """
        keys = np.asarray(keys, dtype=np.float32)
        values = np.asarray(values, dtype=np.float32)
        if keys.ndim == 2:
            keys, values = keys[None], values[None]
        if keys.shape != values.shape or keys.shape[1:] != (self.n_heads, self.head_dim):
            raise ValueError(f"bad key/value shapes {keys.shape} / {values.shape}")
        if not 0 <= layer < self.n_layers:
            raise IndexError(f"layer {layer} out of range")
        if sample_index is None:
            stores = range(self.n_stores)
        else:
            store = self._store_for(sample_index)
            if self.mode is CacheMode.CLEAN and sample_index != 0:
                return
            stores = (store,)
        t = keys.shape[0]
        for s in stores:
            cur = int(self._lengths[layer, s])
            expected = int(self._lengths[layer - 1, s]) - t if layer > 0 else int(self._lengths[-1, s])
            if cur != expected:
                raise CacheOrderError(
                    f"out-of-order append at layer {layer} (store {s}: length {cur}, expected {expected})"
                )
            if cur + t > self.max_seq_len:
                raise CacheOverflowError(
                    f"cache overflow: {cur} + {t} positions exceeds max_seq_len {self.max_seq_len}"
                )
        for s in stores:
            cur = int(self._lengths[layer, s])
            self._keys[layer][s, cur:cur + t] = keys
            self._values[layer][s, cur:cur + t] = values
            self._lengths[layer, s] = cur + t

    def read_history(self, layer: int, sample_index: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Read-only views ``(keys, values)`` of shape ``[len, n_heads, head_dim]``."""
        s = self._store_for(sample_index)
        n = int(self._lengths[layer, s])
        k = self._keys[layer][s, :n]
        v = self._values[layer][s, :n]
        k.flags.writeable = False
        v.flags.writeable = False
        return k, v

    def history(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        """All stores at once: ``[n_stores, len, n_heads, head_dim]`` views."""
        n = int(self._lengths[layer].min())
        if int(self._lengths[layer].max()) != n:
            raise CacheOrderError(f"stores disagree on length at layer {layer}")
        return self._keys[layer][:, :n], self._values[layer][:, :n]

    def bytes_per_position(self) -> int:
        return self.n_layers * 2 * self.n_heads * self.head_dim * 4

    def persisted_bytes(self) -> int:
        """Bytes of K/V actually held (committed positions, all stores)."""
        return int(self._lengths.sum(axis=0).sum()) * 2 * self.n_heads * self.head_dim * 4

    def capacity_bytes(self) -> int:
        """Bytes preallocated for the buffers."""
        return self.n_stores * self.max_seq_len * self.bytes_per_position()
