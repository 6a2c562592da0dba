import numpy as np
import pytest

from roster.cache import CacheMode, CacheOrderError, CacheOverflowError, DecodeCache
from roster.engine import RoEConfig, generate
from roster.model import ModelConfig
from roster.routing import TemperatureProfile


def _step(cache, value, sample_index=0, layers=None):
    kv = np.full((1, cache.n_heads, cache.head_dim), value, dtype=np.float32)
    for layer in range(cache.n_layers if layers is None else layers):
        cache.append(layer, kv, kv, sample_index)


def _decode(mode, n, steps=10, max_seq_len=32):
    cache = DecodeCache(2, 2, 4, max_seq_len, mode, n)
    for t in range(steps):
        kv = np.full((1, 2, 4), t, dtype=np.float32)
        for layer in range(2):
            for s in range(n):
                cache.append(layer, kv + s, kv + s, s)
    return cache


def test_fresh_cache_is_empty():
    cache = DecodeCache(3, 2, 4, 8, CacheMode.STANDARD, 2)
    assert cache.length == 0 and cache.persisted_bytes() == 0
    k, v = cache.read_history(1, 1)
    assert k.shape == (0, 2, 4) and v.shape == (0, 2, 4)


def test_clean_bytes_match_single_standard_run():
    one = _decode(CacheMode.STANDARD, 1).persisted_bytes()
    assert _decode(CacheMode.CLEAN, 8).persisted_bytes() == one
    assert _decode(CacheMode.STANDARD, 8).persisted_bytes() == 8 * one
    assert one == 10 * 2 * 2 * 2 * 4 * 4


def test_clean_drops_other_samples_and_shares_history():
    cache = _decode(CacheMode.CLEAN, 8, steps=3)
    k0, v0 = cache.read_history(1, 0)
    k5, v5 = cache.read_history(1, 5)
    np.testing.assert_array_equal(k0, k5)
    np.testing.assert_array_equal(v0, v5)
    np.testing.assert_array_equal(k0[:, 0, 0], [0, 1, 2])  # sample 0 values only


def test_standard_keeps_per_sample_history():
    cache = _decode(CacheMode.STANDARD, 3, steps=2)
    k1, _ = cache.read_history(0, 1)
    k2, _ = cache.read_history(0, 2)
    np.testing.assert_array_equal(k1[:, 0, 0], [1, 2])
    np.testing.assert_array_equal(k2[:, 0, 0], [2, 3])


def test_overflow():
    cache = DecodeCache(1, 1, 2, 10, CacheMode.STANDARD, 1)
    for t in range(10):
        _step(cache, t)
    with pytest.raises(CacheOverflowError):
        _step(cache, 10)
    assert cache.length == 10


def test_out_of_order_layer_append():
    cache = DecodeCache(3, 1, 2, 10, CacheMode.STANDARD, 1)
    kv = np.zeros((1, 1, 2), dtype=np.float32)
    with pytest.raises(CacheOrderError):
        cache.append(1, kv, kv, 0)
    cache.append(0, kv, kv, 0)
    with pytest.raises(CacheOrderError):
        cache.append(0, kv, kv, 0)
    with pytest.raises(CacheOrderError):
        cache.append(2, kv, kv, 0)


def test_sample_index_out_of_range():
    cache = DecodeCache(1, 1, 2, 4, CacheMode.STANDARD, 2)
    with pytest.raises(IndexError):
        cache.read_history(0, 2)
    with pytest.raises(IndexError):
        _step(cache, 0, sample_index=2)


def test_history_views_are_read_only():
    cache = _decode(CacheMode.STANDARD, 1, steps=2)
    k, _ = cache.read_history(0, 0)
    with pytest.raises(ValueError):
        k[0, 0, 0] = 5.0


def test_lengths_agree_across_layers_after_each_step():
    cache = DecodeCache(4, 1, 2, 10, CacheMode.STANDARD, 2)
    for t in range(5):
        for s in range(2):
            _step(cache, t, s)
        assert cache.length == t + 1
        assert all(cache.read_history(layer, s)[0].shape[0] == t + 1 for layer in range(4) for s in range(2))


def test_prefill_broadcast_to_all_stores():
    cache = DecodeCache(1, 1, 2, 8, CacheMode.STANDARD, 3)
    kv = np.arange(6, dtype=np.float32).reshape(3, 1, 2)
    cache.append(0, kv, kv, None)
    for s in range(3):
        np.testing.assert_array_equal(cache.read_history(0, s)[0], kv)
    assert cache.persisted_bytes() == 3 * 3 * 2 * 2 * 4


def test_standard_histories_diverge_under_noise(toy_model):
    # two samples at tau 0.5 share the prompt and then route differently
    cfg = RoEConfig(n_samples=2, profile=TemperatureProfile.uniform(range(4), 0.5), cache_mode="standard",
                    master_seed=3, max_new_tokens=6)
    from roster.engine import roe_step
    from roster.model import forward_deterministic

    cache = DecodeCache.for_model(toy_model.config, "standard", 2)
    forward_deterministic(toy_model, [1, 2, 3], cache)
    last = 4
    for step in range(6):
        last = roe_step(toy_model, cache, last, step, cfg).next_token
    k0, _ = cache.read_history(2, 0)
    k1, _ = cache.read_history(2, 1)
    np.testing.assert_array_equal(k0[:3], k1[:3])
    assert np.any(np.abs(k0[3:] - k1[3:]) > 0)


@pytest.mark.parametrize("mode", ["clean", "standard"])
@pytest.mark.parametrize("n", [1, 4])
def test_generation_cache_length(toy_model, mode, n):
    # the last prompt token and every emitted token but the final one are fed
    prompt = [5, 6, 7, 8, 9]
    res = generate(toy_model, prompt, RoEConfig(n_samples=n, cache_mode=mode, max_new_tokens=7))
    stores = 1 if mode == "clean" else n
    per_pos = DecodeCache.for_model(ModelConfig()).bytes_per_position()
    assert res.cache_bytes == stores * per_pos * (len(prompt) + len(res.tokens) - 1)
