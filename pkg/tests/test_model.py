import json
import math
import struct

import numpy as np
import pytest

from roster.cache import CacheMode, DecodeCache
from roster.model import (
    MAGIC, BadMagicError, ConfigError, CorruptHeaderError, ManifestMismatchError, ModelConfig, PayloadSizeError,
    SequenceOverflowError, TokenRangeError, TruncatedPayloadError, checkpoint_bytes, forward_deterministic,
    init_model, load_checkpoint, parse_checkpoint, save_checkpoint, tensor_manifest,
)


# Independent float64 reference of the decoder, written from the architecture
# description only (pre-norm RMS blocks, causal MHA, top-k GELU experts).
def _rms(x, g):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + 1e-6) * g


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def reference_forward(model, ids):
    c = model.config
    W = {k: v.astype(np.float64) for k, v in model.tensors.items()}
    T = len(ids)
    x = W["tok_emb"][ids] + W["pos_emb"][:T]
    for l in range(c.n_layers):
        p = f"layers.{l}."
        h = _rms(x, W[p + "attn_norm"])
        q, k, v = h @ W[p + "wq"], h @ W[p + "wk"], h @ W[p + "wv"]
        heads = []
        for hh in range(c.n_heads):
            sl = slice(hh * c.head_dim, (hh + 1) * c.head_dim)
            s = q[:, sl] @ k[:, sl].T / math.sqrt(c.head_dim)
            s[np.triu_indices(T, 1)] = -np.inf
            a = np.exp(s - s.max(axis=1, keepdims=True))
            heads.append((a / a.sum(axis=1, keepdims=True)) @ v[:, sl])
        x = x + np.concatenate(heads, axis=1) @ W[p + "wo"]
        h = _rms(x, W[p + "ffn_norm"])
        if l in c.moe_layer_indices:
            out = np.zeros_like(h)
            r = h @ W[p + "router"]
            for t in range(T):
                order = sorted(range(c.n_experts), key=lambda e: (-r[t, e], e))[: c.top_k]
                g = np.exp(r[t, order] - r[t, order].max())
                g /= g.sum()
                for gi, e in zip(g, order):
                    q_ = f"{p}experts.{e}."
                    out[t] += gi * (_gelu(h[t] @ W[q_ + "w1"]) @ W[q_ + "w2"])
        else:
            out = _gelu(h @ W[p + "mlp.w1"]) @ W[p + "mlp.w2"]
        x = x + out
    return _rms(x, W["final_norm"]) @ W["unembed"]


def test_forward_matches_reference_oracle(toy_model):
    ids = [5, 17, 200, 3, 3, 99, 42, 0, 255, 128]
    np.testing.assert_allclose(forward_deterministic(toy_model, ids), reference_forward(toy_model, ids), atol=1e-4)


def test_forward_matches_reference_with_dense_layers():
    cfg = ModelConfig(vocab_size=32, d_model=16, n_layers=3, n_heads=2, n_experts=4, top_k=2, d_ff=24,
                      max_seq_len=16, moe_layer_indices=(1,))
    m = init_model(cfg, 3)
    ids = [1, 4, 9, 16, 25, 2]
    np.testing.assert_allclose(forward_deterministic(m, ids), reference_forward(m, ids), atol=1e-4)


def test_single_expert_hand_trace():
    cfg = ModelConfig(vocab_size=16, d_model=8, n_layers=1, n_heads=1, n_experts=2, top_k=1, d_ff=8, max_seq_len=4)
    m = init_model(cfg, 0)
    W = {k: v.astype(np.float64) for k, v in m.tensors.items()}
    tok = 3
    x = W["tok_emb"][tok] + W["pos_emb"][0]
    # one position: attention output is its own value vector
    x = x + (_rms(x, W["layers.0.attn_norm"]) @ W["layers.0.wv"]) @ W["layers.0.wo"]
    h = _rms(x, W["layers.0.ffn_norm"])
    router = np.zeros((8, 2), dtype=np.float32)
    router[:, 0] = h  # logit_0 = |h|^2 > 0 = logit_1
    m = m.replace_tensors(layers__0__router=router)
    y0 = _gelu(h @ W["layers.0.experts.0.w1"]) @ W["layers.0.experts.0.w2"]
    expected = _rms(x + y0, W["final_norm"]) @ W["unembed"]
    got = forward_deterministic(m, [tok])[0]
    np.testing.assert_allclose(got, expected, atol=1e-4)
    # expert 1 is unused: scrambling it does not change the output
    m2 = m.replace_tensors(layers__0__experts__1__w1=np.full((8, 8), 9.0), layers__0__experts__1__w2=np.full((8, 8), -9.0))
    np.testing.assert_array_equal(forward_deterministic(m2, [tok]), got[None])


def test_expert_permutation_invariance_when_all_active():
    cfg = ModelConfig(vocab_size=32, d_model=16, n_layers=2, n_heads=2, n_experts=4, top_k=4, d_ff=16, max_seq_len=16)
    m = init_model(cfg, 11)
    perm = [2, 0, 3, 1]
    upd = {}
    for l in range(2):
        upd[f"layers__{l}__router"] = m[f"layers.{l}.router"][:, perm]
        for new, old in enumerate(perm):
            for w in ("w1", "w2"):
                upd[f"layers__{l}__experts__{new}__{w}"] = m[f"layers.{l}.experts.{old}.{w}"]
    ids = [1, 2, 3, 4, 5, 6, 7]
    np.testing.assert_allclose(forward_deterministic(m.replace_tensors(**upd), ids), forward_deterministic(m, ids), atol=1e-5)


def test_empty_sequence_gives_empty_logits(toy_model):
    out = forward_deterministic(toy_model, [])
    assert out.shape == (0, 256)


def test_token_range_and_overflow_errors(toy_model):
    with pytest.raises(TokenRangeError):
        forward_deterministic(toy_model, [1, 256])
    with pytest.raises(TokenRangeError):
        forward_deterministic(toy_model, [-1])
    with pytest.raises(SequenceOverflowError):
        forward_deterministic(toy_model, [1] * 257)
    cache = DecodeCache.for_model(toy_model.config, CacheMode.STANDARD, 1)
    forward_deterministic(toy_model, [1] * 250, cache)
    with pytest.raises(SequenceOverflowError):
        forward_deterministic(toy_model, [1] * 7, cache)


def test_incremental_decode_matches_full_recompute(toy_model, rng):
    ids = rng.integers(256, size=20).tolist()
    full = forward_deterministic(toy_model, ids)
    cache = DecodeCache.for_model(toy_model.config, CacheMode.STANDARD, 1)
    forward_deterministic(toy_model, ids[:8], cache)
    for i in range(8, 20):
        step = forward_deterministic(toy_model, [ids[i]], cache)
        np.testing.assert_allclose(step[0], full[i], atol=1e-4)
    assert cache.length == 20


def test_forward_is_deterministic(toy_model):
    ids = [9, 8, 7, 6]
    assert forward_deterministic(toy_model, ids).tobytes() == forward_deterministic(toy_model, ids).tobytes()


def test_init_determinism_and_seed_sensitivity():
    cfg = ModelConfig()
    assert checkpoint_bytes(init_model(cfg, 7)) == checkpoint_bytes(init_model(cfg, 7))
    a, b = init_model(cfg, 7), init_model(cfg, 8)
    assert any(not np.array_equal(a[n], b[n]) for n in a.tensors)


def test_init_gaussian_tail_fraction(toy_model):
    # P(|z| > 3) for a standard normal is about 0.27%
    for name, _, fan_in in tensor_manifest(toy_model.config):
        if fan_in == 0:
            np.testing.assert_array_equal(toy_model[name], 1.0)
            continue
        frac = np.mean(np.abs(toy_model[name]) > 3 / math.sqrt(fan_in))
        assert frac < 0.01, name


def test_weights_are_immutable(toy_model):
    with pytest.raises(ValueError):
        toy_model["tok_emb"][0, 0] = 1.0


def test_config_validation_lists_violations():
    with pytest.raises(ConfigError) as info:
        init_model(ModelConfig(n_experts=8, top_k=9, d_model=30, n_heads=4, moe_layer_indices=(0, 7)), 0)
    text = str(info.value)
    assert "top_k" in text and "divisible" in text and "moe_layer_indices" in text
    assert len(info.value.violations) >= 3


def test_reference_toy_defaults():
    c = ModelConfig()
    assert (c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.n_experts, c.top_k) == (256, 64, 4, 4, 8, 2)
    assert c.moe_layer_indices == (0, 1, 2, 3) and c.head_dim == 16


def test_checkpoint_round_trip(tmp_path, toy_model):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(toy_model, p1)
    loaded = load_checkpoint(p1)
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.config == toy_model.config
    for n in toy_model.tensors:
        assert loaded[n].tobytes() == toy_model[n].tobytes()


def _split(blob):
    (hlen,) = struct.unpack("<Q", blob[8:16])
    return json.loads(blob[16:16 + hlen]), blob[16 + hlen:]


def _join(header, payload):
    h = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(h)) + h + payload


@pytest.fixture(scope="module")
def small_blob():
    cfg = ModelConfig(vocab_size=8, d_model=4, n_layers=1, n_heads=1, n_experts=2, top_k=1, d_ff=4, max_seq_len=4)
    return checkpoint_bytes(init_model(cfg, 1))


def test_checkpoint_layout(small_blob):
    assert small_blob[:8] == b"MOECKPT1"
    header, payload = _split(small_blob)
    assert [t["name"] for t in header["tensors"]][:2] == ["tok_emb", "pos_emb"]
    assert len(payload) == sum(t["nbytes"] for t in header["tensors"])


def test_bad_magic_rejected(small_blob):
    with pytest.raises(BadMagicError):
        parse_checkpoint(b"NOTACKPT" + small_blob[8:])


def test_truncated_payload_names_byte_counts(small_blob):
    expected = len(_split(small_blob)[1])
    with pytest.raises(TruncatedPayloadError, match=f"expected {expected} bytes, got {expected - 4}"):
        parse_checkpoint(small_blob[:-4])


def test_trailing_payload_rejected(small_blob):
    with pytest.raises(PayloadSizeError):
        parse_checkpoint(small_blob + b"\0\0\0\0")


def test_corrupt_header_rejected(small_blob):
    with pytest.raises(CorruptHeaderError):
        parse_checkpoint(MAGIC + struct.pack("<Q", 5) + b"{oops" + b"")
    with pytest.raises(CorruptHeaderError):
        parse_checkpoint(MAGIC + struct.pack("<Q", 10**6) + b"{}")


def test_manifest_mismatch_rejected(small_blob):
    header, payload = _split(small_blob)
    header["tensors"][0]["shape"] = [4, 8]
    with pytest.raises(ManifestMismatchError):
        parse_checkpoint(_join(header, payload))
    header, payload = _split(small_blob)
    header["tensors"].pop()
    with pytest.raises(ManifestMismatchError):
        parse_checkpoint(_join(header, payload))


def test_checkpoint_error_types_are_distinct():
    kinds = {BadMagicError, CorruptHeaderError, ManifestMismatchError, TruncatedPayloadError}
    assert len(kinds) == 4
