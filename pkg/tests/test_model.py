import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskflow import tensor as T
from deskflow.data import Tokenizer
from deskflow.errors import ConfigError, LengthError, StateError, TokenIndexError, VersionError
from deskflow.model import (
    ModelConfig,
    TransformerModel,
    apply_rope,
    attach_lora,
    load_model,
    lora_parameter_count,
    merge_lora,
    resize_embeddings,
    save_model,
)
from deskflow.tensor import Tensor

SMALL = ModelConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, vocab=40, context=24)


def model(seed=0, cfg=SMALL):
    return TransformerModel.init(cfg, seed=seed)


def tokens(n, seed=0, vocab=SMALL.vocab):
    return np.random.default_rng(seed).integers(0, vocab, size=n)


def logits(m, ids, **kw):
    with T.no_grad():
        return m.forward(ids, **kw).data


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            ModelConfig(d_model=10, n_heads=4)

    def test_odd_head_dim(self):
        with pytest.raises(ConfigError):
            ModelConfig(d_model=12, n_heads=4)

    def test_pi_scale_below_one(self):
        with pytest.raises(ConfigError):
            ModelConfig(pi_scale=0.5)

    def test_max_context(self):
        assert ModelConfig(context=32, pi_scale=2.0).max_context == 64


class TestRope:
    def rand(self, shape, seed=0):
        return Tensor(np.random.default_rng(seed).normal(size=shape).astype(np.float32))

    def test_position_zero_identity(self):
        q = self.rand((1, 8))
        for s in (1.0, 2.0, 3.5):
            rq, _ = apply_rope(q, q, [0], base=500.0, scale=s)
            assert np.array_equal(rq.data, q.data)

    def test_first_pair_one_radian(self):
        q = Tensor(np.array([[1.0, 0.0, 0.0, 0.0]], np.float32))
        rq, _ = apply_rope(q, q, [1], base=10000.0, scale=1.0)
        np.testing.assert_allclose(rq.data[0, :2], [math.cos(1.0), math.sin(1.0)], atol=1e-7)

    def test_interpolated_position(self):
        q = self.rand((1, 8))
        a, _ = apply_rope(q, q, [2], scale=2.0)
        b, _ = apply_rope(q, q, [1], scale=1.0)
        np.testing.assert_allclose(a.data, b.data, atol=1e-7)

    def test_odd_head_dim(self):
        q = self.rand((1, 5))
        with pytest.raises(ConfigError):
            apply_rope(q, q, [0])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 30), st.sampled_from([1.0, 2.0, 4.0]))
    def test_relative_scores(self, m, n, shift, s):
        q, k = self.rand((1, 8), 1), self.rand((1, 8), 2)

        def score(a, b):
            rq, _ = apply_rope(q, q, [a], scale=s)
            _, rk = apply_rope(k, k, [b], scale=s)
            return float((rq.data * rk.data).sum())

        assert abs(score(m, n) - score(m + shift, n + shift)) < 1e-4


class TestForward:
    def test_shape(self):
        assert model().forward(tokens(5)).shape == (5, SMALL.vocab)
        assert model().forward(tokens(10).reshape(2, 5)).shape == (2, 5, SMALL.vocab)

    def test_single_token_cache(self):
        m = model()
        ids = tokens(1)
        np.testing.assert_allclose(logits(m, ids, cache=m.new_cache()), logits(m, ids), atol=1e-6)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 19))
    def test_cached_matches_uncached(self, split):
        m = model()
        ids = tokens(20, seed=3)
        full = logits(m, ids)
        cache = m.new_cache()
        logits(m, ids[:split], cache=cache)
        tail = logits(m, ids[split:], cache=cache)
        assert cache.length == 20
        assert np.abs(tail - full[split:]).max() < 1e-5

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 18))
    def test_causal(self, t):
        m = model()
        ids = tokens(20, seed=4)
        other = ids.copy()
        other[t + 1] = (other[t + 1] + 1) % SMALL.vocab
        assert np.array_equal(logits(m, ids)[: t + 1], logits(m, other)[: t + 1])

    def test_context_overflow(self):
        with pytest.raises(LengthError, match="1\\*24"):
            model().forward(tokens(25))

    def test_context_overflow_through_cache(self):
        m = model()
        cache = m.new_cache()
        m.forward(tokens(20), cache=cache)
        with pytest.raises(LengthError):
            m.forward(tokens(5), cache=cache)

    def test_pi_extends_usable_context(self):
        m = model().with_config(pi_scale=2.0)
        assert m.forward(tokens(48)).shape == (48, SMALL.vocab)

    def test_bad_token(self):
        with pytest.raises(TokenIndexError):
            model().forward([0, SMALL.vocab])

    def test_checkpointing_grads_bitwise(self):
        cfg = ModelConfig(n_layers=4, n_heads=2, d_model=16, d_ff=32, vocab=40, context=24)
        ids = tokens(26, seed=5, vocab=40).reshape(2, 13)
        grads = []
        for ck in (False, True):
            m = model(cfg=cfg)
            T.cross_entropy(m.forward(ids[:, :-1], checkpointing=ck), ids[:, 1:]).backward()
            grads.append({k: p.grad.copy() for k, p in m.params.items()})
        for k in grads[0]:
            assert np.array_equal(grads[0][k], grads[1][k]), k

    def test_cache_crop(self):
        m = model()
        ids = tokens(12, seed=6)
        cache = m.new_cache()
        logits(m, ids[:10], cache=cache)
        cache.crop(6)
        tail = logits(m, ids[6:], cache=cache)
        assert np.abs(tail - logits(m, ids)[6:]).max() < 1e-5
        with pytest.raises(StateError):
            cache.crop(20)


class TestLora:
    def test_zero_init_identity(self):
        m = model()
        ids = tokens(10)
        before = logits(m, ids)
        attach_lora(m, rank=4, alpha=8)
        assert np.array_equal(logits(m, ids), before)

    def test_trainable_count(self):
        cfg = ModelConfig(n_layers=2, n_heads=4, d_model=64, d_ff=128, vocab=64, context=16)
        m = attach_lora(model(cfg=cfg), rank=4)
        expected = 2 * 2 * 4 * (64 + 64)
        assert lora_parameter_count(m) == expected
        assert sum(p.data.size for p in m.trainable_parameters().values()) == expected

    def test_frozen_base_has_no_grads(self):
        m = attach_lora(model(), rank=2)
        ids = tokens(8)
        T.cross_entropy(m.forward(ids[:-1]), ids[1:]).backward()
        assert all(p.grad is None for p in m.params.values())
        assert all(a.grad is not None and b.grad is not None for a, b in m.lora.values())

    def test_unknown_target(self):
        with pytest.raises(ConfigError):
            attach_lora(model(), targets=("wz",))

    def test_merge_zero_b_is_bitwise_noop(self):
        m = model()
        before = {k: p.data.copy() for k, p in m.params.items()}
        merge_lora(attach_lora(m, rank=2))
        assert all(np.array_equal(before[k], p.data) for k, p in m.params.items())

    def test_merge_equivalence(self):
        m = attach_lora(model(), rank=4, alpha=8, targets=("wq", "wv", "w_in"))
        rng = np.random.default_rng(7)
        for a, b in m.lora.values():
            b.data = rng.normal(0, 0.05, size=b.shape).astype(np.float32)
        seqs = [tokens(12, seed=s) for s in range(32)]
        pre = [logits(m, s) for s in seqs]
        merge_lora(m)
        assert max(np.abs(logits(m, s) - p).max() for s, p in zip(seqs, pre)) < 1e-5
        with pytest.raises(StateError):
            merge_lora(m)

    def test_double_attach(self):
        m = attach_lora(model(), rank=2)
        with pytest.raises(StateError):
            attach_lora(m, rank=2)


class TestResize:
    def test_noop(self):
        m = model()
        before = {k: p.data.copy() for k, p in m.params.items()}
        resize_embeddings(m, SMALL.vocab)
        assert all(np.array_equal(before[k], p.data) for k, p in m.params.items())

    def test_mean_rows(self):
        m = model()
        old_emb = m.params["tok_emb"].data.copy()
        old_logits = logits(m, tokens(6))
        resize_embeddings(m, SMALL.vocab + 1)
        emb = m.params["tok_emb"].data
        assert np.array_equal(emb[: SMALL.vocab], old_emb)
        np.testing.assert_allclose(emb[-1], old_emb.mean(axis=0), atol=1e-7)
        assert np.array_equal(logits(m, tokens(6))[:, : SMALL.vocab], old_logits)

    def test_shrink(self):
        with pytest.raises(ConfigError):
            resize_embeddings(model(), SMALL.vocab - 1)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        m = attach_lora(model(seed=3), rank=2)
        tok = Tokenizer.byte_level()
        save_model(m, tmp_path / "ck", tok)
        again, tok2, extras = load_model(tmp_path / "ck")
        assert extras == {}
        assert tok2.to_json() == tok.to_json()
        a, b = m.named_parameters(), again.named_parameters()
        assert a.keys() == b.keys()
        for k in a:
            assert a[k].data.tobytes() == b[k].data.tobytes()
            assert a[k].requires_grad == b[k].requires_grad

    def test_manifest_layout(self, tmp_path):
        save_model(model(), tmp_path / "ck")
        manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())["tensors"]
        blob = (tmp_path / "ck" / "weights.bin").read_bytes()
        assert sum(e["length"] for e in manifest) == len(blob)
        first = manifest[0]
        arr = np.frombuffer(blob[first["offset"] : first["offset"] + first["length"]], "<f4")
        assert arr.size == np.prod(first["shape"])

    def test_hash_mismatch(self, tmp_path):
        save_model(model(), tmp_path / "ck")
        path = tmp_path / "ck" / "config.json"
        cfg = json.loads(path.read_text())
        cfg["model"]["context"] = 99
        path.write_text(json.dumps(cfg))
        with pytest.raises(VersionError):
            load_model(tmp_path / "ck")
