"""Position quantization, news encoder, and behavior transformer."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from debiasrank import encoders as enc
from debiasrank import tensor as T
from debiasrank.optim import ParameterStore
from oracles import oracle_behavior_matrix, oracle_encode_news


def tiny_cfg(**kw):
    base = dict(vocab_size=50, d_model=8, d_word=8, n_heads=2, d_head=4,
                title_len=6, history_len=4, n_qpos=4, dropout=0.0)
    base.update(kw)
    return enc.ModelConfig(**base)


def make_store(cfg, seed=0):
    store = ParameterStore()
    enc.register_encoder_params(store, cfg, seed)
    enc.register_position_table(store, cfg)
    return store


class TestQuantizePosition:
    def test_position_one_maps_to_zero(self):
        assert enc.quantize_position(1) == 0

    def test_position_five(self):
        assert enc.quantize_position(5) == 2

    def test_large_position(self):
        # ceil(sqrt(1172)) = 35
        assert enc.quantize_position(1173) == 35

    def test_rejects_position_below_one(self):
        with pytest.raises(ValueError):
            enc.quantize_position(0)

    def test_matches_direct_evaluation_up_to_1e4(self):
        import math
        for p in range(1, 10001):
            assert enc.quantize_position(p) == math.ceil(math.sqrt(p - 1))

    def test_monotone_and_surjective(self):
        buckets = [enc.quantize_position(p) for p in range(1, 5000)]
        assert all(b2 >= b1 for b1, b2 in zip(buckets, buckets[1:]))
        assert set(buckets) == set(range(max(buckets) + 1))

    def test_clamps_to_top_bucket(self):
        assert enc.quantize_position(1000, n_qpos=4) == 3

    def test_identity_mode(self):
        assert enc.quantize_position(7, mode="identity") == 7

    @given(st.integers(1, 10 ** 6))
    @settings(max_examples=300, deadline=None)
    def test_vectorized_matches_scalar(self, p):
        vec = enc.quantize_positions(np.array([p]), n_qpos=10 ** 4)
        assert vec[0] == enc.quantize_position(p, n_qpos=10 ** 4)

    def test_n_buckets(self):
        assert enc.n_buckets(10) == 4  # buckets 0..3 cover positions 1..10
        assert enc.n_buckets(10, "identity") == 11


class TestModelConfig:
    def test_head_factorization_enforced(self):
        with pytest.raises(enc.EncoderConfigError, match="d_model"):
            enc.ModelConfig(d_model=30, n_heads=4, d_head=8).validate()

    def test_desk_preset(self):
        cfg = enc.ModelConfig.desk(vocab_size=100, max_position=10)
        assert (cfg.d_model, cfg.n_heads, cfg.d_head) == (32, 4, 8)
        assert cfg.n_qpos == 4 and cfg.default_bucket == 4

    def test_paper_preset_projects_wide_words(self):
        cfg = enc.ModelConfig.paper(vocab_size=100, max_position=1173)
        assert cfg.d_word == 300 and cfg.d_model == 16 * 16
        assert cfg.title_len == 30 and cfg.history_len == 50
        assert cfg.n_qpos == 36

    def test_roundtrip_dict(self):
        cfg = enc.ModelConfig.desk(vocab_size=100, max_position=10)
        assert enc.ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestMaskedSoftmax:
    def test_weights_sum_to_one_over_real_slots(self):
        rng = np.random.default_rng(0)
        logits = T.constant(rng.normal(size=(5, 7)))
        mask = (rng.random((5, 7)) < 0.6).astype(float)
        mask[0] = 1.0
        out = enc.masked_softmax(logits, mask).values
        sums = out.sum(axis=-1)
        expected = (mask.sum(axis=-1) > 0).astype(float)
        np.testing.assert_allclose(sums, expected, atol=1e-12)
        assert np.all(out[mask == 0] == 0.0)

    def test_empty_support_rows_are_zero(self):
        logits = T.constant(np.ones((2, 3)))
        mask = np.array([[1.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
        out = enc.masked_softmax(logits, mask).values
        np.testing.assert_array_equal(out[1], [0.0, 0.0, 0.0])
        np.testing.assert_allclose(out[0].sum(), 1.0, atol=1e-12)


class TestEncodeNews:
    def test_all_pad_title_encodes_to_zero(self):
        cfg = tiny_cfg()
        store = make_store(cfg)
        out = enc.encode_news(store, cfg, np.zeros(cfg.title_len, dtype=int))
        np.testing.assert_array_equal(out, np.zeros(cfg.d_model))

    def test_pad_placement_is_irrelevant(self):
        cfg = tiny_cfg()
        store = make_store(cfg)
        interleaved = np.array([5, 0, 9, 0, 3, 0])
        trailing = np.array([5, 9, 3, 0, 0, 0])
        a = enc.encode_news(store, cfg, interleaved)
        b = enc.encode_news(store, cfg, trailing)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_token_out_of_vocab_rejected(self):
        cfg = tiny_cfg()
        store = make_store(cfg)
        bad = np.array([5, 9, 3, 0, 0, cfg.vocab_size])
        with pytest.raises(T.DomainError):
            enc.encode_news(store, cfg, bad)

    def test_matches_straight_line_oracle(self):
        cfg = tiny_cfg()
        store = make_store(cfg, seed=3)
        values = store.snapshot()
        rng = np.random.default_rng(7)
        for _ in range(5):
            length = int(rng.integers(1, cfg.title_len + 1))
            tokens = np.zeros(cfg.title_len, dtype=int)
            tokens[:length] = rng.integers(1, cfg.vocab_size, size=length)
            got = enc.encode_news(store, cfg, tokens)
            want = oracle_encode_news(values, cfg, tokens)
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_outputs_finite_over_many_random_inputs(self):
        cfg = tiny_cfg()
        store = make_store(cfg, seed=1)
        rng = np.random.default_rng(2)
        tokens = rng.integers(0, cfg.vocab_size, size=(1000, cfg.title_len))
        out = enc.encode_news_batch(store, cfg, tokens).values
        assert np.all(np.isfinite(out))

    def test_dropout_only_active_in_training(self):
        cfg = tiny_cfg(dropout=0.5)
        store = make_store(cfg)
        tokens = np.array([[4, 8, 15, 16, 23, 42]])
        a = enc.encode_news_batch(store, cfg, tokens, train=False).values
        b = enc.encode_news_batch(store, cfg, tokens, train=False).values
        np.testing.assert_array_equal(a, b)
        c = enc.encode_news_batch(store, cfg, tokens, train=True, seed=1).values
        assert not np.allclose(a, c)


class TestBehaviorEncode:
    def test_single_row_matches_manual_self_attention(self):
        cfg = tiny_cfg()
        store = make_store(cfg, seed=5)
        values = store.snapshot()
        rng = np.random.default_rng(0)
        row = rng.normal(size=(1, cfg.d_model))
        got = enc.behavior_encode(store, cfg, row, np.array([2]))
        want = oracle_behavior_matrix(values, cfg, row, np.array([2]), np.array([1.0]))
        np.testing.assert_allclose(got, want, atol=1e-12)
        # with one row, each head's softmax weight is exactly 1 on itself
        z = row[0] + values["pos_emb"][2]
        heads = [(z @ values[f"beh.attn.v{i}"]) for i in range(cfg.n_heads)]
        manual = z + np.concatenate(heads) @ values["beh.attn.out"]
        np.testing.assert_allclose(got[0], manual, atol=1e-12)

    def test_matches_oracle_with_padding(self):
        cfg = tiny_cfg()
        store = make_store(cfg, seed=5)
        values = store.snapshot()
        rng = np.random.default_rng(3)
        rows = rng.normal(size=(4, cfg.d_model))
        buckets = np.array([0, 1, 2, 0])
        mask = np.array([1.0, 1.0, 1.0, 0.0])
        got = enc.behavior_encode_batch(store, cfg, T.constant(rows[None]),
                                        buckets[None], mask[None]).values[0]
        want = oracle_behavior_matrix(values, cfg, rows, buckets, mask)
        np.testing.assert_allclose(got[:3], want[:3], atol=1e-12)

    def test_swap_equivariance(self):
        """Swapping two real history rows (with their positions) swaps the
        corresponding output rows and changes nothing else."""
        cfg = tiny_cfg()
        store = make_store(cfg, seed=8)
        rng = np.random.default_rng(4)
        rows = rng.normal(size=(4, cfg.d_model))
        buckets = np.array([0, 1, 2, 3])
        h1 = enc.behavior_encode(store, cfg, rows, buckets)
        swapped_rows = rows[[1, 0, 2, 3]]
        swapped_buckets = buckets[[1, 0, 2, 3]]
        h2 = enc.behavior_encode(store, cfg, swapped_rows, swapped_buckets)
        np.testing.assert_allclose(h2, h1[[1, 0, 2, 3]], atol=1e-12)

    def test_zero_position_table_is_positionless(self):
        cfg = tiny_cfg()
        store = make_store(cfg, seed=9)
        store["pos_emb"].values[...] = 0.0
        rng = np.random.default_rng(5)
        rows = rng.normal(size=(3, cfg.d_model))
        with_pos = enc.behavior_encode(store, cfg, rows, np.array([0, 1, 2]))
        without = enc.behavior_encode_batch(store, cfg, T.constant(rows[None]),
                                            None, np.ones((1, 3))).values[0]
        np.testing.assert_array_equal(with_pos, without)

    def test_padded_slot_content_never_leaks(self):
        cfg = tiny_cfg()
        store = make_store(cfg, seed=11)
        rng = np.random.default_rng(6)
        rows = rng.normal(size=(4, cfg.d_model))
        mask = np.array([1.0, 1.0, 0.0, 0.0])
        base = enc.behavior_encode_batch(store, cfg, T.constant(rows[None]),
                                         np.array([[0, 1, 0, 0]]), mask[None]).values[0]
        for _ in range(5):
            noisy = rows.copy()
            noisy[2:] = rng.normal(size=(2, cfg.d_model)) * 10
            buckets = np.array([[0, 1, int(rng.integers(4)), int(rng.integers(4))]])
            out = enc.behavior_encode_batch(store, cfg, T.constant(noisy[None]),
                                            buckets, mask[None]).values[0]
            np.testing.assert_allclose(out[:2], base[:2], atol=1e-12)

    def test_length_mismatch_rejected(self):
        cfg = tiny_cfg()
        store = make_store(cfg)
        with pytest.raises(enc.EncoderConfigError, match="positions"):
            enc.behavior_encode(store, cfg, np.zeros((3, cfg.d_model)), np.array([1, 2]))
