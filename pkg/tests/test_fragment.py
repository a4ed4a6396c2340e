import math

import numpy as np
import pytest

from fin_ctr import numeric as nm
from fin_ctr.encoding import CHANNELS, EncodedSequence, collate
from fin_ctr.fragment import (
    EMBED_DIM,
    FragmentConfig,
    FragmentNetwork,
    multihead_target_attention,
    query_vector,
    relevance_scores,
    simplified_attention,
    z_score,
)
from fin_ctr.numeric import ParamStore

from conftest import make_model


def brute_z(side_ids, query_id, counts, valid):
    num = den = 0.0
    for s, c, ok in zip(side_ids, counts, valid):
        if ok:
            den += c
            num += c * (s == query_id and query_id != 0)
    return num / den if den else 0.0


def random_mha(rng, B=3, T=5, dk=6, dq=5, width=8):
    keys = nm.constant(rng.normal(size=(B, T, dk)))
    query = nm.constant(rng.normal(size=(B, dq)))
    w = [nm.constant(rng.normal(size=s)) for s in ((dk, width), (dq, width), (dk, width))]
    return keys, query, w


class TestRelevanceAndZ:
    def test_category_example(self):
        assert relevance_scores([5, 7, 5], 5).tolist() == [1.0, 0.0, 1.0]

    def test_none_and_all(self):
        assert relevance_scores([1, 2], 3).tolist() == [0.0, 0.0]
        assert relevance_scores([3, 3], 3).tolist() == [1.0, 1.0]

    def test_mask_zeroes(self):
        assert relevance_scores([3, 3], 3, mask=[True, False]).tolist() == [1.0, 0.0]

    def test_oov_never_matches(self):
        assert relevance_scores([0, 0], 0).tolist() == [0.0, 0.0]

    def test_z_hand_example(self):
        assert z_score([1, 0, 1], [2, 1, 1]) == 0.75

    def test_z_extremes(self):
        assert z_score([1, 1], [1, 4]) == 1.0
        assert z_score([0, 0], [1, 4]) == 0.0
        assert z_score([], []) == 0.0
        assert z_score([1, 1], [1, 1], mask=[False, False]) == 0.0

    def test_z_matches_oracle_and_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            n = int(rng.integers(0, 51))
            ids = rng.integers(0, 4, size=n)
            q = int(rng.integers(0, 4))
            c = rng.integers(1, 5, size=n).astype(float)
            valid = rng.random(n) < 0.8
            z = float(z_score(relevance_scores(ids, q, valid), c, valid))
            assert 0.0 <= z <= 1.0
            assert z == pytest.approx(brute_z(ids, q, c, valid), abs=1e-15)

    def test_zero_click_row_removal_keeps_z(self):
        ids = np.array([2, 3, 2, 1])
        c = np.array([1.0, 2.0, 3.0, 0.0])
        with_row = z_score(relevance_scores(ids, 2), c)
        without = z_score(relevance_scores(ids[:3], 2), c[:3])
        masked = z_score(relevance_scores(ids, 2, [True, True, True, False]), c, [True, True, True, False])
        assert with_row == without == masked == pytest.approx(4 / 6)


class TestSimplifiedAttention:
    def setup_seq(self, ids, counts, mask):
        return EncodedSequence(np.array(ids)[..., None], np.array(counts, dtype=float), np.array(mask))

    def test_single_behavior_identity(self):
        e = nm.constant(np.array([[[0.3, -0.2, 0.1, 0.7]]]))
        seq = self.setup_seq([[4]], [[1]], [[True]])
        out = simplified_attention([e], np.array([[4]]), seq)
        assert out.data.tolist() == e.data[0].tolist()

    def test_zero_when_no_match(self):
        e = nm.constant(np.ones((1, 3, EMBED_DIM)))
        seq = self.setup_seq([[1, 2, 3]], [[1, 1, 1]], [[True] * 3])
        assert np.all(simplified_attention([e], np.array([[9]]), seq).data == 0)

    def test_empty_is_zero_vector(self):
        e = nm.constant(np.ones((2, 1, EMBED_DIM)))
        out = simplified_attention([e, e], np.array([[1, 1], [1, 1]]), EncodedSequence(
            np.ones((2, 1, 2), dtype=int), np.zeros((2, 1)), np.zeros((2, 1), dtype=bool)))
        assert out.shape == (2, 2 * EMBED_DIM) and np.all(out.data == 0)

    def test_literal_pooling_is_z_times_mean(self):
        rng = np.random.default_rng(0)
        e = rng.normal(size=(1, 4, EMBED_DIM))
        ids, counts, mask = [[1, 2, 1, 3]], [[2, 1, 1, 5]], [[True, True, True, False]]
        out = simplified_attention([nm.constant(e)], np.array([[1]]), self.setup_seq(ids, counts, mask))
        z = 3 / 4
        np.testing.assert_allclose(out.data[0], z * e[0, :3].mean(axis=0), atol=1e-15)

    def test_per_behavior_weighting(self):
        rng = np.random.default_rng(0)
        e = rng.normal(size=(1, 3, EMBED_DIM))
        seq = self.setup_seq([[1, 2, 1]], [[2, 1, 1]], [[True] * 3])
        out = simplified_attention([nm.constant(e)], np.array([[1]]), seq, per_behavior_weighting=True)
        np.testing.assert_allclose(out.data[0], (2 * e[0, 0] + e[0, 2]) / 4, atol=1e-15)

    def test_linear_in_z(self):
        # same rows, match fraction 1/4 vs 2/4: the block doubles exactly
        e = nm.constant(np.random.default_rng(1).normal(size=(1, 4, EMBED_DIM)))
        ones, valid = np.ones((1, 4)), np.ones((1, 4), dtype=bool)
        a = simplified_attention([e], np.array([[1]]), EncodedSequence(np.array([[[1], [2], [2], [2]]]), ones, valid))
        b = simplified_attention([e], np.array([[1]]), EncodedSequence(np.array([[[1], [1], [2], [2]]]), ones, valid))
        np.testing.assert_allclose(b.data, 2 * a.data, atol=1e-15)


class TestMultiheadAttention:
    def test_single_key(self):
        rng = np.random.default_rng(0)
        keys, query, (wk, wq, wv) = random_mha(rng, T=1)
        out = multihead_target_attention(keys, np.ones((3, 1), dtype=bool), query, wk, wq, wv, 4)
        np.testing.assert_allclose(out.value.data, (keys.data[:, 0] @ wv.data), atol=1e-14)
        assert np.all(out.weights == 1.0)

    def test_duplicate_keys(self):
        rng = np.random.default_rng(1)
        keys, query, (wk, wq, wv) = random_mha(rng, T=1)
        dup = nm.constant(np.concatenate([keys.data, keys.data], axis=1))
        a = multihead_target_attention(keys, np.ones((3, 1), dtype=bool), query, wk, wq, wv, 4).value.data
        b = multihead_target_attention(dup, np.ones((3, 2), dtype=bool), query, wk, wq, wv, 4).value.data
        np.testing.assert_allclose(a, b, atol=1e-14)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        keys, query, (wk, wq, wv) = random_mha(rng, B=1, T=5)
        mask = np.ones((1, 5), dtype=bool)
        base = multihead_target_attention(keys, mask, query, wk, wq, wv, 4).value.data
        for _ in range(3):
            perm = rng.permutation(5)
            out = multihead_target_attention(nm.constant(keys.data[:, perm]), mask, query, wk, wq, wv, 4)
            np.testing.assert_allclose(out.value.data, base, atol=1e-12)

    def test_weights_normalized_and_masked(self):
        rng = np.random.default_rng(3)
        keys, query, (wk, wq, wv) = random_mha(rng, B=4, T=7)
        mask = rng.random((4, 7)) < 0.5
        mask[:, 0] = True
        mask[3] = False
        out = multihead_target_attention(keys, mask, query, wk, wq, wv, 2)
        sums = out.weights.sum(axis=-1)
        np.testing.assert_allclose(sums[:3], 1.0, atol=1e-12)
        assert np.all(out.weights[~np.broadcast_to(mask[:, None], out.weights.shape)] == 0)
        # a row with no valid key outputs zeros
        assert np.all(out.value.data[3] == 0) and np.all(sums[3] == 0)

    def test_scaled_logits(self):
        # one head, two keys: weights are softmax of (k.q)/sqrt(hd)
        keys = nm.constant(np.array([[[1.0, 0.0], [0.0, 1.0]]]))
        query = nm.constant(np.array([[2.0, 0.0]]))
        eye = nm.constant(np.eye(2))
        out = multihead_target_attention(keys, np.ones((1, 2), dtype=bool), query, eye, eye, eye, 1)
        p = 1 / (1 + math.exp(-2 / math.sqrt(2)))
        np.testing.assert_allclose(out.weights[0, 0], [p, 1 - p], atol=1e-15)

    def test_width_not_divisible(self):
        rng = np.random.default_rng(0)
        keys, query, (wk, wq, wv) = random_mha(rng, width=6)
        with pytest.raises(nm.DimensionError):
            multihead_target_attention(keys, np.ones((3, 5), dtype=bool), query, wk, wq, wv, 4)


class TestFragmentNetwork:
    def test_output_dimension(self, vocabs, codes):
        m = make_model(vocabs, "fn_only")
        # 2 * (K * 4 + d_model) + 2 * d_model
        assert m.fragment.out_dim == 2 * (4 * EMBED_DIM + 16) + 2 * 16
        out = m.fragment.forward(m.store, collate(codes[:5]))
        assert out.shape == (5, m.fragment.out_dim)

    def test_all_channels_empty_gives_zero(self, vocabs, codes):
        m = make_model(vocabs, "fn_only")
        batch = collate(codes[:4])
        for ch in CHANNELS:
            batch = batch.without(ch)
        out = m.fragment.forward(m.store, batch)
        assert np.all(out.data == 0)

    def test_removing_mealtime_changes_only_its_blocks(self, vocabs, codes):
        m = make_model(vocabs, "fn_only")
        batch = collate(codes[:8])
        a = m.fragment.forward(m.store, batch).data
        b = m.fragment.forward(m.store, batch.without("M")).data
        offset = 0
        for name, size in m.fragment.block_sizes():
            same = np.array_equal(a[:, offset:offset + size], b[:, offset:offset + size])
            assert same == (not name.startswith("M.")), name
            offset += size

    def test_end_to_end_grad_check(self, vocabs, codes):
        m = make_model(vocabs, "fn_only")
        batch = collate(codes[:1])
        f = lambda st: nm.sum_(m.fragment.forward(st, batch, query_vector(st, batch)) * 3.0)
        assert nm.grad_check(f, m.store, n_coords=64, rng=np.random.default_rng(5)) < 1e-4

    def test_parameter_names(self):
        store = ParamStore()
        FragmentNetwork(FragmentConfig(), store, np.random.default_rng(0))
        assert "fragment.L.mha.w_k" in store
        assert store.value("fragment.L.mha.w_k").shape == (6 * EMBED_DIM, 16)
