import numpy as np
import pytest

from fin_ctr import numeric as nm
from fin_ctr.encoding import CHANNELS, collate
from fin_ctr.fragment import query_vector
from fin_ctr.integrate import (
    N_BLOCKS,
    PAIRS,
    AlignedSubSequence,
    align,
    average_to_one,
    cross,
    cross_vectors,
    integrate_query,
    permute_blocks,
)

from conftest import make_model


def aligned(rows, mask, ch):
    return AlignedSubSequence(nm.constant(np.asarray(rows, dtype=float)), np.asarray(mask, dtype=bool), ch)


def four_channels(rng, B=2, L=3, d=2, valid=None):
    out = {}
    for k, ch in enumerate(CHANNELS):
        m = np.ones((B, L), dtype=bool) if valid is None else valid[k]
        out[ch] = aligned(rng.normal(size=(B, L, d)) * m[..., None], m, ch)
    return out


class TestCross:
    def test_block_count_and_order(self):
        seq = cross(four_channels(np.random.default_rng(0)))
        assert N_BLOCKS == 22 and len(seq.tags) == 22
        assert seq.tags[:4] == ["G", "M", "S", "L"]
        assert seq.tags[4:7] == ["G*M", "G+M", "G-M"]
        assert seq.rows.shape == (2, 22 * 3, 2)

    def test_hand_example(self):
        g = aligned([[[1.0, 2.0]]], [[True]], "G")
        m = aligned([[[3.0, 5.0]]], [[True]], "M")
        zero = aligned([[[0.0, 0.0]]], [[False]], "S")
        seq = cross({"G": g, "M": m, "S": zero, "L": aligned([[[0.0, 0.0]]], [[False]], "L")})
        rows = dict(zip(seq.tags, seq.rows.data[0]))
        assert rows["G*M"].tolist() == [3.0, 10.0]
        assert rows["G+M"].tolist() == [4.0, 7.0]
        assert rows["G-M"].tolist() == [-2.0, -3.0]
        # anything crossed with an invalid row is invalid and zero
        masks = dict(zip(seq.tags, seq.mask[0]))
        assert not masks["G*S"] and rows["G+S"].tolist() == [0.0, 0.0]

    def test_recency_alignment(self):
        # row k of a derived block combines row k of both sources
        rng = np.random.default_rng(1)
        ch = four_channels(rng, B=1, L=4)
        seq = cross(ch)
        i = seq.tags.index("S-L")
        block = seq.rows.data[0, i * 4:(i + 1) * 4]
        np.testing.assert_allclose(block, ch["S"].rows.data[0] - ch["L"].rows.data[0])

    def test_shape_mismatch(self):
        ch = four_channels(np.random.default_rng(0))
        ch["L"] = aligned(np.zeros((2, 5, 2)), np.ones((2, 5)), "L")
        with pytest.raises(nm.DimensionError):
            cross(ch)

    def test_query_cross(self):
        qs = {ch: nm.constant(np.full((1, 2), float(k + 1))) for k, ch in enumerate(CHANNELS)}
        vecs = cross_vectors(qs)
        assert len(vecs) == N_BLOCKS
        # G=1, M=2 -> mul 2, add 3, sub -1
        assert [v.data[0, 0] for v in vecs[4:7]] == [2.0, 3.0, -1.0]
        w = nm.constant(np.ones((N_BLOCKS * 2, 3)))
        assert integrate_query(qs, w).shape == (1, 3)
        assert len(PAIRS) == 6


class TestAlign:
    def test_pads_and_zeroes(self, vocabs, codes):
        m = make_model(vocabs)
        batch = collate(codes[:3])
        a = align(m.store, batch.seqs["G"], "G", 16)
        assert a.rows.shape == (3, 16, 16)
        assert np.all(a.rows.data[~a.mask] == 0)
        n_valid = np.minimum(batch.seqs["G"].mask.sum(axis=1), 16)
        assert a.mask.sum(axis=1).tolist() == n_valid.tolist()

    def test_average_to_one(self):
        a = aligned([[[1.0, 2.0], [3.0, 4.0], [0.0, 0.0]]], [[True, True, False]], "G")
        out = average_to_one(a)
        assert out.rows.data.tolist() == [[[2.0, 3.0]]]
        empty = average_to_one(aligned([[[0.0, 0.0]]], [[False]], "G"))
        assert empty.mask.tolist() == [[False]] and np.all(empty.rows.data == 0)


class TestIntegrateNetwork:
    def test_block_permutation_invariance(self, vocabs, codes):
        m = make_model(vocabs)
        batch = collate(codes[:6])
        qvec = query_vector(m.store, batch)
        base = m.integrate.forward(m.store, batch, qvec).data
        rng = np.random.default_rng(0)
        for _ in range(5):
            out = m.integrate.forward(m.store, batch, qvec, block_order=rng.permutation(N_BLOCKS)).data
            np.testing.assert_allclose(out, base, atol=1e-10)

    def test_permute_blocks_moves_tags(self):
        seq = cross(four_channels(np.random.default_rng(0)))
        order = np.arange(N_BLOCKS)[::-1]
        p = permute_blocks(seq, order)
        assert p.tags[0] == seq.tags[-1]
        np.testing.assert_array_equal(p.rows.data[:, :3], seq.rows.data[:, -3:])

    def test_avg_pool_flag_changes_length(self, vocabs, codes):
        m = make_model(vocabs, integrate_avg_pool=True)
        seq = m.integrate.sequence(m.store, collate(codes[:2]))
        assert seq.rows.shape[1] == N_BLOCKS

    def test_grad_check(self, vocabs, codes):
        m = make_model(vocabs)
        batch = collate(codes[:2])
        f = lambda st: nm.sum_(m.integrate.forward(st, batch, query_vector(st, batch)) * 2.0)
        assert nm.grad_check(f, m.store, n_coords=64, rng=np.random.default_rng(3)) < 1e-4

    def test_empty_channels_give_zero(self, vocabs, codes):
        m = make_model(vocabs)
        batch = collate(codes[:3])
        for ch in CHANNELS:
            batch = batch.without(ch)
        out = m.integrate.forward(m.store, batch, query_vector(m.store, batch))
        assert np.all(out.data == 0)
