"""Integrate network: recency-aligned cross interactions between the four
sub-sequences, an integrated query built the same way, and one target
attention between them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .encoding import CHANNELS, SIDE, EncodedBatch, EncodedSequence
from .fragment import EMBED_DIM, channel_sides, embed, init_mha, mha_from_store
from .numeric import ParamStore, Tensor

PAIRS = (("G", "M"), ("G", "S"), ("G", "L"), ("M", "S"), ("M", "L"), ("S", "L"))
CROSS_OPS = ("mul", "add", "sub")
N_BLOCKS = len(CHANNELS) + len(PAIRS) * len(CROSS_OPS)


@dataclass
class AlignedSubSequence:
    rows: Tensor        # [B, L, d_model]; invalid rows are exactly zero
    mask: np.ndarray    # [B, L]
    channel: str


@dataclass
class IntegratedSequence:
    rows: Tensor        # [B, blocks * L, d_model]
    mask: np.ndarray
    tags: list          # block tag per L-row block, e.g. "G", "G*M", "G+M", "G-M"


def _apply(op: str, a: Tensor, b: Tensor) -> Tensor:
    if op == "mul":
        return a * b
    if op == "add":
        return a + b
    return a - b


_SYMBOL = {"mul": "*", "add": "+", "sub": "-"}


def align(store: ParamStore, seq: EncodedSequence, channel: str, length: int,
          prefix: str = "integrate") -> AlignedSubSequence:
    """Newest `length` rows, side embeddings concatenated, projected to d_model; zero padded."""
    seq = seq.truncate(length)
    B, T = seq.mask.shape
    keys = nm.concat(embed(store, seq.ids, channel_sides(channel)), axis=-1)
    rows = (keys @ store.tensor(f"{prefix}.{channel}.align")) * seq.mask[..., None]
    if T < length:
        d = rows.shape[-1]
        rows = nm.concat([rows, nm.constant(np.zeros((B, length - T, d)))], axis=1)
        mask = np.concatenate([seq.mask, np.zeros((B, length - T), dtype=bool)], axis=1)
    else:
        mask = seq.mask
    return AlignedSubSequence(rows, mask, channel)


def average_to_one(a: AlignedSubSequence) -> AlignedSubSequence:
    """Collapse the valid rows to their mean: the length-1 alternative."""
    n = a.mask.sum(axis=1).astype(np.float64)
    pooled = nm.sum_(a.rows, axis=1, keepdims=True) * (1.0 / np.maximum(n, 1.0))[:, None, None]
    return AlignedSubSequence(pooled, (n > 0)[:, None], a.channel)


def cross(seqs: dict[str, AlignedSubSequence]) -> IntegratedSequence:
    """Originals plus mul/add/sub of every channel pair, stacked along the sequence axis.

    Row k of a derived block combines row k of each source (k-th newest with
    k-th newest); it is valid only when both sources are, and zero otherwise.
    """
    shapes = {ch: seqs[ch].rows.shape for ch in CHANNELS}
    if len(set(shapes.values())) != 1:
        raise nm.DimensionError(f"cross: aligned shapes differ: {shapes}")
    blocks, masks, tags = [], [], []
    for ch in CHANNELS:
        blocks.append(seqs[ch].rows)
        masks.append(seqs[ch].mask)
        tags.append(ch)
    for a, b in PAIRS:
        m = seqs[a].mask & seqs[b].mask
        for op in CROSS_OPS:
            blocks.append(_apply(op, seqs[a].rows, seqs[b].rows) * m[..., None])
            masks.append(m)
            tags.append(f"{a}{_SYMBOL[op]}{b}")
    return IntegratedSequence(nm.concat(blocks, axis=1), np.concatenate(masks, axis=1), tags)


def cross_vectors(qs: dict[str, Tensor]) -> list[Tensor]:
    out = [qs[ch] for ch in CHANNELS]
    for a, b in PAIRS:
        out.extend(_apply(op, qs[a], qs[b]) for op in CROSS_OPS)
    return out


def integrate_query(qs: dict[str, Tensor], w_mix: Tensor) -> Tensor:
    """Cross the per-channel query vectors like the rows, concatenate on features, project."""
    return nm.concat(cross_vectors(qs), axis=-1) @ w_mix


def permute_blocks(seq: IntegratedSequence, order) -> IntegratedSequence:
    """Reorder the L-row blocks of an integrated sequence."""
    B, R, d = seq.rows.shape
    n = len(seq.tags)
    L = R // n
    idx = np.asarray(order)
    rows = nm.index_select(nm.reshape(seq.rows, (B, n, L, d)), idx, axis=1)
    mask = seq.mask.reshape(B, n, L)[:, idx].reshape(B, R)
    return IntegratedSequence(nm.reshape(rows, (B, R, d)), mask, [seq.tags[i] for i in idx])


class IntegrateNetwork:
    def __init__(self, store: ParamStore, rng: np.random.Generator, d_model: int = 16, heads: int = 4,
                 length: int = 16, avg_pool: bool = False):
        self.d_model = d_model
        self.heads = heads
        self.length = length
        self.avg_pool = avg_pool
        qdim = len(SIDE) * EMBED_DIM
        for ch in CHANNELS:
            store.add(f"integrate.{ch}.align",
                      nm.glorot_uniform(rng, len(channel_sides(ch)) * EMBED_DIM, d_model))
            store.add(f"integrate.{ch}.q_proj", nm.glorot_uniform(rng, qdim, d_model))
        store.add("integrate.q_mix", nm.glorot_uniform(rng, N_BLOCKS * d_model, d_model))
        init_mha(store, "integrate.mha", d_model, d_model, d_model, rng)

    @property
    def out_dim(self) -> int:
        return self.d_model

    def sequence(self, store: ParamStore, batch: EncodedBatch) -> IntegratedSequence:
        aligned = {ch: align(store, batch.seqs[ch], ch, self.length) for ch in CHANNELS}
        if self.avg_pool:
            aligned = {ch: average_to_one(a) for ch, a in aligned.items()}
        return cross(aligned)

    def query(self, store: ParamStore, qvec: Tensor) -> Tensor:
        qs = {ch: qvec @ store.tensor(f"integrate.{ch}.q_proj") for ch in CHANNELS}
        return integrate_query(qs, store.tensor("integrate.q_mix"))

    def forward(self, store: ParamStore, batch: EncodedBatch, qvec: Tensor, block_order=None,
                attention_log: list | None = None) -> Tensor:
        seq = self.sequence(store, batch)
        if block_order is not None:
            seq = permute_blocks(seq, block_order)
        att = mha_from_store(store, "integrate.mha", seq.rows, seq.mask, self.query(store, qvec), self.heads)
        if attention_log is not None:
            attention_log.append(("integrate", att.weights, seq.mask))
        return att.value
