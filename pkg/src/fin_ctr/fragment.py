"""Fragment network: simplified attention over long retrieved sub-sequences and
multi-head target attention over their most recent rows."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .encoding import CHANNELS, DEDUP_SIDE, SIDE, EncodedBatch, EncodedSequence
from .numeric import ParamStore, Tensor
from .vocab import OOV

EMBED_DIM = 4


def embed(store: ParamStore, ids: np.ndarray, sides=SIDE) -> list[Tensor]:
    """One embedding tensor per side-info column of `ids` (shape [..., len(sides)])."""
    return [nm.take_rows(store.tensor(f"emb.{s}"), ids[..., i]) for i, s in enumerate(sides)]


def relevance_scores(side_ids: np.ndarray, query_id, mask: np.ndarray | None = None) -> np.ndarray:
    """1.0 where a behavior's side value equals the query's, else 0.0; 0 at masked rows.

    OOV ids never match, so two different unseen keys are not counted as equal.
    """
    side_ids = np.asarray(side_ids)
    query_id = np.asarray(query_id)[..., None]
    r = (side_ids == query_id) & (query_id != OOV)
    if mask is not None:
        r &= np.asarray(mask, dtype=bool)
    return r.astype(np.float64)


def z_score(r: np.ndarray, counts: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Click-weighted match fraction over the last axis; 0 when nothing is valid."""
    r = np.asarray(r, dtype=np.float64)
    c = np.asarray(counts, dtype=np.float64)
    if mask is not None:
        c = c * np.asarray(mask, dtype=bool)
    total = c.sum(axis=-1)
    hit = (r * c).sum(axis=-1)
    return np.divide(hit, total, out=np.zeros_like(hit), where=total > 0)


def simplified_attention(side_embs: list[Tensor], query_ids: np.ndarray, seq: EncodedSequence,
                         per_behavior_weighting: bool = False) -> Tensor:
    """Concatenate, per side channel i, z_i * mean_j(e_j^i) over valid rows j.

    With `per_behavior_weighting` each row is instead weighted by r_j c_j / sum(c).
    Returns [B, K * dim]; rows with an empty sequence are all zero.
    """
    mask = seq.mask
    valid = mask.sum(axis=1).astype(np.float64)
    total = (seq.counts * mask).sum(axis=1)
    blocks = []
    for i, e in enumerate(side_embs):
        r = relevance_scores(seq.ids[..., i], query_ids[:, i], mask)
        if per_behavior_weighting:
            w = np.divide(r * seq.counts, total[:, None], out=np.zeros_like(r), where=total[:, None] > 0)
        else:
            z = z_score(r, seq.counts, mask)
            w = (mask / np.maximum(valid, 1.0)[:, None]) * z[:, None]
        blocks.append(nm.sum_(e * w[..., None], axis=1))
    return nm.concat(blocks, axis=-1)


@dataclass
class AttentionOutput:
    value: Tensor          # [B, heads * head_dim]
    weights: np.ndarray    # [B, heads, T]


def multihead_target_attention(keys: Tensor, mask: np.ndarray, query: Tensor, w_k: Tensor,
                               w_q: Tensor, w_v: Tensor, heads: int) -> AttentionOutput:
    """Target attention of one query vector over a key sequence, per head.

    keys [B, T, dk], query [B, dq]; w_k [dk, H*hd], w_q [dq, H*hd], w_v [dk, H*hd].
    Logits are scaled by 1/sqrt(hd); masked keys get zero weight and a row with
    no valid key yields a zero output.
    """
    B, T, _ = keys.shape
    width = w_k.shape[1]
    if width % heads:
        raise nm.DimensionError(f"projection width {width} not divisible by {heads} heads")
    hd = width // heads
    k = nm.swapaxes(nm.reshape(keys @ w_k, (B, T, heads, hd)), 1, 2)       # [B,H,T,hd]
    v = nm.swapaxes(nm.reshape(keys @ w_v, (B, T, heads, hd)), 1, 2)
    q = nm.reshape(query @ w_q, (B, heads, hd, 1))
    logits = nm.reshape(k @ q, (B, heads, T)) * (1.0 / math.sqrt(hd))
    att = nm.masked_softmax(logits, np.asarray(mask, dtype=bool)[:, None, :])
    out = nm.reshape(nm.reshape(att, (B, heads, 1, T)) @ v, (B, heads * hd))
    return AttentionOutput(out, att.data)


@dataclass
class ChannelSpec:
    simplified: bool = False
    mha: bool = True


def default_channels() -> dict[str, ChannelSpec]:
    return {
        "G": ChannelSpec(simplified=True, mha=True),
        "M": ChannelSpec(simplified=True, mha=True),
        "S": ChannelSpec(simplified=False, mha=True),
        "L": ChannelSpec(simplified=False, mha=True),
    }


@dataclass
class FragmentConfig:
    channels: dict[str, ChannelSpec] = field(default_factory=default_channels)
    d_model: int = 16
    heads: int = 4
    mha_len: int = 20
    per_behavior_weighting: bool = False


def channel_sides(ch: str):
    return DEDUP_SIDE if ch == "L" else SIDE


def query_vector(store: ParamStore, batch: EncodedBatch) -> Tensor:
    return nm.concat(embed(store, batch.query), axis=-1)


def init_mha(store: ParamStore, prefix: str, key_dim: int, query_dim: int, width: int,
             rng: np.random.Generator) -> None:
    store.add(f"{prefix}.w_k", nm.glorot_uniform(rng, key_dim, width))
    store.add(f"{prefix}.w_q", nm.glorot_uniform(rng, query_dim, width))
    store.add(f"{prefix}.w_v", nm.glorot_uniform(rng, key_dim, width))


def mha_from_store(store: ParamStore, prefix: str, keys: Tensor, mask: np.ndarray, query: Tensor,
                   heads: int) -> AttentionOutput:
    return multihead_target_attention(keys, mask, query, store.tensor(f"{prefix}.w_k"),
                                      store.tensor(f"{prefix}.w_q"), store.tensor(f"{prefix}.w_v"), heads)


class FragmentNetwork:
    """Parallel, independent modeling of the retrieved channels.

    Geohash-block and Meal-time emit concat(U*, U_c*); Short-term and the
    de-duplicated Long-term channel emit U_c* only (given the default specs).
    """

    def __init__(self, cfg: FragmentConfig, store: ParamStore, rng: np.random.Generator):
        self.cfg = cfg
        qdim = len(SIDE) * EMBED_DIM
        for ch in CHANNELS:
            spec = cfg.channels.get(ch)
            if spec is None or not spec.mha:
                continue
            kdim = len(channel_sides(ch)) * EMBED_DIM
            store.add(f"fragment.{ch}.q_proj", nm.glorot_uniform(rng, qdim, cfg.d_model))
            init_mha(store, f"fragment.{ch}.mha", kdim, cfg.d_model, cfg.d_model, rng)

    def block_sizes(self) -> list[tuple[str, int]]:
        out = []
        for ch in CHANNELS:
            spec = self.cfg.channels.get(ch)
            if spec is None:
                continue
            if spec.simplified:
                out.append((f"{ch}.simplified", len(SIDE) * EMBED_DIM))
            if spec.mha:
                out.append((f"{ch}.mha", self.cfg.d_model))
        return out

    @property
    def out_dim(self) -> int:
        return sum(n for _, n in self.block_sizes())

    def forward(self, store: ParamStore, batch: EncodedBatch, qvec: Tensor | None = None,
                attention_log: list | None = None) -> Tensor:
        if qvec is None:
            qvec = query_vector(store, batch)
        blocks = []
        for ch in CHANNELS:
            spec = self.cfg.channels.get(ch)
            if spec is None:
                continue
            seq = batch.seqs[ch]
            if spec.simplified:
                long_embs = embed(store, seq.ids[..., : len(SIDE)])
                blocks.append(simplified_attention(long_embs, batch.query, seq, self.cfg.per_behavior_weighting))
            if spec.mha:
                short = seq.truncate(self.cfg.mha_len)
                keys = nm.concat(embed(store, short.ids, channel_sides(ch)), axis=-1)
                q = qvec @ store.tensor(f"fragment.{ch}.q_proj")
                att = mha_from_store(store, f"fragment.{ch}.mha", keys, short.mask, q, self.cfg.heads)
                if attention_log is not None:
                    attention_log.append((f"fragment.{ch}", att.weights, short.mask))
                blocks.append(att.value)
        if not blocks:
            return nm.constant(np.zeros((len(batch), 0)))
        return nm.concat(blocks, axis=-1)
