"""Map sub-sequence bundles to padded integer id arrays for the model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import store
from .store import BehaviorEvent, Caps, LifelongSequence, QueryContext
from .vocab import OOV, VocabMap

SIDE = ("item", "category", "geohash", "period")
DEDUP_SIDE = SIDE + ("count", "interval")
CHANNELS = ("G", "M", "S", "L")
N_BUCKETS = 16


@dataclass
class Vocabs:
    user: VocabMap
    item: VocabMap
    category: VocabMap
    geohash: VocabMap
    n_periods: int

    def sizes(self) -> dict[str, int]:
        return {
            "user": self.user.size,
            "item": self.item.size,
            "category": self.category.size,
            "geohash": self.geohash.size,
            "period": self.n_periods + 1,
            "count": N_BUCKETS + 1,
            "interval": N_BUCKETS + 1,
        }

    def event_ids(self, e: BehaviorEvent) -> tuple[int, int, int, int]:
        period = e.period_id + 1 if 0 <= e.period_id < self.n_periods else OOV
        return (self.item.lookup(e.item_id), self.category.lookup(e.category_id),
                self.geohash.lookup(e.geohash), period)


@dataclass
class EncodedSequence:
    """Batched id sequence: ids [B, T, n_side], click counts [B, T], validity [B, T]."""

    ids: np.ndarray
    counts: np.ndarray
    mask: np.ndarray

    @property
    def length(self) -> int:
        return self.ids.shape[1]

    def truncate(self, length: int) -> "EncodedSequence":
        length = max(1, min(length, self.length))
        return EncodedSequence(self.ids[:, :length], self.counts[:, :length], self.mask[:, :length])

    def masked_out(self) -> "EncodedSequence":
        return EncodedSequence(self.ids, self.counts, np.zeros_like(self.mask))


@dataclass
class EncodedBatch:
    query: np.ndarray            # [B, 4] ids over SIDE
    user: np.ndarray             # [B]
    labels: np.ndarray           # [B]
    seqs: dict[str, EncodedSequence] = field(default_factory=dict)

    def __len__(self):
        return self.query.shape[0]

    def without(self, channel: str) -> "EncodedBatch":
        """Copy with one channel fully masked, as if the retrieval returned nothing."""
        seqs = dict(self.seqs)
        seqs[channel] = seqs[channel].masked_out()
        return EncodedBatch(self.query, self.user, self.labels, seqs)


@dataclass
class ContextCode:
    """Per-request ragged channel arrays: channel -> (ids [T, n_side], counts [T])."""

    channels: dict[str, tuple[np.ndarray, np.ndarray]]


@dataclass
class SampleCode:
    query: np.ndarray
    user: int
    label: int
    context: ContextCode


class Encoder:
    def __init__(self, vocabs: Vocabs, caps: Caps = Caps(), avg_pool_cap: int = 500):
        self.vocabs = vocabs
        self.caps = caps
        self.avg_pool_cap = avg_pool_cap

    def _rows(self, events: Sequence[BehaviorEvent]) -> tuple[np.ndarray, np.ndarray]:
        ids = np.array([self.vocabs.event_ids(e) for e in events], dtype=np.int32).reshape(-1, 4)
        counts = np.array([e.click_count for e in events], dtype=np.float64)
        return ids, counts

    def _dedup_rows(self, events: Sequence[BehaviorEvent]) -> tuple[np.ndarray, np.ndarray]:
        ids, counts = self._rows(events)
        extra = np.array(
            [(store.count_bucket(e.click_count) + 1, e.extra.get("interval", 0) + 1) for e in events],
            dtype=np.int32).reshape(-1, 2)
        return np.concatenate([ids, extra], axis=1), counts

    def encode_context(self, seq: LifelongSequence, q: QueryContext) -> ContextCode:
        bundle = store.build_bundle(seq, q, self.caps)
        window = store._window(seq, q, q.long_term_window_days)[::-1][: self.avg_pool_cap]
        return ContextCode({
            "G": self._rows(bundle.geohash_block),
            "M": self._rows(bundle.meal_time),
            "S": self._rows(bundle.short_term),
            "L": self._dedup_rows(bundle.long_term_dedup),
            "A": self._rows(window),
        })

    def encode(self, samples: Sequence) -> list[SampleCode]:
        """Encode samples; requests sharing user, time and context reuse one bundle."""
        cache: dict = {}
        out = []
        for s in samples:
            q = s.query
            key = (s.user_id, q.request_time, q.query_item.geohash, q.query_item.period_id,
                   q.short_term_window_days, q.long_term_window_days, len(s.sequence))
            ctx = cache.get(key)
            if ctx is None:
                ctx = cache[key] = self.encode_context(s.sequence, q)
            out.append(SampleCode(np.array(self.vocabs.event_ids(q.query_item), dtype=np.int64),
                                  self.vocabs.user.lookup(s.user_id), int(s.label), ctx))
        return out


def _pad(parts: list[tuple[np.ndarray, np.ndarray]], width: int) -> EncodedSequence:
    T = max(1, max(len(c) for _, c in parts))
    B = len(parts)
    ids = np.zeros((B, T, width), dtype=np.int64)
    counts = np.zeros((B, T))
    mask = np.zeros((B, T), dtype=bool)
    for b, (i, c) in enumerate(parts):
        n = len(c)
        ids[b, :n] = i
        counts[b, :n] = c
        mask[b, :n] = True
    return EncodedSequence(ids, counts, mask)


def collate(codes: Sequence[SampleCode]) -> EncodedBatch:
    seqs = {}
    for ch in ("G", "M", "S", "L", "A"):
        width = len(DEDUP_SIDE) if ch == "L" else len(SIDE)
        seqs[ch] = _pad([c.context.channels[ch] for c in codes], width)
    return EncodedBatch(
        query=np.stack([c.query for c in codes]),
        user=np.array([c.user for c in codes], dtype=np.int64),
        labels=np.array([c.label for c in codes], dtype=np.int64),
        seqs=seqs,
    )
