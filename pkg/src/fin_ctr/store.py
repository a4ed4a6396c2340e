"""Lifelong behavior storage and hard-search sub-sequence extraction."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

from .stkeys import MealTimeBinner, geohash_encode, minute_of_timestamp

DAY = 86400
MAX_INTERVAL_BUCKET = 15
MAX_COUNT_BUCKET = 15


class IngestError(ValueError):
    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}" if line_no is not None else message)


@dataclass(frozen=True)
class BehaviorEvent:
    item_id: str
    category_id: str
    geohash: str
    period_id: int
    timestamp: float
    extra: dict = field(default_factory=dict, compare=True, hash=False)
    click_count: int = 1

    def __post_init__(self):
        if not self.timestamp > 0:
            raise ValueError(f"timestamp must be positive, got {self.timestamp}")
        if self.click_count < 1:
            raise ValueError(f"click_count must be >= 1, got {self.click_count}")


@dataclass(frozen=True)
class LifelongSequence:
    user_id: str
    events: tuple[BehaviorEvent, ...] = ()

    def __post_init__(self):
        ts = [e.timestamp for e in self.events]
        if any(a > b for a, b in zip(ts, ts[1:])):
            object.__setattr__(self, "events", tuple(sorted(self.events, key=lambda e: e.timestamp)))

    def __len__(self):
        return len(self.events)

    def before(self, t: float) -> "LifelongSequence":
        """Prefix of events strictly earlier than `t`."""
        return LifelongSequence(self.user_id, tuple(e for e in self.events if e.timestamp < t))


@dataclass(frozen=True)
class QueryContext:
    query_item: BehaviorEvent
    request_time: float
    short_term_window_days: int = 30
    long_term_window_days: int = 365


@dataclass(frozen=True)
class Caps:
    geohash: int = 200
    mealtime: int = 200
    short_term: int = 20
    long_term: int = 100

    def __post_init__(self):
        for name in ("geohash", "mealtime", "short_term", "long_term"):
            if getattr(self, name) < 1:
                raise ValueError(f"cap {name} must be >= 1")


@dataclass(frozen=True)
class SubSequenceBundle:
    geohash_block: list
    meal_time: list
    short_term: list
    long_term_dedup: list

    def channels(self):
        return {"G": self.geohash_block, "M": self.meal_time, "S": self.short_term, "L": self.long_term_dedup}


def interval_bucket(elapsed_seconds: float) -> int:
    """log2 bucket of elapsed whole days: 0 for < 1 day, capped at 15."""
    days = int(max(elapsed_seconds, 0.0) // DAY)
    if days < 1:
        return 0
    return min(MAX_INTERVAL_BUCKET, 1 + int(math.log2(days)))


def count_bucket(count: int) -> int:
    return min(MAX_COUNT_BUCKET, int(math.log2(max(count, 1))))


def _window(seq: LifelongSequence, q: QueryContext, days: int) -> list[BehaviorEvent]:
    lo = q.request_time - days * DAY
    return [e for e in seq.events if lo <= e.timestamp < q.request_time]


def _newest(events: list[BehaviorEvent], cap: int) -> list[BehaviorEvent]:
    if cap < 1:
        raise ValueError("cap must be >= 1")
    return events[::-1][:cap]


def extract_geohash_block(seq: LifelongSequence, q: QueryContext, cap: int = 200) -> list[BehaviorEvent]:
    g = q.query_item.geohash
    return _newest([e for e in _window(seq, q, q.long_term_window_days) if e.geohash == g], cap)


def extract_mealtime(seq: LifelongSequence, q: QueryContext, cap: int = 200) -> list[BehaviorEvent]:
    p = q.query_item.period_id
    return _newest([e for e in _window(seq, q, q.long_term_window_days) if e.period_id == p], cap)


def extract_short_term(seq: LifelongSequence, q: QueryContext, cap: int = 20) -> list[BehaviorEvent]:
    return _newest(_window(seq, q, q.short_term_window_days), cap)


def dedup_long_term(seq: LifelongSequence, q: QueryContext, cap: int = 100) -> list[BehaviorEvent]:
    """One event per item over the long-term window.

    The survivor is the item's latest occurrence, with `click_count` set to the
    number of occurrences and `extra["interval"]` holding the bucketized age
    of that occurrence. Ordered newest first, ties by item_id.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    latest: dict[str, BehaviorEvent] = {}
    counts: dict[str, int] = {}
    for e in _window(seq, q, q.long_term_window_days):
        counts[e.item_id] = counts.get(e.item_id, 0) + e.click_count
        prev = latest.get(e.item_id)
        if prev is None or e.timestamp >= prev.timestamp:
            latest[e.item_id] = e
    out = []
    for item, e in latest.items():
        extra = dict(e.extra)
        extra["interval"] = interval_bucket(q.request_time - e.timestamp)
        out.append(replace(e, click_count=counts[item], extra=extra))
    out.sort(key=lambda e: (-e.timestamp, e.item_id))
    return out[:cap]


def build_bundle(seq: LifelongSequence, q: QueryContext, caps: Caps = Caps()) -> SubSequenceBundle:
    return SubSequenceBundle(
        geohash_block=extract_geohash_block(seq, q, caps.geohash),
        meal_time=extract_mealtime(seq, q, caps.mealtime),
        short_term=extract_short_term(seq, q, caps.short_term),
        long_term_dedup=dedup_long_term(seq, q, caps.long_term),
    )


def parse_behavior_line(line: str, binner: MealTimeBinner | None, precision: int = 6,
                        line_no: int | None = None) -> tuple[str, BehaviorEvent]:
    """Parse `user \\t item \\t category \\t lat \\t lon \\t timestamp \\t extra_json`."""
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 7:
        raise IngestError(f"expected 7 tab-separated fields, got {len(parts)}", line_no)
    user, item, cat, lat, lon, ts, extra = parts
    try:
        lat_f, lon_f, ts_f = float(lat), float(lon), float(ts)
        extra_d = json.loads(extra) if extra.strip() not in ("", "{}") else {}
        gh = geohash_encode(lat_f, lon_f, precision)
        minute = minute_of_timestamp(ts_f)
        period = binner.assign(minute) if binner is not None else minute
        ev = BehaviorEvent(item, cat, gh, period, ts_f, extra_d)
    except (ValueError, TypeError) as exc:
        raise IngestError(str(exc), line_no) from exc
    if not isinstance(extra_d, dict):
        raise IngestError("extra_json must be an object", line_no)
    return user, ev


def load_behavior_log(lines: Iterable[str] | str | Path, binner: MealTimeBinner | None = None,
                      precision: int = 6, skip_bad: bool = False) -> dict[str, LifelongSequence]:
    """Group a behavior log into per-user sequences.

    Without a binner `period_id` holds the raw minute of day, which a later
    binner fit can remap.
    """
    if isinstance(lines, (str, Path)):
        with open(lines) as fh:
            lines = fh.readlines()
    per_user: dict[str, list[BehaviorEvent]] = {}
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            user, ev = parse_behavior_line(line, binner, precision, n)
        except IngestError:
            if skip_bad:
                continue
            raise
        per_user.setdefault(user, []).append(ev)
    return {u: LifelongSequence(u, tuple(evs)) for u, evs in sorted(per_user.items())}
