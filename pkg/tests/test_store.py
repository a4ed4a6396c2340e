import numpy as np
import pytest

from fin_ctr.stkeys import MealTimeBinner
from fin_ctr.store import (
    DAY,
    BehaviorEvent,
    Caps,
    IngestError,
    LifelongSequence,
    QueryContext,
    build_bundle,
    count_bucket,
    dedup_long_term,
    extract_geohash_block,
    extract_mealtime,
    extract_short_term,
    interval_bucket,
    load_behavior_log,
    parse_behavior_line,
)

from conftest import T0, random_query, random_sequence


def ev(item, ts, cell="wtw3g0", period=0, cat="c0", clicks=1):
    return BehaviorEvent(item, cat, cell, period, ts, click_count=clicks)


def brute_window(seq, q, days):
    lo = q.request_time - days * DAY
    return [e for e in seq.events if lo <= e.timestamp < q.request_time]


def brute_newest(events, cap):
    return sorted(events, key=lambda e: e.timestamp, reverse=True)[:cap]


class TestExtraction:
    def test_dedup_hand_trace(self):
        seq = LifelongSequence("u", (ev("A", T0 + 1), ev("B", T0 + 2), ev("A", T0 + 3), ev("C", T0 + 4),
                                     ev("A", T0 + 5)))
        q = QueryContext(ev("Q", T0 + 10), T0 + 10)
        out = dedup_long_term(seq, q)
        assert [(e.item_id, e.click_count) for e in out] == [("A", 3), ("C", 1), ("B", 1)]
        assert [e.timestamp for e in out] == [T0 + 5, T0 + 4, T0 + 2]
        assert all(e.extra["interval"] == 0 for e in out)

    def test_dedup_distinct_items_is_identity(self):
        seq = LifelongSequence("u", tuple(ev(f"i{k}", T0 + k) for k in range(5)))
        q = QueryContext(ev("Q", T0 + 10), T0 + 10)
        out = dedup_long_term(seq, q)
        assert [e.item_id for e in out] == ["i4", "i3", "i2", "i1", "i0"]
        assert all(e.click_count == 1 for e in out)

    def test_dedup_tie_broken_by_item(self):
        seq = LifelongSequence("u", (ev("B", T0 + 1), ev("A", T0 + 1)))
        q = QueryContext(ev("Q", T0 + 10), T0 + 10)
        assert [e.item_id for e in dedup_long_term(seq, q)] == ["A", "B"]

    def test_interval_side_info(self):
        seq = LifelongSequence("u", (ev("A", T0),))
        q = QueryContext(ev("Q", T0 + 9 * DAY), T0 + 9 * DAY)
        # 9 days: 1 + floor(log2 9) = 4
        assert dedup_long_term(seq, q)[0].extra["interval"] == 4

    def test_buckets(self):
        assert interval_bucket(0) == 0
        assert interval_bucket(DAY - 1) == 0
        assert interval_bucket(DAY) == 1
        assert interval_bucket(2 * DAY) == 2
        assert interval_bucket(3 * DAY) == 2
        assert interval_bucket(10 ** 12) == 15
        assert [count_bucket(c) for c in (1, 2, 3, 4, 1 << 20)] == [0, 1, 1, 2, 15]

    def test_empty_sequence(self):
        q = QueryContext(ev("Q", T0), T0)
        b = build_bundle(LifelongSequence("u"), q)
        assert all(len(v) == 0 for v in b.channels().values())

    def test_cap_must_be_positive(self):
        q = QueryContext(ev("Q", T0), T0)
        with pytest.raises(ValueError):
            dedup_long_term(LifelongSequence("u"), q, cap=0)
        with pytest.raises(ValueError):
            Caps(geohash=0)

    def test_short_term_window_boundary(self):
        t = T0 + 100 * DAY
        seq = LifelongSequence("u", (ev("old", t - 30 * DAY - 1), ev("edge", t - 30 * DAY), ev("now", t)))
        q = QueryContext(ev("Q", t), t)
        assert [e.item_id for e in extract_short_term(seq, q)] == ["edge"]

    def test_bundle_equals_individual(self, rng):
        seq = random_sequence(rng, 40)
        q = random_query(rng)
        caps = Caps(5, 6, 7, 8)
        b = build_bundle(seq, q, caps)
        assert b.geohash_block == extract_geohash_block(seq, q, 5)
        assert b.meal_time == extract_mealtime(seq, q, 6)
        assert b.short_term == extract_short_term(seq, q, 7)
        assert b.long_term_dedup == dedup_long_term(seq, q, 8)

    def test_brute_force_oracles(self):
        rng = np.random.default_rng(99)
        for _ in range(300):
            seq = random_sequence(rng, int(rng.integers(0, 51)))
            q = random_query(rng)
            cap = int(rng.integers(1, 60))
            long = brute_window(seq, q, q.long_term_window_days)
            g = [e for e in long if e.geohash == q.query_item.geohash]
            m = [e for e in long if e.period_id == q.query_item.period_id]
            assert extract_geohash_block(seq, q, cap) == brute_newest(g, cap)
            assert extract_mealtime(seq, q, cap) == brute_newest(m, cap)
            assert extract_short_term(seq, q, cap) == brute_newest(brute_window(seq, q, 30), cap)
            out = dedup_long_term(seq, q, cap)
            assert sum(e.click_count for e in dedup_long_term(seq, q, 10 ** 6)) == sum(e.click_count for e in long)
            assert len(out) == min(cap, len({e.item_id for e in long}))
            assert all(e.timestamp < q.request_time for e in out)

    def test_skewed_sequence_dedup_bound(self):
        # every item repeated at least r times -> dedup length <= raw / r
        rng = np.random.default_rng(5)
        r = 4
        events = [ev(f"i{k}", T0 + float(rng.integers(0, 300 * DAY))) for k in range(12) for _ in range(r)]
        seq = LifelongSequence("u", tuple(events))
        q = QueryContext(ev("Q", T0 + 301 * DAY), T0 + 301 * DAY)
        assert len(dedup_long_term(seq, q)) <= len(events) / r


class TestSequence:
    def test_sorts_events(self):
        seq = LifelongSequence("u", (ev("b", T0 + 2), ev("a", T0 + 1)))
        assert [e.item_id for e in seq.events] == ["a", "b"]

    def test_before(self):
        seq = LifelongSequence("u", (ev("a", T0 + 1), ev("b", T0 + 2)))
        assert [e.item_id for e in seq.before(T0 + 2).events] == ["a"]

    def test_event_validation(self):
        with pytest.raises(ValueError):
            ev("a", 0)
        with pytest.raises(ValueError):
            ev("a", T0, clicks=0)


class TestIngestion:
    LINE = "u1\ti1\tc1\t42.605\t-5.603\t1640995200\t{}\n"

    def test_parse_line(self):
        binner = MealTimeBinner((600,), 2)
        user, e = parse_behavior_line(self.LINE, binner, precision=5)
        assert user == "u1"
        assert e.geohash == "ezs42"
        assert e.period_id == 0
        assert e.extra == {}

    def test_raw_minute_without_binner(self):
        _, e = parse_behavior_line("u\ti\tc\t0\t0\t1640995200.0\t{\"k\": 1}\n", None)
        assert e.period_id == 0
        assert e.extra == {"k": 1}

    @pytest.mark.parametrize("line", [
        "u\ti\tc\t0\t0\t100\n",
        "u\ti\tc\t95\t0\t100\t{}\n",
        "u\ti\tc\t0\t0\tabc\t{}\n",
        "u\ti\tc\t0\t0\t100\t[1]\n",
        "u\ti\tc\t0\t0\t-5\t{}\n",
    ])
    def test_bad_lines(self, line):
        with pytest.raises(IngestError):
            parse_behavior_line(line, None, line_no=3)

    def test_error_names_line(self):
        with pytest.raises(IngestError, match="line 2"):
            load_behavior_log([self.LINE, "broken\n"])

    def test_skip_bad_and_group(self, tmp_path):
        p = tmp_path / "log.tsv"
        p.write_text(self.LINE + "broken\n" + "u1\ti2\tc1\t42.6\t-5.6\t1640995100\t{}\n"
                     + "u0\ti3\tc2\t1\t1\t1640995300\t{}\n\n")
        seqs = load_behavior_log(p, skip_bad=True)
        assert list(seqs) == ["u0", "u1"]
        assert [e.item_id for e in seqs["u1"].events] == ["i2", "i1"]

    def test_empty_log(self):
        assert load_behavior_log([]) == {}
