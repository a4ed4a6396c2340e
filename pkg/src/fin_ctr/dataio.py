"""Dataset ingestion, synthetic generation, train/test preparation and persistence."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoding import Vocabs
from .model import Sample
from .stkeys import (MealTimeBinner, equal_frequency_boundaries, fit_mealtime_binner, geohash_decode_bbox,
                     geohash_encode, minute_of_timestamp)
from .store import DAY, BehaviorEvent, IngestError, LifelongSequence, QueryContext, load_behavior_log
from .vocab import VocabMap

EPOCH_BASE = 1_640_995_200  # 2022-01-01 00:00, a day boundary
PRICE_BINS = 48

# coarse meal periods used only by the generator's preference model
COARSE_PERIODS = (
    ("breakfast", 360, 600),
    ("lunch", 630, 840),
    ("afternoon_tea", 840, 1020),
    ("dinner", 1020, 1260),
    ("late_night", 1260, 1500),
)
WORK_PROB = np.array([0.4, 0.85, 0.7, 0.15, 0.05])


class DataError(ValueError):
    pass


@dataclass
class RawDataset:
    """Ingested data before binning. `period_id` fields still hold minute of day,
    or a category index when `temporal_key == "category"`."""

    sequences: dict[str, LifelongSequence]
    samples: list[Sample]
    temporal_key: str = "minute"
    items: dict = field(default_factory=dict)
    oracle_scores: list | None = None
    meta: dict = field(default_factory=dict)


@dataclass
class PreparedDataset:
    train: list[Sample]
    test: list[Sample]
    vocabs: Vocabs
    binner: MealTimeBinner | None
    price_bins: list = field(default_factory=list)
    oov: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)
    oracle_test_scores: list | None = None


@dataclass(frozen=True)
class PrepareConfig:
    periods: int = 95
    train_fraction: float = 0.8
    seed: int = 0
    short_term_window_days: int = 30
    long_term_window_days: int = 365


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    n_users: int = 5000
    n_items: int = 1000
    n_categories: int = 12
    n_cells: int = 100
    behaviors_per_user: int = 120
    requests_per_user: int = 6
    concentration: float = 2.0
    craving_strength: float = 0.45
    period_preference: float = 1.0
    location_preference: float = 8.0
    geohash_prefix: str = "wtw3"
    seed: int = 0

    def __post_init__(self):
        for name in ("n_users", "n_items", "n_categories", "n_cells", "behaviors_per_user", "requests_per_user"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_cells < 3:
            raise ValueError("n_cells must be >= 3 (home, work and one other cell per user)")
        if not self.concentration > 0:
            raise ValueError("concentration must be positive")
        if self.n_cells > 32 ** (6 - len(self.geohash_prefix)):
            raise ValueError("too many cells for the geohash prefix")


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _coarse_minute(rng: np.random.Generator, p: int) -> int:
    _, lo, hi = COARSE_PERIODS[p]
    return int(rng.integers(lo, hi)) % 1440


class _World:
    """Cells, restaurants and the shared period/category affinity table."""

    def __init__(self, spec: SyntheticSpec, rng: np.random.Generator):
        self.spec = spec
        codes = set()
        while len(codes) < spec.n_cells:
            tail = "".join(rng.choice(list("0123456789bcdefghjkmnpqrstuvwxyz"), 6 - len(spec.geohash_prefix)))
            codes.add(spec.geohash_prefix + tail)
        self.cells = sorted(codes)
        self.item_cell = np.arange(spec.n_items) % spec.n_cells
        self.item_cat = np.empty(spec.n_items, dtype=np.int64)
        for c in range(spec.n_cells):
            idx = np.flatnonzero(self.item_cell == c)
            cats = np.arange(len(idx)) % spec.n_categories
            self.item_cat[idx] = rng.permutation(cats)
        self.by_cell_cat = {}
        for i in range(spec.n_items):
            self.by_cell_cat.setdefault((int(self.item_cell[i]), int(self.item_cat[i])), []).append(i)
        self.cell_items = {c: np.flatnonzero(self.item_cell == c) for c in range(spec.n_cells)}
        self.period_affinity = rng.normal(0.0, 1.5, size=(len(COARSE_PERIODS), spec.n_categories))

    def point_in(self, cell: int, rng: np.random.Generator) -> tuple[float, float]:
        lat0, lat1, lon0, lon1 = geohash_decode_bbox(self.cells[cell])
        f = rng.uniform(0.1, 0.9, size=2)
        return float(lat0 + f[0] * (lat1 - lat0)), float(lon0 + f[1] * (lon1 - lon0))


class _User:
    def __init__(self, world: _World, rng: np.random.Generator):
        spec = world.spec
        self.world = world
        self.home, self.work, self.other = (int(c) for c in rng.choice(spec.n_cells, 3, replace=False))
        self.period_dist = rng.dirichlet(np.full(len(COARSE_PERIODS), 2.0))
        self._period_cdf = np.cumsum(self.period_dist)
        base = rng.normal(0.0, 1.0, size=spec.n_categories)
        dev = rng.normal(0.0, 1.0, size=(2, len(COARSE_PERIODS), spec.n_categories))
        s = spec.period_preference
        self.pref = _softmax(base[None, None] + s * world.period_affinity[None] + spec.location_preference * dev)
        self.craving = int(rng.integers(spec.n_categories))
        self.rho = spec.concentration / (1.0 + spec.concentration)
        self.visits: list[tuple[int, int, int]] = []   # (item, cell, coarse period)

    def context(self, rng: np.random.Generator) -> tuple[int, int, int]:
        """(coarse period, location slot 0=home/1=work, cell)."""
        p = min(int(np.searchsorted(self._period_cdf, rng.random(), side="right")), len(COARSE_PERIODS) - 1)
        if rng.random() < 0.1:
            return p, 0, self.other
        slot = int(rng.random() < WORK_PROB[p])
        return p, slot, (self.work if slot else self.home)

    def _craving_pool(self, cell: int, recent: bool) -> list[int]:
        if not recent or self.world.spec.craving_strength <= 0:
            return []
        return self.world.by_cell_cat.get((cell, self.craving), [])

    def _revisit_pool(self, cell: int, p: int) -> list[int]:
        if self.world.spec.period_preference > 0:
            pool = [i for i, c, q in self.visits if c == cell and q == p]
            if pool:
                return pool
        pool = [i for i, c, _ in self.visits if c == cell]
        return pool or [i for i, _, _ in self.visits]

    def _new_pool_probs(self, cell: int, probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        items = self.world.cell_items[cell]
        cats = self.world.item_cat[items]
        per_cat = np.bincount(cats, minlength=len(probs))
        w = probs[cats] / per_cat[cats]
        return items, w / w.sum()

    def item_probs(self, p: int, slot: int, cell: int, recent: bool) -> dict[int, float]:
        """Exact distribution of the next clicked item in this context."""
        craving = self._craving_pool(cell, recent)
        cs = self.world.spec.craving_strength if craving else 0.0
        items, w = self._new_pool_probs(cell, self.pref[slot, p])
        rho = self.rho if self.visits else 0.0
        out = {int(i): (1.0 - cs) * (1.0 - rho) * float(x) for i, x in zip(items, w)}
        if rho:
            pool = self._revisit_pool(cell, p)
            for i in pool:
                out[i] = out.get(i, 0.0) + (1.0 - cs) * rho / len(pool)
        for i in craving:
            out[i] = out.get(i, 0.0) + cs / len(craving)
        return out

    def draw(self, p: int, slot: int, cell: int, recent: bool, rng: np.random.Generator) -> int:
        """Craving component first (recent contexts only), then revisit, then a fresh item."""
        craving = self._craving_pool(cell, recent)
        if craving and rng.random() < self.world.spec.craving_strength:
            return craving[int(rng.integers(len(craving)))]
        if self.visits and rng.random() < self.rho:
            pool = self._revisit_pool(cell, p)
            return pool[int(rng.integers(len(pool)))]
        items, w = self._new_pool_probs(cell, self.pref[slot, p])
        k = int(np.searchsorted(np.cumsum(w), rng.random(), side="right"))
        return int(items[min(k, len(items) - 1)])


def _event_line(user: str, item: int, cat: int, lat: float, lon: float, ts: int) -> str:
    return f"{user}\t{item}\t{cat}\t{lat!r}\t{lon!r}\t{ts}\t{{}}\n"


def generate_synthetic_files(spec: SyntheticSpec, out_dir: str | Path) -> dict:
    """Write `behaviors.tsv`, `samples.tsv`, `items.tsv` and `manifest.json` to `out_dir`.

    samples.tsv rows: user, item, category, lat, lon, request_ts, label, oracle_score.
    The oracle score is the log-likelihood ratio of the generating model for
    positives (next click in context) against negatives (uniform in the cell).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    world = _World(spec, rng)
    beh, smp = [], []
    horizon = 365
    n_beh = n_smp = 0
    for u in range(spec.n_users):
        uid = f"u{u}"
        user = _User(world, rng)
        n = max(1, int(rng.poisson(spec.behaviors_per_user)))
        days = np.sort(rng.integers(0, horizon, size=n))
        for d in days:
            p, slot, cell = user.context(rng)
            minute = _coarse_minute(rng, p)
            recent = d >= horizon - 30
            item = user.draw(p, slot, cell, recent, rng)
            user.visits.append((item, cell, p))
            lat, lon = world.point_in(cell, rng)
            ts = EPOCH_BASE + int(d) * DAY + minute * 60 + int(rng.integers(60))
            beh.append(_event_line(uid, item, int(world.item_cat[item]), lat, lon, ts))
            n_beh += 1
        for r in range(spec.requests_per_user):
            p, slot, cell = user.context(rng)
            minute = _coarse_minute(rng, p)
            day = horizon + r
            ts = EPOCH_BASE + day * DAY + minute * 60 + int(rng.integers(60))
            lat, lon = world.point_in(cell, rng)
            probs = user.item_probs(p, slot, cell, True)
            pos = user.draw(p, slot, cell, True, rng)
            cands = world.cell_items[cell]
            cands = cands[cands != pos]
            neg = int(cands[rng.integers(len(cands))])
            uniform = math.log(len(cands))
            for item, label in ((pos, 1), (neg, 0)):
                score = math.log(probs.get(item, 0.0) + 1e-300) + uniform
                smp.append(f"{uid}\t{item}\t{int(world.item_cat[item])}\t{lat!r}\t{lon!r}\t{ts}\t{label}\t{score!r}\n")
                n_smp += 1
    (out_dir / "behaviors.tsv").write_text("".join(beh))
    (out_dir / "samples.tsv").write_text("".join(smp))
    (out_dir / "items.tsv").write_text("".join(
        f"{i}\t{int(world.item_cat[i])}\t{world.cells[int(world.item_cell[i])]}\n" for i in range(spec.n_items)))
    manifest = {"kind": "synthetic", "spec": asdict(spec), "behaviors": n_beh, "samples": n_smp}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_raw_synthetic(data_dir: str | Path, precision: int = 6) -> RawDataset:
    data_dir = Path(data_dir)
    for name in ("behaviors.tsv", "samples.tsv", "manifest.json"):
        if not (data_dir / name).exists():
            raise DataError(f"{data_dir / name} not found; run `fin-ctr gen-data` first")
    seqs = load_behavior_log(data_dir / "behaviors.tsv", None, precision)
    samples, oracle = [], []
    with open(data_dir / "samples.tsv") as fh:
        for n, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 8:
                raise IngestError(f"expected 8 fields, got {len(parts)}", n)
            user, item, cat, lat, lon, ts, label, score = parts
            t = float(ts)
            q = BehaviorEvent(item, cat, geohash_encode(float(lat), float(lon), precision),
                              minute_of_timestamp(t), t)
            seq = seqs.get(user) or LifelongSequence(user)
            samples.append(Sample(user, seq, QueryContext(q, t), int(label)))
            oracle.append(float(score))
    manifest = json.loads((data_dir / "manifest.json").read_text())
    return RawDataset(seqs, samples, "minute", oracle_scores=oracle, meta=manifest)


def generate_synthetic(spec: SyntheticSpec, work_dir: str | Path, config: PrepareConfig | None = None
                       ) -> PreparedDataset:
    """Generate, ingest and prepare a synthetic dataset in one call."""
    generate_synthetic_files(spec, work_dir)
    raw = load_raw_synthetic(work_dir)
    return prepare(raw, config or PrepareConfig(seed=spec.seed))


# --------------------------------------------------------------------------
# review datasets


REVIEW_SCHEMAS = {
    # review rows: user, item, category, price, timestamp; metadata rows: item, category, price
    "amazon": {"fields": ("user", "item", "category", "price", "timestamp"), "meta": ("item", "category", "price")},
    # review rows: user, item, category, lat, lon, timestamp; metadata rows: item, category, lat, lon
    "google_local": {"fields": ("user", "item", "category", "lat", "lon", "timestamp"),
                     "meta": ("item", "category", "lat", "lon")},
}


def _read_tsv(path: Path, width: int, skip_bad: bool) -> list[tuple[int, list[str]]]:
    rows = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != width:
                if skip_bad:
                    continue
                raise IngestError(f"expected {width} tab-separated fields, got {len(parts)}", n)
            rows.append((n, parts))
    return rows


def ingest_reviews(path: str | Path, schema: str, meta_path: str | Path | None = None, seed: int = 0,
                   skip_bad: bool = False, precision: int = 5) -> RawDataset:
    """Per-user review sequences; each review yields a positive and one sampled negative.

    The negative item is uniform over the catalog (reviews plus metadata)
    minus the user's whole history, and shares the positive's request time
    and context. Amazon rows carry the raw price in the spatial slot until
    `prepare` bins it; the category doubles as the temporal retrieval key.
    """
    if schema not in REVIEW_SCHEMAS:
        raise DataError(f"unknown review schema {schema!r}")
    fields = REVIEW_SCHEMAS[schema]["fields"]
    rng = np.random.default_rng(seed)
    catalog: dict[str, dict] = {}
    if meta_path is not None:
        for n, parts in _read_tsv(Path(meta_path), len(REVIEW_SCHEMAS[schema]["meta"]), skip_bad):
            catalog[parts[0]] = dict(zip(REVIEW_SCHEMAS[schema]["meta"], parts))
    per_user: dict[str, list[dict]] = {}
    for n, parts in _read_tsv(Path(path), len(fields), skip_bad):
        row = dict(zip(fields, parts))
        try:
            row["timestamp"] = float(row["timestamp"])
            if schema == "amazon":
                row["price"] = float(row["price"])
            else:
                row["lat"], row["lon"] = float(row["lat"]), float(row["lon"])
                geohash_encode(row["lat"], row["lon"], precision)
            if row["timestamp"] <= 0:
                raise ValueError("timestamp must be positive")
        except ValueError as exc:
            if skip_bad:
                continue
            raise IngestError(str(exc), n) from exc
        per_user.setdefault(row["user"], []).append(row)
        catalog.setdefault(row["item"], {k: v for k, v in row.items() if k not in ("user", "timestamp")})

    categories = sorted({c["category"] for c in catalog.values()})
    cat_index = {c: i for i, c in enumerate(categories)}
    all_items = sorted(catalog)

    def spatial(info: dict) -> str:
        if schema == "amazon":
            return repr(float(info.get("price", 0.0)))
        return geohash_encode(float(info["lat"]), float(info["lon"]), precision)

    def temporal(info: dict, ts: float) -> int:
        if schema == "amazon":
            return cat_index.get(info.get("category", ""), 0)
        return minute_of_timestamp(ts)

    sequences: dict[str, LifelongSequence] = {}
    samples: list[Sample] = []
    for user in sorted(per_user):
        rows = sorted(per_user[user], key=lambda r: r["timestamp"])
        events = tuple(BehaviorEvent(r["item"], r["category"], spatial(r), temporal(r, r["timestamp"]),
                                     r["timestamp"]) for r in rows)
        seq = LifelongSequence(user, events)
        sequences[user] = seq
        history = {r["item"] for r in rows}
        candidates = [i for i in all_items if i not in history]
        for r, ev in zip(rows, seq.events):
            ctx = QueryContext(ev, r["timestamp"])
            samples.append(Sample(user, seq, ctx, 1))
            if not candidates:
                continue
            neg = candidates[int(rng.integers(len(candidates)))]
            info = catalog[neg]
            if schema == "amazon":
                q = BehaviorEvent(neg, info.get("category", ""), spatial(info), temporal(info, ev.timestamp),
                                  ev.timestamp)
            else:
                q = replace(ev, item_id=neg, category_id=info.get("category", ""))
            samples.append(Sample(user, seq, QueryContext(q, r["timestamp"]), 0))
    return RawDataset(sequences, samples, "category" if schema == "amazon" else "minute",
                      items=catalog, meta={"kind": schema, "source": str(path)})


# --------------------------------------------------------------------------
# preparation


def fit_price_bins(prices: Sequence[float], n_bins: int = PRICE_BINS) -> list[float]:
    return [float(x) for x in equal_frequency_boundaries(list(prices), n_bins)]


def _price_token(price: float, bins: Sequence[float]) -> str:
    import bisect
    return f"p{bisect.bisect_right(bins, price)}"


def _history(sample: Sample) -> list[BehaviorEvent]:
    t = sample.query.request_time
    return [e for e in sample.sequence.events if e.timestamp < t]


def prepare(raw: RawDataset, config: PrepareConfig = PrepareConfig()) -> PreparedDataset:
    """Split 80/20, fit vocabularies and bins on the training split, remap everything."""
    n = len(raw.samples)
    order = np.random.default_rng([config.seed, 80]).permutation(n)
    n_train = int(round(config.train_fraction * n))
    train_idx = np.sort(order[:n_train])
    test_idx = np.sort(order[n_train:])
    train_raw = [raw.samples[i] for i in train_idx]
    test_raw = [raw.samples[i] for i in test_idx]

    # training-visible behaviors: per user, everything before the latest training request
    horizon: dict[str, float] = {}
    for s in train_raw:
        horizon[s.user_id] = max(horizon.get(s.user_id, 0.0), s.query.request_time)
    train_events = [e for u, t in horizon.items() for e in raw.sequences.get(u, LifelongSequence(u)).events
                    if e.timestamp < t]

    price_bins: list[float] = []
    if raw.temporal_key == "category":
        prices = [float(e.geohash) for e in train_events] + [float(s.query.query_item.geohash) for s in train_raw]
        price_bins = fit_price_bins(prices) if prices else []
        binner = None
        n_periods = max([e.period_id for e in train_events] + [s.query.query_item.period_id for s in train_raw]
                        + [0]) + 1

        def remap(e: BehaviorEvent) -> BehaviorEvent:
            return replace(e, geohash=_price_token(float(e.geohash), price_bins))
    else:
        minutes = [minute_of_timestamp(e.timestamp) for e in train_events]
        minutes += [minute_of_timestamp(s.query.request_time) for s in train_raw]
        binner = fit_mealtime_binner(minutes, config.periods) if minutes else fit_mealtime_binner([0], 1)
        n_periods = binner.period_count

        def remap(e: BehaviorEvent) -> BehaviorEvent:
            return BehaviorEvent(e.item_id, e.category_id, e.geohash, binner.assign(minute_of_timestamp(e.timestamp)),
                                 e.timestamp, e.extra, e.click_count)

    sequences = {u: LifelongSequence(u, tuple(remap(e) for e in seq.events)) for u, seq in raw.sequences.items()}

    def remap_sample(s: Sample) -> Sample:
        q = s.query
        item = remap(q.query_item)
        if raw.temporal_key != "category":
            item = replace(item, period_id=binner.assign(minute_of_timestamp(q.request_time)))
        seq = sequences.get(s.user_id, LifelongSequence(s.user_id))
        ctx = QueryContext(item, q.request_time, config.short_term_window_days, config.long_term_window_days)
        return Sample(s.user_id, seq, ctx, s.label)

    train = [remap_sample(s) for s in train_raw]
    test = [remap_sample(s) for s in test_raw]

    vocabs = Vocabs(VocabMap("user"), VocabMap("item"), VocabMap("category"), VocabMap("geohash"), n_periods)
    seen_hist: set = set()
    for s in train:
        vocabs.user.add(s.user_id)
        events = [s.query.query_item]
        if (s.user_id, s.query.request_time) not in seen_hist:
            seen_hist.add((s.user_id, s.query.request_time))
            events += _history(s)
        for e in events:
            vocabs.item.add(e.item_id)
            vocabs.category.add(e.category_id)
            vocabs.geohash.add(e.geohash)
    for v in (vocabs.user, vocabs.item, vocabs.category, vocabs.geohash):
        v.freeze()

    oov = count_oov(test, vocabs)
    manifest = {"samples": n, "train": len(train), "test": len(test), "seed": config.seed,
                "periods": n_periods, "temporal_key": raw.temporal_key, "config": asdict(config),
                "source": raw.meta, "oov": oov}
    oracle = [raw.oracle_scores[i] for i in test_idx] if raw.oracle_scores else None
    return PreparedDataset(train, test, vocabs, binner, price_bins, oov, manifest, oracle)


def count_oov(samples: Sequence[Sample], vocabs: Vocabs) -> dict:
    """Unseen-key occurrences per channel over query items and histories of `samples`."""
    stats = {k: [0, 0] for k in ("user", "item", "category", "geohash")}
    seen = set()
    for s in samples:
        stats["user"][0] += s.user_id not in vocabs.user
        stats["user"][1] += 1
        events = [s.query.query_item]
        key = (s.user_id, s.query.request_time)
        if key not in seen:
            seen.add(key)
            events += _history(s)
        for e in events:
            for name, value in (("item", e.item_id), ("category", e.category_id), ("geohash", e.geohash)):
                stats[name][0] += value not in getattr(vocabs, name)
                stats[name][1] += 1
    return {k: {"oov": a, "total": b, "rate": (a / b if b else 0.0)} for k, (a, b) in stats.items()}


# --------------------------------------------------------------------------
# persistence


def _event_row(user: str, e: BehaviorEvent) -> str:
    return (f"{user}\t{e.item_id}\t{e.category_id}\t{e.geohash}\t{e.period_id}\t{e.timestamp!r}\t"
            f"{e.click_count}\t{json.dumps(e.extra, sort_keys=True)}\n")


def _parse_event(parts: list[str]) -> tuple[str, BehaviorEvent]:
    user, item, cat, gh, period, ts, cc, extra = parts
    return user, BehaviorEvent(item, cat, gh, int(period), float(ts), json.loads(extra), int(cc))


def save_prepared(ds: PreparedDataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seqs: dict[str, LifelongSequence] = {}
    for s in ds.train + ds.test:
        seqs.setdefault(s.user_id, s.sequence)
    with open(out / "events.tsv", "w") as fh:
        for u in sorted(seqs):
            for e in seqs[u].events:
                fh.write(_event_row(u, e))
    with open(out / "samples.tsv", "w") as fh:
        for split, rows in (("train", ds.train), ("test", ds.test)):
            for s in rows:
                q = s.query
                e = q.query_item
                fh.write(f"{split}\t{s.user_id}\t{e.item_id}\t{e.category_id}\t{e.geohash}\t{e.period_id}\t"
                         f"{q.request_time!r}\t{s.label}\t{q.short_term_window_days}\t{q.long_term_window_days}\n")
    for name in ("user", "item", "category", "geohash"):
        getattr(ds.vocabs, name).save(out / f"vocab_{name}.tsv")
    if ds.binner is not None:
        ds.binner.save(out / "binner.txt")
    (out / "price_bins.txt").write_text("".join(f"{float(b)!r}\n" for b in ds.price_bins))
    if ds.oracle_test_scores is not None:
        (out / "oracle_test_scores.txt").write_text("".join(f"{float(x)!r}\n" for x in ds.oracle_test_scores))
    (out / "manifest.json").write_text(json.dumps(ds.manifest, indent=2, sort_keys=True) + "\n")


def load_prepared(in_dir: str | Path) -> PreparedDataset:
    d = Path(in_dir)
    if not (d / "manifest.json").exists():
        raise DataError(f"no prepared dataset in {d}; run `fin-ctr prepare` first")
    manifest = json.loads((d / "manifest.json").read_text())
    per_user: dict[str, list[BehaviorEvent]] = {}
    with open(d / "events.tsv") as fh:
        for line in fh:
            user, e = _parse_event(line.rstrip("\n").split("\t"))
            per_user.setdefault(user, []).append(e)
    seqs = {u: LifelongSequence(u, tuple(evs)) for u, evs in per_user.items()}
    train, test = [], []
    with open(d / "samples.tsv") as fh:
        for line in fh:
            split, user, item, cat, gh, period, t, label, sd, ld = line.rstrip("\n").split("\t")
            ts = float(t)
            q = QueryContext(BehaviorEvent(item, cat, gh, int(period), ts), ts, int(sd), int(ld))
            s = Sample(user, seqs.get(user, LifelongSequence(user)), q, int(label))
            (train if split == "train" else test).append(s)
    vocabs = Vocabs(*(VocabMap.load(n, d / f"vocab_{n}.tsv") for n in ("user", "item", "category", "geohash")),
                    n_periods=manifest["periods"])
    binner = MealTimeBinner.load(d / "binner.txt") if (d / "binner.txt").exists() else None
    bins = [float(x) for x in (d / "price_bins.txt").read_text().split()] if (d / "price_bins.txt").exists() else []
    oracle = None
    if (d / "oracle_test_scores.txt").exists():
        oracle = [float(x) for x in (d / "oracle_test_scores.txt").read_text().split()]
    return PreparedDataset(train, test, vocabs, binner, bins, manifest.get("oov", {}), manifest, oracle)
