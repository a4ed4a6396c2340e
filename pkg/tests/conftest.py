"""Shared builders for small random sequences, vocabularies and models."""

import numpy as np
import pytest

from fin_ctr import model as M
from fin_ctr.encoding import Encoder, Vocabs
from fin_ctr.store import DAY, BehaviorEvent, LifelongSequence, QueryContext
from fin_ctr.vocab import VocabMap

T0 = 1_700_000_000.0


def random_sequence(rng, n, n_items=6, n_cats=3, n_cells=3, n_periods=4, span_days=400, user="u"):
    """Events with few distinct keys so retrieval filters have something to match."""
    events = []
    for _ in range(n):
        events.append(BehaviorEvent(
            item_id=f"i{rng.integers(n_items)}",
            category_id=f"c{rng.integers(n_cats)}",
            geohash=f"wtw3g{rng.integers(n_cells)}",
            period_id=int(rng.integers(n_periods)),
            timestamp=T0 + float(rng.integers(0, span_days * DAY)),
            click_count=int(rng.integers(1, 4)),
        ))
    return LifelongSequence(user, tuple(events))


def random_query(rng, n_items=6, n_cats=3, n_cells=3, n_periods=4, span_days=400):
    t = T0 + float(rng.integers(0, span_days * DAY))
    ev = BehaviorEvent(f"i{rng.integers(n_items)}", f"c{rng.integers(n_cats)}",
                       f"wtw3g{rng.integers(n_cells)}", int(rng.integers(n_periods)), t)
    return QueryContext(ev, t)


def small_vocabs(n_items=6, n_cats=3, n_cells=3, n_periods=4, n_users=4):
    return Vocabs(
        VocabMap("user", [f"u{i}" for i in range(n_users)]).freeze(),
        VocabMap("item", [f"i{i}" for i in range(n_items)]).freeze(),
        VocabMap("category", [f"c{i}" for i in range(n_cats)]).freeze(),
        VocabMap("geohash", [f"wtw3g{i}" for i in range(n_cells)]).freeze(),
        n_periods,
    )


def random_samples(rng, n, n_users=4, min_len=5, max_len=40):
    samples = []
    for k in range(n):
        user = f"u{k % n_users}"
        seq = random_sequence(rng, int(rng.integers(min_len, max_len + 1)), user=user)
        q = random_query(rng)
        samples.append(M.Sample(user, seq, q, int(k % 2)))
    return samples


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def vocabs():
    return small_vocabs()


@pytest.fixture
def codes(vocabs):
    rng = np.random.default_rng(7)
    return Encoder(vocabs).encode(random_samples(rng, 24))


def make_model(vocabs, variant="full_fin", seed=0, **kw):
    return M.FinModel(M.ModelConfig(variant=variant, **kw), vocabs.sizes(), seed)
