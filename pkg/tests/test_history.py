from __future__ import annotations

import json
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dhrag.embedding import HashingEmbedder
from dhrag.history import (
    ConfigError,
    HistoryConfig,
    HistoryStore,
    comprehensive_weight,
    recency_score,
    relevance_score,
)
from dhrag.matching import InvariantError

from conftest import add_vec, unit


def test_insert_assigns_ids_and_timestamps(embedder):
    store = HistoryStore()
    t0 = store.make_triple("first", ["p"], "r", embedder)
    assert store.insert(t0) == 0
    assert len(store) == 1
    t1 = store.make_triple("second", [], "r", embedder)
    assert store.insert(t1) == 1
    assert [store.triples[i].timestamp for i in (0, 1)] == [0, 1]
    assert store.turn_clock == 2


def test_insert_rejects_stale_clock_or_id(embedder):
    store = HistoryStore()
    t = store.make_triple("q", [], "r", embedder)
    store.insert(t)
    with pytest.raises(ValueError, match="clock"):
        store.insert(t)
    stale = store.make_triple("q", [], "r", embedder)
    stale.id = 0
    with pytest.raises(ValueError, match="fresh"):
        store.insert(stale)


def test_recency_examples():
    assert recency_score(4, 4, 0.3) == 1.0
    assert recency_score(0, 100, 0.0) == 1.0
    assert recency_score(0, 3, 0.5) == pytest.approx(math.exp(-1.5), abs=1e-15)
    with pytest.raises(ValueError, match="regression"):
        recency_score(5, 4, 0.1)


def test_relevance_examples():
    v = unit(1, 2)
    assert relevance_score(v, v) == pytest.approx(1.0)
    assert relevance_score(v, -v) == pytest.approx(0.0)
    assert relevance_score(unit(1, 0), unit(0, 1)) == 0.5


def test_comprehensive_weight_endpoints():
    store = HistoryStore()
    add_vec(store, unit(1, 1))
    triple = store.triples[0]
    q = unit(1, 0)
    rel = relevance_score(triple.query_vector, q)
    rec = recency_score(0, 3, 0.1)
    assert comprehensive_weight(triple, q, 3, HistoryConfig(alpha=1.0)) == rel
    assert comprehensive_weight(triple, q, 3, HistoryConfig(alpha=0.0)) == rec
    assert comprehensive_weight(triple, triple.query_vector, 0, HistoryConfig(alpha=0.5)) == pytest.approx(1.0)


def test_under_capacity_evicts_nothing():
    store = HistoryStore(HistoryConfig(capacity=3))
    add_vec(store, unit(1, 0))
    before = store.dumps()
    assert store.evict_to_capacity(unit(1, 0), 1) == []
    assert store.dumps() == before


def test_strict_ordering_eviction():
    # alpha=1 so weight == relevance: a 0.9, b 0.5, c 0.1
    store = HistoryStore(HistoryConfig(capacity=2, alpha=1.0))
    a = add_vec(store, [0.8, 0.6])
    c = add_vec(store, [-0.8, 0.6])
    b = add_vec(store, [0.0, 1.0])
    q = np.array([1.0, 0.0])
    w = store.weights(q, 3)
    assert w[a] == pytest.approx(0.9) and w[b] == pytest.approx(0.5) and w[c] == pytest.approx(0.1)
    assert store.evict_to_capacity(q, 3) == [c]
    assert sorted(store.triples) == [a, b]
    store.check_invariants()


def test_eviction_minimum_weight_oracle():
    rng = np.random.default_rng(3)
    cfg = HistoryConfig(capacity=5, alpha=0.6, decay_lambda=0.2)
    store = HistoryStore(cfg)
    for _ in range(6):
        add_vec(store, rng.normal(size=8))
    q = rng.normal(size=8)
    weights = {tid: comprehensive_weight(t, q, 5, cfg) for tid, t in store.triples.items()}
    lightest = min(weights, key=lambda t: (weights[t], -store.triples[t].timestamp, -t))
    assert store.evict_to_capacity(q, 5) == [lightest]
    assert len(store) == 5


def test_top3_of_six_oracle():
    rng = random.Random(11)
    cfg = HistoryConfig(capacity=3, alpha=0.5, decay_lambda=0.3)
    store = HistoryStore(cfg)
    for _ in range(6):
        add_vec(store, [rng.uniform(-1, 1) for _ in range(4)])
    q = np.array([rng.uniform(-1, 1) for _ in range(4)])
    scored = sorted(
        store.triples.values(),
        key=lambda t: (-(0.5 * (np.dot(t.query_vector, q) / np.linalg.norm(t.query_vector) / np.linalg.norm(q) + 1) / 2 + 0.5 * math.exp(-0.3 * (6 - t.timestamp))), -t.timestamp),
    )
    survivors = sorted(t.id for t in scored[:3])
    store.evict_to_capacity(q, 6)
    assert sorted(store.triples) == survivors


def test_equal_weights_keep_newest():
    store = HistoryStore(HistoryConfig(capacity=2, alpha=1.0))
    for _ in range(4):
        add_vec(store, unit(1, 0))
    assert store.evict_to_capacity(unit(1, 0), 4) == [0, 1]


@pytest.mark.parametrize(
    "field,value",
    [("alpha", 1.2), ("alpha", -0.1), ("capacity", 0), ("decay_lambda", -1.0), ("tau_cluster", 1.5),
     ("theta_chain", -2.0), ("recluster_period", 0), ("branching_m", 0), ("chain_score", "median"),
     ("beam_width", 0), ("alpha", "high")],
)
def test_config_violations_name_the_field(field, value):
    with pytest.raises(ConfigError) as err:
        HistoryConfig(**{field: value}).validate()
    assert any(field in v for v in err.value.violations)


def test_config_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="gamma"):
        HistoryConfig.from_dict({"gamma": 1})


def _busy_store(seed: int = 0) -> HistoryStore:
    emb = HashingEmbedder(64)
    rng = random.Random(seed)
    words = "alpha beta gamma delta epsilon zeta eta theta".split()
    store = HistoryStore(HistoryConfig(capacity=6, recluster_period=4, tau_cluster=0.3, theta_chain=0.2))
    for i in range(15):
        q = " ".join(rng.choices(words, k=3))
        passages = [" ".join(rng.choices(words, k=4)) for _ in range(2)]
        t = store.make_triple(q, passages, f"answer {i}", emb, session_id="A" if i % 4 else "B")
        store.insert(t)
        store.evict_to_capacity(t.query_vector, t.timestamp)
        store.update_clusters()
        store.check_invariants()
    return store


def test_snapshot_round_trip_is_byte_identical(tmp_path):
    store = _busy_store()
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    store.save(p1)
    HistoryStore.load(p1).save(p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_loaded_snapshot_continues_identically():
    emb = HashingEmbedder(64)
    original = _busy_store(1)
    copy = HistoryStore.loads(original.dumps())
    for store in (original, copy):
        t = store.make_triple("alpha beta", ["gamma"], "x", emb, "A")
        store.insert(t)
        store.evict_to_capacity(t.query_vector, t.timestamp)
        store.update_clusters()
    assert original.dumps() == copy.dumps()


def test_snapshot_has_documented_top_level_keys():
    data = json.loads(_busy_store().dumps())
    assert {"config", "turn_clock", "triples", "clusters", "chains"} <= set(data)


@pytest.mark.parametrize(
    "corrupt,needle",
    [
        (lambda d: d["clusters"][0]["member_ids"].append(999), "deleted triple 999"),
        (lambda d: d.pop("chains"), "chains"),
        (lambda d: d["triples"].reverse() or d["triples"][0].update(timestamp=-5), "timestamps"),
        (lambda d: d["chains"][0]["triple_ids"].clear(), "empty"),
    ],
)
def test_corrupt_snapshot_names_invariant(corrupt, needle):
    data = json.loads(_busy_store().dumps())
    corrupt(data)
    with pytest.raises(InvariantError, match=needle):
        HistoryStore.loads(json.dumps(data))


def test_garbage_snapshot():
    with pytest.raises(InvariantError, match="JSON"):
        HistoryStore.loads("{nope")
    with pytest.raises(InvariantError):
        HistoryStore.loads("[]")


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 8),
    st.floats(0, 1),
    st.floats(0, 2),
    st.lists(st.lists(st.floats(-1, 1), min_size=3, max_size=3), min_size=1, max_size=20),
)
def test_capacity_and_invariants_hold(capacity, alpha, lam, vectors):
    store = HistoryStore(HistoryConfig(capacity=capacity, alpha=alpha, decay_lambda=lam, recluster_period=3))
    for v in vectors:
        v = np.array(v)
        if np.linalg.norm(v) == 0:
            v = np.array([1.0, 0.0, 0.0])
        tid = add_vec(store, v)
        evicted = store.evict_to_capacity(v, store.triples[tid].timestamp)
        assert evicted == sorted(evicted)
        store.update_clusters()
        assert len(store) <= capacity
        store.check_invariants()
