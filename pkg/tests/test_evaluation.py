from __future__ import annotations

import csv
import json
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dhrag.embedding import HashingEmbedder
from dhrag.evaluation import (
    DatasetError,
    Dialogue,
    DialogueDataset,
    DialogueTurn,
    ablation_rows,
    ablation_table,
    bleu,
    db_stats,
    load_dataset,
    run_ablations,
    run_eval,
    token_f1,
)
from dhrag.generation import MockGenerator
from dhrag.history import HistoryConfig, HistoryStore
from dhrag.knowledge_base import KnowledgeBase
from dhrag.pipeline import PipelineConfig, Session

from conftest import DATA, add_vec, unit, write_jsonl

words = st.lists(st.sampled_from("a b c d e".split()), max_size=8).map(" ".join)


def test_bleu_examples():
    assert bleu("the quick brown fox", "the quick brown fox") == 1.0
    assert bleu("hello", "hello") == 1.0
    assert bleu("alpha beta", "gamma delta") == 0.0
    assert bleu("", "x") == 0.0
    # p1..p3 = 1, p4 has no candidate 4-grams and is smoothed to 1/(0+1); brevity exp(1 - 4/3)
    assert bleu("the cat sat", "the cat sat down") == pytest.approx(math.exp(-1 / 3), abs=1e-12)


def test_f1_examples():
    assert token_f1("Same words here", "same words here") == 1.0
    assert token_f1("a b", "c d") == 0.0
    assert token_f1("a b c", "a b d") == pytest.approx(2 / 3, abs=1e-12)


@settings(max_examples=200)
@given(words, words)
def test_metrics_bounded(a, b):
    assert 0.0 <= bleu(a, b) <= 1.0
    assert 0.0 <= token_f1(a, b) <= 1.0
    assert token_f1(a, b) == pytest.approx(token_f1(b, a))


@settings(max_examples=200)
@given(st.lists(st.sampled_from("abc"), min_size=4, max_size=4), st.lists(st.sampled_from("abc"), min_size=1, max_size=6))
def test_perfect_scores_only_for_identical_text(cand, ref):
    c, r = " ".join(cand), " ".join(ref)
    assert (bleu(c, r) == 1.0) == (cand == ref)
    assert (token_f1(c, r) == 1.0) == (Counter(cand) == Counter(ref))


def test_empty_dataset_report():
    report = run_eval(DialogueDataset([]), KnowledgeBase(), PipelineConfig(), MockGenerator())
    assert report.bleu is None and report.f1 is None
    assert report.to_dict()["aggregate"]["scored_turns"] == 0
    assert "undefined" in report.to_table()


def test_scripted_perfect_oracle(small_kb):
    turns = (DialogueTurn("Who?", "Victor Hugo wrote it."), DialogueTurn("When?", "In the year 1862."))
    script = {t.query: t.reference_answer for t in turns}
    report = run_eval(DialogueDataset([Dialogue("d", turns)]), small_kb, PipelineConfig(), MockGenerator(script))
    assert report.bleu == 1.0 and report.f1 == 1.0


def test_generation_errors_are_counted_and_excluded(small_kb):
    turns = tuple(DialogueTurn(q, "Paris is the capital of France.") for q in ("Paris?", "fail now", "France?"))
    gen = MockGenerator(fail_when=lambda r: "fail now" in r.prompt)
    report = run_eval(DialogueDataset([Dialogue("d", turns)]), small_kb, PipelineConfig(), gen)
    assert report.failed_turns == 1 and len(report.scored_turns) == 2
    assert report.to_dict()["dialogues"][0]["turns"][1]["error"].startswith("GenerationError")
    assert "failed turns excluded: 1" in report.to_table()


def test_fixture_full_beats_no_history(fixture_kb):
    dataset = load_dataset(DATA / "synthetic_dialogues.jsonl")
    assert len(dataset) == 20
    reports = run_ablations(dataset, fixture_kb, PipelineConfig(), MockGenerator(), ["dynamic"])
    assert reports["full"].f1 > reports["dynamic"].f1


def test_fixture_answers_never_appear_in_corpus():
    corpus = (DATA / "synthetic_corpus.jsonl").read_text().lower()
    for dialogue in load_dataset(DATA / "synthetic_dialogues.jsonl").dialogues:
        for turn in dialogue.turns:
            if turn.reference_answer != "Okay, noted.":
                assert turn.reference_answer.lower().rstrip(".") not in corpus
                assert any(turn.reference_answer == t.query for t in dialogue.turns)


def test_ablation_deltas_recomputed_from_reports(fixture_kb):
    dataset = load_dataset(DATA / "synthetic_dialogues.jsonl")
    reports = run_ablations(dataset, fixture_kb, PipelineConfig(), MockGenerator(), ["dynamic", "integration", "cot", "hierarchical"])
    assert list(reports) == ["full", "dynamic", "integration", "cot", "hierarchical"]
    rows = {r["variant"]: r for r in ablation_rows(reports)}
    for name in ("dynamic", "integration", "cot", "hierarchical"):
        assert rows[name]["f1_delta"] == reports["full"].f1 - reports[name].f1
        assert rows[name]["bleu_delta"] == reports["full"].bleu - reports[name].bleu
    table = ablation_table(reports)
    assert len(table.splitlines()) == 6 and "(-0.4" in table


def test_reports_are_deterministic_and_exclude_timings(fixture_kb):
    dataset = load_dataset(DATA / "synthetic_dialogues.jsonl")
    a = run_eval(dataset, fixture_kb, PipelineConfig(), MockGenerator(), workers=4).to_json()
    b = run_eval(dataset, fixture_kb, PipelineConfig(), MockGenerator(), workers=1).to_json()
    assert a == b and "timings_ms" not in a
    timed = json.loads(run_eval(dataset, fixture_kb, PipelineConfig(), MockGenerator()).to_json(include_timings=True))
    assert set(timed["timings_ms"]) >= {"static_retrieval", "generation", "history_update"}


def test_dataset_errors_carry_line_numbers(tmp_path):
    ok = write_jsonl(tmp_path / "ok.jsonl", [{"dialogue_id": "x", "turns": [{"query": "q", "reference_answer": "a"}]}])
    assert len(load_dataset(ok)) == 1
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"dialogue_id": "x", "turns": [{"query": "q", "reference_answer": "a"}]}\n{"dialogue_id": "y", "turns": []}\n')
    with pytest.raises(DatasetError) as err:
        load_dataset(bad)
    assert err.value.line == 2
    bad.write_text("{broken\n")
    with pytest.raises(DatasetError, match=":1:"):
        load_dataset(bad)
    dup = write_jsonl(tmp_path / "dup.jsonl", [{"dialogue_id": "x", "turns": [{"query": "q", "reference_answer": "a"}]}] * 2)
    with pytest.raises(DatasetError, match="duplicate"):
        load_dataset(dup)


def test_db_stats_empty_and_single_chain(tmp_path):
    stats = db_stats(HistoryStore())
    assert stats.cluster_sizes == {} and stats.chain_histogram == {} and stats.average_chain_length is None
    assert "undefined" in stats.render()
    store = HistoryStore(HistoryConfig(theta_chain=-1.0))
    for _ in range(3):
        add_vec(store, unit(1, 0))
    stats = db_stats(store)
    assert stats.chain_histogram == {3: 1} and stats.average_chain_length == 3.0
    clusters, chains = stats.write_csv(tmp_path)
    assert list(csv.reader(open(chains))) == [["chain_length", "count"], ["3", "1"]]
    assert list(csv.reader(open(clusters))) == [["cluster_id", "size"], ["0", "3"]]


def test_chain_lengths_equal_session_turn_counts():
    rng = np.random.default_rng(4)
    store = HistoryStore(HistoryConfig(theta_chain=-1.0, capacity=100))
    sessions = rng.choice(["a", "b", "c", "d"], size=30)
    for s in sessions:
        add_vec(store, rng.normal(size=6), session=str(s))
    stats = db_stats(store)
    assert stats.chain_histogram == dict(Counter(Counter(sessions.tolist()).values()))
    assert sum(n * c for n, c in stats.chain_histogram.items()) == stats.triple_count == 30
    assert sum(stats.cluster_sizes.values()) == 30


def test_histograms_sum_to_triples_after_a_session(small_kb):
    session = Session(PipelineConfig(history=HistoryConfig(capacity=3)), small_kb, MockGenerator())
    for q in ["Paris?", "Berlin?", "Seine?", "Paris again?", "France?"]:
        session.respond(q)
    stats = db_stats(session.store)
    assert sum(stats.cluster_sizes.values()) == 3
    assert sum(n * c for n, c in stats.chain_histogram.items()) == 3
