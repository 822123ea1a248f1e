from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from dhrag.embedding import HashingEmbedder
from dhrag.knowledge_base import KnowledgeBase

DATA = Path(__file__).resolve().parents[1] / "src" / "dhrag" / "data"


@pytest.fixture
def embedder() -> HashingEmbedder:
    return HashingEmbedder()


@pytest.fixture
def small_kb(embedder) -> KnowledgeBase:
    kb = KnowledgeBase(embedder)
    kb.ingest(
        [
            ("d1", "Paris is the capital of France.", {}),
            ("d2", "Berlin is the capital of Germany.", {}),
            ("d3", "The Seine flows through Paris.", {"lang": "en"}),
        ]
    )
    return kb.freeze()


@pytest.fixture
def fixture_kb() -> KnowledgeBase:
    from dhrag.knowledge_base import load_corpus

    kb = KnowledgeBase()
    kb.ingest(load_corpus(DATA / "synthetic_corpus.jsonl"))
    return kb.freeze()


def unit(*xs: float) -> np.ndarray:
    v = np.asarray(xs, dtype=np.float64)
    return v / np.linalg.norm(v)


def write_jsonl(path: Path, rows) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


def add_vec(store, vec, session: str = "s", query: str | None = None, passages=(), passage_vectors=None) -> int:
    """Insert a triple with a hand-set query vector."""
    vec = np.asarray(vec, dtype=np.float64)
    pv = [np.asarray(p, dtype=np.float64) for p in passage_vectors] if passage_vectors is not None else []
    triple = store.make_triple(
        query or f"q{store.next_id}", list(passages), f"r{store.next_id}", None, session, query_vector=vec, passage_vectors=pv
    )
    return store.insert(triple)


# acceptance bookkeeping: one PASS/FAIL line per criterion in the terminal summary

_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """``with criterion(n, title): ...`` records and prints the outcome of one acceptance criterion."""
    import contextlib
    import time

    log = request.config.stash.setdefault(_ACCEPTANCE, [])

    @contextlib.contextmanager
    def run(number: int, title: str):
        start = time.perf_counter()
        try:
            yield
        except BaseException as exc:
            line = f"FAIL criterion {number}: {title} ({time.perf_counter() - start:.2f}s) -- {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
            log.append(line)
            print(line)
            raise
        line = f"PASS criterion {number}: {title} ({time.perf_counter() - start:.2f}s)"
        log.append(line)
        print(line)

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
