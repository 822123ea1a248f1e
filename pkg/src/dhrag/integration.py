"""Fusing static and historical retrievals into one budgeted prompt.

Candidates from the knowledge base (STATIC), the cluster tree (HM) and the
chain index (CoT) are deduplicated, weighted with a softmax over
``q . (W d) / temperature`` and then picked greedily by maximal marginal
relevance until the token budget is spent. The selection is rendered with
the template in ``data/prompt_v1.json``::

    <preamble>

    Relevant knowledge:
    <static item>
    ...

    Relevant prior turns:
    Q: <query>
    A: <response>
    Passage: <best passage>
    ...

    Reasoning so far:
    Q: <query>
    A: <response>
    Passage: <best passage>
    ...

    Current question: <raw query>

Empty blocks are left out, item text is whitespace-collapsed so blank lines
only ever separate blocks, and chain items are listed in dialogue order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .embedding import cosine_similarity, softmax_weights, token_count

STATIC = "STATIC"
HM = "HM"
COT = "CoT"
SOURCE_ORDER = (STATIC, HM, COT)
_SPECIFICITY = {STATIC: 0, HM: 1, COT: 2}


@dataclass(frozen=True)
class RetrievedItem:
    source: str
    text: str
    vector: np.ndarray = field(repr=False, compare=False)
    base_score: float
    origin_id: str
    timestamp: int | None = None

    def __post_init__(self) -> None:
        if self.source not in _SPECIFICITY:
            raise ValueError(f"unknown source {self.source!r}")
        if not self.text:
            raise ValueError("retrieved item text must be non-empty")

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "text": self.text,
            "base_score": self.base_score,
            "origin_id": self.origin_id,
            "timestamp": self.timestamp,
        }


@dataclass
class IntegratedContext:
    selected: list[tuple[RetrievedItem, float]] = field(default_factory=list)
    token_budget_used: int = 0
    reconstructed_query: str = ""

    def items(self, source: str | None = None) -> list[RetrievedItem]:
        return [item for item, _ in self.selected if source is None or item.source == source]


def collapse(text: str) -> str:
    return " ".join(text.split())


def render_turn(query: str, response: str, passage: str | None = None) -> str:
    """Text of a historical item: a Q/A pair plus its best-matching passage."""
    lines = [f"Q: {collapse(query)}", f"A: {collapse(response)}"]
    if passage:
        lines.append(f"Passage: {collapse(passage)}")
    return "\n".join(lines)


def collect_candidates(
    static_results: Sequence[RetrievedItem],
    hm_results: Sequence[RetrievedItem],
    cot_results: Sequence[RetrievedItem],
) -> list[RetrievedItem]:
    """Concatenate the three sources, merging items with identical text.

    A merged item keeps the highest base score and the most specific source
    (CoT over HM over STATIC); it sits where the text first appeared.
    """
    merged: dict[str, RetrievedItem] = {}
    for item in [*static_results, *hm_results, *cot_results]:
        prev = merged.get(item.text)
        if prev is None:
            merged[item.text] = item
            continue
        keep = item if _SPECIFICITY[item.source] > _SPECIFICITY[prev.source] else prev
        merged[item.text] = RetrievedItem(
            source=keep.source,
            text=keep.text,
            vector=keep.vector,
            base_score=max(prev.base_score, item.base_score),
            origin_id=keep.origin_id,
            timestamp=keep.timestamp,
        )
    return list(merged.values())


def attention_weights(
    query_vec: np.ndarray,
    items: Sequence[RetrievedItem],
    W: np.ndarray | None = None,
    temperature: float = 1.0,
) -> list[float]:
    """Softmax over ``query_vec . (W @ item.vector)``; ``W=None`` is the identity."""
    if not items:
        raise ValueError("attention over an empty candidate list")
    scores = []
    for item in items:
        vec = item.vector if W is None else W @ item.vector
        scores.append(float(np.dot(query_vec, vec)))
    return softmax_weights(scores, temperature)


def integrate(
    query_vec: np.ndarray,
    items: Sequence[RetrievedItem],
    weights: Sequence[float],
    budget_tokens: int = 1024,
    mmr_lambda: float = 0.7,
) -> IntegratedContext:
    """Greedy MMR selection under a token budget.

    Each round picks the item maximising
    ``mmr_lambda * weight - (1 - mmr_lambda) * max cos(item, already selected)``
    (lower ``origin_id`` wins ties). Items that would overflow the budget, or
    whose origin is already selected, are dropped and the loop continues.
    """
    if len(items) != len(weights):
        raise ValueError("items and weights are not aligned")
    if budget_tokens <= 0:
        raise ValueError("budget_tokens must be positive")
    if not 0.0 <= mmr_lambda <= 1.0:
        raise ValueError("mmr_lambda must be in [0, 1]")
    pool = list(range(len(items)))
    chosen: list[int] = []
    origins: set[str] = set()
    used = 0
    while pool:
        best_i, best_key = None, None
        for i in pool:
            redundancy = max((cosine_similarity(items[i].vector, items[j].vector) for j in chosen), default=0.0)
            score = mmr_lambda * weights[i] - (1.0 - mmr_lambda) * redundancy
            key = (-score, items[i].origin_id, i)
            if best_key is None or key < best_key:
                best_i, best_key = i, key
        pool.remove(best_i)
        item = items[best_i]
        cost = token_count(item.text)
        if item.origin_id in origins or used + cost > budget_tokens:
            continue
        chosen.append(best_i)
        origins.add(item.origin_id)
        used += cost
    return IntegratedContext([(items[i], weights[i]) for i in chosen], used)


def concatenate(items: Sequence[RetrievedItem], budget_tokens: int) -> IntegratedContext:
    """Plain fusion used when integration is ablated: source order, uniform weights, cut at the budget."""
    if not items:
        return IntegratedContext()
    weight = 1.0 / len(items)
    ordered = sorted(items, key=lambda it: SOURCE_ORDER.index(it.source))
    selected, used = [], 0
    for item in ordered:
        cost = token_count(item.text)
        if used + cost > budget_tokens:
            break
        selected.append((item, weight))
        used += cost
    return IntegratedContext(selected, used)


@lru_cache(maxsize=None)
def load_template(version: int = 1) -> dict:
    text = resources.files("dhrag").joinpath("data", f"prompt_v{version}.json").read_text(encoding="utf-8")
    return json.loads(text)


def reconstruct_query(raw_query: str, context: IntegratedContext, template: dict | None = None) -> str:
    if not raw_query or not raw_query.strip():
        raise ValueError("raw query must be non-empty")
    tpl = template or load_template()
    sections = [tpl["preamble"]]
    knowledge = [collapse(it.text) for it in context.items(STATIC)]
    prior = [it.text for it in context.items(HM)]
    reasoning = [it.text for it in sorted(context.items(COT), key=lambda it: (it.timestamp, it.origin_id))]
    for header, lines in (
        (tpl["knowledge_header"], knowledge),
        (tpl["prior_turns_header"], prior),
        (tpl["reasoning_header"], reasoning),
    ):
        if lines:
            sections.append("\n".join([header, *lines]))
    sections.append(tpl["question_prefix"] + collapse(raw_query))
    return "\n\n".join(sections) + "\n"


def load_attention_matrix(path: str | Path, dim: int) -> np.ndarray:
    """Read a row-major ``dim x dim`` matrix stored as whitespace-separated numbers."""
    raw = Path(path).read_text(encoding="utf-8").split()
    try:
        values = np.array([float(tok) for tok in raw], dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"{path}: attention matrix contains a non-numeric entry") from exc
    if values.size != dim * dim:
        raise ValueError(f"{path}: expected {dim * dim} entries for a {dim}x{dim} matrix, found {values.size}")
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{path}: attention matrix has non-finite entries")
    return values.reshape(dim, dim)
