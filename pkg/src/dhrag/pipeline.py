"""Per-turn orchestration: retrieve, match history, integrate, generate, update."""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Mapping

import numpy as np

from .embedding import Embedder
from .generation import GenerationRequest, Generator, generate
from .history import ConfigError, HistoryConfig, HistoryStore
from .integration import (
    COT,
    HM,
    STATIC,
    IntegratedContext,
    RetrievedItem,
    attention_weights,
    collect_candidates,
    concatenate,
    integrate,
    reconstruct_query,
    render_turn,
)
from .knowledge_base import KnowledgeBase
from .matching import ClusterReport, MatchResult

ABLATIONS = ("dynamic", "integration", "cot", "hierarchical")


class SessionBusy(RuntimeError):
    """A second ``respond`` was started while one is still running on the session."""


@dataclass
class PipelineConfig:
    k_static: int = 5
    k_hm: int = 3
    k_cot: int = 3
    enable_dynamic: bool = True
    enable_integration: bool = True
    enable_cot: bool = True
    enable_hierarchical: bool = True
    budget_tokens: int = 1024
    mmr_lambda: float = 0.7
    temperature: float = 1.0
    max_tokens: int = 256
    generation_temperature: float = 0.0
    model_id: str = "mock"
    history: HistoryConfig = field(default_factory=HistoryConfig)

    def violations(self) -> list[str]:
        out = []
        for name in ("k_static", "k_hm", "k_cot", "budget_tokens", "max_tokens"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                out.append(f"{name} must be a positive integer (got {value!r})")
        for name in ("enable_dynamic", "enable_integration", "enable_cot", "enable_hierarchical"):
            if not isinstance(getattr(self, name), bool):
                out.append(f"{name} must be true or false")
        if not 0.0 <= self.mmr_lambda <= 1.0:
            out.append(f"mmr_lambda must be in [0, 1] (got {self.mmr_lambda!r})")
        if not self.temperature > 0.0:
            out.append(f"temperature must be positive (got {self.temperature!r})")
        if not self.generation_temperature >= 0.0:
            out.append(f"generation_temperature must be non-negative (got {self.generation_temperature!r})")
        dynamic_on = self.enable_dynamic and (self.enable_cot or self.enable_hierarchical)
        if self.k_static < 1 and not dynamic_on:
            out.append("at least one retrieval source must be enabled")
        out.extend(self.history.violations())
        return out

    def validate(self) -> "PipelineConfig":
        problems = self.violations()
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PipelineConfig":
        data = dict(data)
        history = data.pop("history", {}) or {}
        known = {f.name for f in fields(cls)} - {"history"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown pipeline setting {name!r}" for name in unknown])
        return cls(history=HistoryConfig.from_dict(history), **data)

    def ablated(self, flag: str) -> "PipelineConfig":
        """Copy with one module switched off (``dynamic``, ``integration``, ``cot`` or ``hierarchical``)."""
        if flag not in ABLATIONS:
            raise ValueError(f"unknown ablation {flag!r}; expected one of {', '.join(ABLATIONS)}")
        return replace(self, **{f"enable_{flag}": False})


@dataclass
class TurnTrace:
    session_id: str
    turn: int
    query: str
    static_hits: list[tuple[str, float]]
    hm_hits: list[MatchResult]
    cot_hits: list[MatchResult]
    candidates: list[RetrievedItem]
    candidate_weights: list[float]
    context: IntegratedContext
    prompt: str
    response: str = ""
    finish_reason: str = ""
    triple_id: int | None = None
    evicted: list[int] = field(default_factory=list)
    cluster_report: ClusterReport | None = None
    timings_ms: dict[str, float] = field(default_factory=dict)
    generation_latency_ms: int = 0
    generation_raw: dict | None = None

    def rerender(self) -> str:
        return reconstruct_query(self.query, self.context)

    def to_dict(self, include_timings: bool = False) -> dict:
        out = {
            "session_id": self.session_id,
            "turn": self.turn,
            "query": self.query,
            "static_hits": [[doc_id, score] for doc_id, score in self.static_hits],
            "hm_hits": [m.to_dict() for m in self.hm_hits],
            "cot_hits": [m.to_dict() for m in self.cot_hits],
            "candidates": [
                dict(item.to_dict(), weight=w) for item, w in zip(self.candidates, self.candidate_weights)
            ],
            "selected": [dict(item.to_dict(), weight=w) for item, w in self.context.selected],
            "token_budget_used": self.context.token_budget_used,
            "prompt": self.prompt,
            "response": self.response,
            "finish_reason": self.finish_reason,
            "triple_id": self.triple_id,
            "evicted": list(self.evicted),
            "cluster_report": self.cluster_report.to_dict() if self.cluster_report else None,
        }
        if include_timings:
            out["timings_ms"] = dict(self.timings_ms)
            out["generation_latency_ms"] = self.generation_latency_ms
            out["generation_raw"] = self.generation_raw
        return out

    def summary(self) -> str:
        lines = [f"[turn {self.turn}] static={len(self.static_hits)} hm={len(self.hm_hits)} cot={len(self.cot_hits)}"]
        for item, w in self.context.selected:
            lines.append(f"  {item.source:<6} w={w:.3f} {item.origin_id}")
        if self.evicted:
            lines.append(f"  evicted: {', '.join(map(str, self.evicted))}")
        return "\n".join(lines)


class Session:
    """One dialogue: a private history store over a shared, frozen knowledge base."""

    def __init__(
        self,
        config: PipelineConfig,
        kb: KnowledgeBase,
        generator: Generator,
        session_id: str = "default",
        *,
        history_embedder: Embedder | None = None,
        integration_embedder: Embedder | None = None,
        attention_matrix: np.ndarray | None = None,
        store: HistoryStore | None = None,
    ):
        self.config = config.validate()
        self.kb = kb
        self.generator = generator
        self.id = session_id
        self.history_embedder = history_embedder or kb.embedder
        self.integration_embedder = integration_embedder or self.history_embedder
        dim = self.integration_embedder.dim
        if attention_matrix is not None and attention_matrix.shape != (dim, dim):
            raise ValueError(f"attention matrix must be {dim}x{dim}, got {attention_matrix.shape}")
        self.attention_matrix = attention_matrix
        self.store = store if store is not None else HistoryStore(config.history)
        self._lock = threading.Lock()

    @property
    def turn_counter(self) -> int:
        return self.store.turn_clock

    def _item_vector(self, text: str) -> np.ndarray:
        return self.integration_embedder.embed(text)

    def _history_item(self, source: str, match: MatchResult) -> RetrievedItem:
        triple = self.store.triples[match.triple_id]
        text = render_turn(triple.query, triple.response, match.passage)
        return RetrievedItem(source, text, self._item_vector(text), match.score, f"h:{triple.id}", triple.timestamp)

    def prepare(self, user_query: str, dynamic: bool | None = None) -> tuple[TurnTrace, np.ndarray, list]:
        """Run every read-only stage of a turn and render the prompt."""
        cfg = self.config
        if dynamic is None:
            dynamic = cfg.enable_dynamic
        timings: dict[str, float] = {}

        t = time.perf_counter()
        static = self.kb.retrieve(user_query, cfg.k_static)
        timings["static_retrieval"] = (time.perf_counter() - t) * 1000

        t = time.perf_counter()
        qvec = self.history_embedder.embed(user_query)
        index = self.store.index
        hm = index.hierarchical_match(qvec, cfg.k_hm) if dynamic and cfg.enable_hierarchical else []
        timings["hierarchical_match"] = (time.perf_counter() - t) * 1000
        t = time.perf_counter()
        cot = index.chain_match(qvec, cfg.k_cot) if dynamic and cfg.enable_cot else []
        timings["chain_match"] = (time.perf_counter() - t) * 1000

        t = time.perf_counter()
        static_items = [
            RetrievedItem(STATIC, doc.text, self._item_vector(doc.text), score, f"kb:{doc.id}") for doc, score in static
        ]
        candidates = collect_candidates(
            static_items,
            [self._history_item(HM, m) for m in hm],
            [self._history_item(COT, m) for m in cot],
        )
        if not candidates:
            weights, context = [], IntegratedContext()
        elif cfg.enable_integration:
            iq = qvec if self.integration_embedder is self.history_embedder else self.integration_embedder.embed(user_query)
            weights = attention_weights(iq, candidates, self.attention_matrix, cfg.temperature)
            context = integrate(iq, candidates, weights, cfg.budget_tokens, cfg.mmr_lambda)
        else:
            context = concatenate(candidates, cfg.budget_tokens)
            weights = [1.0 / len(candidates)] * len(candidates)
        prompt = reconstruct_query(user_query, context)
        context.reconstructed_query = prompt
        timings["integration"] = (time.perf_counter() - t) * 1000

        trace = TurnTrace(
            session_id=self.id,
            turn=self.store.turn_clock,
            query=user_query,
            static_hits=[(doc.id, score) for doc, score in static],
            hm_hits=hm,
            cot_hits=cot,
            candidates=candidates,
            candidate_weights=weights,
            context=context,
            prompt=prompt,
            timings_ms=timings,
        )
        return trace, qvec, static

    def respond(self, user_query: str) -> tuple[str, TurnTrace]:
        if not user_query or not user_query.strip():
            raise ValueError("query must be non-empty")
        if not self._lock.acquire(blocking=False):
            raise SessionBusy(f"session {self.id!r} already has a turn in flight")
        try:
            return self._respond(user_query)
        finally:
            self._lock.release()

    def _respond(self, user_query: str) -> tuple[str, TurnTrace]:
        cfg = self.config
        trace, qvec, static = self.prepare(user_query)

        t = time.perf_counter()
        request = GenerationRequest(trace.prompt, cfg.max_tokens, cfg.generation_temperature, cfg.model_id)
        result = generate(self.generator, request)
        trace.timings_ms["generation"] = (time.perf_counter() - t) * 1000
        trace.response = result.text
        trace.finish_reason = result.finish_reason
        trace.generation_latency_ms = result.latency_ms
        trace.generation_raw = result.raw

        # nothing above touched the store; a generation error leaves the session as it was
        t = time.perf_counter()
        if self.history_embedder is self.kb.embedder:
            passage_vectors = [doc.vector for doc, _ in static]
        else:
            passage_vectors = None
        triple = self.store.make_triple(
            user_query,
            [doc.text for doc, _ in static],
            result.text,
            self.history_embedder,
            self.id,
            query_vector=qvec,
            passage_vectors=passage_vectors,
        )
        trace.triple_id = self.store.insert(triple)
        trace.evicted = self.store.evict_to_capacity(qvec, triple.timestamp)
        trace.cluster_report = self.store.update_clusters()
        trace.timings_ms["history_update"] = (time.perf_counter() - t) * 1000
        return result.text, trace


def new_session(
    config: PipelineConfig | None,
    kb: KnowledgeBase,
    generator: Generator,
    session_id: str = "default",
    **kwargs: Any,
) -> Session:
    return Session(config or PipelineConfig(), kb, generator, session_id, **kwargs)
