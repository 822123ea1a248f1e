"""Capacity-bounded store of past (query, passages, response) interactions.

Each stored triple carries a turn-clock timestamp. When the store grows past
``capacity`` the triples with the lowest comprehensive weight are evicted,
where the weight blends relevance to the current query with an exponential
recency decay over turns::

    weight = alpha * (cos(q_i, q_t) + 1) / 2 + (1 - alpha) * exp(-decay_lambda * (now - t_i))
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .embedding import Embedder, cosine_similarity
from .matching import ClusterReport, InvariantError, MatchingIndex
from .vectors import decode_vector, encode_vector

CHAIN_SCORE_MODES = ("max", "mean", "tail")


class ConfigError(ValueError):
    """Invalid configuration. ``violations`` names every offending field."""

    def __init__(self, violations: Sequence[str]):
        super().__init__("invalid configuration: " + "; ".join(violations))
        self.violations = list(violations)


def _is_real(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


@dataclass
class HistoryConfig:
    capacity: int = 200
    alpha: float = 0.5
    decay_lambda: float = 0.1
    tau_cluster: float = 0.35
    theta_chain: float = 0.25
    recluster_period: int = 50
    branching_m: int | None = 4
    chain_score: str = "max"
    beam_width: int = 1

    def violations(self) -> list[str]:
        out = []
        for name in ("alpha", "decay_lambda", "tau_cluster", "theta_chain"):
            if not _is_real(getattr(self, name)):
                out.append(f"{name} must be a real number (got {getattr(self, name)!r})")
        if out:
            return out
        if not isinstance(self.capacity, int) or self.capacity < 1:
            out.append(f"capacity must be a positive integer (got {self.capacity!r})")
        if not 0.0 <= self.alpha <= 1.0:
            out.append(f"alpha must be in [0, 1] (got {self.alpha!r})")
        if not (self.decay_lambda >= 0.0 and math.isfinite(self.decay_lambda)):
            out.append(f"decay_lambda must be non-negative (got {self.decay_lambda!r})")
        # -1 is allowed so the thresholds can be switched off entirely
        if not -1.0 <= self.tau_cluster <= 1.0:
            out.append(f"tau_cluster must be in [-1, 1] (got {self.tau_cluster!r})")
        if not -1.0 <= self.theta_chain <= 1.0:
            out.append(f"theta_chain must be in [-1, 1] (got {self.theta_chain!r})")
        if not isinstance(self.recluster_period, int) or self.recluster_period < 1:
            out.append(f"recluster_period must be a positive integer (got {self.recluster_period!r})")
        if self.branching_m is not None and (not isinstance(self.branching_m, int) or self.branching_m < 1):
            out.append(f"branching_m must be a positive integer or null (got {self.branching_m!r})")
        if self.chain_score not in CHAIN_SCORE_MODES:
            out.append(f"chain_score must be one of {', '.join(CHAIN_SCORE_MODES)} (got {self.chain_score!r})")
        if not isinstance(self.beam_width, int) or self.beam_width < 1:
            out.append(f"beam_width must be a positive integer (got {self.beam_width!r})")
        return out

    def validate(self) -> "HistoryConfig":
        problems = self.violations()
        if problems:
            raise ConfigError(problems)
        return self

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "HistoryConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown history setting {name!r}" for name in unknown])
        return cls(**dict(data))


@dataclass
class Triple:
    id: int
    query: str
    passages: list[str]
    response: str
    timestamp: int
    query_vector: np.ndarray = field(repr=False)
    passage_vectors: list[np.ndarray] = field(default_factory=list, repr=False)
    session_id: str = "default"
    cluster_id: int | None = None
    chain_id: int | None = None
    metadata: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "query": self.query,
            "passages": list(self.passages),
            "response": self.response,
            "timestamp": self.timestamp,
            "query_vector": encode_vector(self.query_vector),
            "passage_vectors": [encode_vector(v) for v in self.passage_vectors],
            "session_id": self.session_id,
            "cluster_id": self.cluster_id,
            "chain_id": self.chain_id,
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Triple":
        return cls(
            id=data["id"],
            query=data["query"],
            passages=list(data["passages"]),
            response=data["response"],
            timestamp=data["timestamp"],
            query_vector=decode_vector(data["query_vector"]),
            passage_vectors=[decode_vector(v) for v in data["passage_vectors"]],
            session_id=data["session_id"],
            cluster_id=data.get("cluster_id"),
            chain_id=data.get("chain_id"),
            metadata=dict(data.get("metadata", {})),
        )


def recency_score(t_i: int, now: int, decay_lambda: float) -> float:
    if now < t_i:
        raise ValueError(f"clock regression: now={now} is before timestamp {t_i}")
    return math.exp(-decay_lambda * (now - t_i))


def relevance_score(q_i_vec: np.ndarray, q_t_vec: np.ndarray) -> float:
    """Cosine similarity rescaled from [-1, 1] to [0, 1]."""
    return (cosine_similarity(q_i_vec, q_t_vec) + 1.0) / 2.0


def comprehensive_weight(triple: Triple, current_query_vec: np.ndarray, now: int, config: HistoryConfig) -> float:
    relevance = relevance_score(triple.query_vector, current_query_vec)
    recency = recency_score(triple.timestamp, now, config.decay_lambda)
    return config.alpha * relevance + (1.0 - config.alpha) * recency


class HistoryStore:
    """Triples of one session plus the matching index built over them."""

    def __init__(self, config: HistoryConfig | None = None):
        self.config = (config or HistoryConfig()).validate()
        self.triples: dict[int, Triple] = {}
        self.turn_clock = 0
        self.next_id = 0
        self.index = MatchingIndex(self.config, self.triples)

    def __len__(self) -> int:
        return len(self.triples)

    def make_triple(
        self,
        query: str,
        passages: Sequence[str],
        response: str,
        embedder: Embedder,
        session_id: str = "default",
        query_vector: np.ndarray | None = None,
        passage_vectors: Sequence[np.ndarray] | None = None,
    ) -> Triple:
        """Build (but do not insert) the next triple, stamped with the current clock."""
        if query_vector is None:
            query_vector = embedder.embed(query)
        if passage_vectors is None:
            passage_vectors = embedder.embed_many(list(passages))
        return Triple(
            id=self.next_id,
            query=query,
            passages=list(passages),
            response=response,
            timestamp=self.turn_clock,
            query_vector=query_vector,
            passage_vectors=list(passage_vectors),
            session_id=session_id,
        )

    def insert(self, triple: Triple) -> int:
        if triple.timestamp != self.turn_clock:
            raise ValueError(f"triple timestamp {triple.timestamp} != turn clock {self.turn_clock}")
        if triple.id < self.next_id or triple.id in self.triples:
            raise ValueError(f"triple id {triple.id} is not fresh (next id {self.next_id})")
        self.triples[triple.id] = triple
        self.next_id = triple.id + 1
        self.turn_clock += 1
        self.index.add(triple)
        return triple.id

    def weights(self, current_query_vec: np.ndarray, now: int) -> dict[int, float]:
        return {tid: comprehensive_weight(t, current_query_vec, now, self.config) for tid, t in self.triples.items()}

    def evict_to_capacity(self, current_query_vec: np.ndarray, now: int) -> list[int]:
        """Keep the ``capacity`` heaviest triples; return the evicted ids in ascending order.

        Ties keep the newer timestamp, then the lower id.
        """
        excess = len(self.triples) - self.config.capacity
        if excess <= 0:
            return []
        weights = self.weights(current_query_vec, now)
        ranked = sorted(self.triples.values(), key=lambda t: (-weights[t.id], -t.timestamp, t.id))
        doomed = ranked[self.config.capacity:]
        for triple in doomed:
            del self.triples[triple.id]
        self.index.remove(doomed)
        return sorted(t.id for t in doomed)

    def update_clusters(self, full: bool | None = None) -> ClusterReport:
        return self.index.update_clusters(full)

    def check_invariants(self) -> None:
        if len(self.triples) > self.config.capacity:
            raise InvariantError(f"store holds {len(self.triples)} triples, capacity is {self.config.capacity}")
        stamps = [self.triples[t].timestamp for t in sorted(self.triples)]
        if any(a >= b for a, b in zip(stamps, stamps[1:])):
            raise InvariantError("timestamps are not strictly increasing with id")
        if stamps and self.turn_clock < stamps[-1]:
            raise InvariantError(f"turn clock {self.turn_clock} is behind timestamp {stamps[-1]}")
        if self.triples and self.next_id <= max(self.triples):
            raise InvariantError("next id is not beyond every stored id")
        dims = {t.query_vector.shape for t in self.triples.values()}
        if len(dims) > 1:
            raise InvariantError("query vectors have inconsistent dimensions")
        for triple in self.triples.values():
            if not np.all(np.isfinite(triple.query_vector)):
                raise InvariantError(f"triple {triple.id} has a non-finite query vector")
            if len(triple.passage_vectors) != len(triple.passages):
                raise InvariantError(f"triple {triple.id} has {len(triple.passages)} passages but {len(triple.passage_vectors)} vectors")
        self.index.check_invariants()

    # snapshots

    def to_dict(self) -> dict:
        idx = self.index
        pending = idx._pending
        return {
            "config": asdict(self.config),
            "turn_clock": self.turn_clock,
            "counters": {
                "next_id": self.next_id,
                "next_cluster_id": idx.next_cluster_id,
                "next_chain_id": idx.next_chain_id,
                "inserts_since_full": idx.inserts_since_full,
                "pending": pending.to_dict(),
            },
            "triples": [self.triples[t].to_dict() for t in sorted(self.triples)],
            "clusters": idx.clusters_to_list(),
            "chains": idx.chains_to_list(),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "HistoryStore":
        for key in ("config", "turn_clock", "triples", "clusters", "chains"):
            if key not in data:
                raise InvariantError(f"snapshot is missing {key!r}")
        store = cls(HistoryConfig.from_dict(data["config"]))
        store.turn_clock = int(data["turn_clock"])
        for entry in data["triples"]:
            triple = Triple.from_dict(entry)
            store.triples[triple.id] = triple
        counters = data.get("counters", {})
        store.next_id = counters.get("next_id", max(store.triples, default=-1) + 1)
        idx = store.index
        idx.load_lists(data["clusters"], data["chains"])
        idx.next_cluster_id = counters.get("next_cluster_id", max(idx.clusters, default=-1) + 1)
        idx.next_chain_id = counters.get("next_chain_id", max(idx.chains, default=-1) + 1)
        idx.inserts_since_full = counters.get("inserts_since_full", 0)
        pending = counters.get("pending")
        if pending:
            idx._pending = ClusterReport(**pending)
        store.check_invariants()
        return store

    @classmethod
    def loads(cls, text: str) -> "HistoryStore":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvariantError(f"snapshot is not valid JSON: {exc.msg} (line {exc.lineno})") from exc
        if not isinstance(data, dict):
            raise InvariantError("snapshot must be a JSON object")
        try:
            return cls.from_dict(data)
        except (KeyError, TypeError) as exc:
            raise InvariantError(f"snapshot is malformed: {exc!r}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "HistoryStore":
        return cls.loads(Path(path).read_text(encoding="utf-8"))
