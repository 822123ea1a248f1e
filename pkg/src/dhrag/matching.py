"""Organisation of the history store: clusters, summary nodes and chains.

Three structures are maintained over the stored triples:

* clusters, built online with the leader algorithm: a triple joins the cluster
  whose centroid is most similar if that similarity reaches ``tau_cluster``,
  otherwise it founds a new cluster;
* summary nodes inside each cluster, built by the same greedy rule one level
  down with threshold ``(1 + tau_cluster) / 2`` and at most ``branching_m``
  groups; each group is summarised by its medoid query;
* chains, one active per session, extended while the new query stays within
  ``theta_chain`` of the chain's last query.

Every argmax breaks ties towards the lowest id.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np

from .embedding import cosine_similarity, rank_score
from .vectors import decode_vector, encode_vector

if TYPE_CHECKING:
    from .history import HistoryConfig, Triple


class InvariantError(AssertionError):
    """A structural invariant of the history store or its indices is broken."""


HM = "HM"
COT = "CoT"


def mean_direction(vector_sum: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vector_sum))
    if norm == 0.0:
        # members cancel out exactly; use the first member's direction
        return fallback / float(np.linalg.norm(fallback))
    return vector_sum / norm


@dataclass
class SummaryNode:
    id: int
    medoid_triple_id: int
    centroid: np.ndarray = field(repr=False)
    leaf_ids: list[int] = field(default_factory=list)


@dataclass
class Cluster:
    id: int
    member_ids: list[int]
    vector_sum: np.ndarray = field(repr=False)
    centroid: np.ndarray = field(repr=False)
    summaries: list[SummaryNode] | None = field(default=None, repr=False)


@dataclass
class Chain:
    id: int
    session_id: str
    triple_ids: list[int]
    tail_vector: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class MatchResult:
    triple_id: int
    score: float
    source: str
    cluster_id: int | None = None
    summary_id: int | None = None
    chain_id: int | None = None
    passage: str | None = None
    passage_score: float | None = None

    @property
    def path(self) -> tuple[int, int] | int:
        if self.source == HM:
            return (self.cluster_id, self.summary_id)
        return self.chain_id

    def to_dict(self) -> dict:
        return {
            "triple_id": self.triple_id,
            "score": self.score,
            "source": self.source,
            "cluster_id": self.cluster_id,
            "summary_id": self.summary_id,
            "chain_id": self.chain_id,
            "passage": self.passage,
            "passage_score": self.passage_score,
        }


@dataclass
class ClusterReport:
    assigned: int = 0
    removed: int = 0
    moved: int = 0
    clusters_dropped: int = 0
    full_rebuild: bool = False

    def is_zero(self) -> bool:
        return not (self.assigned or self.removed or self.moved or self.clusters_dropped or self.full_rebuild)

    def to_dict(self) -> dict:
        return {
            "assigned": self.assigned,
            "removed": self.removed,
            "moved": self.moved,
            "clusters_dropped": self.clusters_dropped,
            "full_rebuild": self.full_rebuild,
        }


def _argmax_first(scores: Sequence[float]) -> int:
    best = 0
    for i in range(1, len(scores)):
        if rank_score(scores[i]) > rank_score(scores[best]):
            best = i
    return best


def build_summaries(
    member_ids: Sequence[int],
    vectors: Mapping[int, np.ndarray],
    tau_summary: float,
    branching_m: int | None,
) -> list[SummaryNode]:
    """Group cluster members greedily (ascending id) and pick each group's medoid."""
    groups: list[list[int]] = []
    sums: list[np.ndarray] = []
    centroids: list[np.ndarray] = []
    for tid in sorted(member_ids):
        vec = vectors[tid]
        if groups:
            sims = [cosine_similarity(vec, c) for c in centroids]
            best = _argmax_first(sims)
            full = branching_m is not None and len(groups) >= branching_m
            if sims[best] >= tau_summary or full:
                groups[best].append(tid)
                sums[best] = sums[best] + vec
                centroids[best] = mean_direction(sums[best], vectors[groups[best][0]])
                continue
        groups.append([tid])
        sums.append(np.array(vec, dtype=np.float64))
        centroids.append(mean_direction(sums[-1], vec))

    nodes = []
    for gid, (ids, centroid) in enumerate(zip(groups, centroids)):
        rows = np.stack([vectors[t] for t in ids])
        rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
        # medoid: largest total cosine to the rest of the group
        centrality = rows @ rows.sum(axis=0)
        medoid = ids[_argmax_first(centrality.tolist())]
        nodes.append(SummaryNode(gid, medoid, centroid, list(ids)))
    return nodes


def best_passage(query_vec: np.ndarray, triple: "Triple") -> tuple[str | None, float | None]:
    if not triple.passages:
        return None, None
    sims = [cosine_similarity(query_vec, pv) for pv in triple.passage_vectors]
    i = _argmax_first(sims)
    return triple.passages[i], sims[i]


def chain_similarity(query_vec: np.ndarray, member_vectors: Sequence[np.ndarray], tail: np.ndarray, mode: str) -> float:
    if mode == "tail":
        return cosine_similarity(query_vec, tail)
    sims = [cosine_similarity(query_vec, v) for v in member_vectors]
    if mode == "mean":
        return sum(sims) / len(sims)
    return max(sims)


class MatchingIndex:
    """Cluster tree and chain index over a history store's triples.

    The index reads triples through the ``triples`` mapping it is given, which
    is the owning store's live dict.
    """

    def __init__(self, config: "HistoryConfig", triples: Mapping[int, "Triple"]):
        self.config = config
        self._triples = triples
        self.clusters: dict[int, Cluster] = {}
        self.chains: dict[int, Chain] = {}
        self.active_chain: dict[str, int] = {}
        self.next_cluster_id = 0
        self.next_chain_id = 0
        self.inserts_since_full = 0
        self._pending = ClusterReport()

    @property
    def tau_summary(self) -> float:
        return (1.0 + self.config.tau_cluster) / 2.0

    # insertion hooks

    def add(self, triple: "Triple") -> None:
        self.assign_cluster(triple)
        self.extend_chain(triple.session_id, triple)
        self.inserts_since_full += 1
        self._pending.assigned += 1

    def assign_cluster(self, triple: "Triple") -> int:
        vec = triple.query_vector
        if self.clusters:
            ordered = sorted(self.clusters)
            sims = [cosine_similarity(vec, self.clusters[cid].centroid) for cid in ordered]
            best = _argmax_first(sims)
            if sims[best] >= self.config.tau_cluster:
                cluster = self.clusters[ordered[best]]
                cluster.member_ids.append(triple.id)
                cluster.member_ids.sort()
                cluster.vector_sum = cluster.vector_sum + vec
                cluster.centroid = mean_direction(cluster.vector_sum, self._triples[cluster.member_ids[0]].query_vector)
                cluster.summaries = None
                triple.cluster_id = cluster.id
                return cluster.id
        cid = self.next_cluster_id
        self.next_cluster_id += 1
        vsum = np.array(vec, dtype=np.float64)
        self.clusters[cid] = Cluster(cid, [triple.id], vsum, mean_direction(vsum, vec))
        triple.cluster_id = cid
        return cid

    def extend_chain(self, session_id: str, triple: "Triple") -> int:
        if triple.session_id != session_id:
            raise ValueError(f"triple {triple.id} belongs to session {triple.session_id!r}, not {session_id!r}")
        cid = self.active_chain.get(session_id)
        if cid is not None:
            chain = self.chains[cid]
            if cosine_similarity(triple.query_vector, chain.tail_vector) >= self.config.theta_chain:
                chain.triple_ids.append(triple.id)
                chain.tail_vector = triple.query_vector
                triple.chain_id = cid
                return cid
        cid = self.next_chain_id
        self.next_chain_id += 1
        self.chains[cid] = Chain(cid, session_id, [triple.id], triple.query_vector)
        self.active_chain[session_id] = cid
        triple.chain_id = cid
        return cid

    # removal

    def remove(self, removed: Iterable["Triple"]) -> None:
        """Drop evicted triples. They must already be gone from the store's mapping."""
        touched_clusters: set[int] = set()
        touched_chains: set[int] = set()
        for triple in removed:
            self._pending.removed += 1
            cluster = self.clusters.get(triple.cluster_id)
            if cluster is not None and triple.id in cluster.member_ids:
                cluster.member_ids.remove(triple.id)
                touched_clusters.add(cluster.id)
            chain = self.chains.get(triple.chain_id)
            if chain is not None and triple.id in chain.triple_ids:
                chain.triple_ids.remove(triple.id)
                touched_chains.add(chain.id)
        # refresh only once every removed id is gone from every member list
        for cid in sorted(touched_clusters):
            cluster = self.clusters[cid]
            if not cluster.member_ids:
                del self.clusters[cid]
                self._pending.clusters_dropped += 1
            else:
                self._refresh_centroid(cluster)
        for cid in sorted(touched_chains):
            chain = self.chains[cid]
            if not chain.triple_ids:
                del self.chains[cid]
                if self.active_chain.get(chain.session_id) == cid:
                    del self.active_chain[chain.session_id]
            else:
                chain.tail_vector = self._triples[chain.triple_ids[-1]].query_vector

    def _refresh_centroid(self, cluster: Cluster) -> None:
        rows = [self._triples[t].query_vector for t in cluster.member_ids]
        cluster.vector_sum = np.sum(rows, axis=0)
        cluster.centroid = mean_direction(cluster.vector_sum, rows[0])
        cluster.summaries = None

    # summaries

    def summaries(self, cluster: Cluster) -> list[SummaryNode]:
        if cluster.summaries is None:
            cluster.summaries = self.rebuild_summaries(cluster)
        return cluster.summaries

    def rebuild_summaries(self, cluster: Cluster, branching_m: int | None = None) -> list[SummaryNode]:
        if not cluster.member_ids:
            raise ValueError("cannot summarise an empty cluster")
        m = self.config.branching_m if branching_m is None else branching_m
        vectors = {t: self._triples[t].query_vector for t in cluster.member_ids}
        return build_summaries(cluster.member_ids, vectors, self.tau_summary, m)

    # matching

    def hierarchical_match(self, query_vec: np.ndarray, top_m: int) -> list[MatchResult]:
        if top_m < 1:
            raise ValueError("top_m must be >= 1")
        if not self.clusters:
            return []
        beam = self.config.beam_width
        cluster_scores = sorted(
            ((cosine_similarity(query_vec, c.centroid), c.id) for c in self.clusters.values()),
            key=lambda p: (-rank_score(p[0]), p[1]),
        )[:beam]
        leaves: list[tuple[int, int, int]] = []
        for _, cid in cluster_scores:
            nodes = self.summaries(self.clusters[cid])
            node_scores = sorted(
                ((cosine_similarity(query_vec, s.centroid), s.id) for s in nodes),
                key=lambda p: (-rank_score(p[0]), p[1]),
            )[:beam]
            for _, sid in node_scores:
                leaves.extend((tid, cid, sid) for tid in nodes[sid].leaf_ids)
        ranked = sorted(
            ((cosine_similarity(query_vec, self._triples[tid].query_vector), tid, cid, sid) for tid, cid, sid in leaves),
            key=lambda r: (-rank_score(r[0]), r[1]),
        )[:top_m]
        results = []
        for score, tid, cid, sid in ranked:
            passage, pscore = best_passage(query_vec, self._triples[tid])
            results.append(MatchResult(tid, score, HM, cluster_id=cid, summary_id=sid, passage=passage, passage_score=pscore))
        return results

    def chain_match(self, query_vec: np.ndarray, top_k: int) -> list[MatchResult]:
        if top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not self.chains:
            return []
        mode = self.config.chain_score
        best_score, best_id = None, None
        for cid in sorted(self.chains):
            chain = self.chains[cid]
            vecs = [self._triples[t].query_vector for t in chain.triple_ids]
            score = chain_similarity(query_vec, vecs, chain.tail_vector, mode)
            if best_score is None or rank_score(score) > rank_score(best_score):
                best_score, best_id = score, cid
        chain = self.chains[best_id]
        members = sorted(
            ((cosine_similarity(query_vec, self._triples[t].query_vector), t) for t in chain.triple_ids),
            key=lambda p: (-rank_score(p[0]), p[1]),
        )[:top_k]
        members.sort(key=lambda p: self._triples[p[1]].timestamp)
        results = []
        for score, tid in members:
            passage, pscore = best_passage(query_vec, self._triples[tid])
            results.append(MatchResult(tid, score, COT, chain_id=best_id, passage=passage, passage_score=pscore))
        return results

    # maintenance

    def update_clusters(self, full: bool | None = None) -> ClusterReport:
        """Report changes since the last call; run a full recluster when due.

        ``full=None`` rebuilds once ``recluster_period`` insertions have
        accumulated, ``True`` forces it, ``False`` suppresses it.
        """
        report = self._pending
        self._pending = ClusterReport()
        if full is None:
            full = self.inserts_since_full >= self.config.recluster_period
        if full:
            report.moved = self._full_rebuild()
            report.full_rebuild = True
            self.inserts_since_full = 0
        return report

    def _full_rebuild(self) -> int:
        before = {}
        for cluster in self.clusters.values():
            members = frozenset(cluster.member_ids)
            for tid in cluster.member_ids:
                before[tid] = members
        self.clusters = {}
        self.next_cluster_id = 0
        for tid in sorted(self._triples):
            self.assign_cluster(self._triples[tid])
        moved = 0
        for cluster in self.clusters.values():
            members = frozenset(cluster.member_ids)
            moved += sum(1 for tid in cluster.member_ids if before.get(tid) != members)
        return moved

    def partition(self) -> list[frozenset[int]]:
        return sorted((frozenset(c.member_ids) for c in self.clusters.values()), key=min)

    def check_invariants(self) -> None:
        stored = set(self._triples)
        seen: dict[int, int] = {}
        for cluster in self.clusters.values():
            if not cluster.member_ids:
                raise InvariantError(f"cluster {cluster.id} is empty")
            for tid in cluster.member_ids:
                if tid not in stored:
                    raise InvariantError(f"cluster {cluster.id} references deleted triple {tid}")
                if tid in seen:
                    raise InvariantError(f"triple {tid} is in clusters {seen[tid]} and {cluster.id}")
                if self._triples[tid].cluster_id != cluster.id:
                    raise InvariantError(f"triple {tid} records cluster {self._triples[tid].cluster_id}, index says {cluster.id}")
                seen[tid] = cluster.id
            rows = [self._triples[t].query_vector for t in cluster.member_ids]
            expected = mean_direction(np.sum(rows, axis=0), rows[0])
            if not np.allclose(cluster.centroid, expected, rtol=0.0, atol=1e-6):
                raise InvariantError(f"cluster {cluster.id} centroid is not the mean of its members")
            leaves = [t for node in self.summaries(cluster) for t in node.leaf_ids]
            if sorted(leaves) != sorted(cluster.member_ids):
                raise InvariantError(f"summary leaves of cluster {cluster.id} do not partition its members")
        if set(seen) != stored:
            missing = sorted(stored - set(seen))
            raise InvariantError(f"triples not in any cluster: {missing}")
        in_chain: dict[int, int] = {}
        for chain in self.chains.values():
            if not chain.triple_ids:
                raise InvariantError(f"chain {chain.id} is empty")
            stamps = []
            for tid in chain.triple_ids:
                if tid not in stored:
                    raise InvariantError(f"chain {chain.id} references deleted triple {tid}")
                if tid in in_chain:
                    raise InvariantError(f"triple {tid} is in chains {in_chain[tid]} and {chain.id}")
                if self._triples[tid].chain_id != chain.id:
                    raise InvariantError(f"triple {tid} records chain {self._triples[tid].chain_id}, index says {chain.id}")
                in_chain[tid] = chain.id
                stamps.append(self._triples[tid].timestamp)
            if any(a >= b for a, b in zip(stamps, stamps[1:])):
                raise InvariantError(f"chain {chain.id} is not in strictly increasing timestamp order")
        for session, cid in self.active_chain.items():
            if cid not in self.chains:
                raise InvariantError(f"active chain {cid} of session {session!r} does not exist")

    # serialization

    def clusters_to_list(self) -> list[dict]:
        out = []
        for cid in sorted(self.clusters):
            cluster = self.clusters[cid]
            out.append(
                {
                    "id": cid,
                    "member_ids": list(cluster.member_ids),
                    "vector_sum": encode_vector(cluster.vector_sum),
                    "summaries": [
                        {"id": s.id, "medoid_triple_id": s.medoid_triple_id, "leaf_ids": list(s.leaf_ids)}
                        for s in self.summaries(cluster)
                    ],
                }
            )
        return out

    def chains_to_list(self) -> list[dict]:
        active = set(self.active_chain.values())
        return [
            {
                "id": cid,
                "session_id": self.chains[cid].session_id,
                "triple_ids": list(self.chains[cid].triple_ids),
                "active": cid in active,
            }
            for cid in sorted(self.chains)
        ]

    def load_lists(self, clusters: list[dict], chains: list[dict]) -> None:
        for entry in clusters:
            members = list(entry["member_ids"])
            if not members:
                raise InvariantError(f"cluster {entry['id']} is empty")
            for tid in members:
                if tid not in self._triples:
                    raise InvariantError(f"cluster {entry['id']} references deleted triple {tid}")
            vsum = decode_vector(entry["vector_sum"])
            cluster = Cluster(entry["id"], members, vsum, mean_direction(vsum, self._triples[members[0]].query_vector))
            self.clusters[cluster.id] = cluster
            stored = [(s["medoid_triple_id"], s["leaf_ids"]) for s in entry.get("summaries", [])]
            rebuilt = [(s.medoid_triple_id, s.leaf_ids) for s in self.summaries(cluster)]
            if stored and stored != rebuilt:
                raise InvariantError(f"summary nodes of cluster {cluster.id} do not match its members")
        for entry in chains:
            ids = list(entry["triple_ids"])
            if not ids:
                raise InvariantError(f"chain {entry['id']} is empty")
            for tid in ids:
                if tid not in self._triples:
                    raise InvariantError(f"chain {entry['id']} references deleted triple {tid}")
            chain = Chain(entry["id"], entry["session_id"], ids, self._triples[ids[-1]].query_vector)
            self.chains[chain.id] = chain
            if entry.get("active"):
                self.active_chain[chain.session_id] = chain.id
