"""Static document store with exhaustive cosine top-k retrieval."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .embedding import Embedder, HashingEmbedder, cosine_similarity, rank_score
from .vectors import decode_vector, encode_vector


class CorpusError(ValueError):
    """Problem with a corpus or KB file; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
        self.line = line
        self.path = path


class FrozenError(RuntimeError):
    pass


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    vector: np.ndarray = field(repr=False, compare=False)
    metadata: Mapping[str, str] = field(default_factory=dict)


class KnowledgeBase:
    """Documents plus their embeddings. Mutable until :meth:`freeze` is called."""

    def __init__(self, embedder: Embedder | None = None):
        self.embedder = embedder if embedder is not None else HashingEmbedder()
        self._docs: dict[str, Document] = {}
        self._frozen = False

    def __len__(self) -> int:
        return len(self._docs)

    def __iter__(self):
        return iter(self._docs.values())

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._docs

    def get(self, doc_id: str) -> Document:
        return self._docs[doc_id]

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "KnowledgeBase":
        self._frozen = True
        return self

    def ingest(self, records: Iterable[tuple[str, str, Mapping[str, str] | None]]) -> int:
        """Embed and add ``(id, text, metadata)`` records. All or nothing."""
        if self._frozen:
            raise FrozenError("knowledge base is frozen")
        records = list(records)
        seen: set[str] = set()
        for doc_id, text, _ in records:
            if doc_id in self._docs or doc_id in seen:
                raise ValueError(f"duplicate document id: {doc_id!r}")
            if not text or not text.strip():
                raise ValueError(f"document {doc_id!r} has empty text")
            seen.add(doc_id)
        vectors = self.embedder.embed_many([text for _, text, _ in records])
        for (doc_id, text, meta), vec in zip(records, vectors):
            self._docs[doc_id] = Document(doc_id, text, vec, dict(meta or {}))
        return len(records)

    def retrieve(self, query: str, k: int = 5) -> list[tuple[Document, float]]:
        """Top-``k`` documents by cosine score, ties broken by ascending id."""
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        if not self._docs:
            return []
        qvec = self.embedder.embed(query)
        scored = [(doc, cosine_similarity(qvec, doc.vector)) for doc in self._docs.values()]
        scored.sort(key=lambda pair: (-rank_score(pair[1]), pair[0].id))
        return scored[:k]

    # serialization

    def to_dict(self) -> dict:
        describe = getattr(self.embedder, "describe", None)
        return {
            "embedder": describe() if describe else {"kind": self.embedder.kind, "dim": self.embedder.dim},
            "documents": [
                {"id": d.id, "text": d.text, "metadata": dict(d.metadata), "vector": encode_vector(d.vector)}
                for d in sorted(self._docs.values(), key=lambda d: d.id)
            ],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, data: dict, embedder: Embedder | None = None) -> "KnowledgeBase":
        if embedder is None:
            info = data.get("embedder", {})
            if info.get("kind", "native-hashed-tfidf") != "native-hashed-tfidf":
                raise CorpusError("KB was built with an external embedder; pass one explicitly")
            embedder = HashingEmbedder(dim=int(info.get("dim", 512)), normalize=bool(info.get("normalize", True)))
        kb = cls(embedder)
        for doc in data.get("documents", []):
            vec = decode_vector(doc["vector"])
            if vec.shape != (embedder.dim,):
                raise CorpusError(f"document {doc['id']!r} has a vector of the wrong dimension")
            kb._docs[doc["id"]] = Document(doc["id"], doc["text"], vec, dict(doc.get("metadata", {})))
        return kb.freeze()

    @classmethod
    def load(cls, path: str | Path, embedder: Embedder | None = None) -> "KnowledgeBase":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CorpusError(f"invalid KB file: {exc.msg}", line=exc.lineno, path=str(path)) from exc
        return cls.from_dict(data, embedder)


def load_corpus(path: str | Path) -> list[tuple[str, str, dict[str, str]]]:
    """Parse a JSON Lines corpus of ``{"id", "text", "metadata"}`` objects."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"invalid JSON ({exc.msg})", line=lineno, path=str(path)) from exc
            if not isinstance(obj, dict) or not isinstance(obj.get("id"), str) or not isinstance(obj.get("text"), str):
                raise CorpusError('expected an object with string "id" and "text"', line=lineno, path=str(path))
            meta = obj.get("metadata") or {}
            if not isinstance(meta, dict):
                raise CorpusError('"metadata" must be an object', line=lineno, path=str(path))
            records.append((obj["id"], obj["text"], {str(k): str(v) for k, v in meta.items()}))
    return records
