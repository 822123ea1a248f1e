"""Text embedding and similarity primitives.

The native embedder is a hashed bag-of-tokens model: each token is mapped to a
bucket by ``blake2b(token, digest_size=8) mod dim`` (big-endian), bucket values
hold raw term counts and the result is L2-normalised. No corpus statistics are
used, so a text always maps to the same vector no matter what else has been
indexed.
"""

from __future__ import annotations

import hashlib
import math
import os
import re
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
import requests

EMBED_TOKEN_ENV = "DHRAG_EMBED_TOKEN"

_TOKEN_RE = re.compile(r"[^\W_]+")

# Prefix for the whole-string fallback bucket; tokens are alphanumeric so this never collides.
_FALLBACK_PREFIX = "\x00"


class EmbeddingError(RuntimeError):
    """Raised when an external embedder fails or replies with something unusable."""

    def __init__(self, message: str, status: int | None = None, endpoint: str | None = None):
        super().__init__(message)
        self.status = status
        self.endpoint = endpoint


def tokenize(text: str) -> list[str]:
    """Lowercase and split on every non-alphanumeric character (Unicode aware)."""
    return _TOKEN_RE.findall(text.lower())


def token_count(text: str) -> int:
    return len(tokenize(text))


def hash_bucket(token: str, dim: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % dim


class Embedder(Protocol):
    kind: str
    dim: int

    def embed(self, text: str) -> np.ndarray: ...

    def embed_many(self, texts: Sequence[str]) -> list[np.ndarray]: ...


def _frozen(vec: np.ndarray) -> np.ndarray:
    vec.setflags(write=False)
    return vec


@dataclass(frozen=True)
class HashingEmbedder:
    """Deterministic hashed term-frequency embedder."""

    dim: int = 512
    normalize: bool = True
    kind: str = field(default="native-hashed-tfidf", init=False)

    def __post_init__(self) -> None:
        if self.dim <= 0:
            raise ValueError(f"dim must be positive, got {self.dim}")

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        tokens = tokenize(text)
        if tokens:
            for tok in tokens:
                vec[hash_bucket(tok, self.dim)] += 1.0
        else:
            # empty or punctuation-only text: one-hot on the whole string
            vec[hash_bucket(_FALLBACK_PREFIX + text, self.dim)] = 1.0
        if self.normalize:
            vec /= np.linalg.norm(vec)
        return _frozen(vec)

    def embed_many(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self.embed(t) for t in texts]

    def describe(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "normalize": self.normalize}


@dataclass(frozen=True)
class HttpEmbedder:
    """Client for an embeddings endpoint speaking ``{"input": [...], "model": ...}``."""

    endpoint: str
    model: str
    dim: int
    token: str | None = None
    timeout: float = 30.0
    normalize: bool = True
    kind: str = field(default="external-http", init=False)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        token = self.token or os.environ.get(EMBED_TOKEN_ENV)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def embed_many(self, texts: Sequence[str]) -> list[np.ndarray]:
        if not texts:
            return []
        try:
            resp = requests.post(
                self.endpoint,
                json={"input": list(texts), "model": self.model},
                headers=self._headers(),
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise EmbeddingError(f"embedding request failed: {exc}", endpoint=self.endpoint) from exc
        if resp.status_code != 200:
            raise EmbeddingError(
                f"embedding endpoint returned HTTP {resp.status_code}",
                status=resp.status_code,
                endpoint=self.endpoint,
            )
        try:
            data = resp.json()["data"]
            rows = [np.asarray(item["embedding"], dtype=np.float64) for item in data]
        except (ValueError, KeyError, TypeError) as exc:
            raise EmbeddingError("malformed embedding reply", status=resp.status_code, endpoint=self.endpoint) from exc
        if len(rows) != len(texts):
            raise EmbeddingError(
                f"expected {len(texts)} embeddings, got {len(rows)}", status=resp.status_code, endpoint=self.endpoint
            )
        out = []
        for row in rows:
            if row.shape != (self.dim,) or not np.all(np.isfinite(row)):
                raise EmbeddingError("embedding has wrong shape or non-finite values", status=resp.status_code, endpoint=self.endpoint)
            norm = np.linalg.norm(row)
            if norm == 0.0:
                raise EmbeddingError("endpoint returned a zero vector", status=resp.status_code, endpoint=self.endpoint)
            if self.normalize:
                row = row / norm
            out.append(_frozen(row))
        return out

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]

    def describe(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "normalize": self.normalize, "endpoint": self.endpoint, "model": self.model}


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between ``a`` and ``b``, clipped to [-1, 1].

    Raises ValueError on a dimension mismatch or a zero vector.
    """
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    value = float(np.dot(a, b)) / (na * nb)
    return min(1.0, max(-1.0, value))


def rank_score(score: float) -> float:
    """Score used for ordering: mathematically equal cosines can differ in the last
    bits, so anything within 1e-12 counts as a tie (and falls to the lowest id)."""
    return round(score, 12)


def softmax_weights(scores: Sequence[float], temperature: float = 1.0) -> list[float]:
    if len(scores) == 0:
        raise ValueError("softmax of an empty score list")
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not all(math.isfinite(s) for s in scores):
        raise ValueError("scores must be finite")
    top = max(scores)
    exps = [math.exp((s - top) / temperature) for s in scores]
    total = math.fsum(exps)
    return [e / total for e in exps]
