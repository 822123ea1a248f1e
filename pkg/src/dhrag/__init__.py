"""Retrieval-augmented generation for multi-turn dialogue.

Context for each turn comes from a frozen static knowledge base and from a
per-session history of earlier (query, passage, response) triples, organised
into clusters and reasoning chains.
"""

from __future__ import annotations

from .embedding import HashingEmbedder, HttpEmbedder, cosine_similarity, softmax_weights
from .evaluation import bleu, run_ablations, run_eval, token_f1
from .generation import ChatCompletionsClient, MockGenerator
from .history import HistoryConfig, HistoryStore, Triple
from .knowledge_base import KnowledgeBase, load_corpus
from .pipeline import PipelineConfig, Session, new_session

__version__ = "0.1.0"

__all__ = [
    "ChatCompletionsClient",
    "HashingEmbedder",
    "HistoryConfig",
    "HistoryStore",
    "HttpEmbedder",
    "KnowledgeBase",
    "MockGenerator",
    "PipelineConfig",
    "Session",
    "Triple",
    "bleu",
    "cosine_similarity",
    "load_corpus",
    "new_session",
    "run_ablations",
    "run_eval",
    "softmax_weights",
    "token_f1",
]
