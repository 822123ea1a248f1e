"""Offline benchmark harness: metrics, dataset replay, ablations and store statistics.

Metrics operate on :func:`dhrag.embedding.tokenize` tokens.

* ``bleu``: sentence-level BLEU-4 with uniform weights and a brevity penalty.
  An n-gram order with zero matches contributes ``1 / (candidates + 1)``
  instead of zero; a candidate with no unigram match at all scores 0.
* ``token_f1``: bag-of-tokens F1 (SQuAD style).

Aggregates are plain means over every successfully generated turn.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .embedding import tokenize
from .generation import GenerationError, Generator
from .history import HistoryStore
from .knowledge_base import KnowledgeBase
from .pipeline import ABLATIONS, PipelineConfig, Session

ABLATION_LABELS = {
    "full": "full pipeline",
    "dynamic": "no history retrieval",
    "integration": "no attention/MMR selection",
    "cot": "no chain matching",
    "hierarchical": "no cluster matching",
}


class DatasetError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        prefix = f"{path}:{line}: " if path and line else (f"line {line}: " if line else "")
        super().__init__(prefix + message)
        self.line = line


# metrics


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: str, reference: str, max_n: int = 4) -> float:
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand or not ref:
        return 0.0
    log_total = 0.0
    for n in range(1, max_n + 1):
        cand_ngrams = _ngrams(cand, n)
        ref_ngrams = _ngrams(ref, n)
        matches = sum(min(count, ref_ngrams[g]) for g, count in cand_ngrams.items())
        total = max(len(cand) - n + 1, 0)
        if matches == 0:
            if n == 1:
                return 0.0
            precision = 1.0 / (total + 1)
        else:
            precision = matches / total
        log_total += math.log(precision)
    brevity = 1.0 if len(cand) > len(ref) else math.exp(1.0 - len(ref) / len(cand))
    return brevity * math.exp(log_total / max_n)


def token_f1(candidate: str, reference: str) -> float:
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand and not ref:
        return 1.0
    if not cand or not ref:
        return 0.0
    common = sum((Counter(cand) & Counter(ref)).values())
    if common == 0:
        return 0.0
    precision = common / len(cand)
    recall = common / len(ref)
    return 2 * precision * recall / (precision + recall)


# datasets


@dataclass(frozen=True)
class DialogueTurn:
    query: str
    reference_answer: str
    gold_passage: str | None = None


@dataclass(frozen=True)
class Dialogue:
    dialogue_id: str
    turns: tuple[DialogueTurn, ...]


@dataclass
class DialogueDataset:
    dialogues: list[Dialogue]
    corpus_ref: str | None = None

    def __len__(self) -> int:
        return len(self.dialogues)


def parse_dialogue(obj: object, line: int | None = None, path: str | None = None) -> Dialogue:
    if not isinstance(obj, dict):
        raise DatasetError("expected a JSON object", line, path)
    did = obj.get("dialogue_id")
    turns = obj.get("turns")
    if not isinstance(did, str) or not did:
        raise DatasetError('"dialogue_id" must be a non-empty string', line, path)
    if not isinstance(turns, list) or not turns:
        raise DatasetError(f"dialogue {did!r} has no turns", line, path)
    parsed = []
    for i, turn in enumerate(turns):
        if not isinstance(turn, dict):
            raise DatasetError(f"dialogue {did!r} turn {i} is not an object", line, path)
        query, ref = turn.get("query"), turn.get("reference_answer")
        if not isinstance(query, str) or not query.strip():
            raise DatasetError(f"dialogue {did!r} turn {i} has an empty query", line, path)
        if not isinstance(ref, str) or not ref.strip():
            raise DatasetError(f"dialogue {did!r} turn {i} has an empty reference_answer", line, path)
        parsed.append(DialogueTurn(query, ref, turn.get("gold_passage")))
    return Dialogue(did, tuple(parsed))


def load_dataset(path: str | Path, corpus_ref: str | None = None) -> DialogueDataset:
    dialogues = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"invalid JSON ({exc.msg})", lineno, str(path)) from exc
            dialogue = parse_dialogue(obj, lineno, str(path))
            if dialogue.dialogue_id in seen:
                raise DatasetError(f"duplicate dialogue_id {dialogue.dialogue_id!r}", lineno, str(path))
            seen.add(dialogue.dialogue_id)
            dialogues.append(dialogue)
    return DialogueDataset(dialogues, corpus_ref)


# store statistics


@dataclass
class DbStats:
    cluster_sizes: dict[int, int]
    chain_histogram: dict[int, int]
    average_chain_length: float | None
    triple_count: int

    def to_dict(self) -> dict:
        return {
            "cluster_sizes": {str(k): v for k, v in sorted(self.cluster_sizes.items())},
            "chain_histogram": {str(k): v for k, v in sorted(self.chain_histogram.items())},
            "average_chain_length": self.average_chain_length,
            "triple_count": self.triple_count,
        }

    def render(self) -> str:
        lines = ["clusters (id: size)"]
        lines += [f"  {cid}: {size}" for cid, size in sorted(self.cluster_sizes.items())] or ["  (none)"]
        lines.append("chain lengths (length: count)")
        lines += [f"  {n}: {count}" for n, count in sorted(self.chain_histogram.items())] or ["  (none)"]
        avg = "undefined" if self.average_chain_length is None else f"{self.average_chain_length:.4f}"
        lines.append(f"average chain length: {avg}")
        return "\n".join(lines)

    def write_csv(self, out_dir: str | Path, prefix: str = "") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        clusters = out_dir / f"{prefix}cluster_sizes.csv"
        chains = out_dir / f"{prefix}chain_lengths.csv"
        _write_rows(clusters, ("cluster_id", "size"), sorted(self.cluster_sizes.items()))
        _write_rows(chains, ("chain_length", "count"), sorted(self.chain_histogram.items()))
        return clusters, chains


def _write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def db_stats(store: HistoryStore) -> DbStats:
    index = store.index
    sizes = {cid: len(c.member_ids) for cid, c in index.clusters.items()}
    lengths = [len(chain.triple_ids) for chain in index.chains.values()]
    hist = dict(sorted(Counter(lengths).items()))
    avg = sum(lengths) / len(lengths) if lengths else None
    return DbStats(sizes, hist, avg, len(store))


# replay


@dataclass
class TurnScore:
    query: str
    reference: str
    response: str | None
    bleu: float | None
    f1: float | None
    error: str | None = None


@dataclass
class DialogueResult:
    dialogue_id: str
    turns: list[TurnScore]
    stats: DbStats
    timings_ms: dict[str, list[float]] = field(default_factory=dict)

    def scored(self) -> list[TurnScore]:
        return [t for t in self.turns if t.error is None]


def _mean(values: Sequence[float]) -> float | None:
    return math.fsum(values) / len(values) if values else None


@dataclass
class EvalReport:
    variant: str
    config: PipelineConfig
    dialogues: list[DialogueResult]

    @property
    def scored_turns(self) -> list[TurnScore]:
        return [t for d in self.dialogues for t in d.scored()]

    @property
    def failed_turns(self) -> int:
        return sum(1 for d in self.dialogues for t in d.turns if t.error is not None)

    @property
    def bleu(self) -> float | None:
        return _mean([t.bleu for t in self.scored_turns])

    @property
    def f1(self) -> float | None:
        return _mean([t.f1 for t in self.scored_turns])

    def cluster_size_histogram(self) -> dict[int, int]:
        counts: Counter = Counter()
        for d in self.dialogues:
            counts.update(d.stats.cluster_sizes.values())
        return dict(sorted(counts.items()))

    def chain_length_histogram(self) -> dict[int, int]:
        counts: Counter = Counter()
        for d in self.dialogues:
            counts.update(d.stats.chain_histogram)
        return dict(sorted(counts.items()))

    def average_chain_length(self) -> float | None:
        hist = self.chain_length_histogram()
        chains = sum(hist.values())
        return sum(n * c for n, c in hist.items()) / chains if chains else None

    def timing_means(self) -> dict[str, float]:
        pooled: dict[str, list[float]] = {}
        for d in self.dialogues:
            for stage, values in d.timings_ms.items():
                pooled.setdefault(stage, []).extend(values)
        return {stage: math.fsum(v) / len(v) for stage, v in sorted(pooled.items()) if v}

    def to_dict(self, include_timings: bool = False) -> dict:
        out = {
            "variant": self.variant,
            "config": self.config.to_dict(),
            "config_fingerprint": self.config.fingerprint(),
            "aggregate": {
                "bleu": self.bleu,
                "f1": self.f1,
                "dialogues": len(self.dialogues),
                "scored_turns": len(self.scored_turns),
                "failed_turns": self.failed_turns,
            },
            "dialogues": [
                {
                    "dialogue_id": d.dialogue_id,
                    "bleu": _mean([t.bleu for t in d.scored()]),
                    "f1": _mean([t.f1 for t in d.scored()]),
                    "turns": [
                        {
                            "query": t.query,
                            "reference": t.reference,
                            "response": t.response,
                            "bleu": t.bleu,
                            "f1": t.f1,
                            "error": t.error,
                        }
                        for t in d.turns
                    ],
                    "stats": d.stats.to_dict(),
                }
                for d in self.dialogues
            ],
            "cluster_size_histogram": {str(k): v for k, v in self.cluster_size_histogram().items()},
            "chain_length_histogram": {str(k): v for k, v in self.chain_length_histogram().items()},
            "average_chain_length": self.average_chain_length(),
        }
        if include_timings:
            out["timings_ms"] = self.timing_means()
        return out

    def to_json(self, include_timings: bool = False) -> str:
        return json.dumps(self.to_dict(include_timings), sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    def to_table(self, percent: bool = False) -> str:
        scale = 100.0 if percent else 1.0
        rows = [("dialogue", "turns", "BLEU", "F1")]
        for d in self.dialogues:
            rows.append((d.dialogue_id, str(len(d.turns)), _fmt(_mean([t.bleu for t in d.scored()]), scale), _fmt(_mean([t.f1 for t in d.scored()]), scale)))
        rows.append(("ALL", str(len(self.scored_turns)), _fmt(self.bleu, scale), _fmt(self.f1, scale)))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = [f"variant: {self.variant}  config: {self.config.fingerprint()}"]
        for r in rows:
            lines.append("  ".join([r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]))
        if self.failed_turns:
            lines.append(f"failed turns excluded: {self.failed_turns}")
        return "\n".join(lines) + "\n"


def _fmt(value: float | None, scale: float = 1.0) -> str:
    return "undefined" if value is None else f"{value * scale:.4f}"


def replay_dialogue(dialogue: Dialogue, kb: KnowledgeBase, config: PipelineConfig, generator: Generator) -> DialogueResult:
    session = Session(config, kb, generator, session_id=dialogue.dialogue_id)
    scores = []
    timings: dict[str, list[float]] = {}
    for turn in dialogue.turns:
        try:
            response, trace = session.respond(turn.query)
        except GenerationError as exc:
            scores.append(TurnScore(turn.query, turn.reference_answer, None, None, None, f"{type(exc).__name__}: {exc}"))
            continue
        scores.append(
            TurnScore(turn.query, turn.reference_answer, response, bleu(response, turn.reference_answer), token_f1(response, turn.reference_answer))
        )
        for stage, ms in trace.timings_ms.items():
            timings.setdefault(stage, []).append(ms)
    return DialogueResult(dialogue.dialogue_id, scores, db_stats(session.store), timings)


def run_eval(
    dataset: DialogueDataset,
    kb: KnowledgeBase,
    config: PipelineConfig,
    generator: Generator,
    variant: str = "full",
    workers: int = 1,
) -> EvalReport:
    """Replay every dialogue in a fresh session and score each turn against its reference."""
    config.validate()
    dialogues = sorted(dataset.dialogues, key=lambda d: d.dialogue_id)
    if workers > 1 and len(dialogues) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda d: replay_dialogue(d, kb, config, generator), dialogues))
    else:
        results = [replay_dialogue(d, kb, config, generator) for d in dialogues]
    return EvalReport(variant, config, results)


def run_ablations(
    dataset: DialogueDataset,
    kb: KnowledgeBase,
    config: PipelineConfig,
    generator: Generator,
    flags: Sequence[str] = (),
    workers: int = 1,
) -> dict[str, EvalReport]:
    """The full configuration plus one report per ablated module, in ``flags`` order."""
    for flag in flags:
        if flag not in ABLATIONS:
            raise ValueError(f"unknown ablation {flag!r}")
    reports = {"full": run_eval(dataset, kb, config, generator, "full", workers)}
    for flag in flags:
        reports[flag] = run_eval(dataset, kb, config.ablated(flag), generator, flag, workers)
    return reports


def ablation_rows(reports: dict[str, EvalReport]) -> list[dict]:
    """Scores per variant; ``*_delta`` is full minus variant, so a positive delta is a loss."""
    full = reports["full"]
    rows = []
    for name, report in reports.items():
        row = {"variant": name, "label": ABLATION_LABELS.get(name, name), "bleu": report.bleu, "f1": report.f1}
        if name != "full":
            row["bleu_delta"] = _delta(report.bleu, full.bleu)
            row["f1_delta"] = _delta(report.f1, full.f1)
        rows.append(row)
    return rows


def _delta(value: float | None, base: float | None) -> float | None:
    return None if value is None or base is None else base - value


def ablation_table(reports: dict[str, EvalReport], percent: bool = False) -> str:
    scale = 100.0 if percent else 1.0
    cells = [("", "BLEU", "F1")]
    for row in ablation_rows(reports):
        b, f = _fmt(row["bleu"], scale), _fmt(row["f1"], scale)
        if row["variant"] != "full":
            # shown as the signed change from the full pipeline, e.g. a drop prints as (-0.4)
            b += f" ({_signed(row['bleu_delta'], -scale)})"
            f += f" ({_signed(row['f1_delta'], -scale)})"
        cells.append((row["label"], b, f))
    widths = [max(len(c[i]) for c in cells) for i in range(3)]
    return "\n".join(
        "  ".join([c[0].ljust(widths[0]), c[1].rjust(widths[1]), c[2].rjust(widths[2])]) for c in cells
    ) + "\n"


def _signed(value: float | None, scale: float) -> str:
    return "undefined" if value is None else f"{value * scale + 0.0:+.4f}"
