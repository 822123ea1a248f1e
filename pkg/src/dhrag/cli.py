"""``dhrag`` command line: ingest | chat | eval | stats.

Exit codes: 0 success, 1 runtime error, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Sequence, TextIO

from .config import ResolvedConfig, resolve
from .embedding import EmbeddingError
from .evaluation import (
    DatasetError,
    ablation_rows,
    ablation_table,
    db_stats,
    load_dataset,
    run_ablations,
)
from .generation import ChatCompletionsClient, GenerationError, Generator, MockGenerator
from .history import ConfigError, HistoryStore
from .integration import load_attention_matrix
from .knowledge_base import CorpusError, KnowledgeBase, load_corpus
from .matching import InvariantError
from .pipeline import ABLATIONS, Session

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    """Bad user input; reported with exit code 2."""


def _require_file(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {p}")
    return p


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("dhrag").joinpath("data", name)))


def _load_config(args: argparse.Namespace) -> ResolvedConfig:
    if args.config is not None:
        _require_file(args.config, "config file")
    return resolve(args.config, args.set or [])


def _load_kb(args: argparse.Namespace, cfg: ResolvedConfig) -> KnowledgeBase:
    embedder = cfg.make_embedder()
    if getattr(args, "kb", None):
        return KnowledgeBase.load(_require_file(args.kb, "knowledge base"), embedder if embedder.kind != "native-hashed-tfidf" else None)
    corpus = getattr(args, "corpus", None)
    kb = KnowledgeBase(embedder)
    if corpus:
        kb.ingest(load_corpus(_require_file(corpus, "corpus file")))
    return kb.freeze()


def _load_script(path: str | None) -> dict[str, str] | None:
    if not path:
        return None
    data = json.loads(_require_file(path, "script file").read_text(encoding="utf-8"))
    if not isinstance(data, dict) or not all(isinstance(k, str) and isinstance(v, str) for k, v in data.items()):
        raise InputError(f"{path}: script must map question strings to answer strings")
    return data


def _make_generator(args: argparse.Namespace, cfg: ResolvedConfig) -> Generator:
    if getattr(args, "live", False):
        llm = cfg.llm
        return ChatCompletionsClient(
            base_url=llm.get("endpoint") or "http://localhost:8000/v1",
            model=llm.get("model") or "gpt-4o-mini",
            timeout=float(llm.get("timeout", 60)),
            retries=int(llm.get("retries", 3)),
        )
    return MockGenerator(_load_script(getattr(args, "script", None)))


def _attention(cfg: ResolvedConfig, dim: int):
    if not cfg.attention_matrix:
        return None
    return load_attention_matrix(_require_file(cfg.attention_matrix, "attention matrix"), dim)


# commands


def cmd_ingest(args: argparse.Namespace, out: TextIO) -> int:
    cfg = _load_config(args)
    records = load_corpus(_require_file(args.corpus, "corpus file"))
    kb = KnowledgeBase(cfg.make_embedder())
    count = kb.ingest(records)
    kb.freeze().save(args.out)
    print(f"ingested {count} documents", file=out)
    return EXIT_OK


def cmd_chat(args: argparse.Namespace, out: TextIO, inp: TextIO) -> int:
    cfg = _load_config(args)
    kb = _load_kb(args, cfg)
    session = Session(
        cfg.pipeline,
        kb,
        _make_generator(args, cfg),
        session_id=args.session_id,
        attention_matrix=_attention(cfg, kb.embedder.dim),
    )
    interactive = inp.isatty()
    while True:
        if interactive:
            print("> ", end="", file=out, flush=True)
        line = inp.readline()
        if not line:
            break
        line = line.strip()
        if not line:
            continue
        if line == ":quit":
            break
        if line.startswith(":save"):
            target = line[len(":save"):].strip()
            if not target:
                print("usage: :save <path>", file=sys.stderr)
                continue
            session.store.save(target)
            print(f"saved {len(session.store)} triples to {target}", file=out)
            continue
        try:
            response, trace = session.respond(line)
        except (GenerationError, EmbeddingError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            continue
        print(response, file=out, flush=True)
        if args.trace:
            print(trace.summary(), file=out, flush=True)
    return EXIT_OK


def _parse_ablate(value: str) -> list[str]:
    if value.strip().lower() in ("", "none"):
        return []
    flags = [f.strip() for f in value.split(",") if f.strip()]
    bad = [f for f in flags if f not in ABLATIONS]
    if bad:
        raise InputError(f"unknown ablation(s): {', '.join(bad)}; choose from {', '.join(ABLATIONS)} or none")
    return flags


def cmd_eval(args: argparse.Namespace, out: TextIO) -> int:
    cfg = _load_config(args)
    flags = _parse_ablate(args.ablate)
    if args.fixture:
        dataset_path = fixture_path("synthetic_dialogues.jsonl")
        if not args.kb and not args.corpus:
            args.corpus = str(fixture_path("synthetic_corpus.jsonl"))
    elif args.dataset:
        dataset_path = _require_file(args.dataset, "dataset")
    else:
        raise InputError("pass --dataset or --fixture")
    dataset = load_dataset(dataset_path)
    kb = _load_kb(args, cfg)
    workers = args.workers or os.cpu_count() or 1
    reports = run_ablations(dataset, kb, cfg.pipeline, _make_generator(args, cfg), flags, workers)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, report in reports.items():
        stem = "report_full" if name == "full" else f"report_no-{name}"
        (out_dir / f"{stem}.json").write_text(report.to_json(args.timings), encoding="utf-8")
        (out_dir / f"{stem}.txt").write_text(report.to_table(args.percent), encoding="utf-8")
        _write_histograms(out_dir, stem, report)
        print(report.to_table(args.percent), file=out)
    if len(reports) > 1:
        table = ablation_table(reports, args.percent)
        (out_dir / "ablation.txt").write_text(table, encoding="utf-8")
        (out_dir / "ablation.json").write_text(
            json.dumps(ablation_rows(reports), sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        print(table, file=out)
    print(f"wrote {len(reports)} report(s) to {out_dir}", file=out)
    return EXIT_OK


def _write_histograms(out_dir: Path, stem: str, report) -> None:
    import csv

    with open(out_dir / f"{stem}_cluster_size_histogram.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("cluster_size", "count"))
        w.writerows(report.cluster_size_histogram().items())
    with open(out_dir / f"{stem}_chain_lengths.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("chain_length", "count"))
        w.writerows(report.chain_length_histogram().items())


def cmd_stats(args: argparse.Namespace, out: TextIO) -> int:
    path = _require_file(args.snapshot, "snapshot")
    store = HistoryStore.load(path)
    stats = db_stats(store)
    print(stats.render(), file=out)
    out_dir = Path(args.out) if args.out else path.parent
    for written in stats.write_csv(out_dir, prefix=f"{path.stem}_"):
        print(f"wrote {written}", file=out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dhrag", description="Dialogue RAG over a static KB plus dynamic history.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="YAML config file (defaults are used for missing keys)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. history.alpha=0.7")

    p = sub.add_parser("ingest", help="embed a JSONL corpus into a KB file")
    p.add_argument("corpus")
    p.add_argument("--out", required=True, help="KB output path")
    common(p)

    def generator_flags(p: argparse.ArgumentParser) -> None:
        g = p.add_mutually_exclusive_group()
        g.add_argument("--mock", action="store_true", default=True, help="deterministic mock generator (default)")
        g.add_argument("--live", action="store_true", help="call the configured chat-completions endpoint")
        p.add_argument("--script", help="JSON object mapping questions to scripted mock answers")

    p = sub.add_parser("chat", help="interactive dialogue; :save <path> snapshots history, :quit exits")
    p.add_argument("--kb", help="KB file from `dhrag ingest` (empty KB if omitted)")
    p.add_argument("--corpus", help="build the KB in memory from a JSONL corpus instead")
    p.add_argument("--trace", action="store_true", help="print a per-turn trace summary")
    p.add_argument("--session-id", default="chat")
    generator_flags(p)
    common(p)

    p = sub.add_parser("eval", help="replay a dialogue dataset and score BLEU/F1")
    p.add_argument("--dataset", help="JSONL dialogues")
    p.add_argument("--fixture", action="store_true", help="use the bundled synthetic dataset and corpus")
    p.add_argument("--kb", help="KB file")
    p.add_argument("--corpus", help="JSONL corpus to ingest in memory")
    p.add_argument("--ablate", default="none", help="comma list of dynamic,integration,cot,hierarchical or none")
    p.add_argument("--out", default="eval_out")
    p.add_argument("--percent", action="store_true", help="show scores on a 0-100 scale in tables")
    p.add_argument("--workers", type=int, default=0, help="dialogues evaluated in parallel (0 = CPU count)")
    p.add_argument("--timings", action="store_true", help="include per-stage timing means in the JSON reports")
    generator_flags(p)
    common(p)

    p = sub.add_parser("stats", help="cluster and chain statistics of a history snapshot")
    p.add_argument("snapshot")
    p.add_argument("--out", help="directory for the CSV files (default: next to the snapshot)")
    return parser


def main(argv: Sequence[str] | None = None, stdin: TextIO | None = None, stdout: TextIO | None = None) -> int:
    out = stdout or sys.stdout
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "ingest":
            return cmd_ingest(args, out)
        if args.command == "chat":
            return cmd_chat(args, out, stdin or sys.stdin)
        if args.command == "eval":
            return cmd_eval(args, out)
        return cmd_stats(args, out)
    except (InputError, CorpusError, DatasetError, ConfigError, InvariantError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entrypoint() -> None:
    sys.exit(main())
