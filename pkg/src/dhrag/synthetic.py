"""Generators for the bundled evaluation fixture and the chain-length workload.

The dialogue fixture is history-dependent by construction: every dialogue first
states two or three personal facts and then asks about each of them, and the
reference answer to a question is the sentence that stated the fact. None of
those sentences, nor the fact values, occur in the bundled corpus, so a system
that ignores earlier turns cannot recover them.

Regenerate the shipped files with ``python -m dhrag.synthetic --out src/dhrag/data``.
"""

from __future__ import annotations

import argparse
import json
import random
from dataclasses import dataclass
from pathlib import Path

from .embedding import hash_bucket, tokenize

FIXTURE_SEED = 20240917
ACK = "Okay, noted."

# (fact template, question) per topic; every value below is absent from CORPUS
TOPICS = [
    ("The Falcon launch is scheduled for {v}.", "When is the Falcon launch scheduled?",
     ["March third", "June ninth", "August second", "October fifth"]),
    ("My router password is {v}.", "What was my router password again?",
     ["heron42", "maple77", "quartz19", "ember33"]),
    ("My dentist appointment falls on {v}.", "When does my dentist appointment fall?",
     ["Tuesday morning", "Friday afternoon", "Wednesday evening", "Saturday noon"]),
    ("Our cat is named {v}.", "What is our cat named?",
     ["Biscuit", "Pepper", "Mochi", "Juniper"]),
    ("Gym locker {v} belongs to me.", "Which gym locker belongs to me?",
     ["locker214", "locker87", "locker509", "locker1123"]),
    ("Grandma Rosa's birthday cake should be {v}.", "What flavour should Grandma Rosa's birthday cake be?",
     ["lemon ricotta", "hazelnut praline", "pistachio rose", "black forest"]),
    ("Kayak rental pickup happens at {v} marina.", "At which marina does the kayak rental pickup happen?",
     ["Saltmarsh", "Driftwood", "Pelican", "Bluewater"]),
    ("Thesis draft chapter {v} needs revising.", "Which thesis draft chapter needs revising?",
     ["seven", "eleven", "four", "nine"]),
    ("Neighbour Tomas borrowed our {v}.", "What did neighbour Tomas borrow?",
     ["ladder", "hedge trimmer", "tent", "pressure washer"]),
    ("Vinyl shop hold order under surname {v}.", "Under what surname is the vinyl shop hold order?",
     ["Okafor", "Lindqvist", "Moreau", "Takeda"]),
]

CORPUS = [
    ("kb-001", "Billing statements are issued on the first business day of each month. Charges cover the previous cycle."),
    ("kb-002", "Roaming packages can be activated from the account portal before travelling abroad."),
    ("kb-003", "A SIM swap requires photo identification at a retail store. The old card stops working within an hour."),
    ("kb-004", "Data top-ups expire thirty days after purchase unless auto-renew is enabled."),
    ("kb-005", "Family plans allow up to five lines that share one data allowance."),
    ("kb-006", "Port-in requests usually complete within one working day. Keep the previous carrier account active until then."),
    ("kb-007", "Voicemail can be reset by dialling the service code and following the spoken instructions."),
    ("kb-008", "Device insurance claims need the IMEI number and a short description of the damage."),
    ("kb-009", "Paperless billing sends an email notice when each new invoice becomes available."),
    ("kb-010", "International calling add-ons are billed per minute at discounted destination rates."),
    ("kb-011", "Hotspot tethering consumes the same shared allowance as phone browsing."),
    ("kb-012", "Late payments incur a fee after a fourteen day grace period."),
    ("kb-013", "Unlocking a handset is possible once the instalment plan has been fully paid."),
    ("kb-014", "Network maintenance windows are announced by text message two days ahead."),
    ("kb-015", "Prepaid balances can be transferred between accounts held by the same customer."),
    ("kb-016", "Contract upgrades become available twenty months into a twenty four month term."),
    ("kb-017", "Spam call filtering is switched on by default for every postpaid line."),
    ("kb-018", "eSIM profiles can be downloaded by scanning the activation QR code."),
    ("kb-019", "Loyalty points convert into bill credit at the end of each quarter."),
    ("kb-020", "Coverage maps show expected indoor and outdoor signal strength by postcode."),
]


def _fact(topic: int, value: str) -> str:
    return TOPICS[topic][0].format(v=value)


def build_fixture(seed: int = FIXTURE_SEED, n_dialogues: int = 20) -> tuple[list[dict], list[dict]]:
    """Return ``(dialogues, corpus)`` as JSON-ready dicts."""
    rng = random.Random(seed)
    dialogues = []
    for d in range(n_dialogues):
        n_facts = 2 if d % 2 == 0 else 3
        topics = rng.sample(range(len(TOPICS)), n_facts)
        facts = [_fact(t, rng.choice(TOPICS[t][2])) for t in topics]
        turns = [{"query": fact, "reference_answer": ACK} for fact in facts]
        order = list(range(n_facts))
        rng.shuffle(order)
        for i in order:
            turns.append({"query": TOPICS[topics[i]][1], "reference_answer": facts[i], "gold_passage": None})
        dialogues.append({"dialogue_id": f"synth-{d:02d}", "turns": turns})
    corpus = [{"id": doc_id, "text": text, "metadata": {"source": "synthetic"}} for doc_id, text in CORPUS]
    return dialogues, corpus


def write_fixture(out_dir: str | Path, seed: int = FIXTURE_SEED) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dialogues, corpus = build_fixture(seed)
    dpath = out_dir / "synthetic_dialogues.jsonl"
    cpath = out_dir / "synthetic_corpus.jsonl"
    dpath.write_text("".join(json.dumps(d, sort_keys=True) + "\n" for d in dialogues), encoding="utf-8")
    cpath.write_text("".join(json.dumps(c, sort_keys=True) + "\n" for c in corpus), encoding="utf-8")
    return dpath, cpath


# chain workload

_ONSETS = "b c d f g h j k l m n p r s t v z".split()
_VOWELS = "a e i o u".split()


@dataclass
class ChainWorkload:
    queries: list[str]
    segments: list[int]
    topic_of_turn: list[int]


def _word(rng: random.Random) -> str:
    return "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(3))


def chain_workload(
    turns: int = 300,
    seed: int = 7,
    dim: int = 512,
    n_topics: int = 12,
    words_per_topic: int = 10,
    max_segment: int = 5,
) -> ChainWorkload:
    """Queries that drift between topics with known segment boundaries.

    Every topic owns words whose hash buckets (for ``dim``) are disjoint from
    every other topic's, so queries from different topics have cosine exactly
    0. Consecutive queries within a segment share four core words, which keeps
    their cosine above 0.6. A segment is therefore exactly one chain for any
    chain threshold in (0, 0.6].
    """
    if n_topics * words_per_topic > dim:
        raise ValueError("not enough hash buckets for disjoint topic vocabularies")
    rng = random.Random(seed)
    taken: set[int] = set()
    vocab: list[list[str]] = []
    for _ in range(n_topics):
        words: list[str] = []
        while len(words) < words_per_topic:
            w = _word(rng)
            b = hash_bucket(w, dim)
            if b in taken or len(tokenize(w)) != 1:
                continue
            taken.add(b)
            words.append(w)
        vocab.append(words)
    queries: list[str] = []
    segments: list[int] = []
    topic_of_turn: list[int] = []
    prev = None
    while len(queries) < turns:
        topic = rng.choice([t for t in range(n_topics) if t != prev])
        length = min(rng.randint(1, max_segment), turns - len(queries))
        core = rng.sample(vocab[topic], 4)
        for _ in range(length):
            queries.append(" ".join(core + rng.sample(vocab[topic], 2)))
            topic_of_turn.append(topic)
        segments.append(length)
        prev = topic
    return ChainWorkload(queries, segments, topic_of_turn)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="Write the synthetic dialogue fixture and its corpus.")
    parser.add_argument("--out", default=str(Path(__file__).parent / "data"))
    parser.add_argument("--seed", type=int, default=FIXTURE_SEED)
    args = parser.parse_args(argv)
    for path in write_fixture(args.out, args.seed):
        print(path)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
