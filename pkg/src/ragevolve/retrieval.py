"""Desk-scale lexical retrieval: corpus ingestion and BM25 top-k search.

Stands in for a dense retriever over a full encyclopedia. The search contract
is pluggable: anything that maps (query text, k) to ranked passages can be
swapped in behind the same interface.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

from .model import IngestError
from .textutil import tokenize

BM25_K1 = 1.2
BM25_B = 0.75

INDEX_FORMAT = "ragevolve-lexical-index-v1"


@dataclass(frozen=True)
class Passage:
    id: str
    title: str
    text: str

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError(f"passage {self.id!r}: text must be nonempty")

    def searchable_text(self) -> str:
        """Title and body together form the indexed text."""
        return f"{self.title} {self.text}" if self.title else self.text


class LexicalIndex:
    """Inverted index with BM25 statistics; immutable after construction."""

    def __init__(self, passages: list[Passage]) -> None:
        self.passages: dict[str, Passage] = {}
        self.postings: dict[str, list[tuple[str, int]]] = defaultdict(list)
        self.doc_lengths: dict[str, int] = {}
        for passage in passages:
            if passage.id in self.passages:
                raise ValueError(f"duplicate passage id {passage.id!r}")
            self.passages[passage.id] = passage
            tokens = tokenize(passage.searchable_text())
            self.doc_lengths[passage.id] = len(tokens)
            counts: dict[str, int] = defaultdict(int)
            for token in tokens:
                counts[token] += 1
            for term, tf in counts.items():
                self.postings[term].append((passage.id, tf))
        self.count = len(self.passages)
        total_len = sum(self.doc_lengths.values())
        self.avg_doc_len = total_len / self.count if self.count else 0.0

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log(1.0 + (self.count - df + 0.5) / (df + 0.5))

    def save(self, path: str | Path) -> None:
        payload = {
            "format": INDEX_FORMAT,
            "passages": [
                {"id": p.id, "title": p.title, "text": p.text}
                for p in self.passages.values()
            ],
        }
        Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "LexicalIndex":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("format") != INDEX_FORMAT:
            raise ValueError(f"unrecognized index format in {path}")
        return cls([Passage(p["id"], p.get("title", ""), p["text"]) for p in payload["passages"]])


def ingest_corpus(path: str | Path) -> LexicalIndex:
    """Build an index from a JSONL file of {id, title, text} records."""
    passages: list[Passage] = []
    seen: set[str] = set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            passage = Passage(id=str(raw["id"]), title=str(raw.get("title", "")), text=str(raw["text"]))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise IngestError(f"line {lineno}: malformed passage record ({exc})") from exc
        if passage.id in seen:
            raise IngestError(f"line {lineno}: duplicate passage id {passage.id!r}")
        seen.add(passage.id)
        passages.append(passage)
    return LexicalIndex(passages)


def search(index: LexicalIndex, query_text: str, k: int) -> list[tuple[Passage, float]]:
    """Top-k passages by descending BM25 score (k1=1.2, b=0.75).

    Zero-score passages are excluded even if fewer than k results remain;
    ties break by ascending passage id, so results are deterministic.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if index.count == 0:
        return []
    scores: dict[str, float] = defaultdict(float)
    for term in sorted(set(tokenize(query_text))):
        postings = index.postings.get(term)
        if not postings:
            continue
        idf = index.idf(term)
        for pid, tf in postings:
            norm = 1.0 - BM25_B + BM25_B * index.doc_lengths[pid] / index.avg_doc_len
            scores[pid] += idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * norm)
    ranked = sorted(
        ((pid, score) for pid, score in scores.items() if score > 0.0),
        key=lambda item: (-item[1], item[0]),
    )
    return [(index.passages[pid], score) for pid, score in ranked[:k]]
