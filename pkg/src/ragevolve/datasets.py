"""Benchmark ingestion, LLM annotation, and stratified training-set sampling."""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .llm import Backend, BackendUnavailable, ChatRequest
from .model import Complexity, IngestError, Query, ReasoningType
from .prompts import ANNOTATOR_SYSTEM, render_annotate_prompt

logger = logging.getLogger(__name__)

SCHEMA_KINDS = ("qa", "claim_verification")


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    split: str
    path: str
    count: int
    schema_kind: str

    def __post_init__(self) -> None:
        if self.schema_kind not in SCHEMA_KINDS:
            raise ValueError(f"schema_kind must be one of {SCHEMA_KINDS}")


def _query_from_record(raw: dict, schema_kind: str) -> Query:
    reasoning = ReasoningType(raw.get("reasoning_type", "unknown"))
    complexity = Complexity(raw.get("complexity", "unknown"))
    if schema_kind == "qa":
        return Query(
            id=str(raw["id"]),
            text=str(raw["question"]),
            gold_answers=tuple(str(a) for a in raw["answers"]),
            reasoning_type=reasoning,
            complexity=complexity,
        )
    return Query(
        id=str(raw["id"]),
        text=str(raw["claim"]),
        gold_answers=(str(raw["label"]),),
        reasoning_type=reasoning,
        complexity=complexity,
    )


def ingest_dataset(path: str | Path, schema_kind: str) -> list[Query]:
    """Load a JSONL benchmark file into Queries.

    qa records are {id, question, answers}; claim_verification records are
    {id, claim, label} with the label mapped into gold_answers so both kinds
    flow through the same scoring path.
    """
    if schema_kind not in SCHEMA_KINDS:
        raise ValueError(f"schema_kind must be one of {SCHEMA_KINDS}")
    queries: list[Query] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            queries.append(_query_from_record(json.loads(line), schema_kind))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise IngestError(f"line {lineno}: malformed {schema_kind} record ({exc})") from exc
    return queries


def build_manifest(path: str | Path, schema_kind: str, name: str, split: str) -> DatasetManifest:
    count = len(ingest_dataset(path, schema_kind))
    return DatasetManifest(name=name, split=split, path=str(path), count=count, schema_kind=schema_kind)


def save_queries(queries: Sequence[Query], path: str | Path) -> None:
    """Write queries in the engine's own JSONL format."""
    with Path(path).open("w", encoding="utf-8") as handle:
        for query in queries:
            handle.write(
                json.dumps(
                    {
                        "id": query.id,
                        "text": query.text,
                        "gold_answers": list(query.gold_answers),
                        "reasoning_type": query.reasoning_type.value,
                        "complexity": query.complexity.value,
                    },
                    separators=(",", ":"),
                )
                + "\n"
            )


def load_queries(path: str | Path) -> list[Query]:
    """Read queries from the engine's own JSONL format."""
    queries = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            queries.append(
                Query(
                    id=raw["id"],
                    text=raw["text"],
                    gold_answers=tuple(raw.get("gold_answers", [])),
                    reasoning_type=ReasoningType(raw.get("reasoning_type", "unknown")),
                    complexity=Complexity(raw.get("complexity", "unknown")),
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise IngestError(f"line {lineno}: malformed query record ({exc})") from exc
    return queries


_REASONING_WORDS = {t.value: t for t in ReasoningType if t is not ReasoningType.UNKNOWN}
_COMPLEXITY_WORDS = {c.value: c for c in Complexity if c is not Complexity.UNKNOWN}


def _parse_annotation(text: str) -> tuple[ReasoningType, Complexity]:
    lowered = text.lower()
    reasoning = ReasoningType.UNKNOWN
    complexity = Complexity.UNKNOWN
    for word, value in _REASONING_WORDS.items():
        if re.search(rf"\b{word}\b", lowered):
            reasoning = value
            break
    for word, value in _COMPLEXITY_WORDS.items():
        if re.search(rf"\b{word}\b", lowered):
            complexity = value
            break
    return reasoning, complexity


def annotate(queries: Sequence[Query], backend: Backend, *, max_tokens: int = 128) -> list[Query]:
    """Fill reasoning_type and complexity via one completion per query.

    Unparseable outputs and backend failures degrade individual queries to
    unknown rather than failing the batch.
    """
    annotated: list[Query] = []
    for query in queries:
        request = ChatRequest(
            system_text=ANNOTATOR_SYSTEM,
            user_text=render_annotate_prompt(query.text),
            temperature=0.0,
            max_tokens=max_tokens,
            tag="annotate",
        )
        try:
            response = backend.complete(request)
            reasoning, complexity = _parse_annotation(response.text)
        except BackendUnavailable as exc:
            logger.warning("annotation failed for %s: %s", query.id, exc)
            reasoning, complexity = ReasoningType.UNKNOWN, Complexity.UNKNOWN
        if reasoning is ReasoningType.UNKNOWN and complexity is Complexity.UNKNOWN:
            logger.info("annotation unparseable for %s; left unknown", query.id)
        annotated.append(
            Query(
                id=query.id,
                text=query.text,
                gold_answers=query.gold_answers,
                reasoning_type=reasoning,
                complexity=complexity,
            )
        )
    return annotated


def stratified_sample(queries: Sequence[Query], n: int, seed: int) -> list[Query]:
    """Difficulty-aware sample balanced over (reasoning_type, complexity) cells.

    Each nonempty cell gets floor(n / cells); the remainder goes to the
    largest cells first. Cells smaller than their quota redistribute the
    shortfall to cells with spare capacity (largest spare first). Selection
    within a cell is uniform under the seed and fully deterministic.
    """
    if n > len(queries):
        logger.warning("requested %d > %d available; sampling everything", n, len(queries))
        n = len(queries)
    if n == 0:
        return []
    cells: dict[tuple[str, str], list[Query]] = {}
    for query in queries:
        key = (query.reasoning_type.value, query.complexity.value)
        cells.setdefault(key, []).append(query)
    for members in cells.values():
        members.sort(key=lambda q: q.id)
    cell_keys = sorted(cells)

    base, rem = divmod(n, len(cell_keys))
    quotas = {key: base for key in cell_keys}
    by_size = sorted(cell_keys, key=lambda k: (-len(cells[k]), k))
    for key in by_size[:rem]:
        quotas[key] += 1

    take = {key: min(quotas[key], len(cells[key])) for key in cell_keys}
    shortfall = n - sum(take.values())
    if shortfall:
        logger.warning("stratified_sample: %d slots redistributed from exhausted cells", shortfall)
    while shortfall > 0:
        # Fill the currently smallest takes first so non-exhausted cells stay
        # within one of each other.
        spare = sorted(
            (key for key in cell_keys if take[key] < len(cells[key])),
            key=lambda k: (take[k], -(len(cells[k]) - take[k]), k),
        )
        if not spare:
            break
        take[spare[0]] += 1
        shortfall -= 1

    rng = random.Random(seed)
    sample: list[Query] = []
    for key in cell_keys:
        sample.extend(rng.sample(cells[key], take[key]))
    return sample
