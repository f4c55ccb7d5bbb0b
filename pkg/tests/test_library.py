from __future__ import annotations

import json
import random

import pytest

from ragevolve.library import (
    ConsolidationDecision,
    EntryStatus,
    ExperienceEntry,
    ExperienceLibrary,
    LibraryOp,
)
from ragevolve.llm import Backend, ChatRequest, ChatResponse, ScriptEntry, ScriptedBackend, estimate_tokens
from ragevolve.orchestrator import Insight
from ragevolve.textutil import token_jaccard


def seeded_entry(library: ExperienceLibrary, profile: str, insight: str, uses=0, successes=0):
    entry = library._apply_add(insight, profile)
    entry.uses = uses
    entry.successes = successes
    return entry


def test_retrieve_empty_library():
    library = ExperienceLibrary()
    assert library.retrieve("bridge factual", m=5) == []


def test_retrieve_diversity_rule():
    library = ExperienceLibrary()
    seeded_entry(library, "bridge lookup", "retrieve the entity first then answer", 4, 4)
    seeded_entry(library, "bridge lookup", "retrieve the entity first and then answer", 4, 4)
    seeded_entry(library, "bridge lookup", "decompose into sub questions early", 10, 2)
    picked = library.retrieve("bridge question", m=2)
    texts = [e.insight for e in picked]
    assert len(picked) == 2
    # one of the two near-duplicates plus the distinct low-utility one
    assert "decompose into sub questions early" in texts
    assert sum("retrieve the entity first" in t for t in texts) == 1


def test_retrieve_fewer_uses_tie_break():
    library = ExperienceLibrary()
    veteran = seeded_entry(library, "comparison", "compare after fetching both sides", 10, 10)
    fresh = seeded_entry(library, "comparison", "fetch entities in parallel then compare", 2, 2)
    picked = library.retrieve("comparison question", m=2)
    assert picked[0].id == fresh.id
    assert picked[1].id == veteran.id


def test_profile_matching_via_keyword_and_jaccard():
    library = ExperienceLibrary()
    seeded_entry(library, "temporal ordering", "resolve dates before comparing", 1, 1)
    assert library.retrieve("temporal question about reigns", m=1)
    assert not library.retrieve("geometry proof exercise", m=1)
    seeded_entry(library, "multi step entity chain lookup", "follow the chain", 1, 1)
    assert library.retrieve("entity chain lookup", m=5)


def test_zero_match_insight_adds_directly():
    library = ExperienceLibrary()
    backend = ScriptedBackend([])  # any backend call would raise ScriptMiss
    decisions = library.consolidate(
        [Insight("bridge", "retrieve before answering")], "bridge lookup", backend
    )
    assert [d.operation for d in decisions] == [LibraryOp.ADD]
    assert len(library.active_entries()) == 1
    entry = library.active_entries()[0]
    assert entry.uses == 0 and entry.successes == 0


def test_keep_leaves_library_identical():
    library = ExperienceLibrary()
    seeded_entry(library, "bridge", "retrieve before answering", 3, 2)
    before = json.dumps(library.to_dict())
    response = {
        "operations": [
            {
                "operation": "KEEP",
                "new_insight": "retrieve before answering",
                "target_entry_ids": [],
                "merged_insight": None,
                "rationale": "duplicate",
            }
        ]
    }
    backend = ScriptedBackend(
        [ScriptEntry(tag="library.ops", user_contains="", response=json.dumps(response))]
    )
    library.consolidate([Insight("bridge", "retrieve before answering")], "bridge", backend)
    assert json.dumps(library.to_dict()) == before


def test_prune_and_add_for_conflict():
    library = ExperienceLibrary()
    old = seeded_entry(library, "bridge", "never retrieve just answer", 10, 1)
    response = {
        "operations": [
            {
                "operation": "PRUNE",
                "new_insight": "always retrieve before answering",
                "target_entry_ids": [old.id],
                "merged_insight": None,
                "rationale": "contradicts higher-utility guidance",
            }
        ]
    }
    backend = ScriptedBackend(
        [ScriptEntry(tag="library.ops", user_contains="", response=json.dumps(response))]
    )
    library.consolidate([Insight("bridge", "always retrieve before answering")], "bridge", backend)
    assert old.status is EntryStatus.PRUNED
    actives = library.active_entries()
    assert len(actives) == 1
    assert actives[0].insight == "always retrieve before answering"


def test_merge_conserves_counters():
    library = ExperienceLibrary()
    a = seeded_entry(library, "bridge", "retrieve the intermediate entity first", 4, 3)
    b = seeded_entry(library, "bridge", "look up the intermediate entity before answering", 6, 2)
    totals_before = (
        sum(e.uses for e in library.active_entries()),
        sum(e.successes for e in library.active_entries()),
    )
    response = {
        "operations": [
            {
                "operation": "MERGE",
                "new_insight": "resolve the intermediate entity first",
                "target_entry_ids": [a.id, b.id],
                "merged_insight": "resolve the intermediate entity before generating the answer",
                "rationale": "same strategy",
            }
        ]
    }
    backend = ScriptedBackend(
        [ScriptEntry(tag="library.ops", user_contains="", response=json.dumps(response))]
    )
    library.consolidate(
        [Insight("bridge", "resolve the intermediate entity first")], "bridge", backend
    )
    actives = library.active_entries()
    totals_after = (sum(e.uses for e in actives), sum(e.successes for e in actives))
    assert totals_after == totals_before
    assert a.status is EntryStatus.PRUNED and b.status is EntryStatus.PRUNED
    assert len(actives) == 1 and actives[0].uses == 10 and actives[0].successes == 5


def test_malformed_backend_defaults_to_add():
    library = ExperienceLibrary()
    seeded_entry(library, "bridge", "retrieve before answering", 1, 1)
    backend = ScriptedBackend(
        [ScriptEntry(tag="library.ops", user_contains="", response="not json at all")]
    )
    decisions = library.consolidate(
        [Insight("bridge", "decompose the question first")], "bridge", backend
    )
    assert [d.operation for d in decisions] == [LibraryOp.ADD]
    assert len(library.active_entries()) == 2


def test_record_outcome():
    library = ExperienceLibrary()
    entry = seeded_entry(library, "bridge", "x y z", 0, 0)
    library.record_outcome([entry.id], success=True)
    assert (entry.uses, entry.successes) == (1, 1)
    assert entry.utility == 1.0
    entry.uses, entry.successes = 5, 4
    library.record_outcome([entry.id], success=False)
    assert (entry.uses, entry.successes) == (6, 4)
    assert entry.utility == 2 / 3
    library.record_outcome([], success=True)  # no-op
    assert (entry.uses, entry.successes) == (6, 4)


def test_record_outcome_pruned_ignored(caplog):
    library = ExperienceLibrary()
    entry = seeded_entry(library, "bridge", "x", 1, 1)
    entry.status = EntryStatus.PRUNED
    library.record_outcome([entry.id, "e9999"], success=True)
    assert (entry.uses, entry.successes) == (1, 1)


def test_save_load_round_trip_byte_identical(tmp_path):
    library = ExperienceLibrary(max_entries=50)
    seeded_entry(library, "bridge", "retrieve before answering", 3, 2)
    seeded_entry(library, "comparison", "fetch both entities in parallel", 1, 1)
    path_a = tmp_path / "a.json"
    path_b = tmp_path / "b.json"
    library.save(path_a)
    ExperienceLibrary.load(path_a).save(path_b)
    assert path_a.read_bytes() == path_b.read_bytes()


def test_decision_validation():
    with pytest.raises(ValueError):
        ConsolidationDecision(operation=LibraryOp.MERGE, merged_insight="x")
    with pytest.raises(ValueError):
        ConsolidationDecision(operation=LibraryOp.MERGE, target_entry_ids=("e1",), merged_insight=" ")
    with pytest.raises(ValueError):
        ConsolidationDecision(operation=LibraryOp.PRUNE)


def test_entry_invariant_check():
    entry = ExperienceEntry(id="e1", profile="p", insight="i", uses=1, successes=2)
    with pytest.raises(ValueError):
        entry.check()


class RandomOpsBackend(Backend):
    """Emits schema-valid but randomized library operations, seeded for replay."""

    deterministic = True

    def __init__(self, seed: int) -> None:
        super().__init__()
        self.rng = random.Random(seed)

    def complete(self, request: ChatRequest) -> ChatResponse:
        import re

        ids = re.findall(r"\be\d{4}\b", request.user_text)
        insights = re.findall(r"insight: (.+)", request.user_text)
        operations = []
        for text in insights or ["fallback insight"]:
            kind = self.rng.choice(["ADD", "MERGE", "PRUNE", "KEEP"])
            targets = []
            if kind in ("MERGE", "PRUNE") and ids:
                targets = self.rng.sample(ids, k=min(len(ids), self.rng.randint(1, 2)))
            elif kind in ("MERGE", "PRUNE"):
                kind = "ADD"
            operations.append(
                {
                    "operation": kind,
                    "new_insight": text,
                    "target_entry_ids": targets,
                    "merged_insight": f"merged: {text}" if kind == "MERGE" else None,
                    "rationale": "randomized test decision",
                }
            )
        body = json.dumps({"operations": operations})
        response = ChatResponse(
            text=body,
            tokens_in=estimate_tokens(request.system_text, request.user_text),
            tokens_out=estimate_tokens(body),
        )
        self.log.add(request.tag, response.tokens_in, response.tokens_out)
        return response


WORDS = ["retrieve", "decompose", "verify", "compare", "rank", "filter", "cite",
         "entities", "dates", "evidence", "parallel", "chain", "first", "before"]
PROFILES = ["bridge lookup", "comparison question", "temporal ordering", "ambiguous phrasing"]


def random_insight(rng: random.Random) -> Insight:
    text = " ".join(rng.choice(WORDS) for _ in range(rng.randint(3, 8)))
    return Insight(query_type=rng.choice(PROFILES), text=text)


def check_invariants(library: ExperienceLibrary):
    actives = library.active_entries()
    for entry in library.entries:
        entry.check()
    assert len(actives) <= library.max_entries
    for i, a in enumerate(actives):
        for b in actives[i + 1:]:
            assert token_jaccard(a.insight, b.insight) <= 0.9, (a.insight, b.insight)


def test_randomized_consolidation_invariants(tmp_path):
    """500 randomized consolidate/record_outcome operations keep all invariants."""
    rng = random.Random(42)
    library = ExperienceLibrary(max_entries=30)
    backend = RandomOpsBackend(seed=43)
    for step in range(500):
        if rng.random() < 0.6:
            insights = [random_insight(rng) for _ in range(rng.randint(1, 3))]
            library.consolidate(insights, rng.choice(PROFILES), backend)
        else:
            actives = library.active_entries()
            if actives:
                chosen = rng.sample(actives, k=min(len(actives), rng.randint(1, 3)))
                library.record_outcome([e.id for e in chosen], rng.random() < 0.5)
        check_invariants(library)
    path_a = tmp_path / "a.json"
    path_b = tmp_path / "b.json"
    library.save(path_a)
    ExperienceLibrary.load(path_a).save(path_b)
    assert path_a.read_bytes() == path_b.read_bytes()
