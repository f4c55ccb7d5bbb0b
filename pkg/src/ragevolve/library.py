"""Persistent experience library: (profile, insight, utility) entries.

Entries are consolidated online through ADD/MERGE/PRUNE/KEEP decisions and
retrieved by utility with a lexical diversity filter. This store is the
medium of policy improvement: it conditions future plan sampling instead of
any parameter update.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

from .llm import Backend, ChatRequest, MalformedStructuredOutput, complete_json
from .model import ReasoningType
from .textutil import token_jaccard

if TYPE_CHECKING:
    from .orchestrator import Insight, InsightBundle

logger = logging.getLogger(__name__)

LIBRARY_VERSION = 1
DEFAULT_MAX_ENTRIES = 200
DEFAULT_PROFILE_JACCARD = 0.3
DEFAULT_DIVERSITY_THRESHOLD = 0.6
DEDUP_JACCARD = 0.9

_REASONING_KEYWORDS = frozenset(
    t.value for t in ReasoningType if t is not ReasoningType.UNKNOWN
)
_ENTRY_ID_RE = re.compile(r"^e(\d+)$")


class LibraryOp(str, Enum):
    ADD = "ADD"
    MERGE = "MERGE"
    PRUNE = "PRUNE"
    KEEP = "KEEP"


class EntryStatus(str, Enum):
    ACTIVE = "active"
    PRUNED = "pruned"


@dataclass
class ExperienceEntry:
    id: str
    profile: str
    insight: str
    uses: int = 0
    successes: int = 0
    created_at: int = 0
    last_used_at: int | None = None
    status: EntryStatus = EntryStatus.ACTIVE

    @property
    def utility(self) -> float:
        return self.successes / max(1, self.uses)

    def check(self) -> None:
        if self.successes > self.uses:
            raise ValueError(f"entry {self.id}: successes exceed uses")
        if self.status is EntryStatus.ACTIVE and not self.insight.strip():
            raise ValueError(f"entry {self.id}: active entry with empty insight")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "profile": self.profile,
            "insight": self.insight,
            "uses": self.uses,
            "successes": self.successes,
            "created_at": self.created_at,
            "last_used_at": self.last_used_at,
            "status": self.status.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperienceEntry":
        return cls(
            id=data["id"],
            profile=data["profile"],
            insight=data["insight"],
            uses=data["uses"],
            successes=data["successes"],
            created_at=data["created_at"],
            last_used_at=data["last_used_at"],
            status=EntryStatus(data["status"]),
        )


@dataclass(frozen=True)
class ConsolidationDecision:
    operation: LibraryOp
    new_insight: str = ""
    target_entry_ids: tuple[str, ...] = ()
    merged_insight: str = ""
    rationale: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "target_entry_ids", tuple(self.target_entry_ids))
        if self.operation in (LibraryOp.MERGE, LibraryOp.PRUNE) and not self.target_entry_ids:
            raise ValueError(f"{self.operation.value} must reference existing entries")
        if self.operation is LibraryOp.MERGE and not self.merged_insight.strip():
            raise ValueError("MERGE requires a nonempty merged_insight")


def profiles_match(entry_profile: str, query_profile: str, jaccard_threshold: float) -> bool:
    """A profile matches when it shares a reasoning-type keyword or is lexically close."""
    entry_tokens = set(entry_profile.lower().split())
    query_tokens = set(query_profile.lower().split())
    if entry_tokens & query_tokens & _REASONING_KEYWORDS:
        return True
    return token_jaccard(entry_profile, query_profile) >= jaccard_threshold


class ExperienceLibrary:
    """Single-writer store of experience entries with JSON persistence."""

    def __init__(
        self,
        max_entries: int = DEFAULT_MAX_ENTRIES,
        profile_jaccard: float = DEFAULT_PROFILE_JACCARD,
        diversity_threshold: float = DEFAULT_DIVERSITY_THRESHOLD,
    ) -> None:
        self.max_entries = max_entries
        self.profile_jaccard = profile_jaccard
        self.diversity_threshold = diversity_threshold
        self.entries: list[ExperienceEntry] = []

    # -- bookkeeping ----------------------------------------------------------

    def active_entries(self) -> list[ExperienceEntry]:
        return [e for e in self.entries if e.status is EntryStatus.ACTIVE]

    def _clock(self) -> int:
        """Next logical tick; derived so persistence stays minimal and replayable."""
        latest = 0
        for entry in self.entries:
            latest = max(latest, entry.created_at, entry.last_used_at or 0)
        return latest + 1

    def _next_id(self) -> str:
        highest = 0
        for entry in self.entries:
            match = _ENTRY_ID_RE.match(entry.id)
            if match:
                highest = max(highest, int(match.group(1)))
        return f"e{highest + 1:04d}"

    def _get(self, entry_id: str) -> ExperienceEntry | None:
        for entry in self.entries:
            if entry.id == entry_id:
                return entry
        return None

    # -- retrieval ------------------------------------------------------------

    def candidates(self, query_profile: str) -> list[ExperienceEntry]:
        """Active entries whose profile matches, in retrieval preference order."""
        matched = [
            e
            for e in self.active_entries()
            if profiles_match(e.profile, query_profile, self.profile_jaccard)
        ]
        matched.sort(
            key=lambda e: (
                -e.utility,
                e.uses,
                -(e.last_used_at if e.last_used_at is not None else e.created_at),
                e.id,
            )
        )
        return matched

    def retrieve(self, query_profile: str, m: int = 5) -> list[ExperienceEntry]:
        """Up to m matching entries, greedily selected for utility and diversity.

        Candidates come in descending (utility, recency) order with ties on
        utility broken by fewer uses; a candidate too similar to an
        already-selected insight is skipped.
        """
        if m < 1:
            raise ValueError("m must be >= 1")
        selected: list[ExperienceEntry] = []
        for candidate in self.candidates(query_profile):
            if len(selected) >= m:
                break
            if any(
                token_jaccard(candidate.insight, chosen.insight) > self.diversity_threshold
                for chosen in selected
            ):
                continue
            selected.append(candidate)
        return selected

    # -- consolidation --------------------------------------------------------

    def consolidate(
        self,
        insights: "InsightBundle | Sequence[Insight]",
        query_profile: str,
        backend: Backend | None,
        *,
        max_tokens: int = 1024,
    ) -> list[ConsolidationDecision]:
        """Fold new insights into the library and return the applied decisions.

        Insights with no matching entries are ADDed directly; the rest go to
        the backend for an ADD/MERGE/PRUNE/KEEP decision. A malformed backend
        response degrades every pending insight to ADD. The whole batch is
        applied in one pass, after which near-duplicate actives are folded
        together and the size cap is enforced.
        """
        if hasattr(insights, "insights"):
            insights = insights.insights
        decisions: list[ConsolidationDecision] = []
        pending: list[Insight] = []
        for insight in insights:
            profile = insight.query_type or query_profile
            if not self.candidates(profile):
                decisions.append(
                    ConsolidationDecision(
                        operation=LibraryOp.ADD,
                        new_insight=insight.text,
                        rationale="no matching entries",
                    )
                )
                self._apply_add(insight.text, profile)
            else:
                pending.append(insight)

        if pending and backend is not None:
            decisions.extend(self._consolidate_with_backend(pending, query_profile, backend, max_tokens))
        elif pending:
            for insight in pending:
                decisions.append(self._default_add(insight, query_profile))

        self._dedup_actives()
        self._enforce_cap()
        return decisions

    def _default_add(self, insight: "Insight", query_profile: str) -> ConsolidationDecision:
        profile = insight.query_type or query_profile
        self._apply_add(insight.text, profile)
        return ConsolidationDecision(
            operation=LibraryOp.ADD,
            new_insight=insight.text,
            rationale="default add",
        )

    def _consolidate_with_backend(
        self,
        pending: list["Insight"],
        query_profile: str,
        backend: Backend,
        max_tokens: int,
    ) -> list[ConsolidationDecision]:
        from .prompts import ORCHESTRATOR_SYSTEM, render_library_ops_prompt

        relevant: list[ExperienceEntry] = []
        seen_ids: set[str] = set()
        for insight in pending:
            for entry in self.candidates(insight.query_type or query_profile):
                if entry.id not in seen_ids:
                    seen_ids.add(entry.id)
                    relevant.append(entry)
        user_text = render_library_ops_prompt(
            relevant, [(i.query_type, i.text) for i in pending]
        )
        request = ChatRequest(
            system_text=ORCHESTRATOR_SYSTEM,
            user_text=user_text,
            temperature=0.0,
            max_tokens=max_tokens,
            tag="library.ops",
        )
        try:
            payload = complete_json(backend, request, "library_ops")
        except MalformedStructuredOutput:
            logger.warning("library consolidation response malformed; defaulting to ADD")
            return [self._default_add(insight, query_profile) for insight in pending]

        decisions: list[ConsolidationDecision] = []
        covered: set[int] = set()
        operations = payload.get("operations", [])
        for position, op in enumerate(operations):
            insight = self._match_insight(op.get("new_insight"), pending, position, covered)
            if insight is not None:
                covered.add(pending.index(insight))
            decisions.append(self._apply_operation(op, insight, query_profile))
        for idx, insight in enumerate(pending):
            if idx not in covered:
                decisions.append(self._default_add(insight, query_profile))
        return decisions

    @staticmethod
    def _match_insight(
        text: str | None,
        pending: list["Insight"],
        position: int,
        covered: set[int],
    ) -> "Insight | None":
        if text:
            for idx, insight in enumerate(pending):
                if idx not in covered and insight.text == text:
                    return insight
        if position < len(pending) and position not in covered:
            return pending[position]
        return None

    def _apply_operation(
        self,
        op: dict,
        insight: "Insight | None",
        query_profile: str,
    ) -> ConsolidationDecision:
        kind = LibraryOp(op["operation"])
        new_insight = op.get("new_insight") or (insight.text if insight else "")
        targets = tuple(
            t for t in (op.get("target_entry_ids") or []) if self._is_active_id(t)
        )
        rationale = op.get("rationale") or ""
        profile = (insight.query_type if insight and insight.query_type else query_profile)

        if kind is LibraryOp.MERGE:
            merged_text = op.get("merged_insight") or new_insight
            if not targets or not merged_text:
                # Unusable merge directive: keep the insight by adding it.
                kind = LibraryOp.ADD
            else:
                self._apply_merge(targets, merged_text, profile)
                return ConsolidationDecision(
                    operation=LibraryOp.MERGE,
                    new_insight=new_insight,
                    target_entry_ids=targets,
                    merged_insight=merged_text,
                    rationale=rationale,
                )
        if kind is LibraryOp.PRUNE:
            if not targets:
                kind = LibraryOp.KEEP
            else:
                for target_id in targets:
                    entry = self._get(target_id)
                    if entry is not None:
                        entry.status = EntryStatus.PRUNED
                # A conflicting insight that displaced existing entries enters the
                # library itself.
                if new_insight:
                    self._apply_add(new_insight, profile)
                return ConsolidationDecision(
                    operation=LibraryOp.PRUNE,
                    new_insight=new_insight,
                    target_entry_ids=targets,
                    rationale=rationale,
                )
        if kind is LibraryOp.ADD:
            if new_insight:
                self._apply_add(new_insight, profile)
            return ConsolidationDecision(
                operation=LibraryOp.ADD, new_insight=new_insight, rationale=rationale
            )
        return ConsolidationDecision(
            operation=LibraryOp.KEEP, new_insight=new_insight, rationale=rationale
        )

    def _is_active_id(self, entry_id: str) -> bool:
        entry = self._get(entry_id)
        if entry is None or entry.status is not EntryStatus.ACTIVE:
            logger.warning("consolidation referenced unknown/pruned entry %r", entry_id)
            return False
        return True

    def _apply_add(self, insight_text: str, profile: str) -> ExperienceEntry:
        entry = ExperienceEntry(
            id=self._next_id(),
            profile=profile,
            insight=insight_text,
            uses=0,
            successes=0,
            created_at=self._clock(),
        )
        self.entries.append(entry)
        return entry

    def _apply_merge(
        self, target_ids: tuple[str, ...], merged_text: str, profile: str
    ) -> ExperienceEntry:
        """Merge targets into a fresh entry; counter totals are conserved."""
        targets = [e for tid in target_ids if (e := self._get(tid)) is not None]
        merged = ExperienceEntry(
            id=self._next_id(),
            profile=targets[0].profile if targets else profile,
            insight=merged_text,
            uses=sum(e.uses for e in targets),
            successes=sum(e.successes for e in targets),
            created_at=self._clock(),
        )
        for entry in targets:
            entry.status = EntryStatus.PRUNED
        self.entries.append(merged)
        return merged

    def _dedup_actives(self) -> None:
        """Fold near-duplicate active insights (Jaccard > 0.9) into the older entry."""
        actives = self.active_entries()
        for i, older in enumerate(actives):
            if older.status is not EntryStatus.ACTIVE:
                continue
            for newer in actives[i + 1:]:
                if newer.status is not EntryStatus.ACTIVE:
                    continue
                if token_jaccard(older.insight, newer.insight) > DEDUP_JACCARD:
                    older.uses += newer.uses
                    older.successes += newer.successes
                    newer.status = EntryStatus.PRUNED

    def _enforce_cap(self) -> None:
        """Force-prune lowest-utility, oldest entries past the size cap."""
        actives = self.active_entries()
        if len(actives) <= self.max_entries:
            return
        actives.sort(key=lambda e: (e.utility, e.created_at, e.id))
        for entry in actives[: len(actives) - self.max_entries]:
            entry.status = EntryStatus.PRUNED
            logger.info("library overflow: pruned %s (u=%.2f)", entry.id, entry.utility)

    # -- outcomes -------------------------------------------------------------

    def record_outcome(self, used_entry_ids: Sequence[str], success: bool) -> None:
        """Bump usage counters for the entries that conditioned an execution."""
        tick = self._clock()
        for entry_id in used_entry_ids:
            entry = self._get(entry_id)
            if entry is None or entry.status is not EntryStatus.ACTIVE:
                logger.warning("record_outcome ignoring unknown/pruned entry %r", entry_id)
                continue
            entry.uses += 1
            if success:
                entry.successes += 1
            entry.last_used_at = tick

    # -- persistence ----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": LIBRARY_VERSION,
            "max_entries": self.max_entries,
            "entries": [e.to_dict() for e in self.entries],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(
        cls,
        path: str | Path,
        profile_jaccard: float = DEFAULT_PROFILE_JACCARD,
        diversity_threshold: float = DEFAULT_DIVERSITY_THRESHOLD,
    ) -> "ExperienceLibrary":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("version") != LIBRARY_VERSION:
            raise ValueError(f"unsupported library version in {path}")
        library = cls(
            max_entries=payload["max_entries"],
            profile_jaccard=profile_jaccard,
            diversity_threshold=diversity_threshold,
        )
        library.entries = [ExperienceEntry.from_dict(e) for e in payload["entries"]]
        for entry in library.entries:
            entry.check()
        return library
