"""Role-aware prompt evolution.

For an agent blamed on a failed trajectory: buffer the failure, generate
prompt variants along behavioral axes, replay the original plan with each
variant, contrast the outcomes into operational rules and behavioral
principles, and fold those into the agent's prompt under hard caps (rule
count, principle count, rendered length) with the core role text preserved
byte-for-byte.
"""

from __future__ import annotations

import json
import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

from .agents import PromptState, PromptStore, render_parts, render_prompt
from .evaluation import build_reward
from .executor import ExecutionConfig, execute
from .llm import Backend, BackendError, ChatRequest, MalformedStructuredOutput, complete_json
from .model import AgentRole, Query, Reward, StepRecord, Trajectory
from .prompts import PROMPT_MANAGER_SYSTEM, render_contrastive_prompt, render_variant_prompt
from .retrieval import LexicalIndex
from .textutil import token_jaccard

logger = logging.getLogger(__name__)

DEFAULT_BUFFER_SIZE = 10
DEFAULT_MAX_RULES = 8
DEFAULT_MAX_PRINCIPLES = 5
DEFAULT_RULE_DEDUP_JACCARD = 0.8
DIGEST_CHARS = 300


class VariantAxis(str, Enum):
    THOROUGHNESS = "thoroughness"
    RISK_SENSITIVITY = "risk_sensitivity"
    ERROR_CORRECTION = "error_correction"
    HEURISTIC_INJECTION = "heuristic_injection"
    EFFICIENCY = "efficiency"


AXIS_HINTS: dict[VariantAxis, str] = {
    VariantAxis.THOROUGHNESS: "cover every sub-case and verify completeness before finishing",
    VariantAxis.RISK_SENSITIVITY: "be more cautious about unsupported claims and flag uncertainty",
    VariantAxis.ERROR_CORRECTION: "detect mistakes in earlier context and correct them before proceeding",
    VariantAxis.HEURISTIC_INJECTION: "apply concrete domain heuristics that would have avoided the failures",
    VariantAxis.EFFICIENCY: "cut redundant work and keep outputs short without losing required facts",
}


@dataclass(frozen=True)
class RopeConfig:
    axes: tuple[VariantAxis, ...] = tuple(VariantAxis)
    buffer_size: int = DEFAULT_BUFFER_SIZE
    max_rules: int = DEFAULT_MAX_RULES
    max_principles: int = DEFAULT_MAX_PRINCIPLES
    char_budget: int = 6000
    rule_dedup_jaccard: float = DEFAULT_RULE_DEDUP_JACCARD
    max_tokens: int = 2048


@dataclass(frozen=True)
class BufferEntry:
    trajectory_id: str
    role_records: tuple[StepRecord, ...]
    reward: Reward

    def to_dict(self) -> dict:
        return {
            "trajectory_id": self.trajectory_id,
            "role_records": [r.to_dict() for r in self.role_records],
            "reward": self.reward.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BufferEntry":
        return cls(
            trajectory_id=data["trajectory_id"],
            role_records=tuple(StepRecord.from_dict(r) for r in data["role_records"]),
            reward=Reward(**data["reward"]),
        )


class FailureBuffer:
    """Ring of the last B trajectories in which a role was blamed, newest first."""

    def __init__(self, role: str, size: int = DEFAULT_BUFFER_SIZE) -> None:
        self.role = role
        self.entries: deque[BufferEntry] = deque(maxlen=size)

    def push(self, entry: BufferEntry) -> None:
        self.entries.appendleft(entry)

    def __len__(self) -> int:
        return len(self.entries)


class FailureBuffers:
    """Per-role failure buffers with JSON persistence."""

    def __init__(self, size: int = DEFAULT_BUFFER_SIZE) -> None:
        self.size = size
        self.buffers: dict[str, FailureBuffer] = {}

    def get(self, role: str) -> FailureBuffer:
        if role not in self.buffers:
            self.buffers[role] = FailureBuffer(role, self.size)
        return self.buffers[role]

    def save(self, path: str | Path) -> None:
        payload = {
            role: [entry.to_dict() for entry in buffer.entries]
            for role, buffer in sorted(self.buffers.items())
        }
        Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, size: int = DEFAULT_BUFFER_SIZE) -> "FailureBuffers":
        buffers = cls(size)
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        for role, raw_entries in payload.items():
            buffer = buffers.get(role)
            for raw in reversed(raw_entries):  # re-push oldest first to restore order
                buffer.push(BufferEntry.from_dict(raw))
        return buffers


@dataclass(frozen=True)
class PromptVariant:
    axis: VariantAxis
    variant_text: str


@dataclass(frozen=True)
class VariantResult:
    variant: PromptVariant
    trajectory: Trajectory
    reward: Reward


@dataclass(frozen=True)
class RuleItem:
    rule: str
    derived_from: str


@dataclass(frozen=True)
class PrincipleItem:
    principle: str
    derived_from: str


@dataclass(frozen=True)
class PromptDelta:
    operational_rules: tuple[RuleItem, ...] = ()
    behavioral_principles: tuple[PrincipleItem, ...] = ()

    def is_empty(self) -> bool:
        return not (self.operational_rules or self.behavioral_principles)

    def to_dict(self) -> dict:
        return {
            "operational_rules": [
                {"rule": r.rule, "derived_from": r.derived_from}
                for r in self.operational_rules
            ],
            "behavioral_principles": [
                {"principle": p.principle, "derived_from": p.derived_from}
                for p in self.behavioral_principles
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PromptDelta":
        return cls(
            operational_rules=tuple(
                RuleItem(r["rule"], r["derived_from"]) for r in data["operational_rules"]
            ),
            behavioral_principles=tuple(
                PrincipleItem(p["principle"], p["derived_from"])
                for p in data["behavioral_principles"]
            ),
        )


EMPTY_DELTA = PromptDelta()


def _failure_digests(buffer: FailureBuffer, limit: int = 3) -> str:
    if not buffer.entries:
        return "(none)"
    blocks = []
    for entry in list(buffer.entries)[:limit]:
        lines = [f"- trajectory {entry.trajectory_id}: f1={entry.reward.f1:.3f}"]
        for record in entry.role_records:
            lines.append(
                f"  step {record.step_index} output: {record.output_text[:DIGEST_CHARS]}"
            )
        blocks.append("\n".join(lines))
    return "\n".join(blocks)


def generate_variants(
    role: AgentRole,
    state: PromptState,
    buffer: FailureBuffer,
    backend: Backend,
    cfg: RopeConfig,
) -> list[PromptVariant]:
    """One candidate prompt per configured axis, core-preservation enforced.

    A variant that drops the core text or blows the char budget is
    regenerated once with the violation quoted, then dropped.
    """
    if not buffer.entries:
        raise ValueError("failure buffer is empty; nothing to evolve from")
    current = render_prompt(state)
    digests = _failure_digests(buffer)
    variants: list[PromptVariant] = []
    for axis in cfg.axes:
        user_text = render_variant_prompt(current, axis.value, AXIS_HINTS[axis], digests)
        text = _request_variant(backend, user_text, cfg)
        problem = _variant_problem(text, state, cfg)
        if problem is not None:
            retry_text = user_text + (
                f"\n\nYour previous variant failed a constraint: {problem}. "
                "Produce the full prompt again, preserving the core role definition "
                f"verbatim and staying within {cfg.char_budget} characters."
            )
            text = _request_variant(backend, retry_text, cfg)
            problem = _variant_problem(text, state, cfg)
        if problem is not None:
            logger.warning("dropping %s variant for %s: %s", axis.value, role.name, problem)
            continue
        variants.append(PromptVariant(axis=axis, variant_text=text))
    return variants


def _request_variant(backend: Backend, user_text: str, cfg: RopeConfig) -> str:
    response = backend.complete(
        ChatRequest(
            system_text=PROMPT_MANAGER_SYSTEM,
            user_text=user_text,
            temperature=0.7,
            max_tokens=cfg.max_tokens,
            tag="rope.variant",
        )
    )
    return response.text.strip()


def _variant_problem(text: str, state: PromptState, cfg: RopeConfig) -> str | None:
    if not text:
        return "empty variant"
    if state.core_text not in text:
        return "core role definition was not preserved verbatim"
    if len(text) > cfg.char_budget:
        return f"variant exceeds the {cfg.char_budget}-character budget"
    return None


def reexecute_with_variant(
    trajectory: Trajectory,
    role_name: str,
    variant: PromptVariant,
    config: ExecutionConfig,
    *,
    query: Query,
    registry: Mapping[str, AgentRole],
    prompts: Mapping[str, PromptState],
    backend: Backend,
    index: LexicalIndex | None = None,
) -> tuple[Trajectory, Reward]:
    """Replay the full original plan with the role's prompt swapped to the variant.

    Every occurrence of the role uses the variant; all other roles keep their
    current prompts. The reward is recomputed from the replayed answer.
    """
    replayed = execute(
        trajectory.plan,
        query,
        config,
        registry=registry,
        prompts=prompts,
        backend=backend,
        index=index,
        prompt_overrides={role_name: variant.variant_text},
    )
    return replayed, build_reward(replayed, query)


def _format_variant_results(results: Sequence[VariantResult]) -> str:
    blocks = []
    for result in results:
        step_lines = [
            f"  step {r.step_index} [{r.agent}]: {r.output_text[:DIGEST_CHARS]}"
            for r in result.trajectory.records
        ]
        blocks.append(
            f"#### Variant ({result.variant.axis.value})\n"
            f"Variant prompt:\n{result.variant.variant_text}\n"
            f"Re-executed steps:\n" + "\n".join(step_lines) + "\n"
            f"Final answer: {result.trajectory.final_answer}\n"
            f"F1 score: {result.reward.f1:.3f}\n"
            f"Tokens used: {result.reward.total_tokens}"
        )
    return "\n\n".join(blocks)


def contrastive_analysis(
    role: AgentRole,
    state: PromptState,
    buffer: FailureBuffer,
    results: Sequence[VariantResult],
    backend: Backend,
    cfg: RopeConfig,
) -> tuple[PromptDelta, str]:
    """Extract rules/principles by contrasting variant outcomes.

    Returns an empty delta without any backend call when fewer than two
    results exist or all replays scored the same; there is no contrast.
    """
    if len(results) < 2:
        return EMPTY_DELTA, ""
    f1s = [r.reward.f1 for r in results]
    if max(f1s) == min(f1s):
        return EMPTY_DELTA, ""
    user_text = render_contrastive_prompt(
        agent_name=role.name,
        agent_role=role.description,
        original_prompt=render_prompt(state),
        variant_results=_format_variant_results(results),
    )
    request = ChatRequest(
        system_text=PROMPT_MANAGER_SYSTEM,
        user_text=user_text,
        temperature=0.0,
        max_tokens=cfg.max_tokens,
        tag="rope.analysis",
    )
    try:
        payload = complete_json(backend, request, "rope_analysis")
    except MalformedStructuredOutput as exc:
        logger.warning("contrastive analysis malformed for %s: %s", role.name, exc)
        return EMPTY_DELTA, ""
    rules = tuple(
        RuleItem(rule=_flatten(r["rule"]), derived_from=r["derived_from"])
        for r in payload["operational_rules"]
        if r["rule"].strip()
    )
    principles = tuple(
        PrincipleItem(principle=_flatten(p["principle"]), derived_from=p["derived_from"])
        for p in payload["behavioral_principles"]
        if p["principle"].strip()
    )
    return PromptDelta(rules, principles), payload.get("updated_prompt", "")


def _flatten(text: str) -> str:
    """Rules and principles must be single-line for the prompt layout to parse back."""
    return " ".join(text.split())


def consolidate(state: PromptState, delta: PromptDelta, cfg: RopeConfig) -> PromptState:
    """Project the delta onto the prompt constraints; the core text never changes.

    New items are appended then deduplicated against existing ones; rule and
    principle counts are capped with oldest-first eviction; the rendered
    length budget is enforced by evicting further oldest rules. A delta that
    cannot fit leaves the state unchanged, as does one that fully
    deduplicates away.
    """

    def dedup(existing: tuple[str, ...], new_items: Sequence[str]) -> list[str]:
        accepted: list[str] = []
        for item in new_items:
            pool = list(existing) + accepted
            if any(token_jaccard(item, other) > cfg.rule_dedup_jaccard for other in pool):
                continue
            accepted.append(item)
        return accepted

    new_rules = dedup(state.operational_rules, [r.rule for r in delta.operational_rules])
    new_principles = dedup(
        state.behavioral_principles, [p.principle for p in delta.behavioral_principles]
    )
    if not new_rules and not new_principles:
        return state

    rules = list(state.operational_rules) + new_rules
    principles = list(state.behavioral_principles) + new_principles
    while len(rules) > cfg.max_rules:
        rules.pop(0)
    while len(principles) > cfg.max_principles:
        principles.pop(0)

    def rendered_length(rs: list[str], ps: list[str]) -> int:
        return len(render_parts(state.core_text, ps, rs))

    # Budget enforcement may evict pre-existing rules, oldest first, but never
    # the rules being added: a delta that cannot fit is rejected outright.
    new_rule_set = set(new_rules)
    while rendered_length(rules, principles) > cfg.char_budget:
        if rules and rules[0] not in new_rule_set:
            rules.pop(0)
            continue
        logger.warning("delta for %s cannot fit the char budget; rejected", state.role)
        return state

    return PromptState(
        role=state.role,
        core_text=state.core_text,
        operational_rules=tuple(rules),
        behavioral_principles=tuple(principles),
        version=state.version + 1,
        char_budget=state.char_budget,
    )


class RopeAuditLog:
    """JSONL record of every evolution attempt: axes, rewards, adoption, delta."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, record: dict) -> None:
        with self._lock:
            with self.path.open("a", encoding="utf-8") as handle:
                handle.write(json.dumps(record, separators=(",", ":")) + "\n")


@dataclass
class RopeEngine:
    """Bundles the collaborators prompt evolution needs for one run."""

    registry: Mapping[str, AgentRole]
    prompt_store: PromptStore
    buffers: FailureBuffers
    agent_backend: Backend
    rope_backend: Backend
    exec_config: ExecutionConfig
    cfg: RopeConfig = field(default_factory=RopeConfig)
    index: LexicalIndex | None = None
    audit_log: RopeAuditLog | None = None

    def evolve_agent(
        self,
        role_name: str,
        trajectory: Trajectory,
        reward: Reward,
        query: Query,
        tick: int = 0,
    ) -> PromptState | None:
        """Full evolution pipeline for one blamed role on one trajectory.

        The new prompt is adopted only when the best variant strictly beats
        the original trajectory's f1; every soft failure along the way
        degrades to "no change". Returns the adopted state, if any.
        """
        role = self.registry[role_name]
        buffer = self.buffers.get(role_name)
        buffer.push(
            BufferEntry(
                trajectory_id=trajectory.trajectory_id(),
                role_records=tuple(r for r in trajectory.records if r.agent == role_name),
                reward=reward,
            )
        )
        state = self.prompt_store.load(role_name)
        prompts = self.prompt_store.load_all(self.registry)
        try:
            variants = generate_variants(role, state, buffer, self.rope_backend, self.cfg)
        except BackendError as exc:
            logger.warning("variant generation failed for %s: %s", role_name, exc)
            variants = []
        results: list[VariantResult] = []
        for variant in variants:
            replayed, replay_reward = reexecute_with_variant(
                trajectory,
                role_name,
                variant,
                self.exec_config,
                query=query,
                registry=self.registry,
                prompts=prompts,
                backend=self.agent_backend,
                index=self.index,
            )
            results.append(VariantResult(variant, replayed, replay_reward))

        delta, _proposed = contrastive_analysis(
            role, state, buffer, results, self.rope_backend, self.cfg
        )
        best_f1 = max((r.reward.f1 for r in results), default=0.0)
        adopted_state: PromptState | None = None
        if best_f1 > reward.f1 and not delta.is_empty():
            candidate = consolidate(state, delta, self.cfg)
            if candidate.version > state.version:
                self.prompt_store.save(candidate, provenance="rope", created_at=tick)
                adopted_state = candidate

        if self.audit_log is not None:
            self.audit_log.append(
                {
                    "role": role_name,
                    "trajectory_id": trajectory.trajectory_id(),
                    "axes": [v.axis.value for v in variants],
                    "rewards": [
                        {
                            "axis": r.variant.axis.value,
                            "f1": r.reward.f1,
                            "tokens": r.reward.total_tokens,
                        }
                        for r in results
                    ],
                    "original_f1": reward.f1,
                    "adopted": adopted_state is not None,
                    "delta": delta.to_dict(),
                }
            )
        return adopted_state
