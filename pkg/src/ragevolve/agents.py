"""Concrete behavior of the eight agent roles.

Covers prompt assembly from an evolving PromptState, input construction from
dependency outputs, search-tool dispatch for the Retriever, and the on-disk
prompt store with per-role version history.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .llm import Backend, ChatRequest
from .model import SEARCH_TOOL, ROLE_NAMES, AgentRole, ToolCall, build_registry
from .retrieval import LexicalIndex, Passage, search

logger = logging.getLogger(__name__)

DEFAULT_CHAR_BUDGET = 6000

_PRINCIPLES_HEADER = "Behavioral principles:"
_RULES_HEADER = "Operational rules:"

_ROLE_DESCRIPTIONS = {
    "QueryDecomposer": "splits a complex question into ordered, answerable sub-questions",
    "Retriever": "searches the corpus and summarizes the retrieved evidence",
    "AnswerGenerator": "produces the final answer from the question and gathered evidence",
    "QueryRewriter": "reformulates a question into a sharper, self-contained form",
    "EvidenceSelector": "filters gathered evidence down to the directly relevant sentences",
    "ContextValidator": "checks the evidence for sufficiency and consistency",
    "ReflectAgent": "reviews earlier steps for mistakes and proposes corrections",
    "ConcludeAgent": "aggregates or compares upstream findings into one final answer",
}


def default_registry() -> dict[str, AgentRole]:
    """The standard eight-role roster; only the Retriever carries the search tool."""
    roles = [
        AgentRole(
            name=name,
            description=_ROLE_DESCRIPTIONS[name],
            tools=frozenset({SEARCH_TOOL}) if name == "Retriever" else frozenset(),
        )
        for name in ROLE_NAMES
    ]
    return build_registry(roles)


def default_core_text(role_name: str) -> str:
    """Load the versioned v1 core text shipped for a role."""
    path = resources.files("ragevolve.resources.roles").joinpath(f"{role_name}.txt")
    return path.read_text(encoding="utf-8").strip()


@dataclass(frozen=True)
class PromptState:
    """A role prompt decomposed into core text, rules, and principles.

    The core text is never altered by evolution; rules and principles are
    single-line strings so the rendered prompt parses back exactly.
    """

    role: str
    core_text: str
    operational_rules: tuple[str, ...] = ()
    behavioral_principles: tuple[str, ...] = ()
    version: int = 1
    char_budget: int = DEFAULT_CHAR_BUDGET

    def __post_init__(self) -> None:
        object.__setattr__(self, "operational_rules", tuple(self.operational_rules))
        object.__setattr__(self, "behavioral_principles", tuple(self.behavioral_principles))
        if not self.core_text.strip():
            raise ValueError("core_text must be nonempty")
        for item in self.operational_rules + self.behavioral_principles:
            if not item.strip() or "\n" in item:
                raise ValueError("rules and principles must be nonempty single-line strings")
        if self.version < 1:
            raise ValueError("version must be >= 1")
        if len(render_prompt(self)) > self.char_budget:
            raise ValueError(
                f"rendered prompt for {self.role} exceeds char budget {self.char_budget}"
            )


def render_parts(
    core_text: str,
    behavioral_principles: Sequence[str],
    operational_rules: Sequence[str],
) -> str:
    parts = [core_text]
    if behavioral_principles:
        lines = "\n".join(f"- {p}" for p in behavioral_principles)
        parts.append(f"{_PRINCIPLES_HEADER}\n{lines}")
    if operational_rules:
        lines = "\n".join(f"- {r}" for r in operational_rules)
        parts.append(f"{_RULES_HEADER}\n{lines}")
    return "\n\n".join(parts)


def render_prompt(state: PromptState) -> str:
    """Compose the system text: core, then principles, then rules.

    Empty blocks emit no header, so a bare state renders as its core text.
    The layout is byte-deterministic and reversible via parse_prompt.
    """
    return render_parts(state.core_text, state.behavioral_principles, state.operational_rules)


def parse_prompt(text: str) -> tuple[str, tuple[str, ...], tuple[str, ...]]:
    """Invert render_prompt; returns (core_text, rules, principles)."""

    def split_block(body: str, header: str) -> tuple[str, tuple[str, ...]]:
        marker = f"\n\n{header}\n"
        if marker not in body:
            return body, ()
        head, _, tail = body.rpartition(marker)
        items = tuple(line[2:] for line in tail.splitlines() if line.startswith("- "))
        return head, items

    remainder, rules = split_block(text, _RULES_HEADER)
    remainder, principles = split_block(remainder, _PRINCIPLES_HEADER)
    return remainder, rules, principles


@dataclass(frozen=True)
class AgentInput:
    """What one step sees: the query plus the outputs of its dependencies."""

    query_text: str
    upstream_outputs: Mapping[int, str]
    retrieved_passages: tuple[Passage, ...] | None = None


def build_user_text(agent_input: AgentInput) -> str:
    parts = [f"Question: {agent_input.query_text}"]
    for step_index in sorted(agent_input.upstream_outputs):
        parts.append(f"Context from step {step_index}:\n{agent_input.upstream_outputs[step_index]}")
    return "\n\n".join(parts)


@dataclass(frozen=True)
class AgentStepResult:
    output_text: str
    tool_calls: tuple[ToolCall, ...]
    tokens_in: int
    tokens_out: int


def _parse_search_directive(text: str) -> str | None:
    for line in text.splitlines():
        stripped = line.strip()
        if stripped.upper().startswith("SEARCH:"):
            query = stripped[len("SEARCH:"):].strip()
            if query:
                return query
    return None


def _format_passages(passages: Sequence[tuple[Passage, float]]) -> str:
    if not passages:
        return "(no passages matched the search)"
    blocks = []
    for passage, _score in passages:
        title = f" ({passage.title})" if passage.title else ""
        blocks.append(f"[{passage.id}]{title} {passage.text}")
    return "\n".join(blocks)


def run_agent(
    role: AgentRole,
    state: PromptState,
    agent_input: AgentInput,
    backend: Backend,
    temperature: float,
    *,
    index: LexicalIndex | None = None,
    top_k: int = 5,
    max_tokens: int = 1024,
    system_override: str | None = None,
) -> AgentStepResult:
    """Run one step of one role and return its record fragment.

    The Retriever is two-phase: it first formulates a search string, then
    summarizes the retrieved passages, making exactly one tool call per step.
    Every
    other role is a single completion with no tool calls.
    """
    system_text = system_override if system_override is not None else render_prompt(state)
    user_text = build_user_text(agent_input)
    if role.name != "Retriever":
        response = backend.complete(
            ChatRequest(
                system_text=system_text,
                user_text=user_text,
                temperature=temperature,
                max_tokens=max_tokens,
                tag=f"agent.{role.name}",
            )
        )
        return AgentStepResult(
            output_text=response.text,
            tool_calls=(),
            tokens_in=response.tokens_in,
            tokens_out=response.tokens_out,
        )

    if index is None:
        raise ValueError("Retriever requires a configured lexical index")
    first = backend.complete(
        ChatRequest(
            system_text=system_text,
            user_text=user_text,
            temperature=temperature,
            max_tokens=max_tokens,
            tag="agent.Retriever.search",
        )
    )
    search_string = _parse_search_directive(first.text)
    if search_string is None:
        # Degraded path: no directive found, fall back to the raw input text.
        logger.warning("Retriever emitted no SEARCH directive; using raw input as query")
        search_string = user_text
    results = search(index, search_string, k=top_k)
    digest = ",".join(p.id for p, _ in results) if results else "no-results"
    tool_call = ToolCall(
        tool=SEARCH_TOOL,
        arguments={"query": search_string, "k": top_k},
        result_digest=digest,
    )
    summarize_user = (
        f"Question: {agent_input.query_text}\n\n"
        f"Retrieved passages:\n{_format_passages(results)}"
    )
    second = backend.complete(
        ChatRequest(
            system_text=system_text,
            user_text=summarize_user,
            temperature=temperature,
            max_tokens=max_tokens,
            tag="agent.Retriever.summarize",
        )
    )
    return AgentStepResult(
        output_text=second.text,
        tool_calls=(tool_call,),
        tokens_in=first.tokens_in + second.tokens_in,
        tokens_out=first.tokens_out + second.tokens_out,
    )


class PromptStore:
    """One JSON file per role holding the full PromptState version history."""

    def __init__(self, root: str | Path, char_budget: int = DEFAULT_CHAR_BUDGET) -> None:
        self.root = Path(root)
        self.char_budget = char_budget
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, role_name: str) -> Path:
        return self.root / f"{role_name}.json"

    def ensure_defaults(self, registry: Mapping[str, AgentRole]) -> None:
        """Write v1 baseline states for any role missing from the store."""
        for name in registry:
            if not self._path(name).exists():
                state = PromptState(
                    role=name,
                    core_text=default_core_text(name),
                    char_budget=self.char_budget,
                )
                self.save(state, provenance="baseline", created_at=0)

    def history(self, role_name: str) -> list[dict]:
        path = self._path(role_name)
        if not path.exists():
            raise FileNotFoundError(f"prompt store has no file for role {role_name!r}: {path}")
        try:
            return json.loads(path.read_text(encoding="utf-8"))["versions"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValueError(f"prompt store file {path} is unreadable: {exc}") from exc

    def load(self, role_name: str) -> PromptState:
        versions = self.history(role_name)
        latest = max(versions, key=lambda v: v["version"])
        return PromptState(
            role=role_name,
            core_text=latest["core_text"],
            operational_rules=tuple(latest["operational_rules"]),
            behavioral_principles=tuple(latest["behavioral_principles"]),
            version=latest["version"],
            char_budget=self.char_budget,
        )

    def load_all(self, registry: Mapping[str, AgentRole]) -> dict[str, PromptState]:
        return {name: self.load(name) for name in registry}

    def save(self, state: PromptState, provenance: str, created_at: int) -> None:
        """Append a version; created_at is a logical tick, not wall time."""
        path = self._path(state.role)
        if path.exists():
            payload = json.loads(path.read_text(encoding="utf-8"))
        else:
            payload = {"role": state.role, "versions": []}
        existing = {v["version"] for v in payload["versions"]}
        if state.version in existing:
            raise ValueError(f"version {state.version} already stored for {state.role}")
        payload["versions"].append(
            {
                "version": state.version,
                "core_text": state.core_text,
                "operational_rules": list(state.operational_rules),
                "behavioral_principles": list(state.behavioral_principles),
                "created_at": created_at,
                "provenance": provenance,
            }
        )
        path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
