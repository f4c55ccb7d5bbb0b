"""Core domain types: queries, agent roles, execution plans, trajectories, rewards.

Everything here is an immutable value object safe to share across concurrent
executors. The only behavior is validation and (de)serialization.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterable, Mapping


class IngestError(Exception):
    """Raised when an input file (corpus or dataset) cannot be parsed."""


class ReasoningType(str, Enum):
    BRIDGE = "bridge"
    INTERSECTION = "intersection"
    COMPARISON = "comparison"
    TEMPORAL = "temporal"
    CAUSAL = "causal"
    AMBIGUOUS = "ambiguous"
    UNKNOWN = "unknown"


class Complexity(str, Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"
    UNKNOWN = "unknown"


class StepMode(str, Enum):
    SEQUENTIAL = "sequential"
    PARALLEL = "parallel"


class TrajectoryStatus(str, Enum):
    COMPLETED = "completed"
    FAILED = "failed"


SEARCH_TOOL = "search"

# Canonical roster order; also the order roles are presented to the planner.
ROLE_NAMES = (
    "QueryDecomposer",
    "Retriever",
    "AnswerGenerator",
    "QueryRewriter",
    "EvidenceSelector",
    "ContextValidator",
    "ReflectAgent",
    "ConcludeAgent",
)


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    gold_answers: tuple[str, ...] = ()
    reasoning_type: ReasoningType = ReasoningType.UNKNOWN
    complexity: Complexity = Complexity.UNKNOWN

    def __post_init__(self) -> None:
        object.__setattr__(self, "gold_answers", tuple(self.gold_answers))
        if not self.text or not self.text.strip():
            raise ValueError("query text must be nonempty")
        if any(not a for a in self.gold_answers):
            raise ValueError(f"query {self.id!r}: gold answers must be nonempty strings")


@dataclass(frozen=True)
class AgentRole:
    """A named specialist: capability text plus the tool identifiers it may use.

    Tool identifiers beyond the search tool are accepted as extension points;
    only the search tool has a dispatch implementation.
    """

    name: str
    description: str
    tools: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "tools", frozenset(self.tools))
        if not self.name:
            raise ValueError("role name must be nonempty")


def build_registry(roles: Iterable[AgentRole]) -> dict[str, AgentRole]:
    """Index roles by name, enforcing name uniqueness."""
    registry: dict[str, AgentRole] = {}
    for role in roles:
        if role.name in registry:
            raise ValueError(f"duplicate role name {role.name!r}")
        registry[role.name] = role
    return registry


@dataclass(frozen=True)
class PlanStep:
    step_index: int
    agent: str
    depends_on: tuple[int, ...] = ()
    mode: StepMode = StepMode.SEQUENTIAL

    def __post_init__(self) -> None:
        object.__setattr__(self, "depends_on", tuple(self.depends_on))
        object.__setattr__(self, "mode", StepMode(self.mode))


@dataclass(frozen=True)
class ExecutionPlan:
    """A DAG of agent steps. Indices are 1-based and dependencies point backward."""

    query_profile: str
    steps: tuple[PlanStep, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))

    @property
    def agent_names(self) -> tuple[str, ...]:
        return tuple(s.agent for s in self.steps)

    def terminal_steps(self) -> tuple[PlanStep, ...]:
        depended = {d for s in self.steps for d in s.depends_on}
        return tuple(s for s in self.steps if s.step_index not in depended)

    def shape(self) -> tuple[str, ...]:
        """The plan's structural signature: agent names in step order."""
        return self.agent_names

    def to_dict(self) -> dict[str, Any]:
        return {
            "query_profile": self.query_profile,
            "steps": [
                {
                    "step_index": s.step_index,
                    "agent": s.agent,
                    "depends_on": list(s.depends_on),
                    "mode": s.mode.value,
                }
                for s in self.steps
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExecutionPlan":
        return cls(
            query_profile=data["query_profile"],
            steps=tuple(
                PlanStep(
                    step_index=s["step_index"],
                    agent=s["agent"],
                    depends_on=tuple(s["depends_on"]),
                    mode=StepMode(s["mode"]),
                )
                for s in data["steps"]
            ),
        )


def validate_plan(plan: ExecutionPlan, registry: Mapping[str, AgentRole]) -> list[str]:
    """Check all plan invariants; returns [] when the plan is acceptable.

    Violations are data, not failures: each message names the offending step
    index and the rule it breaks.
    """
    violations: list[str] = []
    if not plan.steps:
        return ["plan has no steps"]
    for position, step in enumerate(plan.steps, start=1):
        if step.step_index != position:
            violations.append(
                f"step indices must be 1..n with no gaps: "
                f"position {position} holds index {step.step_index}"
            )
    indexed = {s.step_index for s in plan.steps}
    for step in plan.steps:
        for dep in step.depends_on:
            if dep == step.step_index:
                violations.append(f"self-dependency at step {step.step_index}")
            elif dep >= step.step_index:
                violations.append(
                    f"step {step.step_index}: dependency on step {dep} is not "
                    f"strictly smaller"
                )
            elif dep < 1 or dep not in indexed:
                violations.append(f"step {step.step_index}: dependency {dep} out of range")
        if step.agent not in registry:
            violations.append(f"step {step.step_index}: unknown agent {step.agent!r}")
    terminals = plan.terminal_steps()
    if len(terminals) != 1:
        violations.append(
            "plan must have exactly one terminal step, found "
            f"{len(terminals)}: {sorted(s.step_index for s in terminals)}"
        )
    return violations


@dataclass(frozen=True)
class ToolCall:
    tool: str
    arguments: Mapping[str, Any]
    result_digest: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "tool": self.tool,
            "arguments": dict(self.arguments),
            "result_digest": self.result_digest,
        }


@dataclass(frozen=True)
class StepRecord:
    step_index: int
    agent: str
    input_text: str
    output_text: str
    tool_calls: tuple[ToolCall, ...] = ()
    tokens_in: int = 0
    tokens_out: int = 0
    wall_ms: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "tool_calls", tuple(self.tool_calls))
        if self.tokens_in < 0 or self.tokens_out < 0:
            raise ValueError("token counts must be nonnegative")

    def to_dict(self) -> dict[str, Any]:
        return {
            "step_index": self.step_index,
            "agent": self.agent,
            "input_text": self.input_text,
            "output_text": self.output_text,
            "tool_calls": [c.to_dict() for c in self.tool_calls],
            "tokens_in": self.tokens_in,
            "tokens_out": self.tokens_out,
            "wall_ms": self.wall_ms,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "StepRecord":
        return cls(
            step_index=data["step_index"],
            agent=data["agent"],
            input_text=data["input_text"],
            output_text=data["output_text"],
            tool_calls=tuple(
                ToolCall(c["tool"], c["arguments"], c["result_digest"])
                for c in data["tool_calls"]
            ),
            tokens_in=data["tokens_in"],
            tokens_out=data["tokens_out"],
            wall_ms=data["wall_ms"],
        )


@dataclass(frozen=True)
class Trajectory:
    query_id: str
    plan: ExecutionPlan
    records: tuple[StepRecord, ...]
    final_answer: str
    status: TrajectoryStatus

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))

    @property
    def total_tokens(self) -> int:
        return sum(r.tokens_in + r.tokens_out for r in self.records)

    def executed_roles(self) -> tuple[str, ...]:
        """Role names in canonical execution order (ascending step index)."""
        return tuple(r.agent for r in self.records)

    def trajectory_id(self) -> str:
        """Stable content hash, usable as an identifier across logs."""
        payload = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha1(payload).hexdigest()[:12]

    def to_dict(self) -> dict[str, Any]:
        return {
            "query_id": self.query_id,
            "plan": self.plan.to_dict(),
            "records": [r.to_dict() for r in self.records],
            "final_answer": self.final_answer,
            "status": self.status.value,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Trajectory":
        return cls(
            query_id=data["query_id"],
            plan=ExecutionPlan.from_dict(data["plan"]),
            records=tuple(StepRecord.from_dict(r) for r in data["records"]),
            final_answer=data["final_answer"],
            status=TrajectoryStatus(data["status"]),
        )


@dataclass(frozen=True)
class Reward:
    f1: float
    em: int
    accuracy: int
    total_tokens: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.f1 <= 1.0:
            raise ValueError("f1 must be in [0, 1]")
        if self.em not in (0, 1) or self.accuracy not in (0, 1):
            raise ValueError("em and accuracy must be 0 or 1")
        if self.total_tokens < 0:
            raise ValueError("total_tokens must be nonnegative")
        if self.em == 1 and self.f1 != 1.0:
            raise ValueError("em = 1 implies f1 = 1")

    def to_dict(self) -> dict[str, Any]:
        return {
            "f1": self.f1,
            "em": self.em,
            "accuracy": self.accuracy,
            "total_tokens": self.total_tokens,
        }


def extract_answer(output_text: str) -> str:
    """Pull the final answer out of a terminal step's output.

    The full output is the answer unless some line begins with "Answer:", in
    which case the remainder of the first such line is used.
    """
    for line in output_text.splitlines():
        stripped = line.strip()
        if stripped.startswith("Answer:"):
            return stripped[len("Answer:"):].strip()
    return output_text.strip()
