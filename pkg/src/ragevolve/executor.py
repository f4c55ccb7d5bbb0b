"""Run a validated execution plan against the agent layer.

Honors dependencies and parallel mode, produces a complete Trajectory with
token accounting. Step inputs are pure functions of their dependencies'
outputs, so results never depend on completion interleaving.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeoutError
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .agents import AgentInput, AgentStepResult, PromptState, build_user_text, run_agent
from .llm import Backend, BackendUnavailable, ScriptMiss
from .model import (
    AgentRole,
    ExecutionPlan,
    PlanStep,
    Query,
    StepMode,
    StepRecord,
    Trajectory,
    TrajectoryStatus,
    extract_answer,
    validate_plan,
)
from .retrieval import LexicalIndex

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExecutionConfig:
    temperature: float = 0.9
    step_timeout: float = 60.0
    max_steps: int = 12
    top_k_per_step: int = 5
    max_parallel: int = 4
    max_tokens: int = 1024

    def __post_init__(self) -> None:
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.step_timeout <= 0:
            raise ValueError("step_timeout must be positive")


class TrajectoryLog:
    """Append-only JSONL sink for trajectories; each append is one atomic line."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, trajectory: Trajectory) -> None:
        line = json.dumps(trajectory.to_dict(), separators=(",", ":"))
        with self._lock:
            with self.path.open("a", encoding="utf-8") as handle:
                handle.write(line + "\n")


def _transitive_dependents(plan: ExecutionPlan, roots: set[int]) -> set[int]:
    """All steps reachable from roots along dependency edges, roots included."""
    reached = set(roots)
    changed = True
    while changed:
        changed = False
        for step in plan.steps:
            if step.step_index not in reached and any(d in reached for d in step.depends_on):
                reached.add(step.step_index)
                changed = True
    return reached


def execute(
    plan: ExecutionPlan,
    query: Query,
    config: ExecutionConfig,
    *,
    registry: Mapping[str, AgentRole],
    prompts: Mapping[str, PromptState],
    backend: Backend,
    index: LexicalIndex | None = None,
    prompt_overrides: Mapping[str, str] | None = None,
    sink: TrajectoryLog | None = None,
) -> Trajectory:
    """Execute every step after its dependencies; returns the full Trajectory.

    Parallel-mode steps whose dependencies are satisfied run concurrently (at
    most max_parallel at a time); sequential steps impose a barrier. A step
    failure marks the trajectory failed and its transitive dependents are
    skipped, not executed, while independent steps still run. Records come
    back in ascending step order regardless of completion order.
    """
    violations = validate_plan(plan, registry)
    if violations:
        raise ValueError(f"refusing to execute invalid plan: {violations}")
    if len(plan.steps) > config.max_steps:
        raise ValueError(f"plan has {len(plan.steps)} steps, cap is {config.max_steps}")

    overrides = dict(prompt_overrides or {})
    outputs: dict[int, str] = {}
    records: dict[int, StepRecord] = {}
    failed_steps: set[int] = set()

    def run_step(step: PlanStep) -> StepRecord:
        role = registry[step.agent]
        agent_input = AgentInput(
            query_text=query.text,
            upstream_outputs={dep: outputs[dep] for dep in step.depends_on},
        )
        started = time.perf_counter()
        result: AgentStepResult = run_agent(
            role,
            prompts[step.agent],
            agent_input,
            backend,
            config.temperature,
            index=index,
            top_k=config.top_k_per_step,
            max_tokens=config.max_tokens,
            system_override=overrides.get(step.agent),
        )
        wall_ms = 0 if backend.deterministic else int((time.perf_counter() - started) * 1000)
        return StepRecord(
            step_index=step.step_index,
            agent=step.agent,
            input_text=build_user_text(agent_input),
            output_text=result.output_text,
            tool_calls=result.tool_calls,
            tokens_in=result.tokens_in,
            tokens_out=result.tokens_out,
            wall_ms=wall_ms,
        )

    def fail_step(step: PlanStep, message: str) -> None:
        failed_steps.add(step.step_index)
        agent_input = AgentInput(
            query_text=query.text,
            upstream_outputs={dep: outputs.get(dep, "") for dep in step.depends_on},
        )
        records[step.step_index] = StepRecord(
            step_index=step.step_index,
            agent=step.agent,
            input_text=build_user_text(agent_input),
            output_text=f"[error] {message}",
            tokens_in=0,
            tokens_out=0,
            wall_ms=0,
        )

    pool = ThreadPoolExecutor(max_workers=max(1, config.max_parallel))
    try:
        while True:
            skipped = _transitive_dependents(plan, failed_steps) - failed_steps
            done = set(records) | skipped
            pending = [s for s in plan.steps if s.step_index not in done]
            if not pending:
                break

            ready_parallel = [
                s
                for s in pending
                if s.mode is StepMode.PARALLEL
                and all(d in outputs for d in s.depends_on)
                and all(
                    t.step_index in done
                    for t in plan.steps
                    if t.mode is StepMode.SEQUENTIAL and t.step_index < s.step_index
                )
            ]
            if ready_parallel:
                wave = ready_parallel
            else:
                wave = [
                    s
                    for s in pending
                    if s.mode is StepMode.SEQUENTIAL
                    and all(t.step_index in done for t in plan.steps if t.step_index < s.step_index)
                ][:1]
            if not wave:
                break  # everything left is blocked behind a failure

            futures = [(step, pool.submit(run_step, step)) for step in wave]
            for step, future in futures:
                try:
                    record = future.result(timeout=config.step_timeout)
                    records[step.step_index] = record
                    outputs[step.step_index] = record.output_text
                except ScriptMiss:
                    raise
                except BackendUnavailable as exc:
                    fail_step(step, f"backend_unavailable: {exc}")
                except FutureTimeoutError:
                    fail_step(step, f"timeout after {config.step_timeout}s")
                except Exception as exc:  # noqa: BLE001 - step isolation boundary
                    fail_step(step, f"{type(exc).__name__}: {exc}")
    finally:
        pool.shutdown(wait=False, cancel_futures=True)

    ordered = tuple(records[i] for i in sorted(records))
    status = (
        TrajectoryStatus.COMPLETED
        if not failed_steps and len(records) == len(plan.steps)
        else TrajectoryStatus.FAILED
    )
    terminal = plan.terminal_steps()[0]
    final_answer = extract_answer(outputs[terminal.step_index]) if terminal.step_index in outputs else ""
    trajectory = Trajectory(
        query_id=query.id,
        plan=plan,
        records=ordered,
        final_answer=final_answer,
        status=status,
    )
    if sink is not None:
        sink.append(trajectory)
    return trajectory
