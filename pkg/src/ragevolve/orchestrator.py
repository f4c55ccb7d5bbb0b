"""Experience-conditioned plan sampling, group rollouts, insight extraction,
and topology mutation.

The orchestrator lifts optimization from token generation to the cooperation
topology: it samples a group of candidate plans per query, ranks them by task
reward then efficiency, and distills natural-language insights from groups
that contain both successful and failed members.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

from .agents import PromptState
from .evaluation import GroupMember, GroupRollout, build_reward
from .executor import ExecutionConfig, execute
from .library import ExperienceEntry
from .llm import Backend, BackendUnavailable, ChatRequest, MalformedStructuredOutput, complete_json
from .model import (
    AgentRole,
    ExecutionPlan,
    PlanStep,
    Query,
    StepMode,
    TrajectoryStatus,
    validate_plan,
)
from .prompts import (
    ORCHESTRATOR_SYSTEM,
    format_experiences,
    render_insight_prompt,
    render_plan_prompt,
)
from .retrieval import LexicalIndex

logger = logging.getLogger(__name__)

SUMMARY_TRUNCATION = 500  # chars of each step output shown to the extractor

FALLBACK_PLAN_AGENTS = ("QueryDecomposer", "Retriever", "EvidenceSelector", "AnswerGenerator")

# Preferred stand-ins when a blamed role is structurally replaced.
_ALTERNATE_PREFERENCE: dict[str, tuple[str, ...]] = {
    "QueryDecomposer": ("QueryRewriter", "ReflectAgent"),
    "Retriever": ("QueryRewriter", "QueryDecomposer"),
    "AnswerGenerator": ("ConcludeAgent", "ReflectAgent"),
    "QueryRewriter": ("QueryDecomposer", "ReflectAgent"),
    "EvidenceSelector": ("ContextValidator", "ReflectAgent"),
    "ContextValidator": ("EvidenceSelector", "ReflectAgent"),
    "ReflectAgent": ("ContextValidator", "ConcludeAgent"),
    "ConcludeAgent": ("AnswerGenerator", "ReflectAgent"),
}


@dataclass(frozen=True)
class Insight:
    query_type: str
    text: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("insight text must be nonempty")


@dataclass(frozen=True)
class InsightBundle:
    success_factors: tuple[str, ...] = ()
    failure_modes: tuple[str, ...] = ()
    insights: tuple[Insight, ...] = ()
    blamed_agents: tuple[str, ...] = ()

    def is_empty(self) -> bool:
        return not (self.success_factors or self.failure_modes or self.insights or self.blamed_agents)


EMPTY_BUNDLE = InsightBundle()


@dataclass(frozen=True)
class MutationProposal:
    kind: str  # "replace" | "augment"
    target_step: int
    replacement_or_new_agent: str
    derived_plan: ExecutionPlan

    def __post_init__(self) -> None:
        if self.kind not in ("replace", "augment"):
            raise ValueError(f"mutation kind must be replace|augment, got {self.kind!r}")


def default_plan(query_profile: str = "unprofiled query") -> ExecutionPlan:
    """The fallback 4-step chain used when sampling yields no valid plan."""
    steps = tuple(
        PlanStep(
            step_index=i,
            agent=agent,
            depends_on=(i - 1,) if i > 1 else (),
            mode=StepMode.SEQUENTIAL,
        )
        for i, agent in enumerate(FALLBACK_PLAN_AGENTS, start=1)
    )
    return ExecutionPlan(query_profile=query_profile, steps=steps)


def format_agent_descriptions(registry: Mapping[str, AgentRole]) -> str:
    return "\n".join(f"- {role.name}: {role.description}" for role in registry.values())


def _plan_from_payload(payload: dict) -> ExecutionPlan:
    steps = sorted(payload["execution_order"], key=lambda s: s["step"])
    return ExecutionPlan(
        query_profile=payload["query_profile"],
        steps=tuple(
            PlanStep(
                step_index=s["step"],
                agent=s["agent"],
                depends_on=tuple(s["depends_on"]),
                mode=StepMode(s["mode"]),
            )
            for s in steps
        ),
    )


def sample_plan(
    query: Query,
    experiences: Sequence[ExperienceEntry],
    registry: Mapping[str, AgentRole],
    backend: Backend,
    temperature: float,
    *,
    candidate: tuple[int, int] | None = None,
    max_steps: int = 12,
    max_tokens: int = 2048,
) -> ExecutionPlan:
    """Sample one execution plan conditioned on retrieved experiences.

    A malformed response (after the one structured repair) or a plan that
    fails validation falls back to the default 4-step chain, logged so the
    fallback rate stays observable.
    """
    if not registry:
        raise ValueError("registry must be nonempty")
    user_text = render_plan_prompt(
        agent_descriptions=format_agent_descriptions(registry),
        retrieved_experiences=format_experiences(experiences),
        query_text=query.text,
        candidate=candidate,
    )
    request = ChatRequest(
        system_text=ORCHESTRATOR_SYSTEM,
        user_text=user_text,
        temperature=temperature,
        max_tokens=max_tokens,
        tag="orchestrator.sample",
    )
    try:
        payload = complete_json(backend, request, "plan")
        plan = _plan_from_payload(payload)
    except MalformedStructuredOutput as exc:
        logger.warning("plan sampling malformed for query %s: %s; using fallback", query.id, exc)
        return default_plan()
    violations = validate_plan(plan, registry)
    if not violations and len(plan.steps) > max_steps:
        violations = [f"plan has {len(plan.steps)} steps, cap is {max_steps}"]
    if violations:
        logger.warning(
            "sampled plan invalid for query %s (%s); using fallback", query.id, violations
        )
        return default_plan()
    return plan


def run_group(
    query: Query,
    group_size: int,
    config: ExecutionConfig,
    *,
    registry: Mapping[str, AgentRole],
    prompts: Mapping[str, PromptState],
    agent_backend: Backend,
    orchestrator_backend: Backend,
    experiences: Sequence[ExperienceEntry] = (),
    injected_plans: Sequence[ExecutionPlan] = (),
    index: LexicalIndex | None = None,
    group_parallelism: int = 1,
    orchestrator_max_tokens: int = 2048,
) -> GroupRollout:
    """Sample, execute, score, and rank a group of candidate plans.

    Injected plans (e.g. mutation proposals) occupy the first member slots;
    the rest are sampled fresh. Individual member failures become f1=0
    members; the group as a whole fails only when every member failed with an
    unavailable backend.
    """
    if group_size < 2:
        raise ValueError("group size must be >= 2")
    plans: list[ExecutionPlan] = list(injected_plans)[:group_size]
    to_sample = group_size - len(plans)
    for i in range(1, to_sample + 1):
        plans.append(
            sample_plan(
                query,
                experiences,
                registry,
                orchestrator_backend,
                config.temperature,
                candidate=(i, to_sample),
                max_steps=config.max_steps,
                max_tokens=orchestrator_max_tokens,
            )
        )

    def run_member(plan: ExecutionPlan) -> GroupMember:
        trajectory = execute(
            plan,
            query,
            config,
            registry=registry,
            prompts=prompts,
            backend=agent_backend,
            index=index,
        )
        return GroupMember(plan=plan, trajectory=trajectory, reward=build_reward(trajectory, query))

    if group_parallelism > 1:
        with ThreadPoolExecutor(max_workers=group_parallelism) as pool:
            members = list(pool.map(run_member, plans))
    else:
        members = [run_member(plan) for plan in plans]

    if all(
        m.trajectory.status is TrajectoryStatus.FAILED
        and any("backend_unavailable" in r.output_text for r in m.trajectory.records)
        for m in members
    ):
        raise BackendUnavailable(f"all {group_size} group members failed with unavailable backend")
    return GroupRollout.build(query.id, members)


def _summarize_member(member: GroupMember, rank: int) -> str:
    plan_lines = []
    for step in member.plan.steps:
        deps = ",".join(str(d) for d in step.depends_on) or "-"
        plan_lines.append(f"  {step.step_index}. {step.agent} (depends on: {deps}, mode: {step.mode.value})")
    record_lines = []
    for record in member.trajectory.records:
        output = record.output_text[:SUMMARY_TRUNCATION]
        record_lines.append(f"  Step {record.step_index} [{record.agent}]: {output}")
    return (
        f"### Trajectory rank {rank}\n"
        f"Plan (profile: {member.plan.query_profile}):\n"
        + "\n".join(plan_lines)
        + "\nPer-agent outputs:\n"
        + "\n".join(record_lines)
        + f"\nFinal answer: {member.trajectory.final_answer}\n"
        f"F1 score: {member.reward.f1:.3f}\n"
        f"Total tokens consumed: {member.reward.total_tokens}"
    )


def extract_insights(
    group: GroupRollout,
    backend: Backend,
    *,
    query: Query,
    max_tokens: int = 2048,
) -> InsightBundle:
    """Distill group-relative insights; gated on mixed outcomes.

    Non-mixed groups return an empty bundle without any backend call; they
    carry no contrast to learn from. Blamed agents outside the group's plans
    are dropped with a warning.
    """
    if not group.mixed:
        return EMPTY_BUNDLE
    summaries = [
        _summarize_member(member, rank + 1)
        for rank, member in enumerate(group.ranked_members())
    ]
    user_text = render_insight_prompt(
        query_text=query.text,
        query_type=query.reasoning_type.value,
        group_size=len(group.members),
        trajectory_group="\n\n".join(summaries),
    )
    request = ChatRequest(
        system_text=ORCHESTRATOR_SYSTEM,
        user_text=user_text,
        temperature=0.0,
        max_tokens=max_tokens,
        tag="orchestrator.insights",
    )
    try:
        payload = complete_json(backend, request, "insight_group")
    except MalformedStructuredOutput as exc:
        logger.warning("insight extraction malformed for query %s: %s", query.id, exc)
        return EMPTY_BUNDLE
    roles_in_group = {step.agent for member in group.members for step in member.plan.steps}
    blamed = []
    for name in payload.get("blamed_agents", []):
        if name in roles_in_group:
            blamed.append(name)
        else:
            logger.warning("dropping blamed agent %r absent from the group's plans", name)
    insights = []
    for item in payload.get("insights", []):
        if item["insight"].strip():
            insights.append(Insight(query_type=item["query_type"], text=item["insight"]))
        else:
            logger.warning("dropping whitespace-only insight for query %s", query.id)
    return InsightBundle(
        success_factors=tuple(payload.get("success_factors", [])),
        failure_modes=tuple(payload.get("failure_modes", [])),
        insights=tuple(insights),
        blamed_agents=tuple(blamed),
    )


def _select_alternative(
    blamed_role: str,
    registry: Mapping[str, AgentRole],
    backend: Backend | None,
    query_profile: str,
) -> str | None:
    if backend is not None:
        candidates = sorted(set(registry) - {blamed_role})
        if candidates:
            request = ChatRequest(
                system_text=ORCHESTRATOR_SYSTEM,
                user_text=(
                    f"The agent {blamed_role} keeps failing on queries of this profile: "
                    f"{query_profile}. Name the single best replacement from: "
                    + ", ".join(candidates)
                    + ". Respond with the agent name only."
                ),
                temperature=0.0,
                max_tokens=64,
                tag="orchestrator.mutate",
            )
            try:
                text = backend.complete(request).text
                for name in candidates:
                    if name in text:
                        return name
            except Exception as exc:  # noqa: BLE001 - selection is best-effort
                logger.debug("mutation role selection via backend failed: %s", exc)
    for preferred in _ALTERNATE_PREFERENCE.get(blamed_role, ()):
        if preferred in registry and preferred != blamed_role:
            return preferred
    for name in sorted(registry):
        if name != blamed_role:
            return name
    return None


def _augment_plan(plan: ExecutionPlan, target_step: int, new_agent: str) -> ExecutionPlan:
    """Insert a step right after the target, depending on it.

    Steps that depended on the target are rewired to the inserted step so the
    plan keeps exactly one terminal; when the target was terminal the new
    step becomes the terminal.
    """
    new_index = target_step + 1
    steps: list[PlanStep] = []
    for step in plan.steps:
        if step.step_index <= target_step:
            steps.append(step)
            continue
        deps = tuple(
            new_index if d == target_step else (d + 1 if d > target_step else d)
            for d in step.depends_on
        )
        steps.append(
            PlanStep(
                step_index=step.step_index + 1,
                agent=step.agent,
                depends_on=deps,
                mode=step.mode,
            )
        )
    inserted = PlanStep(
        step_index=new_index,
        agent=new_agent,
        depends_on=(target_step,),
        mode=StepMode.SEQUENTIAL,
    )
    steps.insert(target_step, inserted)
    return ExecutionPlan(query_profile=plan.query_profile, steps=tuple(steps))


def propose_mutation(
    query_profile: str,
    failing_plan: ExecutionPlan,
    blamed_step: int,
    registry: Mapping[str, AgentRole],
    backend: Backend | None = None,
) -> MutationProposal:
    """Structural fallback for persistent failure: replace or augment.

    Replacement keeps the step count and swaps the blamed agent for an
    alternative; when no alternative exists the plan is augmented with a
    ReflectAgent step after the blamed one. The derived plan always validates.
    """
    blamed_role = failing_plan.steps[blamed_step - 1].agent
    alternative = _select_alternative(blamed_role, registry, backend, query_profile)
    if alternative is not None:
        steps = tuple(
            PlanStep(
                step_index=s.step_index,
                agent=alternative if s.step_index == blamed_step else s.agent,
                depends_on=s.depends_on,
                mode=s.mode,
            )
            for s in failing_plan.steps
        )
        derived = ExecutionPlan(query_profile=failing_plan.query_profile, steps=steps)
        proposal = MutationProposal(
            kind="replace",
            target_step=blamed_step,
            replacement_or_new_agent=alternative,
            derived_plan=derived,
        )
    else:
        new_agent = "ReflectAgent" if "ReflectAgent" in registry else blamed_role
        derived = _augment_plan(failing_plan, blamed_step, new_agent)
        proposal = MutationProposal(
            kind="augment",
            target_step=blamed_step,
            replacement_or_new_agent=new_agent,
            derived_plan=derived,
        )
    violations = validate_plan(proposal.derived_plan, registry)
    if violations:
        raise ValueError(f"derived mutation plan is invalid: {violations}")
    return proposal


def choose_blamed_step(plan: ExecutionPlan, recent_blames: Sequence[str] = ()) -> int:
    """Pick the step to mutate: a recently blamed role if present, else the
    first Retriever step (retrieval failures are the archetype), else step 1."""
    for blamed in recent_blames:
        for step in plan.steps:
            if step.agent == blamed:
                return step.step_index
    for step in plan.steps:
        if step.agent == "Retriever":
            return step.step_index
    return 1
