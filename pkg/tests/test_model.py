from __future__ import annotations

import random

import pytest

from ragevolve.model import (
    ExecutionPlan,
    PlanStep,
    Query,
    Reward,
    StepMode,
    StepRecord,
    ToolCall,
    Trajectory,
    TrajectoryStatus,
    extract_answer,
    validate_plan,
)


def chain_plan(*agents: str, profile: str = "test chain") -> ExecutionPlan:
    steps = tuple(
        PlanStep(step_index=i, agent=agent, depends_on=(i - 1,) if i > 1 else ())
        for i, agent in enumerate(agents, start=1)
    )
    return ExecutionPlan(query_profile=profile, steps=steps)


def test_minimal_valid_chain(registry):
    plan = chain_plan("Retriever", "EvidenceSelector", "AnswerGenerator")
    assert validate_plan(plan, registry) == []


def test_self_dependency_rejected(registry):
    plan = ExecutionPlan(
        query_profile="p",
        steps=(
            PlanStep(1, "Retriever"),
            PlanStep(2, "AnswerGenerator", depends_on=(2,)),
        ),
    )
    violations = validate_plan(plan, registry)
    assert any("self-dependency at step 2" in v for v in violations)


def test_unknown_agent_rejected(registry):
    plan = chain_plan("Retriever", "Summarizer")
    violations = validate_plan(plan, registry)
    assert any("unknown agent" in v for v in violations)


def test_forward_dependency_rejected(registry):
    plan = ExecutionPlan(
        query_profile="p",
        steps=(
            PlanStep(1, "Retriever", depends_on=(2,)),
            PlanStep(2, "AnswerGenerator", depends_on=(1,)),
        ),
    )
    violations = validate_plan(plan, registry)
    assert any("not strictly smaller" in v for v in violations)


def test_gapped_indices_rejected(registry):
    plan = ExecutionPlan(
        query_profile="p",
        steps=(PlanStep(1, "Retriever"), PlanStep(3, "AnswerGenerator", depends_on=(1,))),
    )
    assert validate_plan(plan, registry)


def test_two_terminals_rejected(registry):
    plan = ExecutionPlan(
        query_profile="p",
        steps=(PlanStep(1, "Retriever"), PlanStep(2, "AnswerGenerator")),
    )
    violations = validate_plan(plan, registry)
    assert any("exactly one terminal" in v for v in violations)


def test_empty_plan_rejected(registry):
    plan = ExecutionPlan(query_profile="p", steps=())
    assert validate_plan(plan, registry) == ["plan has no steps"]


def test_accepted_plans_are_dags(registry):
    """Backward-pointing deps guarantee a topological order exists."""
    rng = random.Random(7)
    for _ in range(100):
        n = rng.randint(1, 8)
        agents = [rng.choice(sorted(registry)) for _ in range(n)]
        steps = []
        for i in range(1, n + 1):
            deps = tuple(sorted(rng.sample(range(1, i), k=rng.randint(0, i - 1))))
            steps.append(PlanStep(i, agents[i - 1], depends_on=deps))
        plan = ExecutionPlan(query_profile="random", steps=tuple(steps))
        if validate_plan(plan, registry):
            continue
        # Kahn's algorithm must consume every step.
        indegree = {s.step_index: len(s.depends_on) for s in plan.steps}
        order = []
        frontier = [i for i, d in indegree.items() if d == 0]
        while frontier:
            node = frontier.pop()
            order.append(node)
            for step in plan.steps:
                if node in step.depends_on:
                    indegree[step.step_index] -= 1
                    if indegree[step.step_index] == 0:
                        frontier.append(step.step_index)
        assert len(order) == n


def test_query_validation():
    with pytest.raises(ValueError):
        Query(id="q", text="   ")
    with pytest.raises(ValueError):
        Query(id="q", text="ok", gold_answers=("",))


def test_reward_invariants():
    with pytest.raises(ValueError):
        Reward(f1=0.5, em=1, accuracy=1, total_tokens=10)
    with pytest.raises(ValueError):
        Reward(f1=1.2, em=0, accuracy=0, total_tokens=0)
    reward = Reward(f1=1.0, em=1, accuracy=1, total_tokens=0)
    assert reward.em == 1


def test_trajectory_total_tokens_matches_records():
    plan = chain_plan("Retriever", "AnswerGenerator")
    records = (
        StepRecord(1, "Retriever", "in", "out", tokens_in=10, tokens_out=5),
        StepRecord(2, "AnswerGenerator", "in", "Answer: x", tokens_in=7, tokens_out=3),
    )
    trajectory = Trajectory("q1", plan, records, "x", TrajectoryStatus.COMPLETED)
    assert trajectory.total_tokens == 25


def test_trajectory_round_trip():
    plan = chain_plan("Retriever", "AnswerGenerator")
    records = (
        StepRecord(
            1,
            "Retriever",
            "in",
            "evidence",
            tool_calls=(ToolCall("search", {"query": "x", "k": 5}, "p1,p2"),),
            tokens_in=10,
            tokens_out=5,
        ),
        StepRecord(2, "AnswerGenerator", "in", "Answer: x", tokens_in=7, tokens_out=3),
    )
    trajectory = Trajectory("q1", plan, records, "x", TrajectoryStatus.COMPLETED)
    assert Trajectory.from_dict(trajectory.to_dict()) == trajectory
    assert trajectory.trajectory_id() == Trajectory.from_dict(trajectory.to_dict()).trajectory_id()


def test_extract_answer():
    assert extract_answer("Answer: Paris") == "Paris"
    assert extract_answer("thinking...\nAnswer: Paris\nmore") == "Paris"
    assert extract_answer("just some text") == "just some text"
    assert extract_answer("  Answer:   Berlin  ") == "Berlin"


def test_parallel_mode_parsing():
    step = PlanStep(1, "Retriever", mode="parallel")
    assert step.mode is StepMode.PARALLEL
