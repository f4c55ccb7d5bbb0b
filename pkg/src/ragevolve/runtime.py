"""Run orchestration: configuration, the learning loop, inference, evaluation,
and report generation.

One iteration = sample a query, retrieve experiences, roll out a group,
extract insights behind the mixed-outcome gate, consolidate the library,
credit the used entries, evolve blamed agents, and mutate the topology on
persistent failure. All learning state persists after every iteration, so a
run is crash-resumable and byte-reproducible under the scripted backend.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from .agents import PromptStore, default_registry
from .analytics import (
    TrajectoryGraph,
    entropy_series,
    graph_metrics,
    lowess,
    phase_report,
)
from .evaluation import GroupRollout, score_answer
from .executor import ExecutionConfig, TrajectoryLog, execute
from .library import ExperienceLibrary
from .llm import Backend, BackendUnavailable, HTTPBackend, ScriptedBackend, TokenLog
from .model import ExecutionPlan, Query, ReasoningType
from .orchestrator import (
    InsightBundle,
    choose_blamed_step,
    extract_insights,
    propose_mutation,
    run_group,
    sample_plan,
)
from .rope import FailureBuffers, RopeAuditLog, RopeConfig, RopeEngine, VariantAxis

logger = logging.getLogger(__name__)

GRAPH_METRIC_NAMES = ("agent_count", "node_efficiency", "self_loops", "cycle_count", "diameter")


@dataclass(frozen=True)
class BackendSpec:
    kind: str = "scripted"  # scripted | http
    script: str = ""
    endpoint: str = ""
    model: str = ""
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 60.0

    def build(self, log: TokenLog) -> Backend:
        if self.kind == "scripted":
            if not self.script:
                raise ValueError("scripted backend needs a script path")
            return ScriptedBackend.from_jsonl(self.script, log)
        if self.kind == "http":
            return HTTPBackend(
                endpoint=self.endpoint,
                model=self.model,
                api_key=os.environ.get(self.api_key_env, ""),
                timeout=self.timeout,
                log=log,
            )
        raise ValueError(f"unknown backend kind {self.kind!r}")


@dataclass(frozen=True)
class RunConfig:
    workdir: str = "run"
    index_path: str = ""
    seed: int = 0
    iterations: int = 10
    group_size: int = 4
    rollout_temperature: float = 0.9
    eval_temperature: float = 0.0
    ood_eval_temperature: float = 0.3
    group_parallelism: int = 1
    max_retrieved: int = 5
    orchestrator_max_tokens: int = 2048
    mutation_failure_threshold: int = 2
    abort_after_backend_failures: int = 5
    library_max_entries: int = 200
    profile_jaccard: float = 0.3
    diversity_threshold: float = 0.6
    execution: ExecutionConfig = field(default_factory=ExecutionConfig)
    rope: RopeConfig = field(default_factory=RopeConfig)
    agent_backend: BackendSpec = field(default_factory=BackendSpec)
    orchestrator_backend: BackendSpec = field(default_factory=BackendSpec)

    @classmethod
    def from_yaml(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        return cls.from_dict(raw, base_dir=path.parent)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any], base_dir: Path | None = None) -> "RunConfig":
        def resolve(value: str) -> str:
            if value and base_dir is not None and not Path(value).is_absolute():
                return str(base_dir / value)
            return value

        execution = ExecutionConfig(
            temperature=raw.get("rollout_temperature", 0.9),
            **raw.get("execution", {}),
        )
        rope_raw = dict(raw.get("rope", {}))
        if "axes" in rope_raw:
            rope_raw["axes"] = tuple(VariantAxis(a) for a in rope_raw["axes"])
        rope = RopeConfig(**rope_raw)

        def backend_spec(key: str) -> BackendSpec:
            spec_raw = dict(raw.get(key, {}))
            if "script" in spec_raw:
                spec_raw["script"] = resolve(spec_raw["script"])
            return BackendSpec(**spec_raw)

        known = {
            name: raw[name]
            for name in (
                "seed",
                "iterations",
                "group_size",
                "rollout_temperature",
                "eval_temperature",
                "ood_eval_temperature",
                "group_parallelism",
                "max_retrieved",
                "orchestrator_max_tokens",
                "mutation_failure_threshold",
                "abort_after_backend_failures",
                "library_max_entries",
                "profile_jaccard",
                "diversity_threshold",
            )
            if name in raw
        }
        return cls(
            workdir=resolve(raw.get("workdir", "run")),
            index_path=resolve(raw.get("index_path", "")),
            execution=execution,
            rope=rope,
            agent_backend=backend_spec("agent_backend"),
            orchestrator_backend=backend_spec("orchestrator_backend"),
            **known,
        )


def query_profile_text(query: Query) -> str:
    """The profile string used for experience retrieval."""
    if query.reasoning_type is not ReasoningType.UNKNOWN:
        return f"{query.reasoning_type.value} {query.text}"
    return query.text


def profile_key(query: Query) -> str:
    """Stable key grouping queries for the mutation failure counter."""
    if query.reasoning_type is not ReasoningType.UNKNOWN:
        return query.reasoning_type.value
    return f"text:{query.text.lower()}"


def iteration_success(group: GroupRollout) -> bool:
    """Whether the retrieved entries counted as successfully applied.

    A member beating the group baseline is a success; a degenerate all-equal
    group carries no relative signal, so the inference rule (f1 >= 0.5)
    applies instead.
    """
    best = group.best().reward.f1
    f1s = [m.reward.f1 for m in group.members]
    if max(f1s) > min(f1s):
        return best > group.baseline
    return best >= 0.5


class Engine:
    """Holds the collaborators and persistent state of one run directory."""

    def __init__(
        self,
        config: RunConfig,
        *,
        agent_backend: Backend | None = None,
        orchestrator_backend: Backend | None = None,
    ) -> None:
        self.config = config
        self.workdir = Path(config.workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.token_log = TokenLog()
        self.agent_backend = agent_backend or config.agent_backend.build(self.token_log)
        self.orchestrator_backend = (
            orchestrator_backend or config.orchestrator_backend.build(self.token_log)
        )
        self.registry = default_registry()
        self.prompt_store = PromptStore(self.workdir / "prompts", config.rope.char_budget)
        self.prompt_store.ensure_defaults(self.registry)

        self.library_path = self.workdir / "library.json"
        if self.library_path.exists():
            self.library = ExperienceLibrary.load(
                self.library_path,
                profile_jaccard=config.profile_jaccard,
                diversity_threshold=config.diversity_threshold,
            )
            self.library.max_entries = config.library_max_entries
        else:
            self.library = ExperienceLibrary(
                max_entries=config.library_max_entries,
                profile_jaccard=config.profile_jaccard,
                diversity_threshold=config.diversity_threshold,
            )

        self.buffers_path = self.workdir / "buffers.json"
        if self.buffers_path.exists():
            self.buffers = FailureBuffers.load(self.buffers_path, config.rope.buffer_size)
        else:
            self.buffers = FailureBuffers(config.rope.buffer_size)

        self.index = None
        if config.index_path:
            from .retrieval import LexicalIndex

            self.index = LexicalIndex.load(config.index_path)

        self.state_path = self.workdir / "state.json"
        self.run_log_path = self.workdir / "run_log.jsonl"
        self.trajectory_log = TrajectoryLog(self.workdir / "trajectories.jsonl")
        self.rope_engine = RopeEngine(
            registry=self.registry,
            prompt_store=self.prompt_store,
            buffers=self.buffers,
            agent_backend=self.agent_backend,
            rope_backend=self.orchestrator_backend,
            exec_config=config.execution,
            cfg=config.rope,
            index=self.index,
            audit_log=RopeAuditLog(self.workdir / "rope_audit.jsonl"),
        )

    # -- persistent loop state -------------------------------------------------

    def load_state(self) -> dict[str, Any]:
        if self.state_path.exists():
            return json.loads(self.state_path.read_text(encoding="utf-8"))
        return {
            "iteration": 0,
            "profile_failures": {},
            "profile_blames": {},
            "pending_mutations": {},
            "mutations_proposed": 0,
        }

    def save_state(self, state: dict[str, Any]) -> None:
        self.state_path.write_text(json.dumps(state, indent=2), encoding="utf-8")

    def persist(self) -> None:
        self.library.save(self.library_path)
        self.buffers.save(self.buffers_path)

    def append_run_log(self, record: dict[str, Any]) -> None:
        with self.run_log_path.open("a", encoding="utf-8") as handle:
            handle.write(json.dumps(record, separators=(",", ":")) + "\n")


def evolve(engine: Engine, training: Sequence[Query]) -> dict[str, Any]:
    """Run the learning loop up to config.iterations, resuming persisted state.

    Iteration-level failures are logged and skipped; the run aborts only when
    the backend stays unavailable for more than the configured number of
    consecutive iterations.
    """
    if not training:
        raise ValueError("training set is empty")
    config = engine.config
    state = engine.load_state()
    start = state["iteration"] + 1
    summary_iterations: list[dict[str, Any]] = []
    consecutive_failures = 0

    for t in range(start, config.iterations + 1):
        rng = random.Random(f"{config.seed}:{t}")
        query = training[rng.randrange(len(training))]
        pkey = profile_key(query)
        profile_text = query_profile_text(query)
        experiences = engine.library.retrieve(profile_text, m=config.max_retrieved)
        used_ids = [e.id for e in experiences]

        injected: list[ExecutionPlan] = []
        if pkey in state["pending_mutations"]:
            injected = [ExecutionPlan.from_dict(state["pending_mutations"].pop(pkey))]

        prompts = engine.prompt_store.load_all(engine.registry)
        try:
            group = run_group(
                query,
                config.group_size,
                config.execution,
                registry=engine.registry,
                prompts=prompts,
                agent_backend=engine.agent_backend,
                orchestrator_backend=engine.orchestrator_backend,
                experiences=experiences,
                injected_plans=injected,
                index=engine.index,
                group_parallelism=config.group_parallelism,
                orchestrator_max_tokens=config.orchestrator_max_tokens,
            )
            consecutive_failures = 0
        except BackendUnavailable as exc:
            consecutive_failures += 1
            logger.warning("iteration %d skipped: %s", t, exc)
            if consecutive_failures > config.abort_after_backend_failures:
                raise RuntimeError(
                    f"aborting: backend unavailable for {consecutive_failures} consecutive iterations"
                ) from exc
            state["iteration"] = t
            engine.save_state(state)
            continue

        for member in group.members:
            engine.trajectory_log.append(member.trajectory)

        bundle = extract_insights(
            group,
            engine.orchestrator_backend,
            query=query,
            max_tokens=config.orchestrator_max_tokens,
        )
        decisions = []
        if bundle.insights:
            decisions = engine.library.consolidate(
                bundle.insights,
                group.best().plan.query_profile,
                engine.orchestrator_backend,
                max_tokens=config.orchestrator_max_tokens,
            )
        success = iteration_success(group)
        if used_ids:
            engine.library.record_outcome(used_ids, success)
        if bundle.blamed_agents:
            state["profile_blames"][pkey] = list(bundle.blamed_agents)

        adopted_roles = []
        for role_name in bundle.blamed_agents:
            member = _blamed_member(group, role_name)
            if member is None:
                continue
            new_state = engine.rope_engine.evolve_agent(
                role_name, member.trajectory, member.reward, query, tick=t
            )
            if new_state is not None:
                adopted_roles.append(role_name)

        all_zero = all(m.reward.f1 == 0.0 for m in group.members)
        failures = state["profile_failures"]
        failures[pkey] = failures.get(pkey, 0) + 1 if all_zero else 0
        mutation_record = None
        if failures[pkey] >= config.mutation_failure_threshold:
            failing_plan = group.best().plan
            blamed_step = choose_blamed_step(
                failing_plan, state["profile_blames"].get(pkey, [])
            )
            proposal = propose_mutation(
                profile_text,
                failing_plan,
                blamed_step,
                engine.registry,
                engine.orchestrator_backend,
            )
            state["pending_mutations"][pkey] = proposal.derived_plan.to_dict()
            state["mutations_proposed"] += 1
            failures[pkey] = 0
            mutation_record = {
                "kind": proposal.kind,
                "target_step": proposal.target_step,
                "agent": proposal.replacement_or_new_agent,
            }
            logger.info("mutation proposed for profile %r: %s", pkey, mutation_record)

        record = _iteration_record(
            t, query, group, bundle, decisions, used_ids, success, adopted_roles, mutation_record,
            injected_count=len(injected),
        )
        engine.append_run_log(record)
        summary_iterations.append(
            {
                "iteration": t,
                "query_id": query.id,
                "best_f1": group.best().reward.f1,
                "group_tokens": record["group_tokens"],
                "mixed": group.mixed,
                "adopted_roles": adopted_roles,
                "mutation": mutation_record,
            }
        )

        state["iteration"] = t
        engine.persist()
        engine.save_state(state)

    prompt_versions = {
        name: engine.prompt_store.load(name).version for name in engine.registry
    }
    return {
        "from_iteration": start,
        "to_iteration": config.iterations,
        "iterations": summary_iterations,
        "library_active_entries": len(engine.library.active_entries()),
        "prompt_versions": prompt_versions,
        "mutations_proposed": state["mutations_proposed"],
    }


def _blamed_member(group: GroupRollout, role_name: str):
    """The worst-ranked member whose plan includes the blamed role."""
    for index in reversed(group.ranking):
        member = group.members[index]
        if role_name in member.plan.agent_names:
            return member
    return None


def _iteration_record(
    t: int,
    query: Query,
    group: GroupRollout,
    bundle: InsightBundle,
    decisions: list,
    used_ids: list[str],
    success: bool,
    adopted_roles: list[str],
    mutation_record: dict | None,
    injected_count: int,
) -> dict[str, Any]:
    members = [
        {
            "roles": list(m.trajectory.executed_roles()),
            "plan_shape": list(m.plan.shape()),
            "f1": m.reward.f1,
            "em": m.reward.em,
            "accuracy": m.reward.accuracy,
            "tokens": m.reward.total_tokens,
            "status": m.trajectory.status.value,
        }
        for m in group.members
    ]
    return {
        "iteration": t,
        "query_id": query.id,
        "reasoning_type": query.reasoning_type.value,
        "members": members,
        "ranking": list(group.ranking),
        "mixed": group.mixed,
        "baseline": group.baseline,
        "best_f1": group.best().reward.f1,
        "best_tokens": group.best().reward.total_tokens,
        "group_tokens": sum(m.reward.total_tokens for m in group.members),
        "insights": [{"query_type": i.query_type, "insight": i.text} for i in bundle.insights],
        "blamed": list(bundle.blamed_agents),
        "decision_ops": [d.operation.value for d in decisions],
        "used_entry_ids": used_ids,
        "outcome_success": success,
        "adopted_roles": adopted_roles,
        "mutation": mutation_record,
        "injected_plans": injected_count,
    }


def answer(engine: Engine, question: str | Query, *, temperature: float | None = None) -> dict[str, Any]:
    """Inference: sample one plan at eval temperature and execute it once.

    Never writes to the library, prompt store, or any learning state.
    """
    if isinstance(question, Query):
        query = question
    else:
        qid = "adhoc-" + hashlib.sha1(question.encode("utf-8")).hexdigest()[:8]
        query = Query(id=qid, text=question, gold_answers=("__unscored__",))
    temp = engine.config.eval_temperature if temperature is None else temperature
    experiences = engine.library.retrieve(
        query_profile_text(query), m=engine.config.max_retrieved
    )
    plan = sample_plan(
        query,
        experiences,
        engine.registry,
        engine.orchestrator_backend,
        temp,
        max_steps=engine.config.execution.max_steps,
        max_tokens=engine.config.orchestrator_max_tokens,
    )
    exec_config = ExecutionConfig(
        temperature=temp,
        step_timeout=engine.config.execution.step_timeout,
        max_steps=engine.config.execution.max_steps,
        top_k_per_step=engine.config.execution.top_k_per_step,
        max_parallel=engine.config.execution.max_parallel,
        max_tokens=engine.config.execution.max_tokens,
    )
    trajectory = execute(
        plan,
        query,
        exec_config,
        registry=engine.registry,
        prompts=engine.prompt_store.load_all(engine.registry),
        backend=engine.agent_backend,
        index=engine.index,
    )
    return {
        "answer": trajectory.final_answer,
        "trajectory_id": trajectory.trajectory_id(),
        "tokens": trajectory.total_tokens,
        "status": trajectory.status.value,
    }


def evaluate(
    engine: Engine, queries: Sequence[Query], *, ood: bool = False
) -> tuple[dict[str, Any], list[dict[str, Any]]]:
    """Answer every query and report mean em/f1/accuracy plus token statistics.

    Per-query failures score zero and count in the failure column; they never
    abort the sweep.
    """
    temperature = (
        engine.config.ood_eval_temperature if ood else engine.config.eval_temperature
    )
    rows: list[dict[str, Any]] = []
    failures = 0
    for query in queries:
        try:
            result = answer(engine, query, temperature=temperature)
            em, f1, accuracy = score_answer(result["answer"], query.gold_answers)
            rows.append(
                {
                    "query_id": query.id,
                    "answer": result["answer"],
                    "em": em,
                    "f1": f1,
                    "accuracy": accuracy,
                    "tokens": result["tokens"],
                    "failed": 0,
                }
            )
        except Exception as exc:  # noqa: BLE001 - per-query isolation
            logger.warning("evaluation failed for %s: %s", query.id, exc)
            failures += 1
            rows.append(
                {
                    "query_id": query.id,
                    "answer": "",
                    "em": 0,
                    "f1": 0.0,
                    "accuracy": 0,
                    "tokens": 0,
                    "failed": 1,
                }
            )
    count = len(rows)
    report = {
        "count": count,
        "mean_em": sum(r["em"] for r in rows) / count if count else 0.0,
        "mean_f1": sum(r["f1"] for r in rows) / count if count else 0.0,
        "mean_accuracy": sum(r["accuracy"] for r in rows) / count if count else 0.0,
        "mean_tokens": sum(r["tokens"] for r in rows) / count if count else 0.0,
        "total_tokens": sum(r["tokens"] for r in rows),
        "failures": failures,
    }
    return report, rows


# -- analytics over run logs ---------------------------------------------------


def load_run_log(path: str | Path) -> list[dict[str, Any]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [json.loads(line) for line in lines if line.strip()]


def analyze(
    run_log_path: str | Path,
    out_dir: str | Path,
    *,
    window: int = 50,
    stride: int = 10,
    frac: float = 0.3,
    conditional: bool = False,
) -> dict[str, str]:
    """Emit entropy.csv, metrics.csv, phases.json, and tokens_lowess.csv.

    Trajectory-level series are ordered by iteration then group member; token
    trends are per-iteration group totals.
    """
    log = load_run_log(run_log_path)
    if not log:
        raise ValueError(f"run log {run_log_path} is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    member_rows: list[dict[str, Any]] = []
    graphs: list[TrajectoryGraph] = []
    for record in log:
        for position, member in enumerate(record["members"]):
            graph = TrajectoryGraph.from_roles(member["roles"])
            graphs.append(graph)
            metrics = graph_metrics(graph, f1=member["f1"])
            member_rows.append(
                {
                    "iteration": record["iteration"],
                    "member": position,
                    "reasoning_type": record["reasoning_type"],
                    "f1": member["f1"],
                    "tokens": member["tokens"],
                    **metrics,
                }
            )

    entropy_path = out / "entropy.csv"
    with entropy_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["window_start", "window_end", "transition_entropy"])
        for start, end, value in entropy_series(
            graphs, width=window, stride=stride, conditional=conditional
        ):
            if value is not None:
                writer.writerow([start, end, f"{value:.6f}"])

    metrics_path = out / "metrics.csv"
    with metrics_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        header = ["iteration", "member", "reasoning_type", "f1", "tokens", *GRAPH_METRIC_NAMES]
        writer.writerow(header)
        for row in member_rows:
            writer.writerow([row[name] for name in header])

    reports = phase_report(member_rows, GRAPH_METRIC_NAMES, group_by="reasoning_type")
    phases_path = out / "phases.json"
    phases_path.write_text(
        json.dumps(
            [
                {
                    "phase": r.phase.value,
                    "group": r.group,
                    "count": r.count,
                    "metric_means": r.metric_means,
                }
                for r in reports
            ],
            indent=2,
        ),
        encoding="utf-8",
    )

    tokens_path = out / "tokens_lowess.csv"
    points = [(float(r["iteration"]), float(r["group_tokens"])) for r in log]
    if len(points) >= 3:
        smoothed = lowess(points, frac=frac)
    else:
        smoothed = points
    with tokens_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["iteration", "group_tokens", "smoothed"])
        for (x, y), (_, smooth_y) in zip(points, smoothed):
            writer.writerow([int(x), int(y), f"{smooth_y:.3f}"])

    return {
        "entropy": str(entropy_path),
        "metrics": str(metrics_path),
        "phases": str(phases_path),
        "tokens_lowess": str(tokens_path),
    }
