"""Prompt template loading and rendering.

Templates ship as resource files so they can be audited; placeholders of the
form ``{name}`` are substituted by plain replacement (templates contain
literal JSON braces, so ``str.format`` is unsuitable).
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from typing import TYPE_CHECKING, Mapping, Sequence

if TYPE_CHECKING:
    from .library import ExperienceEntry

ORCHESTRATOR_SYSTEM = (
    "You are the orchestrator of a multi-agent retrieval-augmented question "
    "answering system. Follow the instructions precisely and respond only in "
    "the requested format."
)

PROMPT_MANAGER_SYSTEM = (
    "You are responsible for managing and evolving the prompt of a single "
    "agent under strict length and structural constraints. Your task is to "
    "refine, optimize, and consolidate the agent's prompt to ensure clarity, "
    "consistency, and adherence to operational and behavioral requirements."
)

ANNOTATOR_SYSTEM = (
    "You are a careful annotator of question-answering benchmarks. Respond "
    "only in the requested format."
)


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    path = resources.files("ragevolve.resources.templates").joinpath(f"{name}.txt")
    return path.read_text(encoding="utf-8")


def render(template_name: str, mapping: Mapping[str, str]) -> str:
    text = load_template(template_name)
    for key, value in mapping.items():
        text = text.replace("{" + key + "}", value)
    return text


def format_experiences(entries: Sequence["ExperienceEntry"]) -> str:
    if not entries:
        return "(none)"
    blocks = []
    for entry in entries:
        blocks.append(
            f"- Query Type: {entry.profile}\n"
            f"  Insight: {entry.insight}\n"
            f"  Utility score: {entry.utility:.2f}"
        )
    return "\n".join(blocks)


def format_library_entries(entries: Sequence["ExperienceEntry"]) -> str:
    if not entries:
        return "(empty)"
    blocks = []
    for entry in entries:
        blocks.append(
            f"- id: {entry.id} | query_profile: {entry.profile} | "
            f"utility: {entry.utility:.2f} ({entry.successes}/{entry.uses})\n"
            f"  insight: {entry.insight}"
        )
    return "\n".join(blocks)


def format_new_insights(insights: Sequence[tuple[str, str]]) -> str:
    return "\n".join(
        f"- query_type: {query_type}\n  insight: {text}" for query_type, text in insights
    )


def render_plan_prompt(
    agent_descriptions: str,
    retrieved_experiences: str,
    query_text: str,
    candidate: tuple[int, int] | None = None,
) -> str:
    """User text for topology sampling; candidate tags the rollout slot.

    The candidate line is what lets a deterministic backend vary its plans
    across a group; a live model varies through temperature instead.
    """
    text = render(
        "orchestrator_plan",
        {
            "agent_descriptions": agent_descriptions,
            "retrieved_experiences": retrieved_experiences,
            "query": query_text,
        },
    )
    if candidate is not None:
        index, total = candidate
        text += f"\n\nCandidate index: {index} of {total}."
    return text


def render_insight_prompt(
    query_text: str, query_type: str, group_size: int, trajectory_group: str
) -> str:
    return render(
        "insight_extraction",
        {
            "query": query_text,
            "query_type": query_type,
            "group_size": str(group_size),
            "trajectory_group": trajectory_group,
        },
    )


def render_library_ops_prompt(
    current_entries: Sequence["ExperienceEntry"], new_insights: Sequence[tuple[str, str]]
) -> str:
    return render(
        "library_operations",
        {
            "current_library": format_library_entries(current_entries),
            "new_insights": format_new_insights(new_insights),
        },
    )


def render_contrastive_prompt(
    agent_name: str, agent_role: str, original_prompt: str, variant_results: str
) -> str:
    return render(
        "contrastive_analysis",
        {
            "agent_name": agent_name,
            "agent_role": agent_role,
            "original_prompt": original_prompt,
            "variant_results": variant_results,
        },
    )


def render_variant_prompt(
    current_prompt: str, axis: str, axis_hint: str, failure_digests: str
) -> str:
    return render(
        "variant_generation",
        {
            "current_prompt": current_prompt,
            "axis": axis,
            "axis_hint": axis_hint,
            "failure_digests": failure_digests,
        },
    )


def render_annotate_prompt(query_text: str) -> str:
    return render("annotate", {"query": query_text})
