"""Scripted end-to-end fixtures: small deterministic QA worlds.

Each world bundles a corpus, training queries, and a scripted response table
covering every tag the learning loop can emit, so full `evolve` runs are
byte-reproducible.
"""

from __future__ import annotations

import json
from pathlib import Path

from ragevolve.agents import default_core_text
from ragevolve.llm import ScriptEntry
from ragevolve.model import Complexity, Query, ReasoningType

INSIGHT_TEXT = "retrieve supporting evidence before generating the final answer"
REPAIR_PHRASE = "state the most widely accepted fact directly"
REPAIR_RULE = f"If no evidence is provided, {REPAIR_PHRASE}."

GOOD_PLAN_JSON = json.dumps(
    {
        "query_profile": "bridge factual lookup",
        "selected_agents": ["Retriever", "AnswerGenerator"],
        "execution_order": [
            {"step": 1, "agent": "Retriever", "depends_on": [], "mode": "sequential"},
            {"step": 2, "agent": "AnswerGenerator", "depends_on": [1], "mode": "sequential"},
        ],
    }
)
BAD_PLAN_JSON = json.dumps(
    {
        "query_profile": "direct answer",
        "selected_agents": ["AnswerGenerator"],
        "execution_order": [
            {"step": 1, "agent": "AnswerGenerator", "depends_on": [], "mode": "sequential"}
        ],
    }
)

GOOD_SHAPE = ("Retriever", "AnswerGenerator")
BAD_SHAPE = ("AnswerGenerator",)

# (query id, question, answer, search keywords, evidence sentence)
FACTS = [
    ("q1", "What is the capital of France?", "Paris", "capital France", "The capital of France is Paris."),
    ("q2", "What is the capital of Germany?", "Berlin", "capital Germany", "The capital of Germany is Berlin."),
    ("q3", "Which river flows through Paris?", "Seine", "river Paris", "The Seine flows through Paris."),
    ("q4", "What is the capital of Italy?", "Rome", "capital Italy", "The capital of Italy is Rome."),
    (
        "q5",
        "Which mountain range separates France and Spain?",
        "Pyrenees",
        "mountains France Spain",
        "The Pyrenees separate France and Spain.",
    ),
]
HOLDOUT = ("q6", "What is the capital of Spain?", "Madrid", "capital Spain", "The capital of Spain is Madrid.")

DISTRACTORS = [
    "The Danube flows through Vienna and Budapest.",
    "Mount Everest lies on the border of Nepal and China.",
    "The Rhine rises in the Swiss Alps.",
    "Lisbon sits on the Tagus estuary.",
    "The Alps stretch across eight countries.",
    "Tokyo is the most populous metropolitan area.",
    "The Thames flows through London.",
    "Vienna hosts many classical concerts.",
    "The Sahara is the largest hot desert.",
    "Oslo is known for its fjords.",
    "The Amazon carries more water than any other river.",
    "Canberra was purpose-built as a capital.",
    "The Urals divide Europe from Asia.",
    "Reykjavik uses geothermal heating.",
]


def corpus_rows() -> list[dict]:
    rows = [
        {"id": "p1", "title": "France", "text": "Paris is the capital of France."},
        {"id": "p2", "title": "Germany", "text": "Berlin is the capital of Germany."},
        {"id": "p3", "title": "Seine", "text": "The Seine river flows through Paris."},
        {"id": "p4", "title": "Italy", "text": "Rome is the capital of Italy."},
        {"id": "p5", "title": "Pyrenees", "text": "The Pyrenees mountains separate France and Spain."},
        {"id": "p6", "title": "Spain", "text": "Madrid is the capital of Spain."},
    ]
    for i, text in enumerate(DISTRACTORS, start=7):
        rows.append({"id": f"p{i}", "title": "", "text": text})
    return rows


def train_queries() -> list[Query]:
    return [
        Query(qid, question, (answer,), ReasoningType.BRIDGE, Complexity.EASY)
        for qid, question, answer, _, _ in FACTS
    ]


def holdout_query() -> Query:
    qid, question, answer, _, _ = HOLDOUT
    return Query(qid, question, (answer,), ReasoningType.BRIDGE, Complexity.EASY)


def _insight_json(blame: bool) -> str:
    return json.dumps(
        {
            "success_factors": ["retrieval grounded the final answer"],
            "failure_modes": ["answering directly without evidence"],
            "insights": [{"query_type": "bridge factual lookup", "insight": INSIGHT_TEXT}],
            "blamed_agents": ["AnswerGenerator"] if blame else [],
        }
    )


_KEEP_OPS_JSON = json.dumps(
    {
        "operations": [
            {
                "operation": "KEEP",
                "new_insight": INSIGHT_TEXT,
                "target_entry_ids": [],
                "merged_insight": None,
                "rationale": "already covered by an existing entry",
            }
        ]
    }
)

_ANALYSIS_JSON = json.dumps(
    {
        "operational_rules": [
            {"rule": REPAIR_RULE, "derived_from": "error_correction variant vs other axes"}
        ],
        "behavioral_principles": [
            {
                "principle": "Prefer grounded facts over refusals.",
                "derived_from": "pattern across all variants",
            }
        ],
        "updated_prompt": "unused by deterministic consolidation",
    }
)


def script_entries(*, blame: bool = True) -> list[ScriptEntry]:
    """The full scripted table for the France-QA world.

    With ``blame=True`` the insight extractor blames the AnswerGenerator, so
    prompt evolution fires and repairs the no-evidence path; with False only
    the experience-library loop is exercised.
    """
    ag_core = default_core_text("AnswerGenerator")
    entries: list[ScriptEntry] = [
        # planning: insight-conditioned first, then one exploratory slot, then default
        ScriptEntry(tag="orchestrator.sample", user_contains=INSIGHT_TEXT, response=GOOD_PLAN_JSON),
        ScriptEntry(tag="orchestrator.sample", user_contains="Candidate index: 1 of", response=GOOD_PLAN_JSON),
        ScriptEntry(tag="orchestrator.sample", user_contains="", response=BAD_PLAN_JSON),
        ScriptEntry(tag="orchestrator.insights", user_contains="", response=_insight_json(blame)),
        ScriptEntry(tag="library.ops", user_contains="", response=_KEEP_OPS_JSON),
    ]
    all_facts = FACTS + [HOLDOUT]
    for _, question, _, keywords, _ in all_facts:
        entries.append(
            ScriptEntry(
                tag="agent.Retriever.search",
                user_contains=question,
                response=f"SEARCH: {keywords}",
            )
        )
    for _, question, _, _, evidence in all_facts:
        entries.append(
            ScriptEntry(
                tag="agent.Retriever.summarize",
                user_contains=question,
                response=f"Evidence: {evidence}",
            )
        )
    for _, _, answer, _, evidence in all_facts:
        entries.append(
            ScriptEntry(
                tag="agent.AnswerGenerator",
                user_contains=f"Evidence: {evidence}",
                response=f"Answer: {answer}",
            )
        )
    # post-evolution path: the adopted rule lets the agent answer directly
    for _, question, answer, _, _ in all_facts:
        entries.append(
            ScriptEntry(
                tag="agent.AnswerGenerator",
                system_contains=REPAIR_PHRASE,
                user_contains=question,
                response=f"Answer: {answer}",
            )
        )
    entries.append(
        ScriptEntry(tag="agent.AnswerGenerator", user_contains="", response="Answer: I am not certain.")
    )
    if blame:
        entries.extend(
            [
                ScriptEntry(
                    tag="rope.variant",
                    user_contains="Behavioral axis: error_correction",
                    response=f"{ag_core}\n{REPAIR_RULE}",
                ),
                ScriptEntry(
                    tag="rope.variant",
                    user_contains="",
                    response=f"{ag_core}\nDouble-check your facts before answering.",
                ),
                ScriptEntry(tag="rope.analysis", user_contains="", response=_ANALYSIS_JSON),
            ]
        )
    return entries


def write_world(
    directory: Path, *, blame: bool = True
) -> dict[str, Path]:
    """Materialize the world on disk for CLI-driven runs."""
    directory.mkdir(parents=True, exist_ok=True)
    corpus_path = directory / "corpus.jsonl"
    corpus_path.write_text(
        "\n".join(json.dumps(r) for r in corpus_rows()) + "\n", encoding="utf-8"
    )
    script_path = directory / "script.jsonl"
    with script_path.open("w", encoding="utf-8") as handle:
        for entry in script_entries(blame=blame):
            handle.write(
                json.dumps(
                    {
                        "tag": entry.tag,
                        "response": entry.response,
                        "match": entry.match,
                        "user_contains": entry.user_contains,
                        "system_contains": entry.system_contains,
                    }
                )
                + "\n"
            )
    train_path = directory / "train.jsonl"
    from ragevolve.datasets import save_queries

    save_queries(train_queries(), train_path)
    return {"corpus": corpus_path, "script": script_path, "train": train_path}


# --- mutation world: every plan fails ------------------------------------------

MUTATION_QUERY = Query(
    id="m1",
    text="Who composed the lost symphony of Atlantis?",
    gold_answers=("Nemo",),
)


def mutation_entries() -> list[ScriptEntry]:
    return [
        ScriptEntry(tag="orchestrator.sample", user_contains="", response=BAD_PLAN_JSON),
        ScriptEntry(tag="agent.AnswerGenerator", user_contains="", response="Answer: unknown"),
        ScriptEntry(tag="agent.ConcludeAgent", user_contains="", response="Answer: no idea"),
    ]
