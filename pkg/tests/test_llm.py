from __future__ import annotations

import json

import pytest

from ragevolve.llm import (
    ChatRequest,
    ChatResponse,
    MalformedStructuredOutput,
    ScriptEntry,
    ScriptMiss,
    ScriptedBackend,
    complete_json,
    estimate_tokens,
    strip_code_fences,
)


def request(user: str, tag: str = "t", system: str = "sys") -> ChatRequest:
    return ChatRequest(system_text=system, user_text=user, tag=tag)


def test_request_validation():
    with pytest.raises(ValueError):
        ChatRequest(system_text="s", user_text="u", temperature=-0.1)
    with pytest.raises(ValueError):
        ChatRequest(system_text="s", user_text="u", temperature=2.5)
    with pytest.raises(ValueError):
        ChatRequest(system_text="", user_text="u")
    with pytest.raises(ValueError):
        ChatRequest(system_text="s", user_text="u", max_tokens=0)
    with pytest.raises(ValueError):
        ChatResponse(text="x", tokens_in=-1, tokens_out=0)


def test_scripted_determinism():
    backend = ScriptedBackend(
        [ScriptEntry(tag="retriever", user_contains="capital of France", response="Paris passage")]
    )
    req = request("find: capital of France", tag="retriever")
    first = backend.complete(req)
    second = backend.complete(req)
    assert first == second
    assert first.text == "Paris passage"
    assert first.tokens_in == estimate_tokens("sys", "find: capital of France")
    assert first.tokens_out == estimate_tokens("Paris passage")


def test_scripted_first_match_wins_and_system_guard():
    backend = ScriptedBackend(
        [
            ScriptEntry(tag="t", user_contains="q", system_contains="special", response="guarded"),
            ScriptEntry(tag="t", user_contains="q", response="default"),
        ]
    )
    assert backend.complete(request("q", system="plain")).text == "default"
    assert backend.complete(request("q", system="special sauce")).text == "guarded"


def test_scripted_exact_match():
    backend = ScriptedBackend([ScriptEntry(tag="t", match="exact", user_contains="exactly this", response="hit")])
    assert backend.complete(request("exactly this")).text == "hit"
    with pytest.raises(ScriptMiss):
        backend.complete(request("exactly this plus more"))


def test_script_miss():
    backend = ScriptedBackend([])
    with pytest.raises(ScriptMiss):
        backend.complete(request("anything"))


def test_scripted_from_jsonl_round_trip(tmp_path):
    path = tmp_path / "script.jsonl"
    rows = [
        {"tag": "a", "response": "r1", "user_contains": "x"},
        {"tag": "b", "response": "r2", "match": "exact", "user_contains": "y", "system_contains": "s"},
    ]
    path.write_text("\n".join(json.dumps(r) for r in rows), encoding="utf-8")
    backend = ScriptedBackend.from_jsonl(path)
    assert backend.complete(request("has x inside", tag="a")).text == "r1"


def test_token_estimate():
    # ceil(words * 4/3)
    assert estimate_tokens("one two three") == 4
    assert estimate_tokens("one two three", "four five") == 7
    assert estimate_tokens("") == 0


def test_token_log_accounting():
    backend = ScriptedBackend(
        [
            ScriptEntry(tag="agent.A", user_contains="", response="one two three"),
            ScriptEntry(tag="orchestrator.sample", user_contains="", response="x"),
        ]
    )
    backend.complete(request("hello world", tag="agent.A"))
    backend.complete(request("hello world", tag="orchestrator.sample"))
    assert backend.log.count("agent.") == 1
    assert backend.log.count("orchestrator.") == 1
    assert backend.log.total() == backend.log.total("agent.") + backend.log.total("orchestrator.")
    assert backend.log.total("agent.") == estimate_tokens("sys", "hello world") + estimate_tokens(
        "one two three"
    )


VALID_PLAN = json.dumps(
    {
        "query_profile": "simple lookup",
        "selected_agents": ["Retriever", "AnswerGenerator"],
        "execution_order": [
            {"step": 1, "agent": "Retriever", "depends_on": [], "mode": "sequential"},
            {"step": 2, "agent": "AnswerGenerator", "depends_on": [1], "mode": "sequential"},
        ],
    }
)


def test_complete_json_valid_plan():
    backend = ScriptedBackend([ScriptEntry(tag="t", user_contains="", response=VALID_PLAN)])
    payload = complete_json(backend, request("plan please"), "plan")
    assert payload["query_profile"] == "simple lookup"
    assert len(payload["execution_order"]) == 2


# A representative raw model response: prose preamble plus a fenced JSON body.
FENCED_RESPONSE = (
    "Sure, here is the coordination topology you asked for.\n\n"
    "```json\n"
    + VALID_PLAN
    + "\n```\n\nLet me know if you want a different structure."
)


def test_fenced_response_recovered():
    assert json.loads(strip_code_fences(FENCED_RESPONSE)) == json.loads(VALID_PLAN)
    backend = ScriptedBackend([ScriptEntry(tag="t", user_contains="", response=FENCED_RESPONSE)])
    payload = complete_json(backend, request("plan please"), "plan")
    assert payload == json.loads(VALID_PLAN)


def test_repair_round_trip():
    bad = json.dumps({"query_profile": "x"})  # missing execution_order
    backend = ScriptedBackend(
        [
            ScriptEntry(tag="t", user_contains="Your previous response was invalid", response=VALID_PLAN),
            ScriptEntry(tag="t", user_contains="", response=bad),
        ]
    )
    payload = complete_json(backend, request("plan please"), "plan")
    assert payload["query_profile"] == "simple lookup"
    assert backend.log.count("t") == 2  # original + repair


def test_double_failure_raises():
    bad = json.dumps({"query_profile": "x"})
    backend = ScriptedBackend([ScriptEntry(tag="t", user_contains="", response=bad)])
    with pytest.raises(MalformedStructuredOutput):
        complete_json(backend, request("plan please"), "plan")
    assert backend.log.count("t") == 2


def test_unknown_schema_rejected():
    backend = ScriptedBackend([])
    with pytest.raises(ValueError):
        complete_json(backend, request("x"), "nonexistent")


@pytest.mark.parametrize(
    "schema_name,payload",
    [
        (
            "insight_group",
            {
                "success_factors": ["retrieval first"],
                "failure_modes": ["no evidence"],
                "insights": [{"query_type": "bridge", "insight": "retrieve before answering"}],
                "blamed_agents": ["AnswerGenerator"],
            },
        ),
        (
            "library_ops",
            {
                "operations": [
                    {
                        "operation": "ADD",
                        "new_insight": "x",
                        "target_entry_ids": [],
                        "merged_insight": None,
                        "rationale": "novel",
                    }
                ]
            },
        ),
        (
            "rope_analysis",
            {
                "operational_rules": [{"rule": "check entities", "derived_from": "v1 vs v2"}],
                "behavioral_principles": [{"principle": "ground claims", "derived_from": "all"}],
                "updated_prompt": "full text",
            },
        ),
    ],
)
def test_all_schemas_accept_valid_payloads(schema_name, payload):
    backend = ScriptedBackend(
        [ScriptEntry(tag="t", user_contains="", response=json.dumps(payload))]
    )
    assert complete_json(backend, request("go"), schema_name) == payload
