"""Chat-completion backends and structured-JSON response decoding.

Two backends share one interface: an OpenAI-compatible HTTP client with
bounded retries, and a table-driven scripted backend that is a pure function
of (tag, system_text, user_text), the foundation for byte-exact replay tests.
Structured responses are decoded against named JSON schemas with exactly one
repair round-trip.
"""

from __future__ import annotations

import json
import logging
import math
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

import httpx
import jsonschema

logger = logging.getLogger(__name__)


class BackendError(Exception):
    """Base class for completion-layer failures."""


class BackendUnavailable(BackendError):
    """Transport failure that persisted through all retries."""


class ScriptMiss(BackendError):
    """Scripted backend had no entry for the request (a test bug, not a runtime condition)."""


class MalformedStructuredOutput(BackendError):
    """Two consecutive responses failed schema validation."""


@dataclass(frozen=True)
class ChatRequest:
    system_text: str
    user_text: str
    temperature: float = 0.0
    max_tokens: int = 1024
    tag: str = "untagged"

    def __post_init__(self) -> None:
        if not self.system_text or not self.user_text:
            raise ValueError("system_text and user_text must be nonempty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    tokens_in: int
    tokens_out: int

    def __post_init__(self) -> None:
        if self.tokens_in < 0 or self.tokens_out < 0:
            raise ValueError("token counts must be nonnegative")


def estimate_tokens(*texts: str) -> int:
    """Fallback token estimate when the provider reports no usage.

    Whitespace-token count scaled by 4/3, rounded up; only relative
    comparisons matter downstream.
    """
    words = sum(len(t.split()) for t in texts)
    return math.ceil(words * 4 / 3)


class TokenLog:
    """Serialized append-only record of every completion's token usage."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.records: list[dict[str, Any]] = []

    def add(self, tag: str, tokens_in: int, tokens_out: int) -> None:
        with self._lock:
            self.records.append(
                {"tag": tag, "tokens_in": tokens_in, "tokens_out": tokens_out}
            )

    def total(self, prefix: str = "") -> int:
        with self._lock:
            return sum(
                r["tokens_in"] + r["tokens_out"]
                for r in self.records
                if r["tag"].startswith(prefix)
            )

    def count(self, prefix: str = "") -> int:
        with self._lock:
            return sum(1 for r in self.records if r["tag"].startswith(prefix))


class Backend:
    """Interface shared by all chat backends."""

    #: True when identical requests always yield identical responses.
    deterministic: bool = False

    def __init__(self, log: TokenLog | None = None) -> None:
        self.log = log if log is not None else TokenLog()

    def complete(self, request: ChatRequest) -> ChatResponse:
        raise NotImplementedError


@dataclass(frozen=True)
class ScriptEntry:
    """One row of the scripted response table.

    ``user_contains`` is matched against the request's user text, exactly or
    as a substring per ``match``; ``system_contains`` (optional) must appear
    in the system text. The first matching row wins.
    """

    tag: str
    response: str
    match: str = "substring"
    user_contains: str = ""
    system_contains: str = ""

    def __post_init__(self) -> None:
        if self.match not in ("exact", "substring"):
            raise ValueError(f"match must be exact|substring, got {self.match!r}")

    def matches(self, request: ChatRequest) -> bool:
        if self.tag != request.tag:
            return False
        if self.system_contains and self.system_contains not in request.system_text:
            return False
        if self.match == "exact":
            return request.user_text == self.user_contains
        return self.user_contains in request.user_text


class ScriptedBackend(Backend):
    """Deterministic table-driven stand-in for a language model."""

    deterministic = True

    def __init__(self, entries: Iterable[ScriptEntry], log: TokenLog | None = None) -> None:
        super().__init__(log)
        self.entries = tuple(entries)

    @classmethod
    def from_jsonl(cls, path: str | Path, log: TokenLog | None = None) -> "ScriptedBackend":
        entries = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            raw = json.loads(line)
            entries.append(
                ScriptEntry(
                    tag=raw["tag"],
                    response=raw["response"],
                    match=raw.get("match", "substring"),
                    user_contains=raw.get("user_contains", ""),
                    system_contains=raw.get("system_contains", ""),
                )
            )
        return cls(entries, log)

    def complete(self, request: ChatRequest) -> ChatResponse:
        for entry in self.entries:
            if entry.matches(request):
                response = ChatResponse(
                    text=entry.response,
                    tokens_in=estimate_tokens(request.system_text, request.user_text),
                    tokens_out=estimate_tokens(entry.response),
                )
                self.log.add(request.tag, response.tokens_in, response.tokens_out)
                return response
        raise ScriptMiss(
            f"no scripted entry for tag {request.tag!r} "
            f"(user text starts: {request.user_text[:120]!r})"
        )


class HTTPBackend(Backend):
    """OpenAI-compatible chat-completions client with bounded retries."""

    deterministic = False

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str = "",
        timeout: float = 60.0,
        retries: int = 2,
        backoff_s: float = 0.5,
        log: TokenLog | None = None,
    ) -> None:
        super().__init__(log)
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.retries = retries
        self.backoff_s = backoff_s

    def complete(self, request: ChatRequest) -> ChatResponse:
        body = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        url = f"{self.endpoint}/chat/completions"
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = httpx.post(url, json=body, headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                payload = resp.json()
                text = payload["choices"][0]["message"]["content"] or ""
                usage = payload.get("usage") or {}
                if "prompt_tokens" in usage and "completion_tokens" in usage:
                    tokens_in = int(usage["prompt_tokens"])
                    tokens_out = int(usage["completion_tokens"])
                else:
                    tokens_in = estimate_tokens(request.system_text, request.user_text)
                    tokens_out = estimate_tokens(text)
                self.log.add(request.tag, tokens_in, tokens_out)
                return ChatResponse(text=text, tokens_in=tokens_in, tokens_out=tokens_out)
            except (httpx.HTTPError, KeyError, ValueError, json.JSONDecodeError) as exc:
                last_error = exc
                if attempt < self.retries:
                    time.sleep(self.backoff_s * (2**attempt))
        raise BackendUnavailable(f"chat completion failed after retries: {last_error}")


# --- structured decoding -----------------------------------------------------

PLAN_SCHEMA = {
    "type": "object",
    "required": ["query_profile", "execution_order"],
    "properties": {
        "query_profile": {"type": "string"},
        "selected_agents": {"type": "array", "items": {"type": "string"}},
        "execution_order": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["step", "agent", "depends_on", "mode"],
                "properties": {
                    "step": {"type": "integer"},
                    "agent": {"type": "string"},
                    "depends_on": {"type": "array", "items": {"type": "integer"}},
                    "mode": {"enum": ["sequential", "parallel"]},
                },
            },
        },
    },
}

INSIGHT_GROUP_SCHEMA = {
    "type": "object",
    "required": ["insights"],
    "properties": {
        "success_factors": {"type": "array", "items": {"type": "string"}},
        "failure_modes": {"type": "array", "items": {"type": "string"}},
        "insights": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["query_type", "insight"],
                "properties": {
                    "query_type": {"type": "string"},
                    "insight": {"type": "string", "minLength": 1},
                },
            },
        },
        "blamed_agents": {"type": "array", "items": {"type": "string"}},
    },
}

LIBRARY_OPS_SCHEMA = {
    "type": "object",
    "required": ["operations"],
    "properties": {
        "operations": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["operation"],
                "properties": {
                    "operation": {"enum": ["ADD", "MERGE", "PRUNE", "KEEP"]},
                    "new_insight": {"type": ["string", "null"]},
                    "target_entry_ids": {"type": "array", "items": {"type": "string"}},
                    "merged_insight": {"type": ["string", "null"]},
                    "rationale": {"type": ["string", "null"]},
                },
            },
        },
    },
}

ROPE_ANALYSIS_SCHEMA = {
    "type": "object",
    "required": ["operational_rules", "behavioral_principles"],
    "properties": {
        "operational_rules": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["rule", "derived_from"],
                "properties": {
                    "rule": {"type": "string", "minLength": 1},
                    "derived_from": {"type": "string"},
                },
            },
        },
        "behavioral_principles": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["principle", "derived_from"],
                "properties": {
                    "principle": {"type": "string", "minLength": 1},
                    "derived_from": {"type": "string"},
                },
            },
        },
        "updated_prompt": {"type": "string"},
    },
}

SCHEMAS: dict[str, dict[str, Any]] = {
    "plan": PLAN_SCHEMA,
    "insight_group": INSIGHT_GROUP_SCHEMA,
    "library_ops": LIBRARY_OPS_SCHEMA,
    "rope_analysis": ROPE_ANALYSIS_SCHEMA,
}

_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)

_REPAIR_TEMPLATE = (
    "\n\nYour previous response was invalid: {violation}. "
    "Respond again with only the JSON object in the required format."
)


def strip_code_fences(text: str) -> str:
    """Return the body of the first fenced code block, or the text unchanged."""
    match = _FENCE_RE.search(text)
    if match:
        return match.group(1).strip()
    return text.strip()


def _parse_candidate(text: str) -> Any:
    """Best-effort extraction of a JSON value from a model response."""
    body = strip_code_fences(text)
    try:
        return json.loads(body)
    except json.JSONDecodeError:
        start, end = body.find("{"), body.rfind("}")
        if start != -1 and end > start:
            return json.loads(body[start : end + 1])
        raise


def _decode_once(text: str, schema_name: str) -> tuple[Any, str | None]:
    """Returns (value, None) on success or (None, violation message)."""
    try:
        value = _parse_candidate(text)
    except json.JSONDecodeError as exc:
        return None, f"not valid JSON ({exc.msg} at position {exc.pos})"
    try:
        jsonschema.validate(value, SCHEMAS[schema_name])
    except jsonschema.ValidationError as exc:
        return None, exc.message
    return value, None


def complete_json(backend: Backend, request: ChatRequest, schema_name: str) -> Any:
    """Complete and decode against a named schema, with one repair attempt.

    On a parse or validation failure the request is reissued once with a
    repair instruction quoting the violation; a second failure raises
    MalformedStructuredOutput (the caller decides whether to skip or abort).
    """
    if schema_name not in SCHEMAS:
        raise ValueError(f"unknown schema {schema_name!r}")
    response = backend.complete(request)
    value, violation = _decode_once(response.text, schema_name)
    if violation is None:
        return value
    logger.debug("structured decode failed (%s): %s; repairing", schema_name, violation)
    repair = ChatRequest(
        system_text=request.system_text,
        user_text=request.user_text + _REPAIR_TEMPLATE.format(violation=violation),
        temperature=request.temperature,
        max_tokens=request.max_tokens,
        tag=request.tag,
    )
    response = backend.complete(repair)
    value, violation = _decode_once(response.text, schema_name)
    if violation is None:
        return value
    raise MalformedStructuredOutput(
        f"schema {schema_name!r} violated twice; last violation: {violation}"
    )
