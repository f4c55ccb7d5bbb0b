from __future__ import annotations

import json

import httpx
import pytest

from ragevolve.llm import BackendUnavailable, ChatRequest, HTTPBackend, estimate_tokens


class FakeResponse:
    def __init__(self, payload: dict, status: int = 200) -> None:
        self._payload = payload
        self.status_code = status

    def raise_for_status(self) -> None:
        if self.status_code >= 400:
            raise httpx.HTTPStatusError("boom", request=None, response=None)

    def json(self) -> dict:
        return self._payload


def request() -> ChatRequest:
    return ChatRequest(system_text="sys", user_text="hello there", tag="agent.X")


def test_usage_passthrough(monkeypatch):
    payload = {
        "choices": [{"message": {"content": "hi"}}],
        "usage": {"prompt_tokens": 120, "completion_tokens": 30},
    }
    calls = []

    def fake_post(url, json=None, headers=None, timeout=None):
        calls.append((url, json, headers))
        return FakeResponse(payload)

    monkeypatch.setattr(httpx, "post", fake_post)
    backend = HTTPBackend(endpoint="https://llm.example/v1", model="test-model", api_key="sk-x")
    response = backend.complete(request())
    assert response.tokens_in == 120
    assert response.tokens_out == 30
    assert response.text == "hi"
    url, body, headers = calls[0]
    assert url == "https://llm.example/v1/chat/completions"
    assert body["model"] == "test-model"
    assert body["messages"][0] == {"role": "system", "content": "sys"}
    assert body["messages"][1] == {"role": "user", "content": "hello there"}
    assert headers["Authorization"] == "Bearer sk-x"
    assert backend.log.total("agent.") == 150


def test_missing_usage_falls_back_to_estimate(monkeypatch):
    payload = {"choices": [{"message": {"content": "three word reply"}}]}
    monkeypatch.setattr(httpx, "post", lambda *a, **k: FakeResponse(payload))
    backend = HTTPBackend(endpoint="https://llm.example/v1", model="m")
    response = backend.complete(request())
    assert response.tokens_in == estimate_tokens("sys", "hello there")
    assert response.tokens_out == estimate_tokens("three word reply")


def test_retries_then_backend_unavailable(monkeypatch):
    attempts = []

    def flaky_post(*args, **kwargs):
        attempts.append(1)
        raise httpx.ConnectError("refused")

    monkeypatch.setattr(httpx, "post", flaky_post)
    backend = HTTPBackend(endpoint="https://down.example/v1", model="m", retries=2, backoff_s=0.0)
    with pytest.raises(BackendUnavailable):
        backend.complete(request())
    assert len(attempts) == 3  # original + 2 retries


def test_transient_failure_recovers(monkeypatch):
    payload = {"choices": [{"message": {"content": "ok"}}]}
    state = {"count": 0}

    def once_flaky(*args, **kwargs):
        state["count"] += 1
        if state["count"] == 1:
            raise httpx.ReadTimeout("slow")
        return FakeResponse(payload)

    monkeypatch.setattr(httpx, "post", once_flaky)
    backend = HTTPBackend(endpoint="https://llm.example/v1", model="m", retries=2, backoff_s=0.0)
    assert backend.complete(request()).text == "ok"
    assert state["count"] == 2
