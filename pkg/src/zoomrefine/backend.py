"""Model backend boundary: submit a conversation, get text back.

Ships an HTTP client for OpenAI-compatible chat-completions endpoints
(images travel as base64 data URLs inside user content parts) and a
deterministic scriptable mock for tests.
"""

from __future__ import annotations

import base64
import os
import random
import time
from dataclasses import dataclass
from typing import Protocol

import httpx

from .protocol import Conversation

__all__ = [
    "BackendConfig",
    "ModelReply",
    "Backend",
    "HttpBackend",
    "MockScript",
    "MockRule",
    "MockBackend",
    "AuthError",
    "BackendUnavailable",
    "MalformedResponse",
    "ScriptError",
    "complete",
    "mock_complete",
    "conversation_to_messages",
]


class AuthError(Exception):
    """Endpoint rejected our credentials (401/403). Never retried."""


class BackendUnavailable(Exception):
    """Retries exhausted, or a non-retryable request failure."""


class MalformedResponse(Exception):
    """Endpoint replied with something outside the wire contract."""


class ScriptError(Exception):
    """No mock rule matches the conversation."""


@dataclass(frozen=True)
class BackendConfig:
    endpoint_url: str = "http://127.0.0.1:8000/v1/chat/completions"
    model_name: str = "mock"
    api_key_env_var: str = "ZOOMREFINE_API_KEY"
    request_timeout: float = 120.0
    max_retries: int = 3
    retry_backoff_base: float = 0.5
    temperature: float = 0.0
    max_output_tokens: int = 1024

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.request_timeout <= 0:
            raise ValueError("request_timeout must be > 0")


@dataclass(frozen=True)
class ModelReply:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_ms: float = 0.0
    attempt_count: int = 1

    def __post_init__(self):
        if self.latency_ms < 0 or self.attempt_count < 1:
            raise ValueError("invalid reply accounting")


class Backend(Protocol):
    def complete(self, conv: Conversation) -> ModelReply: ...


def conversation_to_messages(conv: Conversation) -> list[dict]:
    """Serialize to the chat-completions ``messages`` wire shape."""
    messages = []
    for turn in conv.turns:
        if not turn.images:
            messages.append({"role": turn.role, "content": turn.text})
            continue
        content: list[dict] = [{"type": "text", "text": turn.text}]
        for data, media_type in turn.images:
            b64 = base64.b64encode(data).decode("ascii")
            content.append(
                {"type": "image_url", "image_url": {"url": f"data:{media_type};base64,{b64}"}}
            )
        messages.append({"role": turn.role, "content": content})
    return messages


class HttpBackend:
    """Client for an OpenAI-compatible chat-completions endpoint.

    Shareable across threads; each call is independent. Transient failures
    (HTTP 429/5xx, timeouts, connection errors) are retried with exponential
    backoff plus jitter.
    """

    def __init__(self, cfg: BackendConfig, client: httpx.Client | None = None):
        self.cfg = cfg
        self._client = client or httpx.Client(timeout=cfg.request_timeout)

    def complete(self, conv: Conversation) -> ModelReply:
        if conv.last_turn.role != "user":
            raise ValueError("conversation must end with a user turn")
        cfg = self.cfg
        body = {
            "model": cfg.model_name,
            "messages": conversation_to_messages(conv),
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_output_tokens,
        }
        headers = {}
        api_key = os.environ.get(cfg.api_key_env_var, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"

        start = time.perf_counter()
        last_err: Exception | None = None
        for attempt in range(1, cfg.max_retries + 2):
            try:
                resp = self._client.post(cfg.endpoint_url, json=body, headers=headers)
            except (httpx.TimeoutException, httpx.TransportError) as e:
                last_err = e
                resp = None
            if resp is not None:
                if resp.status_code == 200:
                    return self._parse(resp, attempt, start)
                if resp.status_code in (401, 403):
                    raise AuthError(f"HTTP {resp.status_code} from {cfg.endpoint_url}")
                if resp.status_code == 429 or resp.status_code >= 500:
                    last_err = BackendUnavailable(f"HTTP {resp.status_code}")
                else:
                    raise BackendUnavailable(
                        f"HTTP {resp.status_code} from {cfg.endpoint_url} (not retryable)"
                    )
            if attempt <= cfg.max_retries:
                delay = cfg.retry_backoff_base * (2 ** (attempt - 1))
                time.sleep(delay + random.uniform(0, cfg.retry_backoff_base))
        raise BackendUnavailable(
            f"retries exhausted against {cfg.endpoint_url}: {last_err}"
        ) from last_err

    def _parse(self, resp: httpx.Response, attempt: int, start: float) -> ModelReply:
        try:
            payload = resp.json()
            text = payload["choices"][0]["message"]["content"]
            usage = payload.get("usage") or {}
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise MalformedResponse(f"cannot parse chat completion: {e}") from e
        if not isinstance(text, str):
            raise MalformedResponse("message content is not text")
        return ModelReply(
            text=text,
            prompt_tokens=int(usage.get("prompt_tokens") or 0),
            completion_tokens=int(usage.get("completion_tokens") or 0),
            latency_ms=(time.perf_counter() - start) * 1000.0,
            attempt_count=attempt,
        )


@dataclass(frozen=True)
class MockRule:
    """Fires when the conversation has ``stage`` image-bearing turns and,
    if set, the latest user text contains ``contains``."""

    reply: str
    stage: int | None = None
    contains: str | None = None

    def matches(self, conv: Conversation) -> bool:
        if self.stage is not None and len(conv.image_turns()) != self.stage:
            return False
        if self.contains is not None and self.contains not in conv.last_turn.text:
            return False
        return True


@dataclass(frozen=True)
class MockScript:
    rules: tuple[MockRule, ...] = ()


def approx_tokens(text: str) -> int:
    return max(1, len(text) // 4)


def mock_complete(conv: Conversation, script: MockScript) -> ModelReply:
    """Deterministic reply from the first matching rule; wall-clock free."""
    for rule in script.rules:
        if rule.matches(conv):
            return ModelReply(
                text=rule.reply,
                prompt_tokens=approx_tokens(conv.all_text()),
                completion_tokens=approx_tokens(rule.reply),
                latency_ms=0.0,
                attempt_count=1,
            )
    raise ScriptError(
        f"no rule matches conversation with {len(conv.image_turns())} image turns"
    )


@dataclass(frozen=True)
class MockBackend:
    script: MockScript

    def complete(self, conv: Conversation) -> ModelReply:
        return mock_complete(conv, self.script)


def complete(conv: Conversation, cfg: BackendConfig) -> ModelReply:
    """One-shot convenience wrapper around ``HttpBackend``."""
    return HttpBackend(cfg).complete(conv)
