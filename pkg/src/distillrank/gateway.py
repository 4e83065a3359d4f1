"""Chat-completion client: HTTP backend for OpenAI-compatible servers and a
deterministic mock backend driven by a prompt-hash fixture.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Protocol

import httpx

from .errors import APIError, ParseError, TransportError, ValidationError
from .models import PathLike

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")
FINISH_REASONS = ("stop", "length", "error")
RETRYABLE_STATUS = frozenset({408, 409, 425, 429, 500, 502, 503, 504})

Messages = list[dict[str, str]]


@dataclass(frozen=True)
class ChatRequest:
    messages: Sequence[dict[str, str]]
    temperature: float = 0.0
    top_p: float = 1.0
    n: int = 1
    max_tokens: int = 1024
    seed: int | None = None

    def __post_init__(self):
        if not self.messages:
            raise ValidationError("messages must be non-empty")
        for m in self.messages:
            if m.get("role") not in ROLES or not isinstance(m.get("content"), str):
                raise ValidationError(f"bad message {m!r}")
        if self.messages[0]["role"] not in ("system", "user"):
            raise ValidationError("first message must be system or user")
        if self.temperature < 0:
            raise ValidationError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValidationError("top_p must be in (0, 1]")
        if self.n < 1:
            raise ValidationError("n must be >= 1")
        if self.max_tokens < 1:
            raise ValidationError("max_tokens must be >= 1")

    @classmethod
    def greedy(cls, messages: Messages, max_tokens: int = 1024) -> ChatRequest:
        return cls(messages, temperature=0.0, top_p=1.0, n=1, max_tokens=max_tokens)


@dataclass(frozen=True)
class Completion:
    text: str
    finish_reason: str = "stop"

    @property
    def truncated(self) -> bool:
        return self.finish_reason == "length"


class Backend(Protocol):
    model: str

    def complete(self, request: ChatRequest) -> list[Completion]: ...


def prompt_hash(messages: Sequence[dict[str, str]]) -> str:
    """Stable hash of a message list, used to key mock fixtures."""
    canon = json.dumps(
        [{"role": m["role"], "content": m["content"]} for m in messages],
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def complete(backend: Backend, request: ChatRequest) -> list[Completion]:
    """Run one request and return exactly ``request.n`` completions."""
    out = backend.complete(request)
    if len(out) != request.n:
        raise APIError(502, f"backend returned {len(out)} completions, expected {request.n}")
    return out


def _finish_reason(raw) -> str:
    if raw in (None, "stop", "eos", "end_turn"):
        return "stop"
    if raw in ("length", "max_tokens"):
        return "length"
    return "error"


class HttpBackend:
    """Client for ``POST {base_url}/chat/completions``.

    Transient failures (connection errors, 408/429/5xx) are retried with
    exponential backoff. Concurrent calls share a semaphore bounding the
    number of requests in flight.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        api_key_env: str = "LLM_API_KEY",
        max_retries: int = 3,
        backoff: float = 0.5,
        max_in_flight: int = 8,
        timeout: float = 120.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        key = api_key if api_key is not None else os.environ.get(api_key_env, "")
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)
        self.max_retries = max_retries
        self.backoff = backoff
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max(1, max_in_flight))
        self._lock = threading.Lock()
        self.retry_count = 0
        self.request_count = 0

    def close(self) -> None:
        self._client.close()

    def _post(self, body: dict) -> dict:
        url = f"{self.base_url}/chat/completions"
        last = ""
        for attempt in range(self.max_retries + 1):
            if attempt:
                with self._lock:
                    self.retry_count += 1
                self._sleep(self.backoff * 2 ** (attempt - 1))
            try:
                with self._slots:
                    with self._lock:
                        self.request_count += 1
                    resp = self._client.post(url, json=body)
            except httpx.TransportError as exc:
                last = f"{type(exc).__name__}: {exc}"
                logger.warning("chat request failed (%s), attempt %d", last, attempt + 1)
                continue
            if resp.status_code in RETRYABLE_STATUS:
                last = f"HTTP {resp.status_code}: {resp.text[:200]}"
                logger.warning("chat request got %s, attempt %d", resp.status_code, attempt + 1)
                continue
            if not resp.is_success:
                raise APIError(resp.status_code, resp.text)
            try:
                return resp.json()
            except ValueError:
                raise APIError(resp.status_code, f"invalid JSON body: {resp.text[:200]}") from None
        raise TransportError(f"gave up after {self.max_retries + 1} attempts: {last}", self.max_retries + 1)

    def complete(self, request: ChatRequest) -> list[Completion]:
        out: list[Completion] = []
        # Some servers ignore n; top up with further requests, preserving order.
        while len(out) < request.n:
            want = request.n - len(out)
            body = {
                "model": self.model,
                "messages": [dict(m) for m in request.messages],
                "temperature": request.temperature,
                "top_p": request.top_p,
                "n": want,
                "max_tokens": request.max_tokens,
            }
            if request.seed is not None:
                body["seed"] = request.seed + len(out)
            data = self._post(body)
            choices = data.get("choices")
            if not isinstance(choices, list) or not choices:
                raise APIError(200, f"response has no choices: {json.dumps(data)[:200]}")
            choices = sorted(choices, key=lambda c: c.get("index", 0))
            for c in choices[:want]:
                msg = c.get("message") or {}
                out.append(Completion(msg.get("content") or "", _finish_reason(c.get("finish_reason"))))
        return out


@dataclass
class MockBackend:
    """Deterministic backend: completions looked up by :func:`prompt_hash`.

    A table entry with fewer texts than requested is cycled. Unknown prompts
    use ``default`` if set, else ``responder`` if set, else raise.
    """

    table: dict[str, list[str]] = field(default_factory=dict)
    default: list[str] | None = None
    responder: Callable[[Sequence[dict[str, str]], int, int | None], list[str]] | None = None
    model: str = "mock"
    calls: list[ChatRequest] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> list[Completion]:
        with self._lock:
            self.calls.append(request)
        key = prompt_hash(request.messages)
        texts = self.table.get(key)
        if texts is None and self.responder is not None:
            texts = self.responder(request.messages, request.n, request.seed)
        if texts is None:
            texts = self.default
        if not texts:
            raise APIError(404, f"mock fixture has no entry for prompt {key[:12]}")
        return [Completion(texts[i % len(texts)]) for i in range(request.n)]

    def add(self, messages: Sequence[dict[str, str]], completions: list[str]) -> str:
        key = prompt_hash(messages)
        self.table[key] = list(completions)
        return key

    @classmethod
    def from_jsonl(cls, path: PathLike, model: str = "mock") -> MockBackend:
        from .models import _iter_json_lines

        table: dict[str, list[str]] = {}
        default = None
        for lineno, obj in _iter_json_lines(path):
            if "default" in obj:
                default = [str(t) for t in obj["default"]]
                continue
            key = obj.get("prompt_hash")
            comps = obj.get("completions")
            if not isinstance(key, str) or not isinstance(comps, list):
                raise ParseError("expected {'prompt_hash': str, 'completions': [str]}", path, lineno)
            table[key] = [str(t) for t in comps]
        return cls(table=table, default=default, model=model)

    def to_jsonl(self, path: PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for key in sorted(self.table):
                fh.write(json.dumps({"prompt_hash": key, "completions": self.table[key]}, ensure_ascii=False) + "\n")
            if self.default is not None:
                fh.write(json.dumps({"default": self.default}, ensure_ascii=False) + "\n")
