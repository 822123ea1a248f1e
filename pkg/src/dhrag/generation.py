"""Response generators: an OpenAI-compatible HTTP client and a deterministic mock."""

from __future__ import annotations

import os
import re
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol

import requests

from .integration import load_template

LLM_TOKEN_ENV = "DHRAG_LLM_TOKEN"
FALLBACK_ANSWER = "I don't know."

_SENTENCE_RE = re.compile(r"^(.+?[.!?])(?=\s|$)", re.S)
_LABEL_RE = re.compile(r"^(Q|A|Passage):\s*")


class GenerationError(RuntimeError):
    pass


class AuthError(GenerationError):
    pass


class GenerationTimeout(GenerationError):
    pass


class MalformedReply(GenerationError):
    pass


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    max_tokens: int = 256
    temperature: float = 0.0
    model_id: str = "mock"

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class GenerationResult:
    text: str
    finish_reason: str
    latency_ms: int = 0
    raw: dict | None = field(default=None, compare=False, repr=False)


class Generator(Protocol):
    def complete(self, request: GenerationRequest) -> GenerationResult: ...


def generate(client: Generator, request: GenerationRequest) -> GenerationResult:
    start = time.perf_counter()
    result = client.complete(request)
    latency = int(round((time.perf_counter() - start) * 1000))
    return GenerationResult(result.text, result.finish_reason, latency, result.raw)


# mock


def first_sentence(text: str) -> str:
    text = " ".join(text.split())
    m = _SENTENCE_RE.match(text)
    return m.group(1) if m else text


def prompt_blocks(prompt: str) -> dict[str, str]:
    """Map each block header in a rendered prompt to its body (labels stripped, lines joined)."""
    tpl = load_template()
    headers = {tpl["knowledge_header"], tpl["prior_turns_header"], tpl["reasoning_header"]}
    blocks: dict[str, str] = {}
    for chunk in prompt.split("\n\n"):
        lines = chunk.split("\n")
        if lines[0] in headers and lines[0] not in blocks:
            body = [_LABEL_RE.sub("", ln) for ln in lines[1:] if ln.strip()]
            blocks[lines[0]] = " ".join(body)
    return blocks


def question_of(prompt: str) -> str | None:
    prefix = load_template()["question_prefix"]
    for line in prompt.splitlines():
        if line.startswith(prefix):
            return line[len(prefix):]
    return None


def mock_answer(prompt: str, script: Mapping[str, str] | None = None) -> str:
    """The mock's reply to a rendered prompt.

    A scripted answer wins when the prompt's ``Current question:`` line is in
    ``script``. Otherwise the reply is the first sentence of the prior-turns
    block, then of the reasoning block, then of the knowledge block, and
    finally ``"I don't know."``. ``Q:``/``A:``/``Passage:`` labels are ignored.
    """
    if script:
        question = question_of(prompt)
        if question is not None and question in script:
            return script[question]
    tpl = load_template()
    blocks = prompt_blocks(prompt)
    for header in (tpl["prior_turns_header"], tpl["reasoning_header"], tpl["knowledge_header"]):
        body = blocks.get(header)
        if body:
            return first_sentence(body)
    return FALLBACK_ANSWER


@dataclass
class MockGenerator:
    """Deterministic stand-in for an LLM; see :func:`mock_answer`."""

    script: Mapping[str, str] | None = None
    fail_when: Callable[[GenerationRequest], bool] | None = None

    def complete(self, request: GenerationRequest) -> GenerationResult:
        if self.fail_when is not None and self.fail_when(request):
            raise GenerationError("injected generation failure")
        return GenerationResult(mock_answer(request.prompt, self.script), "stop")


def mock_generate(request: GenerationRequest, script: Mapping[str, str] | None = None) -> GenerationResult:
    return MockGenerator(script).complete(request)


# live client


@dataclass
class ChatCompletionsClient:
    """Client for ``POST {base_url}/chat/completions``.

    Transport errors, timeouts, HTTP 429 and 5xx are retried up to ``retries``
    times with exponential backoff; 401/403 fail immediately.
    """

    base_url: str
    model: str = "gpt-4o-mini"
    token: str | None = None
    timeout: float = 60.0
    retries: int = 3
    backoff: float = 1.0
    system_prompt: str | None = None
    sleep: Callable[[float], None] = time.sleep
    session: requests.Session | None = None

    @property
    def url(self) -> str:
        base = self.base_url.rstrip("/")
        return base if base.endswith("/chat/completions") else f"{base}/chat/completions"

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        token = self.token or os.environ.get(LLM_TOKEN_ENV)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def payload(self, request: GenerationRequest) -> dict:
        messages = []
        if self.system_prompt:
            messages.append({"role": "system", "content": self.system_prompt})
        messages.append({"role": "user", "content": request.prompt})
        return {
            "model": request.model_id if request.model_id != "mock" else self.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }

    def complete(self, request: GenerationRequest) -> GenerationResult:
        post = (self.session or requests).post
        payload = self.payload(request)
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = post(self.url, json=payload, headers=self._headers(), timeout=self.timeout)
            except requests.RequestException as exc:
                last = exc
                continue
            if resp.status_code in (401, 403):
                raise AuthError(f"endpoint rejected credentials (HTTP {resp.status_code})")
            if resp.status_code == 429 or resp.status_code >= 500:
                last = GenerationError(f"HTTP {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise GenerationError(f"HTTP {resp.status_code}: {resp.text[:500]}")
            return self._parse(resp)
        raise GenerationTimeout(f"no reply from {self.url} after {self.retries} retries: {last}")

    def _parse(self, resp: requests.Response) -> GenerationResult:
        try:
            data = resp.json()
            choice = data["choices"][0]
            text = choice["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedReply(f"unexpected reply shape: {resp.text[:200]!r}") from exc
        if not isinstance(text, str):
            raise MalformedReply("message content is not a string")
        reason = choice.get("finish_reason") or "stop"
        return GenerationResult(text, "length" if reason == "length" else "stop", raw=data)
