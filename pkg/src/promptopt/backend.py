"""Generation backends: an OpenAI-compatible HTTP client and a deterministic
scripted mock, both behind one interface, with bounded-parallel batch
execution and run-level token accounting."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

from .errors import (
    AuthError,
    BackendError,
    BackendTimeout,
    MalformedResponse,
    RateLimitedExhausted,
    ScriptExhausted,
)

log = logging.getLogger(__name__)

DEFAULT_API_KEY_ENV = "PROMPTFLOW_API_KEY"


@dataclass(frozen=True)
class GenerationRequest:
    messages: tuple[tuple[str, str], ...]  # (role, text)
    model: str = "default"
    temperature: float = 0.0
    max_tokens: int = 2048

    def __post_init__(self):
        if not self.messages:
            raise ValueError("request needs at least one message")
        if not (self.temperature == self.temperature and abs(self.temperature) != float("inf")):
            raise ValueError("temperature must be finite")

    def content_hash(self) -> str:
        canon = json.dumps(
            [[role, text] for role, text in self.messages], ensure_ascii=False
        )
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def user_request(text: str, model: str = "default", temperature: float = 0.0,
                 max_tokens: int = 2048) -> GenerationRequest:
    return GenerationRequest(
        messages=(("user", text),), model=model,
        temperature=temperature, max_tokens=max_tokens,
    )


@dataclass(frozen=True)
class GenerationResponse:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_ms: float = 0.0


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_backoff_ms: float = 250.0

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


@dataclass(frozen=True)
class BackendConfig:
    base_url: str = "http://localhost:8000/v1"
    api_key_env_name: str = DEFAULT_API_KEY_ENV
    max_parallel: int = 8
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    timeout_ms: float = 60_000.0

    def __post_init__(self):
        if self.max_parallel < 1:
            raise ValueError("max_parallel must be >= 1")


class UsageCounter:
    """Thread-safe run-level token accounting."""

    def __init__(self):
        self._lock = threading.Lock()
        self.prompt_tokens = 0
        self.completion_tokens = 0
        self.requests = 0

    def add(self, resp: GenerationResponse):
        with self._lock:
            self.prompt_tokens += resp.prompt_tokens
            self.completion_tokens += resp.completion_tokens
            self.requests += 1

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "requests": self.requests,
                "prompt_tokens": self.prompt_tokens,
                "completion_tokens": self.completion_tokens,
                "total_tokens": self.prompt_tokens + self.completion_tokens,
            }


BatchItem = Union[GenerationResponse, BackendError]


class Backend:
    """Interface shared by the HTTP client and the mock."""

    usage: UsageCounter
    max_parallel: int = 8

    def generate(self, req: GenerationRequest) -> GenerationResponse:
        raise NotImplementedError

    def generate_batch(self, reqs: Sequence[GenerationRequest]) -> list[BatchItem]:
        """Run requests with at most `max_parallel` in flight; results come
        back in input order and per-item failures do not poison the batch."""
        if not reqs:
            return []
        results: list[BatchItem] = [None] * len(reqs)  # type: ignore[list-item]

        def run_one(i_req):
            i, req = i_req
            try:
                return i, self.generate(req)
            except BackendError as e:
                return i, e

        with ThreadPoolExecutor(max_workers=self.max_parallel) as pool:
            for i, res in pool.map(run_one, enumerate(reqs)):
                results[i] = res
        return results


class HttpBackend(Backend):
    """POSTs to {base_url}/chat/completions with bearer auth; retries 429/5xx
    and timeouts with exponential backoff."""

    RETRYABLE_STATUS = {429, 500, 502, 503, 504}

    def __init__(self, config: BackendConfig):
        self.config = config
        self.max_parallel = config.max_parallel
        self.usage = UsageCounter()

    def _api_key(self) -> str:
        key = os.environ.get(self.config.api_key_env_name, "")
        return key

    def generate(self, req: GenerationRequest) -> GenerationResponse:
        import requests

        url = self.config.base_url.rstrip("/") + "/chat/completions"
        body = {
            "model": req.model,
            "messages": [{"role": r, "content": c} for r, c in req.messages],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        headers = {"Content-Type": "application/json"}
        key = self._api_key()
        if key:
            headers["Authorization"] = "Bearer " + key

        policy = self.config.retry
        start = time.monotonic()
        last_err: Optional[BackendError] = None
        for attempt in range(policy.max_attempts):
            if attempt:
                time.sleep(policy.base_backoff_ms * (2 ** (attempt - 1)) / 1000.0)
            try:
                resp = requests.post(
                    url, json=body, headers=headers,
                    timeout=self.config.timeout_ms / 1000.0,
                )
            except requests.Timeout:
                last_err = BackendTimeout("request timed out (attempt %d)" % (attempt + 1))
                continue
            except requests.RequestException as e:
                last_err = BackendError(str(e))
                continue
            if resp.status_code in (401, 403):
                raise AuthError("HTTP %d from %s" % (resp.status_code, url))
            if resp.status_code in self.RETRYABLE_STATUS:
                last_err = RateLimitedExhausted(
                    "HTTP %d after %d attempts" % (resp.status_code, attempt + 1)
                )
                continue
            if resp.status_code != 200:
                raise BackendError("HTTP %d: %s" % (resp.status_code, resp.text[:500]))
            return self._parse(resp, start)
        raise last_err if last_err is not None else BackendError("retries exhausted")

    def _parse(self, resp, start) -> GenerationResponse:
        try:
            doc = resp.json()
            text = doc["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise MalformedResponse("cannot parse completion: %s" % e)
        usage = doc.get("usage") or {}
        if not usage:
            log.warning("response missing usage fields; counting zero tokens")
        out = GenerationResponse(
            text=text,
            prompt_tokens=int(usage.get("prompt_tokens", 0) or 0),
            completion_tokens=int(usage.get("completion_tokens", 0) or 0),
            latency_ms=(time.monotonic() - start) * 1000.0,
        )
        self.usage.add(out)
        return out


class MockBackend(Backend):
    """Deterministic scripted backend.

    Script entries are {"match": {...}, "response": "..."} where match is one
    of {"hash": <sha256 of canonical messages>}, {"contains": <substring of
    the last message>}, or {"index": n} / {} (ordered fallback, consumed
    FIFO). Hash and contains entries are reusable; fallback entries are
    consumed once each. When fallback entries run out the last one is
    replayed so long runs stay deterministic (or ScriptExhausted is raised if
    `strict` is set).
    """

    def __init__(self, script: Sequence[dict] = (), strict: bool = False,
                 max_parallel: int = 8):
        self.usage = UsageCounter()
        self.max_parallel = max_parallel
        self.strict = strict
        self._lock = threading.Lock()
        self._by_hash: dict[str, str] = {}
        self._contains: list[tuple[str, str]] = []
        self._fifo: list[str] = []
        self._fifo_pos = 0
        for entry in script:
            match = entry.get("match", {}) or {}
            response = entry["response"]
            if "hash" in match:
                self._by_hash[match["hash"]] = response
            elif "contains" in match:
                self._contains.append((match["contains"], response))
            else:
                self._fifo.append(response)

    @classmethod
    def from_file(cls, path, **kwargs) -> "MockBackend":
        script = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(script, **kwargs)

    def _lookup(self, req: GenerationRequest) -> str:
        h = req.content_hash()
        if h in self._by_hash:
            return self._by_hash[h]
        last_text = req.messages[-1][1]
        for needle, response in self._contains:
            if needle in last_text:
                return response
        with self._lock:
            if self._fifo_pos < len(self._fifo):
                resp = self._fifo[self._fifo_pos]
                self._fifo_pos += 1
                return resp
            if self._fifo and not self.strict:
                return self._fifo[-1]
        raise ScriptExhausted("no script entry matches request %s" % h[:12])

    def generate(self, req: GenerationRequest) -> GenerationResponse:
        text = self._lookup(req)
        out = GenerationResponse(
            text=text,
            prompt_tokens=sum(len(c.split()) for _, c in req.messages),
            completion_tokens=len(text.split()),
            latency_ms=0.0,
        )
        self.usage.add(out)
        return out

    def generate_batch(self, reqs: Sequence[GenerationRequest]) -> list[BatchItem]:
        # Serial, in input order: FIFO consumption must not depend on thread
        # scheduling.
        results: list[BatchItem] = []
        for req in reqs:
            try:
                results.append(self.generate(req))
            except BackendError as e:
                results.append(e)
        return results
