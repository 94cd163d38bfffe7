"""Chat-completion client with caching, rate limiting, retries, and record/replay.

Fixture layout: ``<fixtures>/<key[:2]>/<key>.json`` where ``key`` is the
SHA-256 of the canonical request (model, system, prompt, media hashes,
sampling params). Replay mode reads only from there and never touches the
transport.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import mimetypes
import os
import tempfile
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

logger = logging.getLogger(__name__)

MODES = ("live", "record", "replay")


class GatewayError(RuntimeError):
    pass


class MissingFixtureError(GatewayError):
    def __init__(self, key: str):
        self.key = key
        super().__init__(f"no fixture for request key {key}")


class TransientError(GatewayError):
    """Retryable transport failure (timeouts, 429, 5xx)."""


@dataclass(frozen=True)
class ChatRequest:
    prompt: str
    system: str = ""
    media: tuple[str, ...] = ()
    temperature: float = 0.0
    max_tokens: int = 1024


@dataclass(frozen=True)
class ChatResponse:
    text: str
    key: str
    usage: dict[str, Any] = field(default_factory=dict)
    cached: bool = False


@dataclass
class GatewayConfig:
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-4o"
    mode: str = "replay"
    fixtures: Path | None = None
    media_root: Path | None = None
    max_concurrency: int = 4
    requests_per_minute: int = 60
    max_attempts: int = 3
    backoff: float = 1.0
    timeout: float = 120.0
    api_key_env: str = "OPENAI_API_KEY"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        if self.requests_per_minute < 1:
            raise ValueError("requests_per_minute must be >= 1")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.mode in ("record", "replay") and self.fixtures is None:
            raise ValueError(f"{self.mode} mode needs a fixtures directory")
        if self.fixtures is not None:
            self.fixtures = Path(self.fixtures)
        if self.media_root is not None:
            self.media_root = Path(self.media_root)


class RateLimiter:
    """Sliding-window limiter: at most ``limit`` acquisitions per ``period`` seconds."""

    def __init__(
        self,
        limit: int,
        period: float = 60.0,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.limit = limit
        self.period = period
        self._clock = clock
        self._sleep = sleep
        self._stamps: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                while self._stamps and now - self._stamps[0] >= self.period:
                    self._stamps.popleft()
                if len(self._stamps) < self.limit:
                    self._stamps.append(now)
                    return
                wait = self._stamps[0] + self.period - now
            self._sleep(wait)


class HttpTransport:
    """POSTs OpenAI-style chat-completion payloads with httpx."""

    def __init__(self, endpoint: str, api_key: str | None, timeout: float):
        self.endpoint = endpoint
        self.api_key = api_key
        self.timeout = timeout

    def __call__(self, payload: dict[str, Any]) -> dict[str, Any]:
        import httpx

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            r = httpx.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
        except httpx.TransportError as e:
            raise TransientError(f"transport error: {e}") from e
        if r.status_code == 429 or r.status_code >= 500:
            raise TransientError(f"HTTP {r.status_code}")
        if r.status_code >= 400:
            raise GatewayError(f"HTTP {r.status_code}: {r.text[:200]}")
        return r.json()


def _media_hash(uri: str, root: Path | None) -> str:
    p = Path(uri)
    if not p.is_absolute() and root is not None:
        p = root / p
    if p.is_file():
        return "sha256:" + hashlib.sha256(p.read_bytes()).hexdigest()
    return "uri:" + uri


class LlmGateway:
    def __init__(
        self,
        config: GatewayConfig,
        transport: Callable[[dict[str, Any]], dict[str, Any]] | None = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self._transport = transport
        self._sleep = sleep
        self.limiter = RateLimiter(config.requests_per_minute, 60.0, clock, sleep)
        self._slots = threading.BoundedSemaphore(config.max_concurrency)
        self._memory: dict[str, ChatResponse] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self._stats_lock = threading.Lock()
        self.network_calls = 0
        self.cache_hits = 0

    @property
    def transport(self) -> Callable[[dict[str, Any]], dict[str, Any]]:
        if self._transport is None:
            api_key = os.environ.get(self.config.api_key_env)
            self._transport = HttpTransport(self.config.endpoint, api_key, self.config.timeout)
        return self._transport

    def cache_key(self, req: ChatRequest) -> str:
        canonical = {
            "model": self.config.model,
            "system": req.system,
            "prompt": req.prompt,
            "media": [_media_hash(m, self.config.media_root) for m in req.media],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        blob = json.dumps(canonical, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def fixture_path(self, key: str) -> Path:
        assert self.config.fixtures is not None
        return self.config.fixtures / key[:2] / f"{key}.json"

    def _load_fixture(self, key: str) -> ChatResponse | None:
        if self.config.fixtures is None:
            return None
        path = self.fixture_path(key)
        if not path.is_file():
            return None
        data = json.loads(path.read_text(encoding="utf-8"))
        return ChatResponse(data["response"]["text"], key, data["response"].get("usage", {}), cached=True)

    def _store_fixture(self, key: str, req: ChatRequest, resp: ChatResponse) -> None:
        if self.config.fixtures is None:
            return
        path = self.fixture_path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        record = {
            "key": key,
            "model": self.config.model,
            "request": {
                "system": req.system,
                "prompt": req.prompt,
                "media": list(req.media),
                "temperature": req.temperature,
                "max_tokens": req.max_tokens,
            },
            "response": {"text": resp.text, "usage": resp.usage},
        }
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            json.dump(record, f, indent=2, sort_keys=True, ensure_ascii=False)
            f.write("\n")
        os.replace(tmp, path)

    def write_fixture(self, req: ChatRequest, text: str, usage: dict[str, Any] | None = None) -> str:
        """Persist a hand-written response for ``req``; returns its key."""
        key = self.cache_key(req)
        self._store_fixture(key, req, ChatResponse(text, key, usage or {}))
        return key

    def _payload(self, req: ChatRequest) -> dict[str, Any]:
        content: list[dict[str, Any]] = [{"type": "text", "text": req.prompt}]
        root = self.config.media_root
        for uri in req.media:
            p = Path(uri)
            if not p.is_absolute() and root is not None:
                p = root / p
            if p.is_file():
                mime = mimetypes.guess_type(p.name)[0] or "image/png"
                data = base64.b64encode(p.read_bytes()).decode("ascii")
                content.append({"type": "image_url", "image_url": {"url": f"data:{mime};base64,{data}"}})
        messages = []
        if req.system:
            messages.append({"role": "system", "content": req.system})
        messages.append({"role": "user", "content": content})
        return {
            "model": self.config.model,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }

    def _call_network(self, req: ChatRequest, key: str) -> ChatResponse:
        payload = self._payload(req)
        last: Exception | None = None
        for attempt in range(self.config.max_attempts):
            if attempt:
                self._sleep(self.config.backoff * 2 ** (attempt - 1))
            self.limiter.acquire()
            with self._slots:
                with self._stats_lock:
                    self.network_calls += 1
                try:
                    data = self.transport(payload)
                except TransientError as e:
                    logger.warning("request %s attempt %d failed: %s", key[:12], attempt + 1, e)
                    last = e
                    continue
            try:
                text = data["choices"][0]["message"]["content"] or ""
            except (KeyError, IndexError, TypeError):
                raise GatewayError(f"unexpected response shape for {key}") from None
            return ChatResponse(text, key, dict(data.get("usage") or {}))
        raise GatewayError(f"request {key} failed after {self.config.max_attempts} attempts: {last}")

    def _key_lock(self, key: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(key, threading.Lock())

    def complete(self, req: ChatRequest) -> ChatResponse:
        key = self.cache_key(req)
        if self.config.mode == "replay":
            resp = self._memory.get(key) or self._load_fixture(key)
            if resp is None:
                raise MissingFixtureError(key)
            self._memory[key] = resp
            return resp
        with self._key_lock(key):
            hit = self._memory.get(key) or self._load_fixture(key)
            if hit is not None:
                with self._stats_lock:
                    self.cache_hits += 1
                self._memory[key] = hit
                return ChatResponse(hit.text, key, hit.usage, cached=True)
            resp = self._call_network(req, key)
            self._memory[key] = resp
            self._store_fixture(key, req, resp)
            return resp

    def complete_batch(self, requests: Sequence[ChatRequest]) -> list[ChatResponse | GatewayError]:
        """Complete all requests; results (or per-request errors) follow input order."""

        def run(req: ChatRequest) -> ChatResponse | GatewayError:
            try:
                return self.complete(req)
            except GatewayError as e:
                return e

        if not requests:
            return []
        with ThreadPoolExecutor(max_workers=self.config.max_concurrency) as pool:
            return list(pool.map(run, requests))
