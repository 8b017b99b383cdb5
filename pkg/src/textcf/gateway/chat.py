"""Chat-completion client with an append-only response cache."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Protocol

from textcf.errors import ConfigurationError, UpstreamUnavailableError

logger = logging.getLogger(__name__)

API_KEY_ENV = "OPENAI_API_KEY"
DEFAULT_MODEL = "gpt-4-turbo"
DEFAULT_DECODING = {"temperature": 0.0, "max_tokens": 256}
OPENAI_URL = "https://api.openai.com/v1/chat/completions"


class TransientError(Exception):
    """Retryable upstream failure (timeouts, 429, 5xx)."""


class Transport(Protocol):
    def __call__(self, model_id: str, system_prompt: str, user_prompt: str, decoding: dict) -> str: ...


def cache_key(model_id: str, system_prompt: str, user_prompt: str, decoding: dict) -> str:
    payload = json.dumps(
        {"model": model_id, "system": system_prompt, "user": user_prompt, "decoding": decoding},
        sort_keys=True, ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass
class ChatExchange:
    cache_key: str
    model_id: str
    system_prompt: str
    user_prompt: str
    response: str
    timestamp: str


class ResponseCache:
    """Line-delimited store of ChatExchange records; the first record for a key wins."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self._entries: dict[str, ChatExchange] = {}
        if self.path and self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        rec = ChatExchange(**json.loads(line))
                    except (json.JSONDecodeError, TypeError):
                        logger.warning("skipping corrupt cache line in %s", self.path)
                        continue
                    self._entries.setdefault(rec.cache_key, rec)

    def get(self, key: str) -> ChatExchange | None:
        with self._lock:
            return self._entries.get(key)

    def put(self, exchange: ChatExchange) -> None:
        with self._lock:
            if exchange.cache_key in self._entries:
                return
            self._entries[exchange.cache_key] = exchange
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(asdict(exchange), ensure_ascii=False) + "\n")

    def __len__(self) -> int:
        return len(self._entries)


class RateLimiter:
    """Bounds in-flight requests and spaces request starts by ``min_interval`` seconds."""

    def __init__(self, max_in_flight: int = 4, min_interval: float = 0.0, clock=time.monotonic, sleep=time.sleep):
        self._sem = threading.BoundedSemaphore(max_in_flight)
        self._lock = threading.Lock()
        self._next = 0.0
        self.min_interval = min_interval
        self._clock, self._sleep = clock, sleep

    def __enter__(self):
        self._sem.acquire()
        with self._lock:
            now = self._clock()
            wait = self._next - now
            self._next = max(now, self._next) + self.min_interval
        if wait > 0:
            self._sleep(wait)
        return self

    def __exit__(self, *exc):
        self._sem.release()


def openai_transport(api_key: str, url: str = OPENAI_URL, timeout: float = 60.0) -> Transport:
    import httpx

    def call(model_id, system_prompt, user_prompt, decoding):
        body = {
            "model": model_id,
            "messages": [{"role": "system", "content": system_prompt},
                         {"role": "user", "content": user_prompt}],
            **decoding,
        }
        try:
            resp = httpx.post(url, json=body, timeout=timeout,
                              headers={"Authorization": f"Bearer {api_key}"})
        except httpx.TransportError as exc:
            raise TransientError(str(exc)) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise UpstreamUnavailableError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        return resp.json()["choices"][0]["message"]["content"]

    return call


def replay_only_transport(model_id, system_prompt, user_prompt, decoding):
    raise UpstreamUnavailableError("mock mode: no cached response for this request")


class ChatClient:
    """Cached, retrying, rate-limited chat completions.

    With no transport given, one is built lazily from the ``OPENAI_API_KEY``
    environment variable on the first cache miss.
    """

    def __init__(
        self,
        model_id: str = DEFAULT_MODEL,
        cache: ResponseCache | str | Path | None = None,
        transport: Transport | None = None,
        decoding: dict | None = None,
        max_retries: int = 5,
        backoff: float = 1.0,
        limiter: RateLimiter | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.model_id = model_id
        self.cache = cache if isinstance(cache, ResponseCache) else ResponseCache(cache)
        self.transport = transport
        self.decoding = {**DEFAULT_DECODING, **(decoding or {})}
        self.max_retries = max_retries
        self.backoff = backoff
        self.limiter = limiter or RateLimiter()
        self._sleep = sleep
        self.upstream_calls = 0
        self._transport_lock = threading.Lock()

    def _get_transport(self) -> Transport:
        with self._transport_lock:
            if self.transport is None:
                key = os.environ.get(API_KEY_ENV)
                if not key:
                    raise ConfigurationError(f"cache miss and ${API_KEY_ENV} is not set")
                self.transport = openai_transport(key)
            return self.transport

    def exchange(self, system_prompt: str, user_prompt: str, **decoding) -> ChatExchange:
        params = {**self.decoding, **decoding}
        key = cache_key(self.model_id, system_prompt, user_prompt, params)
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        transport = self._get_transport()
        delay = self.backoff
        for attempt in range(1, self.max_retries + 1):
            try:
                with self.limiter:
                    self.upstream_calls += 1
                    response = transport(self.model_id, system_prompt, user_prompt, params)
                break
            except TransientError as exc:
                if attempt == self.max_retries:
                    raise UpstreamUnavailableError(f"gave up after {attempt} attempts: {exc}") from exc
                logger.info("chat attempt %d failed (%s); retrying in %.1fs", attempt, exc, delay)
                self._sleep(delay)
                delay *= 2
        rec = ChatExchange(key, self.model_id, system_prompt, user_prompt, response,
                           datetime.now(timezone.utc).isoformat())
        self.cache.put(rec)
        return self.cache.get(key)

    def complete(self, system_prompt: str, user_prompt: str, **decoding) -> str:
        return self.exchange(system_prompt, user_prompt, **decoding).response
