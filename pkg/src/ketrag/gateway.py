"""Client for OpenAI-compatible chat-completion and embedding endpoints.

All remote I/O goes through :class:`Gateway`, which bounds in-flight
requests, retries rate limits and server errors with exponential backoff,
meters token usage and replays cached responses. The HTTP layer is an
injected :class:`Transport` so tests can script responses.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

from .exceptions import ConfigError, GatewayError

logger = logging.getLogger(__name__)

CHAT_PATH = "/v1/chat/completions"
EMBED_PATH = "/v1/embeddings"


@dataclass
class GatewayConfig:
    base_url: str = "https://api.openai.com"
    api_key_env: str = "OPENAI_API_KEY"
    chat_model: str = "gpt-4o-mini"
    embedding_model: str = "text-embedding-3-small"
    max_concurrency: int = 30
    max_attempts: int = 5
    backoff_base: float = 1.0
    backoff_max: float = 60.0
    timeout: float = 60.0
    embed_batch_size: int = 256
    temperature: float = 0.0
    cache_path: str | None = None

    def __post_init__(self):
        if self.max_concurrency < 1:
            raise ConfigError("max_concurrency must be >= 1")
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1")
        if self.timeout <= 0 or self.backoff_base < 0 or self.backoff_max < 0:
            raise ConfigError("timeouts and backoff values must be positive")
        if self.embed_batch_size < 1:
            raise ConfigError("embed_batch_size must be >= 1")

    @classmethod
    def from_json(cls, path) -> "GatewayConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown gateway config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TransportResponse:
    status: int
    body: str
    headers: dict = field(default_factory=dict)


class Transport(Protocol):
    def send(self, url: str, headers: dict, payload: dict, timeout: float) -> TransportResponse: ...


class HttpxTransport:
    """Default transport over a shared ``httpx.Client``."""

    def __init__(self):
        import httpx

        self._client = httpx.Client()

    def send(self, url, headers, payload, timeout):
        r = self._client.post(url, headers=headers, json=payload, timeout=timeout)
        return TransportResponse(r.status_code, r.text, dict(r.headers))


class UsageMeter:
    """Thread-safe cumulative token and request counters per stage."""

    def __init__(self):
        self._lock = threading.Lock()
        self._counts = defaultdict(lambda: {"input_tokens": 0, "output_tokens": 0, "requests": 0, "cached": 0})

    def record(self, stage: str, input_tokens: int = 0, output_tokens: int = 0, cached: bool = False) -> None:
        with self._lock:
            c = self._counts[stage]
            if cached:
                c["cached"] += 1
                return
            c["requests"] += 1
            c["input_tokens"] += int(input_tokens)
            c["output_tokens"] += int(output_tokens)

    def snapshot(self) -> dict:
        with self._lock:
            return {k: dict(v) for k, v in sorted(self._counts.items())}


@dataclass(frozen=True)
class PriceTable:
    """Currency per token for LLM input, LLM output and embedding input."""

    llm_input: float = 0.0
    llm_output: float = 0.0
    embedding: float = 0.0

    def __post_init__(self):
        if min(self.llm_input, self.llm_output, self.embedding) < 0:
            raise ConfigError("prices must be non-negative")


def meter_report(meter: UsageMeter, prices: PriceTable) -> dict:
    """Currency per stage (``extraction``, ``embedding``, ``generation``, ...) and the total."""
    report = {}
    for stage, c in meter.snapshot().items():
        if stage == "embedding":
            cost = c["input_tokens"] * prices.embedding
        else:
            cost = c["input_tokens"] * prices.llm_input + c["output_tokens"] * prices.llm_output
        report[stage] = cost
    report["total"] = sum(report.values())
    return report


class RequestCache:
    """Responses keyed by a hash of (endpoint, model, canonical request body); JSON lines on disk."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self._data: dict[str, str] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._data[rec["key"]] = rec["response"]

    @staticmethod
    def key(endpoint: str, payload: dict) -> str:
        canon = json.dumps(
            {"endpoint": endpoint, "model": payload.get("model"), "body": payload},
            sort_keys=True,
            separators=(",", ":"),
            ensure_ascii=False,
        )
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def get(self, key: str) -> str | None:
        with self._lock:
            return self._data.get(key)

    def put(self, key: str, response: str) -> None:
        with self._lock:
            self._data[key] = response
            if self.path:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"key": key, "response": response}) + "\n")

    def __len__(self):
        return len(self._data)


class Gateway:
    def __init__(
        self,
        config: GatewayConfig | None = None,
        transport: Transport | None = None,
        cache: RequestCache | None = None,
        meter: UsageMeter | None = None,
        api_key: str | None = None,
        sleep=time.sleep,
    ):
        self.config = config or GatewayConfig()
        self._transport = transport
        if cache is None and self.config.cache_path:
            cache = RequestCache(self.config.cache_path)
        self.cache = cache
        self.meter = meter or UsageMeter()
        self._api_key = api_key
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(self.config.max_concurrency)

    @property
    def transport(self) -> Transport:
        if self._transport is None:
            self._transport = HttpxTransport()
        return self._transport

    def _headers(self) -> dict:
        key = self._api_key or os.environ.get(self.config.api_key_env)
        if not key:
            raise GatewayError(f"API key missing: set the {self.config.api_key_env} environment variable")
        return {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}

    def backoff_delay(self, attempt: int) -> float:
        """Delay before retry number ``attempt`` (1-based): base * 2**(attempt-1), capped."""
        return min(self.config.backoff_max, self.config.backoff_base * 2 ** (attempt - 1))

    def _post(self, path: str, payload: dict) -> tuple[dict, int, bool]:
        """POST with caching and retries; returns (body, attempts, cache_hit)."""
        key = RequestCache.key(path, payload)
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                return json.loads(hit), 0, True

        headers = self._headers()
        url = self.config.base_url.rstrip("/") + path
        last = ""
        status = None
        for attempt in range(1, self.config.max_attempts + 1):
            with self._slots:
                try:
                    resp = self.transport.send(url, headers, payload, self.config.timeout)
                    status = resp.status
                except Exception as exc:  # connection reset, timeout, DNS ...
                    resp, status, last = None, None, f"transport error: {exc}"
            if resp is not None:
                if 200 <= resp.status < 300:
                    try:
                        body = json.loads(resp.body)
                    except json.JSONDecodeError as exc:
                        raise GatewayError(
                            f"non-JSON response from {path}", resp.status, attempt, resp.body[:200]
                        ) from exc
                    if self.cache is not None:
                        self.cache.put(key, resp.body)
                    return body, attempt, False
                last = resp.body[:200]
                if resp.status != 429 and resp.status < 500:
                    raise GatewayError(
                        f"{path} returned HTTP {resp.status}: {last}", resp.status, attempt, last
                    )
            if attempt < self.config.max_attempts:
                delay = self.backoff_delay(attempt)
                logger.info("%s attempt %d failed (%s); retrying in %.2fs", path, attempt, status, delay)
                self._sleep(delay)
        raise GatewayError(
            f"{path} failed after {self.config.max_attempts} attempts (last status {status})",
            status,
            self.config.max_attempts,
            last,
        )

    def chat_complete(self, system_prompt, user_prompt, max_output_tokens=1000, stage="generation"):
        """One chat completion; returns ``(text, usage)``."""
        if not user_prompt:
            raise ValueError("user prompt must be non-empty")
        messages = []
        if system_prompt:
            messages.append({"role": "system", "content": system_prompt})
        messages.append({"role": "user", "content": user_prompt})
        payload = {
            "model": self.config.chat_model,
            "messages": messages,
            "max_tokens": max_output_tokens,
            "temperature": self.config.temperature,
        }
        body, attempts, cached = self._post(CHAT_PATH, payload)
        try:
            text = body["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError("malformed chat completion response", 200, attempts, json.dumps(body)[:200]) from exc
        u = body.get("usage") or {}
        usage = {
            "input_tokens": int(u.get("prompt_tokens", 0)),
            "output_tokens": int(u.get("completion_tokens", 0)),
            "attempts": attempts,
            "cached": cached,
        }
        self.meter.record(stage, usage["input_tokens"], usage["output_tokens"], cached=cached)
        return text, usage

    def embed(self, texts, stage="embedding"):
        """Embed ``texts`` in requests of at most ``embed_batch_size`` items.

        Returns ``(vectors, usage)`` with vectors order-aligned to ``texts``.
        """
        texts = list(texts)
        vectors: list[list[float]] = []
        usage = {"input_tokens": 0, "requests": 0, "cached": 0}
        size = self.config.embed_batch_size
        for a in range(0, len(texts), size):
            batch = texts[a : a + size]
            payload = {"model": self.config.embedding_model, "input": batch}
            body, _, cached = self._post(EMBED_PATH, payload)
            try:
                data = sorted(body["data"], key=lambda d: d.get("index", 0))
                batch_vecs = [d["embedding"] for d in data]
            except (KeyError, TypeError) as exc:
                raise GatewayError("malformed embeddings response", 200, 0, json.dumps(body)[:200]) from exc
            if len(batch_vecs) != len(batch):
                raise GatewayError(f"embeddings response has {len(batch_vecs)} items for {len(batch)} inputs")
            vectors.extend(batch_vecs)
            tokens = int((body.get("usage") or {}).get("prompt_tokens", 0))
            self.meter.record(stage, tokens, 0, cached=cached)
            usage["input_tokens"] += 0 if cached else tokens
            usage["requests"] += 0 if cached else 1
            usage["cached"] += int(cached)
        return vectors, usage
