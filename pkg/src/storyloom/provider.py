"""Single gateway for all model calls.

Transport (OpenAI-compatible chat completions or a scripted offline stub),
retries with backoff, a requests-per-minute cap, JSON extraction/repair, and
token accounting all live here so the rest of the pipeline stays ignorant of
how text actually gets produced.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

logger = logging.getLogger(__name__)


class ProviderError(Exception):
    """Transport-level failure after the retry budget is exhausted."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class ExtractionError(Exception):
    """No usable structured value could be extracted from the model text."""

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class TransportFailure(Exception):
    """Raised by transports for retryable errors (network, HTTP status)."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


@dataclass(frozen=True)
class ProviderConfig:
    endpoint: str = ""
    model: str = ""
    temperature: float = 0.7
    timeout: float = 60.0
    max_retries: int = 2
    rpm: int | None = None
    api_key_env: str = "STORYLOOM_API_KEY"

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.rpm is not None and self.rpm < 1:
            raise ValueError("rpm must be >= 1 when set")


@dataclass
class Completion:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass
class _StageUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    calls: int = 0
    wall_time: float = 0.0


class UsageLedger:
    """Thread-safe per-stage token/call accounting; totals equal stage sums."""

    def __init__(self):
        self._lock = threading.Lock()
        self._stages: dict[str, _StageUsage] = {}

    def record(self, stage: str, prompt_tokens: int, completion_tokens: int, wall_time: float) -> None:
        with self._lock:
            entry = self._stages.setdefault(stage, _StageUsage())
            entry.prompt_tokens += prompt_tokens
            entry.completion_tokens += completion_tokens
            entry.calls += 1
            entry.wall_time += wall_time

    @property
    def total_calls(self) -> int:
        with self._lock:
            return sum(s.calls for s in self._stages.values())

    def to_dict(self) -> dict[str, Any]:
        with self._lock:
            stages = {
                name: {
                    "prompt_tokens": s.prompt_tokens,
                    "completion_tokens": s.completion_tokens,
                    "calls": s.calls,
                    "wall_time": s.wall_time,
                }
                for name, s in sorted(self._stages.items())
            }
        total = {
            "prompt_tokens": sum(s["prompt_tokens"] for s in stages.values()),
            "completion_tokens": sum(s["completion_tokens"] for s in stages.values()),
            "calls": sum(s["calls"] for s in stages.values()),
            "wall_time": sum(s["wall_time"] for s in stages.values()),
        }
        return {"stages": stages, "total": total}


Transport = Callable[[str], Completion]


class HttpTransport:
    """OpenAI-compatible chat-completions call over HTTPS.

    The API key is read from the environment variable named in the config,
    never from config files.
    """

    def __init__(self, config: ProviderConfig):
        if not config.endpoint:
            raise ValueError("http transport requires an endpoint")
        self.config = config

    def __call__(self, prompt: str) -> Completion:
        import requests

        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        payload = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
        }
        try:
            response = requests.post(
                self.config.endpoint, json=payload, headers=headers, timeout=self.config.timeout
            )
        except requests.RequestException as exc:
            raise TransportFailure(f"request failed: {exc}") from exc
        if response.status_code != 200:
            raise TransportFailure(f"HTTP {response.status_code}: {response.text[:200]}", status=response.status_code)
        try:
            body = response.json()
            text = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportFailure(f"malformed completion payload: {exc}") from exc
        usage = body.get("usage") or {}
        return Completion(
            text=text,
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
        )


REFLECT_OPEN = "<<ECHO>>"
REFLECT_CLOSE = "<<END-ECHO>>"

#: Sentinel reply value that makes the stub raise a transport failure.
FAIL = object()


class StubTransport:
    """Deterministic scripted transport; never touches the network.

    Replies come from, in priority order: an ordered ``replies`` list (items
    may be the :data:`FAIL` sentinel or an exception to raise), pattern-keyed
    canned responses (first substring match wins; list values are consumed in
    order, repeating the last), reflect mode (echo the prompt inside a marker
    block), or a ``default`` reply. Every received prompt is recorded in
    ``calls`` for inspection.
    """

    def __init__(
        self,
        replies: Sequence[Any] | None = None,
        *,
        patterns: Mapping[str, Any] | None = None,
        reflect: bool = False,
        default: str | None = None,
    ):
        self._lock = threading.Lock()
        self._replies = list(replies) if replies is not None else None
        self._patterns = {k: (list(v) if isinstance(v, (list, tuple)) else [v]) for k, v in (patterns or {}).items()}
        self._reflect = reflect
        self._default = default
        self.calls: list[str] = []

    def __call__(self, prompt: str) -> Completion:
        with self._lock:
            self.calls.append(prompt)
            reply = self._next_reply(prompt)
        if reply is FAIL:
            raise TransportFailure("scripted failure")
        if isinstance(reply, Exception):
            raise reply
        text = str(reply)
        return Completion(text=text, prompt_tokens=len(prompt.split()), completion_tokens=len(text.split()))

    def _next_reply(self, prompt: str) -> Any:
        if self._replies is not None and self._replies:
            return self._replies.pop(0)
        if self._replies is not None and not self._patterns and not self._reflect and self._default is None:
            raise TransportFailure("stub reply script exhausted")
        for pattern, queue in self._patterns.items():
            if pattern in prompt:
                return queue.pop(0) if len(queue) > 1 else queue[0]
        if self._reflect:
            return f"{REFLECT_OPEN}\n{prompt}\n{REFLECT_CLOSE}"
        if self._default is not None:
            return self._default
        raise TransportFailure("stub has no reply for prompt")


class ChatClient:
    """Retries, rate limiting, and usage accounting around a transport.

    Every attempt (including failed ones) is counted in the ledger. The clock
    and sleep functions are injectable so throttling is testable.
    """

    def __init__(
        self,
        transport: Transport,
        config: ProviderConfig | None = None,
        *,
        ledger: UsageLedger | None = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
        backoff_base: float = 0.5,
    ):
        self.transport = transport
        self.config = config or ProviderConfig()
        self.ledger = ledger or UsageLedger()
        self._clock = clock
        self._sleep = sleep
        self._backoff_base = backoff_base
        self._call_times: deque[float] = deque()
        self._lock = threading.Lock()

    def _throttle(self) -> None:
        if self.config.rpm is None:
            return
        with self._lock:
            now = self._clock()
            while self._call_times and now - self._call_times[0] >= 60.0:
                self._call_times.popleft()
            if len(self._call_times) >= self.config.rpm:
                wait = 60.0 - (now - self._call_times[0])
                if wait > 0:
                    self._sleep(wait)
                now = self._clock()
                while self._call_times and now - self._call_times[0] >= 60.0:
                    self._call_times.popleft()
            self._call_times.append(self._clock())

    def complete(self, prompt: str, *, stage: str = "default") -> str:
        attempts = self.config.max_retries + 1
        last: TransportFailure | None = None
        for attempt in range(attempts):
            self._throttle()
            started = self._clock()
            try:
                completion = self.transport(prompt)
            except TransportFailure as exc:
                last = exc
                self.ledger.record(stage, 0, 0, self._clock() - started)
                logger.warning("transport attempt %d/%d failed: %s", attempt + 1, attempts, exc)
                if attempt + 1 < attempts:
                    self._sleep(self._backoff_base * (2**attempt))
                continue
            self.ledger.record(
                stage, completion.prompt_tokens, completion.completion_tokens, self._clock() - started
            )
            return completion.text
        status = last.status if last is not None else None
        raise ProviderError(f"provider call failed after {attempts} attempts: {last}", status=status)

    def complete_json(self, prompt: str, *, stage: str = "default") -> Any:
        return request_structured(self, prompt, stage=stage)


_FENCE_RE = re.compile(r"```(?:[a-zA-Z0-9_-]+)?\s*(.*?)```", re.DOTALL)
_TRAILING_COMMA_RE = re.compile(r",(\s*[}\]])")


def _scan_balanced(text: str, start: int) -> str | None:
    """Return the balanced JSON object/array starting at ``start``, or None."""
    depth = 0
    in_string = False
    escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch in "{[":
            depth += 1
        elif ch in "}]":
            depth -= 1
            if depth == 0:
                return text[start : i + 1]
    return None


def extract_json(raw: str) -> Any:
    """Extract the first JSON value from model text.

    Strips markdown code fences and surrounding prose, parses the first
    balanced top-level object or array, and repairs trailing commas. Anything
    further fails with :class:`ExtractionError` carrying the raw text.
    """
    text = raw.strip()
    fence = _FENCE_RE.search(text)
    if fence:
        text = fence.group(1).strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    starts = [i for i in (text.find("{"), text.find("[")) if i != -1]
    if starts:
        candidate = _scan_balanced(text, min(starts))
        if candidate is not None:
            try:
                return json.loads(candidate)
            except json.JSONDecodeError:
                repaired = _TRAILING_COMMA_RE.sub(r"\1", candidate)
                try:
                    return json.loads(repaired)
                except json.JSONDecodeError:
                    pass
    raise ExtractionError("no parseable JSON value in model reply", raw=raw)


def request_structured(
    client: ChatClient,
    prompt: str,
    parser: Callable[[Any], Any] = lambda value: value,
    *,
    stage: str = "default",
    retry_on: tuple[type[Exception], ...] = (ExtractionError, KeyError, TypeError, ValueError),
) -> Any:
    """Complete and parse, re-asking on unusable replies up to the retry budget.

    ``parser`` receives the extracted JSON value; exceptions in ``retry_on``
    trigger another model call, anything else propagates. Transport retries
    are handled separately inside :meth:`ChatClient.complete`.
    """
    attempts = client.config.max_retries + 1
    last_raw = ""
    last_exc: Exception | None = None
    for _ in range(attempts):
        raw = client.complete(prompt, stage=stage)
        last_raw = raw
        try:
            return parser(extract_json(raw))
        except retry_on as exc:
            last_exc = exc
            logger.warning("unusable %s reply (%s); re-asking", stage, exc)
    raise ExtractionError(f"no usable reply for stage {stage!r} after {attempts} attempts: {last_exc}", raw=last_raw)


# --------------------------------------------------------------------------
# Provider construction from config files
# --------------------------------------------------------------------------


def _load_config_file(path: Path) -> dict[str, Any]:
    data = path.read_bytes()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib  # Python >= 3.11
        except ImportError:
            import tomli as tomllib
        return tomllib.loads(data.decode("utf-8"))
    return json.loads(data.decode("utf-8"))


def build_provider(source: str | Path | Mapping[str, Any], *, ledger: UsageLedger | None = None) -> ChatClient:
    """Build a gateway from a TOML/JSON config file or an equivalent mapping.

    ``type = "http"`` selects the HTTPS transport; ``type = "stub"`` selects
    the scripted stub, whose replies come from inline keys or a ``script``
    file (path relative to the config file).
    """
    base_dir = Path.cwd()
    if isinstance(source, (str, Path)):
        path = Path(source)
        base_dir = path.parent
        value = _load_config_file(path)
    else:
        value = dict(source)

    kind = value.get("type", "http")
    config = ProviderConfig(
        endpoint=value.get("endpoint", ""),
        model=value.get("model", ""),
        temperature=float(value.get("temperature", 0.7)),
        timeout=float(value.get("timeout", 60.0)),
        max_retries=int(value.get("max_retries", 2)),
        rpm=int(value["rpm"]) if value.get("rpm") is not None else None,
        api_key_env=value.get("api_key_env", "STORYLOOM_API_KEY"),
    )
    if kind == "http":
        return ChatClient(HttpTransport(config), config, ledger=ledger)
    if kind == "stub":
        stub_spec = dict(value)
        script = stub_spec.get("script")
        if script:
            stub_spec.update(json.loads((base_dir / script).read_text(encoding="utf-8")))
        transport = StubTransport(
            replies=stub_spec.get("replies"),
            patterns=stub_spec.get("patterns"),
            reflect=bool(stub_spec.get("reflect", False)),
            default=stub_spec.get("default"),
        )
        return ChatClient(transport, config, ledger=ledger)
    raise ValueError(f"unknown provider type {kind!r}")


def stub_client(
    replies: Sequence[Any] | None = None,
    *,
    patterns: Mapping[str, Any] | None = None,
    reflect: bool = False,
    default: str | None = None,
    max_retries: int = 2,
) -> ChatClient:
    """Convenience constructor for an offline scripted gateway."""
    transport = StubTransport(replies, patterns=patterns, reflect=reflect, default=default)
    config = ProviderConfig(max_retries=max_retries)
    return ChatClient(transport, config, sleep=lambda _t: None)
