"""Single gateway to chat-completion endpoints.

Everything model-facing flows through here: schema-coerced structured output
with repair-style retries, chain-of-thought stripping, an in-flight limiter
for the single shared inference host, and a deterministic replay mock so the
whole pipeline runs offline.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Optional, Protocol

import requests

from .errors import MockMissError, SchemaCoercionError, TransportError

logger = logging.getLogger(__name__)

THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"


def strip_think(raw: str) -> tuple[str, str]:
    """Remove every ``<think>...</think>`` block (and stray tags) from ``raw``.

    Returns (clean, think). Block contents are concatenated into ``think``;
    an unterminated ``<think>`` swallows the rest of the text with a warning.
    The clean text is guaranteed to contain no think-tag substring.
    """
    think_parts: list[str] = []
    clean = raw
    while True:
        clean, extracted, changed = _strip_think_once(clean)
        think_parts.extend(extracted)
        if not changed:
            return clean, "".join(think_parts)


def _strip_think_once(text: str) -> tuple[str, list[str], bool]:
    parts: list[str] = []
    thinks: list[str] = []
    changed = False
    i = 0
    while True:
        o = text.find(THINK_OPEN, i)
        c = text.find(THINK_CLOSE, i)
        if o == -1 and c == -1:
            parts.append(text[i:])
            break
        changed = True
        if o != -1 and (c == -1 or o < c):
            parts.append(text[i:o])
            end = text.find(THINK_CLOSE, o + len(THINK_OPEN))
            if end == -1:
                logger.warning("unterminated <think> block; stripping to end of text")
                thinks.append(text[o + len(THINK_OPEN) :])
                break
            thinks.append(text[o + len(THINK_OPEN) : end])
            i = end + len(THINK_CLOSE)
        else:
            # stray closer with no opener: drop the tag, keep surrounding text
            parts.append(text[i:c])
            i = c + len(THINK_CLOSE)
    return "".join(parts), thinks, changed


# --- schema spec ------------------------------------------------------------


@dataclass(frozen=True)
class SchemaSpec:
    """Structural schema used both to instruct the model and to validate it.

    kind is one of object, array, string, boolean, number, integer.
    Validation is strict: missing required fields, unknown fields, wrong
    kinds, and unknown enum values all fail coercion.
    """

    kind: str
    fields: tuple["SchemaField", ...] = ()
    element: Optional["SchemaSpec"] = None
    enum: Optional[tuple[str, ...]] = None

    def describe(self) -> Any:
        if self.kind == "object":
            return {
                "type": "object",
                "properties": {f.name: f.spec.describe() for f in self.fields},
                "required": [f.name for f in self.fields if f.required],
            }
        if self.kind == "array":
            return {"type": "array", "items": self.element.describe() if self.element else {}}
        out: dict[str, Any] = {"type": self.kind}
        if self.enum is not None:
            out["enum"] = list(self.enum)
        return out

    def validate(self, value: Any, path: str = "$") -> list[str]:
        errors: list[str] = []
        if self.kind == "object":
            if not isinstance(value, dict):
                return [f"{path}: expected object, got {type(value).__name__}"]
            known = {f.name for f in self.fields}
            for key in value:
                if key not in known:
                    errors.append(f"{path}.{key}: unknown field")
            for f in self.fields:
                if f.name not in value:
                    if f.required:
                        errors.append(f"{path}.{f.name}: required field missing")
                    continue
                errors.extend(f.spec.validate(value[f.name], f"{path}.{f.name}"))
            return errors
        if self.kind == "array":
            if not isinstance(value, list):
                return [f"{path}: expected array, got {type(value).__name__}"]
            if self.element is not None:
                for idx, item in enumerate(value):
                    errors.extend(self.element.validate(item, f"{path}[{idx}]"))
            return errors
        if self.kind == "boolean":
            if not isinstance(value, bool):
                return [f"{path}: expected boolean, got {type(value).__name__}"]
            return []
        if self.kind == "integer":
            if isinstance(value, bool) or not isinstance(value, int):
                return [f"{path}: expected integer, got {type(value).__name__}"]
            return []
        if self.kind == "number":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                return [f"{path}: expected number, got {type(value).__name__}"]
            return []
        if self.kind == "string":
            if not isinstance(value, str):
                return [f"{path}: expected string, got {type(value).__name__}"]
            if self.enum is not None and value not in self.enum:
                return [f"{path}: {value!r} not one of {list(self.enum)}"]
            return []
        raise ValueError(f"unknown schema kind {self.kind!r}")

    def instructions(self) -> str:
        return (
            "Respond with a single JSON object and nothing else. "
            "It must match this schema exactly:\n"
            + json.dumps(self.describe(), indent=2, sort_keys=True)
        )


@dataclass(frozen=True)
class SchemaField:
    name: str
    spec: SchemaSpec
    required: bool = True


def obj(*fields: SchemaField) -> SchemaSpec:
    return SchemaSpec("object", fields=fields)


def arr(element: SchemaSpec) -> SchemaSpec:
    return SchemaSpec("array", element=element)


def string(enum: Optional[tuple[str, ...]] = None) -> SchemaSpec:
    return SchemaSpec("string", enum=enum)


def boolean() -> SchemaSpec:
    return SchemaSpec("boolean")


# --- requests / responses ----------------------------------------------------


@dataclass(frozen=True)
class ChatRequest:
    model: str
    system_text: str
    user_text: str
    temperature: float = 0.0
    max_output_tokens: int = 8192
    response_schema: Optional[SchemaSpec] = None

    def __post_init__(self):
        if not self.user_text:
            raise ValueError("user_text must be non-empty")


@dataclass
class ChatResponse:
    raw_text: str
    think_text: str
    clean_text: str
    latency: float
    token_counts: dict[str, int] = field(default_factory=dict)


def request_digest(model: str, system_text: str, user_text: str) -> str:
    payload = json.dumps([model, system_text, user_text], ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass
class BackendReply:
    raw_text: str
    token_counts: dict[str, int] = field(default_factory=dict)


class Backend(Protocol):
    def send(self, request: ChatRequest) -> BackendReply: ...


class HttpBackend:
    """OpenAI-style chat-completions POST to a locally hosted server."""

    def __init__(self, base_url: str, timeout: float = 120.0):
        self.base_url = base_url
        self.timeout = timeout

    def send(self, request: ChatRequest) -> BackendReply:
        payload = {
            "model": request.model,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        try:
            resp = requests.post(self.base_url, json=payload, timeout=self.timeout)
        except requests.RequestException as exc:
            raise TransportError(f"endpoint unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise TransportError(f"endpoint returned HTTP {resp.status_code}")
        try:
            body = resp.json()
            text = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed endpoint reply: {exc}") from exc
        usage = body.get("usage") or {}
        counts = {k: v for k, v in usage.items() if isinstance(v, int)}
        return BackendReply(raw_text=text, token_counts=counts)


class ReplayMockBackend:
    """Serves recorded responses keyed by request digest; unknown keys error.

    Repeated identical requests consume recorded entries in file order, so a
    replayed run makes exactly the calls the recorded run made.
    """

    def __init__(self, transcript_path: str | Path):
        self._responses: dict[str, list[str]] = {}
        self._lock = threading.Lock()
        path = Path(transcript_path)
        for line_number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                digest = record["digest"]
                raw_text = record["response"]["raw_text"]
            except (ValueError, KeyError, TypeError) as exc:
                raise TransportError(
                    f"corrupt transcript line {line_number} in {path}: {exc}"
                ) from exc
            self._responses.setdefault(digest, []).append(raw_text)

    def send(self, request: ChatRequest) -> BackendReply:
        digest = request_digest(request.model, request.system_text, request.user_text)
        with self._lock:
            queue = self._responses.get(digest)
            if not queue:
                preview = request.user_text[:80].replace("\n", " ")
                raise MockMissError(digest, preview)
            return BackendReply(raw_text=queue.pop(0))


class CallableBackend:
    """Adapter for a deterministic ``fn(request) -> raw_text``.

    Used to simulate a model when building replay transcripts in tests.
    """

    def __init__(self, fn: Callable[[ChatRequest], str]):
        self._fn = fn

    def send(self, request: ChatRequest) -> BackendReply:
        return BackendReply(raw_text=self._fn(request))


class RecordingBackend:
    """Wraps another backend and appends every exchange to a transcript file."""

    def __init__(self, inner: Backend, path: str | Path):
        self._inner = inner
        self._path = Path(path)
        self._lock = threading.Lock()
        self._path.parent.mkdir(parents=True, exist_ok=True)

    def send(self, request: ChatRequest) -> BackendReply:
        reply = self._inner.send(request)
        record = {
            "digest": request_digest(request.model, request.system_text, request.user_text),
            "request": {
                "model": request.model,
                "system_text": request.system_text,
                "user_text": request.user_text,
                "temperature": request.temperature,
                "max_output_tokens": request.max_output_tokens,
            },
            "response": {"raw_text": reply.raw_text},
        }
        line = json.dumps(record, ensure_ascii=False, sort_keys=True)
        with self._lock:
            with self._path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")
        return reply


class LlmEndpoint:
    """Shared handle to one inference host.

    Serializes concurrent requests through an in-flight limiter and keeps an
    instrumentation log of every request, which the test suite uses to assert
    the anonymization boundary and LLM call counts.
    """

    def __init__(self, backend: Backend, in_flight_limit: int = 2):
        self._backend = backend
        self._limiter = threading.BoundedSemaphore(in_flight_limit)
        self._log_lock = threading.Lock()
        self.in_flight_limit = in_flight_limit
        self.request_log: list[ChatRequest] = []

    @classmethod
    def http(cls, base_url: str, timeout: float = 120.0, in_flight_limit: int = 2) -> "LlmEndpoint":
        return cls(HttpBackend(base_url, timeout=timeout), in_flight_limit)

    @classmethod
    def replay(cls, transcript_path: str | Path, in_flight_limit: int = 2) -> "LlmEndpoint":
        return cls(ReplayMockBackend(transcript_path), in_flight_limit)

    @classmethod
    def scripted(cls, fn: Callable[[ChatRequest], str], in_flight_limit: int = 2) -> "LlmEndpoint":
        return cls(CallableBackend(fn), in_flight_limit)

    @property
    def call_count(self) -> int:
        with self._log_lock:
            return len(self.request_log)

    def calls_for_model(self, model: str) -> int:
        with self._log_lock:
            return sum(1 for r in self.request_log if r.model == model)

    def chat(self, request: ChatRequest) -> ChatResponse:
        with self._log_lock:
            self.request_log.append(request)
        start = time.monotonic()
        with self._limiter:
            reply = self._backend.send(request)
        latency = time.monotonic() - start
        clean, think = strip_think(reply.raw_text)
        return ChatResponse(
            raw_text=reply.raw_text,
            think_text=think,
            clean_text=clean,
            latency=latency,
            token_counts=reply.token_counts,
        )


def record_transcript(endpoint: LlmEndpoint, path: str | Path) -> LlmEndpoint:
    """Return an endpoint that records every exchange of ``endpoint`` to ``path``."""
    return LlmEndpoint(
        RecordingBackend(endpoint._backend, path), in_flight_limit=endpoint.in_flight_limit
    )


# --- structured completion ----------------------------------------------------

_FENCED_JSON = re.compile(r"```(?:[A-Za-z0-9_+-]*)\s*\n?(.*?)```", re.DOTALL)


def extract_json_object(text: str) -> Any:
    """Pull the first top-level JSON object out of ``text``, tolerating fences."""
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            value = json.loads(stripped)
            if isinstance(value, dict):
                return value
        except ValueError:
            pass
    for match in _FENCED_JSON.finditer(text):
        candidate = match.group(1).strip()
        try:
            value = json.loads(candidate)
            if isinstance(value, dict):
                return value
        except ValueError:
            continue
    for candidate in _balanced_objects(text):
        try:
            value = json.loads(candidate)
            if isinstance(value, dict):
                return value
        except ValueError:
            continue
    raise ValueError("no JSON object found in reply")


def _balanced_objects(text: str):
    start = text.find("{")
    while start != -1:
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
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    yield text[start : i + 1]
                    break
        start = text.find("{", start + 1)


@dataclass
class CoercionOutcome:
    value: Any
    response: ChatResponse
    attempt_log: list[str]


def complete_structured(
    endpoint: LlmEndpoint,
    request: ChatRequest,
    *,
    max_attempts: int,
    validate_hook: Optional[Callable[[Any], list[str]]] = None,
) -> CoercionOutcome:
    """Chat until the reply coerces to ``request.response_schema``.

    Each failed attempt feeds the validator's complaints back into the next
    user message; ``max_attempts`` caps total attempts (minimum one). On
    exhaustion raises SchemaCoercionError carrying every raw reply.
    """
    schema = request.response_schema
    if schema is None:
        raise ValueError("complete_structured requires request.response_schema")
    system_text = request.system_text + "\n\n" + schema.instructions()
    attempts = max(1, max_attempts)
    attempt_log: list[str] = []
    user_text = request.user_text
    for attempt in range(1, attempts + 1):
        response = endpoint.chat(
            replace(request, system_text=system_text, user_text=user_text)
        )
        attempt_log.append(response.raw_text)
        try:
            value = extract_json_object(response.clean_text)
        except ValueError as exc:
            errors = [str(exc)]
        else:
            errors = schema.validate(value)
            if not errors and validate_hook is not None:
                errors = validate_hook(value)
            if not errors:
                return CoercionOutcome(value=value, response=response, attempt_log=attempt_log)
        logger.debug("coercion attempt %d/%d failed: %s", attempt, attempts, errors)
        user_text = (
            user_text
            + f"\n\n[validator] attempt {attempt} was rejected: "
            + "; ".join(errors)
            + "\nReturn only a single JSON object that satisfies the schema."
        )
    raise SchemaCoercionError(
        f"reply failed schema coercion after {attempts} attempt(s)", attempt_log
    )
