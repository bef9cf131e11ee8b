"""Text-generation backends: the sampling contract, a scripted test double, an HTTP client."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

import httpx

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.7
    top_p: float = 0.95
    max_new_tokens: int = 128
    seed: int | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be nonnegative")
        if not (0.0 < self.top_p <= 1.0):
            raise ValueError("top_p must lie in (0, 1]")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be positive")

    def to_dict(self) -> dict[str, Any]:
        return {
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_new_tokens": self.max_new_tokens,
            "seed": self.seed,
        }


GREEDY = SamplingParams(temperature=0.0, top_p=1.0)


@dataclass(frozen=True)
class BackendResponse:
    text: str
    latency: float = 0.0
    backend_id: str = ""


class BackendError(Exception):
    """Base class for generation failures."""


class TransportError(BackendError):
    pass


class BackendTimeout(BackendError):
    pass


class RateLimited(BackendError):
    pass


class ScriptExhausted(BackendError):
    def __init__(self, fingerprint: str, prompt: str):
        self.fingerprint = fingerprint
        self.prompt = prompt
        super().__init__(f"no scripted responses left for prompt {fingerprint}")


class UnknownPrompt(BackendError):
    def __init__(self, normalized_prompt: str):
        self.prompt = normalized_prompt
        super().__init__(f"prompt not in script: {normalized_prompt[:120]!r}")


class BatchError(BackendError):
    def __init__(self, index: int, cause: BaseException):
        self.index = index
        self.cause = cause
        super().__init__(f"sample {index} failed: {cause}")


class Backend(Protocol):
    backend_id: str

    def generate(self, prompt: str, params: SamplingParams) -> BackendResponse: ...

    def generate_n(self, prompt: str, n: int, params: SamplingParams) -> list[BackendResponse]: ...


class BaseBackend:
    """Shared ``generate_n`` built on ``generate``; index 0 is the first sample."""

    backend_id = "base"

    def generate(self, prompt: str, params: SamplingParams) -> BackendResponse:
        raise NotImplementedError

    def generate_n(self, prompt: str, n: int, params: SamplingParams) -> list[BackendResponse]:
        if n < 1:
            raise ValueError("n must be >= 1")
        out = []
        for i in range(n):
            try:
                out.append(self.generate(prompt, params))
            except BackendError as exc:
                raise BatchError(i, exc) from exc
        return out


def _check_prompt(prompt: str) -> None:
    if not prompt or not prompt.strip():
        raise ValueError("prompt is empty")


# --- scripted ----------------------------------------------------------------


def normalize_prompt(prompt: str) -> str:
    return " ".join(prompt.split())


def fingerprint(prompt: str) -> str:
    """Stable hash of the whitespace-collapsed prompt."""
    return hashlib.sha256(normalize_prompt(prompt).encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class CallRecord:
    seq: int
    fingerprint: str
    prompt: str
    params: SamplingParams
    response: str


class ScriptedBackend(BaseBackend):
    """Deterministic backend answering from per-prompt response queues.

    ``script`` maps a prompt fingerprint (see :func:`fingerprint`) to the
    responses to hand out, in order, for repeated calls with that prompt.
    """

    backend_id = "scripted"

    def __init__(self, script: Mapping[str, Sequence[str]] | None = None):
        self._queues: dict[str, deque[str]] = {k: deque(v) for k, v in (script or {}).items()}
        self._lock = threading.Lock()
        self.calls: list[CallRecord] = []

    def add(self, prompt: str, responses: Iterable[str]) -> str:
        fp = fingerprint(prompt)
        with self._lock:
            self._queues.setdefault(fp, deque()).extend(responses)
        return fp

    @classmethod
    def from_file(cls, path) -> "ScriptedBackend":
        """Load a script file.

        Either ``{fingerprint: [responses]}`` or a list of
        ``{"prompt": ..., "responses": [...]}`` entries.
        """
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        backend = cls()
        if isinstance(doc, dict):
            for fp, responses in doc.items():
                backend._queues.setdefault(fp, deque()).extend(responses)
        else:
            for entry in doc:
                backend.add(entry["prompt"], entry["responses"])
        return backend

    def generate(self, prompt: str, params: SamplingParams) -> BackendResponse:
        _check_prompt(prompt)
        fp = fingerprint(prompt)
        with self._lock:
            queue = self._queues.get(fp)
            if queue is None:
                raise UnknownPrompt(normalize_prompt(prompt))
            if not queue:
                raise ScriptExhausted(fp, prompt)
            text = queue.popleft()
            self.calls.append(CallRecord(len(self.calls), fp, prompt, params, text))
        return BackendResponse(text, 0.0, self.backend_id)

    def remaining(self) -> int:
        with self._lock:
            return sum(len(q) for q in self._queues.values())

    def transcript(self) -> list[dict[str, Any]]:
        return [
            {"seq": c.seq, "fingerprint": c.fingerprint, "params": c.params.to_dict(), "response": c.response}
            for c in self.calls
        ]


class FunctionBackend(BaseBackend):
    """Backend answering through a callable ``(prompt, params) -> text``; logs calls like the scripted one."""

    backend_id = "function"

    def __init__(self, fn: Callable[[str, SamplingParams], str], backend_id: str = "function"):
        self._fn = fn
        self.backend_id = backend_id
        self._lock = threading.Lock()
        self.calls: list[CallRecord] = []

    def generate(self, prompt: str, params: SamplingParams) -> BackendResponse:
        _check_prompt(prompt)
        start = time.perf_counter()
        text = self._fn(prompt, params)
        with self._lock:
            self.calls.append(CallRecord(len(self.calls), fingerprint(prompt), prompt, params, text))
        return BackendResponse(text, time.perf_counter() - start, self.backend_id)


class RecordingBackend(BaseBackend):
    """Pass-through that records responses per fingerprint, ready to replay as a script."""

    def __init__(self, inner: Backend):
        self.inner = inner
        self.backend_id = f"recording:{inner.backend_id}"
        self._lock = threading.Lock()
        self._script: dict[str, list[str]] = {}

    def generate(self, prompt: str, params: SamplingParams) -> BackendResponse:
        response = self.inner.generate(prompt, params)
        with self._lock:
            self._script.setdefault(fingerprint(prompt), []).append(response.text)
        return response

    def script(self) -> dict[str, list[str]]:
        with self._lock:
            return {k: list(v) for k, v in self._script.items()}

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.script(), fh, indent=1, sort_keys=True)
            fh.write("\n")


# --- HTTP --------------------------------------------------------------------


@dataclass
class HttpConfig:
    base_url: str
    model: str
    api_key_env: str = "VERINAV_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    backoff_initial: float = 1.0
    backoff_max: float = 20.0
    system_prompt: str | None = None
    extra_body: dict[str, Any] = field(default_factory=dict)


_RETRY_STATUS = {500, 502, 503, 504}


class HttpBackend(BaseBackend):
    """Client for an OpenAI-compatible ``/chat/completions`` endpoint.

    Transport failures and HTTP 429 are retried with exponential backoff up to
    ``max_retries`` times; timeouts and other HTTP errors are not.
    """

    def __init__(
        self,
        config: HttpConfig,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self.backend_id = f"http:{config.model}"
        self._client = client or httpx.Client(timeout=config.timeout)
        self._sleep = sleep
        self.attempts = 0

    @property
    def url(self) -> str:
        return self.config.base_url.rstrip("/") + "/chat/completions"

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _body(self, prompt: str, n: int, params: SamplingParams) -> dict[str, Any]:
        messages = []
        if self.config.system_prompt:
            messages.append({"role": "system", "content": self.config.system_prompt})
        messages.append({"role": "user", "content": prompt})
        body = {
            "model": self.config.model,
            "messages": messages,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_new_tokens,
            "n": n,
        }
        if params.seed is not None:
            body["seed"] = params.seed
        body.update(self.config.extra_body)
        return body

    def _post(self, body: dict[str, Any]) -> dict[str, Any]:
        delay = self.config.backoff_initial
        for attempt in range(self.config.max_retries + 1):
            self.attempts += 1
            try:
                resp = self._client.post(self.url, json=body, headers=self._headers())
            except httpx.TimeoutException as exc:
                raise BackendTimeout(str(exc)) from exc
            except httpx.TransportError as exc:
                error: BackendError = TransportError(str(exc))
            else:
                if resp.status_code == 429:
                    error = RateLimited(resp.text[:200])
                elif resp.status_code in _RETRY_STATUS:
                    error = TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                elif resp.status_code >= 400:
                    raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    try:
                        return resp.json()
                    except ValueError as exc:
                        raise BackendError(f"response is not JSON: {exc}") from exc
            if attempt == self.config.max_retries:
                raise error
            logger.warning("retrying after %s (attempt %d)", error, attempt + 1)
            self._sleep(min(delay, self.config.backoff_max))
            delay *= 2
        raise AssertionError("unreachable")

    @staticmethod
    def _texts(payload: dict[str, Any]) -> list[str]:
        try:
            choices = sorted(payload["choices"], key=lambda c: c.get("index", 0))
            return [c["message"]["content"] or "" for c in choices]
        except (KeyError, TypeError) as exc:
            raise BackendError(f"malformed completion payload: {exc}") from exc

    def generate(self, prompt: str, params: SamplingParams) -> BackendResponse:
        return self.generate_n(prompt, 1, params)[0]

    def generate_n(self, prompt: str, n: int, params: SamplingParams) -> list[BackendResponse]:
        _check_prompt(prompt)
        if n < 1:
            raise ValueError("n must be >= 1")
        out: list[BackendResponse] = []
        while len(out) < n:
            start = time.perf_counter()
            try:
                texts = self._texts(self._post(self._body(prompt, n - len(out), params)))
            except BackendError as exc:
                raise BatchError(len(out), exc) if n > 1 else exc from exc
            if not texts:
                raise BatchError(len(out), BackendError("empty choices list"))
            latency = time.perf_counter() - start
            out.extend(BackendResponse(t, latency, self.backend_id) for t in texts[: n - len(out)])
        return out

    def close(self) -> None:
        self._client.close()
