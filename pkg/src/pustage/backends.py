"""Backend-neutral model invocation.

Two interchangeable backends: a deterministic scripted backend used by
the test suite and offline fixtures, and an HTTP client speaking the
OpenAI-compatible ``/v1/chat/completions`` protocol with multimodal
content arrays. Both measure wall-clock latency per call and are safe
for concurrent use.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import httpx

logger = logging.getLogger("pustage.backends")

SUPPORTED_IMAGE_MIMES = ("image/jpeg", "image/png")


class BackendError(Exception):
    """Base class for model-invocation failures."""


class RequestTimeoutError(BackendError):
    pass


class TransportFailure(BackendError):
    def __init__(self, detail: str):
        super().__init__(f"transport error: {detail}")
        self.detail = detail


class ApiError(BackendError):
    def __init__(self, status: int, body: str):
        super().__init__(f"API error {status}: {body[:200]}")
        self.status = status
        self.body = body


class RetriesExhaustedError(BackendError):
    def __init__(self, attempts: int, last_error: BackendError):
        super().__init__(f"retries exhausted after {attempts} attempts: {last_error}")
        self.attempts = attempts
        self.last_error = last_error


class NoScriptMatchError(BackendError):
    def __init__(self, user_text: str):
        excerpt = user_text[:120]
        super().__init__(f"no script entry matches request text: {excerpt!r}")
        self.excerpt = excerpt


class UnsupportedMimeError(BackendError):
    def __init__(self, mime_type: str):
        super().__init__(f"unsupported image mime type: {mime_type!r}")
        self.mime_type = mime_type


class MultiImageUnsupportedError(BackendError):
    def __init__(self, backend_id: str = ""):
        super().__init__(
            "request carries support-example images but the backend "
            f"does not accept multi-image input ({backend_id or 'unknown backend'})"
        )


@dataclass(frozen=True)
class PromptRequest:
    """One backend-neutral multimodal chat exchange request.

    ``images`` holds (mime_type, raw bytes) pairs for the query;
    ``support_examples`` holds (image bytes, label text) pairs that
    precede the query image on the wire. ``decode_constraint`` is
    advisory: endpoints without constrained decoding ignore it and the
    caller falls back to post-hoc parsing plus a bounded re-ask.
    """

    system_text: str
    user_text: str
    images: tuple[tuple[str, bytes], ...]
    support_examples: tuple[tuple[bytes, str], ...] = ()
    decode_constraint: Optional[tuple[str, ...]] = None
    max_output_tokens: int = 512
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")


@dataclass(frozen=True)
class ModelResponse:
    """Model output text plus measured call latency in seconds."""

    text: str
    latency: float
    token_counts: Optional[tuple[int, int]] = None
    backend_id: str = ""
    retries: int = 0

    def __post_init__(self) -> None:
        if self.latency < 0:
            raise ValueError("latency must be non-negative")


@dataclass(frozen=True)
class BackendConfig:
    """Connection settings for an OpenAI-compatible endpoint.

    API keys are read from the environment variable named by
    ``api_key_env``, never from config files. When the variable is
    unset the request is sent without an Authorization header (local
    serving stacks are commonly keyless).
    """

    endpoint_url: str
    model_name: str
    api_key_env: str = "MODEL_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    retry_backoff_base: float = 0.5
    supports_multi_image: bool = False

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if not 0 <= self.max_retries <= 10:
            raise ValueError("max_retries must be within [0, 10]")
        if self.retry_backoff_base < 0:
            raise ValueError("retry_backoff_base must be non-negative")


class Backend(Protocol):
    """Anything that can answer a PromptRequest."""

    backend_id: str
    supports_multi_image: bool

    def complete(self, request: PromptRequest) -> ModelResponse: ...


def encode_image_payload(data: bytes, mime_type: str) -> dict:
    """OpenAI-compatible image content part with a base64 data URL."""
    if mime_type not in SUPPORTED_IMAGE_MIMES:
        raise UnsupportedMimeError(mime_type)
    encoded = base64.b64encode(data).decode("ascii")
    return {
        "type": "image_url",
        "image_url": {"url": f"data:{mime_type};base64,{encoded}"},
    }


def build_chat_payload(
    request: PromptRequest, model_name: str, supports_multi_image: bool
) -> dict:
    """Assemble the chat-completions JSON body for a request.

    Support examples are inlined as additional image+label content
    items before the query image, gated by the backend's multi-image
    capability flag.
    """
    if request.support_examples and not supports_multi_image:
        raise MultiImageUnsupportedError(model_name)
    content: list[dict] = [{"type": "text", "text": request.user_text}]
    for image_bytes, label_text in request.support_examples:
        content.append(encode_image_payload(image_bytes, "image/png"))
        content.append({"type": "text", "text": label_text})
    for mime_type, image_bytes in request.images:
        content.append(encode_image_payload(image_bytes, mime_type))
    payload: dict = {
        "model": model_name,
        "messages": [
            {"role": "system", "content": request.system_text},
            {"role": "user", "content": content},
        ],
        "max_tokens": request.max_output_tokens,
        "temperature": request.temperature,
    }
    return payload


def _elide_images(payload: dict) -> dict:
    def walk(node):
        if isinstance(node, dict):
            out = {}
            for key, value in node.items():
                if key == "url" and isinstance(value, str) and value.startswith("data:"):
                    head = value.split(",", 1)[0]
                    out[key] = f"{head},<{len(value)} chars elided>"
                else:
                    out[key] = walk(value)
            return out
        if isinstance(node, list):
            return [walk(item) for item in node]
        return node

    return walk(payload)


@dataclass
class ScriptEntry:
    """One scripted response: substring matcher against user_text."""

    match: str
    text: str
    once: bool = False
    latency: float = 0.0


class ScriptedBackend:
    """Deterministic backend driven by an ordered response script.

    Each call returns the first entry whose matcher is a substring of
    the request's user text. Entries marked ``once`` are consumed and
    skipped afterwards, which lets a script emulate conversation
    progression. An unmatched call is an error, never a default.
    """

    def __init__(self, script: Sequence[ScriptEntry], backend_id: str = "scripted"):
        if not script:
            raise ValueError("script must be non-empty")
        self._script = list(script)
        self._consumed = [False] * len(self._script)
        self._lock = threading.Lock()
        self.backend_id = backend_id
        self.supports_multi_image = True
        self.calls: list[PromptRequest] = []

    def reset(self) -> None:
        with self._lock:
            self._consumed = [False] * len(self._script)
            self.calls = []

    def complete(self, request: PromptRequest) -> ModelResponse:
        with self._lock:
            self.calls.append(request)
            for index, entry in enumerate(self._script):
                if entry.once and self._consumed[index]:
                    continue
                if entry.match in request.user_text:
                    if entry.once:
                        self._consumed[index] = True
                    return ModelResponse(
                        text=entry.text,
                        latency=entry.latency,
                        backend_id=self.backend_id,
                    )
        raise NoScriptMatchError(request.user_text)


class HttpBackend:
    """Client for OpenAI-compatible chat-completions endpoints.

    Retries idempotently on transport errors, timeouts, HTTP 429 and
    5xx with exponential backoff; any other 4xx fails immediately.
    ``max_retries`` counts retries, so zero means exactly one attempt.
    """

    def __init__(self, config: BackendConfig, sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self.backend_id = config.model_name
        self.supports_multi_image = config.supports_multi_image
        self._sleep = sleep
        self._client = httpx.Client(timeout=config.timeout)

    def close(self) -> None:
        self._client.close()

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.config.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        return headers

    def _attempt(self, payload: dict) -> ModelResponse:
        start = time.perf_counter()
        try:
            response = self._client.post(
                self.config.endpoint_url, json=payload, headers=self._headers()
            )
        except httpx.TimeoutException as exc:
            raise RequestTimeoutError(str(exc)) from exc
        except httpx.TransportError as exc:
            raise TransportFailure(str(exc)) from exc
        elapsed = time.perf_counter() - start
        if response.status_code != 200:
            raise ApiError(response.status_code, response.text)
        try:
            data = response.json()
            text = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError, json.JSONDecodeError) as exc:
            raise TransportFailure(f"malformed completion body: {exc}") from exc
        usage = data.get("usage") or {}
        token_counts = None
        if "prompt_tokens" in usage and "completion_tokens" in usage:
            token_counts = (int(usage["prompt_tokens"]), int(usage["completion_tokens"]))
        return ModelResponse(
            text=text,
            latency=elapsed,
            token_counts=token_counts,
            backend_id=self.backend_id,
        )

    @staticmethod
    def _retryable(error: BackendError) -> bool:
        if isinstance(error, (RequestTimeoutError, TransportFailure)):
            return True
        if isinstance(error, ApiError):
            return error.status == 429 or 500 <= error.status < 600
        return False

    def complete(self, request: PromptRequest) -> ModelResponse:
        payload = build_chat_payload(
            request, self.config.model_name, self.config.supports_multi_image
        )
        if logger.isEnabledFor(logging.DEBUG):
            logger.debug("request %s", json.dumps(_elide_images(payload)))
        delay = self.config.retry_backoff_base
        retries = 0
        while True:
            try:
                response = self._attempt(payload)
            except BackendError as error:
                if not self._retryable(error):
                    raise
                if retries >= self.config.max_retries:
                    raise RetriesExhaustedError(retries + 1, error) from error
                retries += 1
                if delay > 0:
                    self._sleep(delay)
                delay *= 2
                continue
            if logger.isEnabledFor(logging.DEBUG):
                logger.debug("response %s", json.dumps({"text": response.text[:500]}))
            return ModelResponse(
                text=response.text,
                latency=response.latency,
                token_counts=response.token_counts,
                backend_id=response.backend_id,
                retries=retries,
            )
