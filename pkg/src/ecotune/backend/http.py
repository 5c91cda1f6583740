"""Client for completion-style HTTP services (``/completions`` and ``/chat/completions``)."""

from __future__ import annotations

import json
import logging
import os
import time
from typing import Any, Callable, Collection

import httpx

from .base import (
    BackendError,
    CompletionRequest,
    MalformedResponse,
    ResponseSet,
    ServiceError,
    TransportError,
    Usage,
    mean_logprob,
)

logger = logging.getLogger(__name__)

API_KEY_ENV = "ECOTUNE_API_KEY"


def request_body(request: CompletionRequest, chat: bool) -> dict[str, Any]:
    """Wire body; fields carry the service's own hyperparameter names."""
    body: dict[str, Any] = {"model": request.model}
    if chat:
        body["messages"] = [{"role": "user", "content": request.rendered_prompt}]
    else:
        body["prompt"] = request.rendered_prompt
    body["max_tokens"] = request.max_tokens
    if request.temperature is not None:
        body["temperature"] = request.temperature
    else:
        body["top_p"] = request.top_p
    body["n"] = request.n
    if request.stop is not None:
        body["stop"] = list(request.stop)
    body["presence_penalty"] = request.presence_penalty
    body["frequency_penalty"] = request.frequency_penalty
    if request.best_of > 1:
        body["best_of"] = request.best_of
    if request.logprobs_wanted:
        body["logprobs"] = True if chat else 1
    return body


def encode_body(body: dict[str, Any]) -> bytes:
    return json.dumps(body, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def parse_response(payload: Any, chat: bool, logprobs_wanted: bool) -> ResponseSet:
    try:
        choices = sorted(payload["choices"], key=lambda c: c.get("index", 0))
        raw_usage = payload["usage"]
        usage = Usage(
            int(raw_usage["prompt_tokens"]),
            int(raw_usage["completion_tokens"]),
            int(raw_usage["total_tokens"]),
        )
        texts, logprobs = [], []
        for choice in choices:
            if chat:
                texts.append(choice["message"]["content"] or "")
            else:
                texts.append(choice["text"])
            if logprobs_wanted:
                lp = choice["logprobs"]
                if chat:
                    tokens = [t["logprob"] for t in lp["content"]]
                else:
                    tokens = lp["token_logprobs"]
                logprobs.append(mean_logprob(tokens))
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedResponse(f"unexpected response body: {e!r}") from e
    return ResponseSet(tuple(texts), tuple(logprobs) if logprobs_wanted else None, usage)


class HttpBackend:
    """Token usage comes verbatim from the service's ``usage`` block."""

    name = "http"

    def __init__(
        self,
        base_url: str,
        chat_models: Collection[str] = (),
        api_key: str | None = None,
        timeout: float = 60.0,
        retries: int = 3,
        backoff: float = 1.0,
        sleep: Callable[[float], None] = time.sleep,
        client: httpx.Client | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.identity = f"http:{self.base_url}"
        self.chat_models = frozenset(chat_models)
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.retries = retries
        self.backoff = backoff
        self.sleep = sleep
        self._client = client or httpx.Client(timeout=timeout)

    def close(self) -> None:
        self._client.close()

    def _post(self, path: str, content: bytes) -> Any:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self._client.post(self.base_url + path, content=content, headers=headers)
        except httpx.HTTPError as e:
            raise TransportError(str(e)) from e
        if resp.status_code >= 400:
            try:
                message = resp.json()["error"]["message"]
            except (ValueError, KeyError, TypeError):
                message = resp.text
            raise ServiceError(resp.status_code, message)
        try:
            return resp.json()
        except ValueError as e:
            raise MalformedResponse(f"response is not JSON: {resp.text[:200]!r}") from e

    def complete(self, request: CompletionRequest) -> ResponseSet:
        chat = request.model in self.chat_models
        path = "/chat/completions" if chat else "/completions"
        content = encode_body(request_body(request, chat))
        delay = self.backoff
        for attempt in range(self.retries + 1):
            try:
                payload = self._post(path, content)
                return parse_response(payload, chat, request.logprobs_wanted)
            except BackendError as e:
                if not e.retryable or attempt == self.retries:
                    raise
                logger.warning("retrying after %s (attempt %d)", e, attempt + 1)
                self.sleep(delay)
                delay *= 2
        raise AssertionError("unreachable")
