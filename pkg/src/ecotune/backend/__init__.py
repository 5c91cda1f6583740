from .base import (
    Backend,
    BackendError,
    CompletionRequest,
    MalformedResponse,
    PromptError,
    ResponseSet,
    ServiceError,
    TransportError,
    Usage,
    render_prompt,
)
from .cache import CachedBackend, ResponseCache, request_key
from .http import HttpBackend
from .mock import MockBackend, MockModelProfile, sum_oracle

__all__ = [
    "Backend",
    "BackendError",
    "CachedBackend",
    "CompletionRequest",
    "HttpBackend",
    "MalformedResponse",
    "MockBackend",
    "MockModelProfile",
    "PromptError",
    "ResponseCache",
    "ResponseSet",
    "ServiceError",
    "TransportError",
    "Usage",
    "render_prompt",
    "request_key",
    "sum_oracle",
]
