from __future__ import annotations

import string
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Protocol, Sequence

from ..space import Configuration, template_fields


class BackendError(Exception):
    """A completion call failed; ``retryable`` says whether trying again may help."""

    retryable = False


class TransportError(BackendError):
    retryable = True


class ServiceError(BackendError):
    def __init__(self, status: int, message: str):
        super().__init__(f"service error {status}: {message}")
        self.status = status
        self.message = message

    @property
    def retryable(self) -> bool:  # type: ignore[override]
        return self.status == 429


class MalformedResponse(BackendError):
    pass


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class Usage:
    input_tokens: int = 0
    output_tokens: int = 0
    total_tokens: int = 0

    def __add__(self, other: Usage) -> Usage:
        return Usage(
            self.input_tokens + other.input_tokens,
            self.output_tokens + other.output_tokens,
            self.total_tokens + other.total_tokens,
        )


@dataclass(frozen=True)
class CompletionRequest:
    """One call to a completion service.

    ``n`` is the number of responses asked for in this call and ``offset`` is
    the index of the first of them within the trial's response sequence for the
    example (only the mock and the cache look at it).
    """

    model: str
    rendered_prompt: str
    max_tokens: int
    temperature: float | None = None
    top_p: float | None = None
    n: int = 1
    stop: tuple[str, ...] | None = None
    presence_penalty: float = 0.0
    frequency_penalty: float = 0.0
    best_of: int = 1
    logprobs_wanted: bool = False
    offset: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.stop, list):
            object.__setattr__(self, "stop", tuple(self.stop))
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if (self.temperature is None) == (self.top_p is None):
            raise ValueError("exactly one of temperature / top_p must be set")

    @classmethod
    def for_config(
        cls,
        config: Configuration,
        rendered_prompt: str,
        count: int,
        offset: int = 0,
        logprobs_wanted: bool = False,
    ) -> CompletionRequest:
        """Request ``count`` responses (or best_of candidates) of ``config``."""
        by_best_of = config.count_field == "best_of"
        return cls(
            model=config.model,
            rendered_prompt=rendered_prompt,
            max_tokens=config.max_tokens,
            temperature=config.temperature,
            top_p=config.top_p,
            n=1 if by_best_of else count,
            stop=config.stop,
            presence_penalty=config.presence_penalty,
            frequency_penalty=config.frequency_penalty,
            best_of=count if by_best_of else 1,
            logprobs_wanted=logprobs_wanted or by_best_of,
            offset=offset,
        )

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["stop"] = list(self.stop) if self.stop is not None else None
        return d


@dataclass(frozen=True)
class ResponseSet:
    texts: tuple[str, ...]
    logprobs: tuple[float, ...] | None = None
    usage: Usage = field(default_factory=Usage)

    def __post_init__(self) -> None:
        object.__setattr__(self, "texts", tuple(self.texts))
        if self.logprobs is not None:
            object.__setattr__(self, "logprobs", tuple(self.logprobs))
            if len(self.logprobs) != len(self.texts):
                raise ValueError("one mean logprob per response is required")

    def __len__(self) -> int:
        return len(self.texts)

    def __add__(self, other: ResponseSet) -> ResponseSet:
        if not self.texts:
            return ResponseSet(other.texts, other.logprobs, self.usage + other.usage)
        if not other.texts:
            return ResponseSet(self.texts, self.logprobs, self.usage + other.usage)
        logprobs = None
        if self.logprobs is not None and other.logprobs is not None:
            logprobs = self.logprobs + other.logprobs
        return ResponseSet(self.texts + other.texts, logprobs, self.usage + other.usage)

    def to_dict(self) -> dict[str, Any]:
        return {
            "texts": list(self.texts),
            "logprobs": list(self.logprobs) if self.logprobs is not None else None,
            "usage": asdict(self.usage),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ResponseSet:
        usage = Usage(**d["usage"])
        if usage.total_tokens != usage.input_tokens + usage.output_tokens:
            raise ValueError("usage total does not match input + output")
        logprobs = d.get("logprobs")
        return cls(tuple(d["texts"]), tuple(logprobs) if logprobs is not None else None, usage)


EMPTY = ResponseSet(())


class Backend(Protocol):
    name: str

    def complete(self, request: CompletionRequest) -> ResponseSet: ...


def render_prompt(template: str, example: Mapping[str, Any]) -> str:
    """Substitute ``{field}`` placeholders from ``example``; ``{{``/``}}`` are literal braces."""
    for name in template_fields(template):
        if name not in example:
            raise PromptError(f"prompt placeholder {{{name}}} has no field in the example")
    out = []
    for literal, name, _, _ in string.Formatter().parse(template):
        out.append(literal)
        if name is not None:
            out.append(str(example[name]))
    return "".join(out)


def mean_logprob(token_logprobs: Sequence[float | None]) -> float:
    values = [v for v in token_logprobs if v is not None]
    return sum(values) / len(values) if values else 0.0
