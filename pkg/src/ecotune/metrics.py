"""Utility scoring of response sets and token accounting against the tuning budget."""

from __future__ import annotations

import json
import logging
import re
import subprocess
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

from .backend.base import ResponseSet, Usage

logger = logging.getLogger(__name__)

BEST_OF = "best_of"
MAJORITY_VOTE = "majority_vote"
RERANKED_TOP = "reranked_top"
MODES = (BEST_OF, MAJORITY_VOTE, RERANKED_TOP)


class CheckerError(RuntimeError):
    """The utility checker itself failed; the trial cannot be scored."""


class MissingLogprobs(ValueError):
    pass


# -- answer extraction and equivalence ---------------------------------------


def extract_boxed(text: str) -> str | None:
    """Content of the last ``\\boxed{...}``, honouring nested braces."""
    start = text.rfind("\\boxed{")
    if start < 0:
        return None
    i = start + len("\\boxed{")
    depth = 1
    for j in range(i, len(text)):
        if text[j] == "{":
            depth += 1
        elif text[j] == "}":
            depth -= 1
            if depth == 0:
                return text[i:j]
    return None


def make_extractor(rule: str | None) -> Callable[[str], str | None] | None:
    """``"boxed"`` or a regex whose first group (or whole match) is the answer."""
    if rule is None:
        return None
    if rule == "boxed":
        return extract_boxed
    pattern = re.compile(rule)

    def extract(text: str) -> str | None:
        found = pattern.findall(text)
        if not found:
            return None
        last = found[-1]
        return last[0] if isinstance(last, tuple) else last

    return extract


def normalize_answer(answer: str) -> str:
    return " ".join(str(answer).split())


def string_equivalent(a: str, b: str) -> bool:
    return normalize_answer(a) == normalize_answer(b)


# -- checkers ----------------------------------------------------------------


@dataclass(frozen=True)
class ExactMatchChecker:
    """Scores 1 when the extracted answer equals ``example[answer_field]``."""

    answer_field: str = "answer"
    extract: str | None = "boxed"

    def __call__(self, example: Mapping[str, Any], response: str) -> float:
        extractor = make_extractor(self.extract)
        answer = extractor(response) if extractor else response
        if answer is None:
            return 0.0
        return float(string_equivalent(answer, example[self.answer_field]))


@dataclass(frozen=True)
class CommandChecker:
    """External program: reads ``{"example": ..., "response": ...}`` on stdin, prints a score."""

    command: tuple[str, ...]
    timeout: float = 30.0

    def __call__(self, example: Mapping[str, Any], response: str) -> float:
        payload = json.dumps({"example": dict(example), "response": response})
        try:
            done = subprocess.run(
                list(self.command),
                input=payload,
                capture_output=True,
                text=True,
                timeout=self.timeout,
            )
        except (OSError, subprocess.TimeoutExpired) as e:
            raise CheckerError(f"checker {self.command[0]!r} failed: {e}") from e
        if done.returncode != 0:
            raise CheckerError(
                f"checker exited with {done.returncode}: {done.stderr.strip()[:200]}"
            )
        try:
            score = float(done.stdout.strip())
        except ValueError as e:
            raise CheckerError(f"checker printed a non-number: {done.stdout[:100]!r}") from e
        if not 0.0 <= score <= 1.0:
            raise CheckerError(f"checker score {score} outside [0, 1]")
        return score


# -- utility rules -----------------------------------------------------------


def utility_best_of(
    responses: Sequence[str], example: Mapping[str, Any], checker: Callable
) -> float:
    if not responses:
        raise ValueError("at least one response is required")
    try:
        return max(checker(example, r) for r in responses)
    except CheckerError:
        raise
    except Exception as e:
        raise CheckerError(f"checker crashed: {e!r}") from e


def majority_answer(answers: Sequence[str | None]) -> str | None:
    """Modal normalized answer; ties go to the answer extracted first."""
    normalized = [normalize_answer(a) for a in answers if a is not None]
    if not normalized:
        return None
    counts = Counter(normalized)
    top = max(counts.values())
    return next(a for a in normalized if counts[a] == top)


def utility_majority_vote(
    responses: Sequence[str],
    example: Mapping[str, Any],
    extract: Callable[[str], str | None],
    equivalent: Callable[[str, str], bool] = string_equivalent,
    answer_field: str = "answer",
) -> float:
    voted = majority_answer([extract(r) for r in responses])
    if voted is None:
        logger.info("no extractable answer among %d responses", len(responses))
        return 0.0
    return float(equivalent(voted, example[answer_field]))


def rerank_top(texts: Sequence[str], logprobs: Sequence[float] | None) -> str:
    """Response with the highest mean per-token log probability (first on ties)."""
    if logprobs is None or len(logprobs) != len(texts):
        raise MissingLogprobs("reranking needs mean logprobs; request them with logprobs_wanted")
    if not texts:
        raise ValueError("at least one response is required")
    best = 0
    for i, lp in enumerate(logprobs):
        if lp > logprobs[best]:
            best = i
    return texts[best]


@dataclass(frozen=True)
class UtilityBinding:
    """The tuning objective: how a response set for one example becomes a score in [0, 1]."""

    mode: str = BEST_OF
    checker: Callable[[Mapping[str, Any], str], float] = field(default_factory=ExactMatchChecker)
    extract: str | None = None
    answer_field: str = "answer"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown utility mode {self.mode!r}; expected one of {MODES}")
        if self.mode == MAJORITY_VOTE and self.extract is None:
            raise ValueError("majority_vote needs an answer-extraction rule")

    @property
    def logprobs_wanted(self) -> bool:
        return self.mode == RERANKED_TOP

    def __call__(self, example: Mapping[str, Any], responses: ResponseSet, config=None) -> float:
        if self.mode == BEST_OF:
            return utility_best_of(responses.texts, example, self.checker)
        if self.mode == RERANKED_TOP:
            top = rerank_top(responses.texts, responses.logprobs)
            return utility_best_of([top], example, self.checker)
        return utility_majority_vote(
            responses.texts, example, make_extractor(self.extract), answer_field=self.answer_field
        )


# -- cost accounting ---------------------------------------------------------


@dataclass(frozen=True)
class PriceTable:
    """Optional per-model prices (cost units per input / output token)."""

    prices: Mapping[str, tuple[float, float]]

    def cost(self, usage: Usage, model: str) -> float:
        if model not in self.prices:
            return float(usage.total_tokens)
        p_in, p_out = self.prices[model]
        return usage.input_tokens * p_in + usage.output_tokens * p_out


def token_cost(usage: Usage, model: str) -> float:
    return float(usage.total_tokens)


class CostLedger:
    """Running total of tokens consumed by a tuning run against its optimization budget."""

    def __init__(self, budget: float):
        self.budget = budget
        self.total = 0.0
        self.per_trial: list[float] = []
        self._lock = threading.Lock()

    @property
    def exhausted(self) -> bool:
        return self.total >= self.budget

    @property
    def remaining(self) -> float:
        return max(0.0, self.budget - self.total)

    def charge(self, tokens: float) -> bool:
        """Add one trial's spend; returns True once the budget is exhausted."""
        if tokens < 0:
            raise ValueError("cannot charge a negative amount")
        with self._lock:
            self.total += tokens
            self.per_trial.append(tokens)
            return self.exhausted
