"""Deterministic completion generator for tests and offline tuning runs.

Every response is a pure function of the request fields that influence its
content (model, rendered prompt, sampling randomness, penalties) plus its
index within the example's response sequence. ``n`` and ``max_tokens`` are
excluded from the seed: asking for responses 0-3 and then 4-7 yields the same
texts as asking for 0-7 at once, and raising ``max_tokens`` only ever lets a
response run longer. Token usage is therefore non-decreasing in both ``n`` and
``max_tokens`` for a fixed model, prompt and stop list.
"""

from __future__ import annotations

import bisect
import hashlib
import json
import random
import re
from dataclasses import dataclass, field
from typing import Callable, Mapping

from .base import CompletionRequest, ResponseSet, Usage

_FILLER = (
    "we", "first", "note", "that", "the", "value", "is", "so", "then",
    "compute", "step", "check", "result", "and", "thus", "\n", "let", "x",
)
_SUM = re.compile(r"(-?\d+)\s*\+\s*(-?\d+)")


def sum_oracle(prompt: str) -> str:
    """Ground truth the mock 'knows': the last ``a + b`` in the prompt, else a hash digit string."""
    matches = _SUM.findall(prompt)
    if matches:
        a, b = matches[-1]
        return str(int(a) + int(b))
    return str(int(hashlib.sha256(prompt.encode()).hexdigest()[:6], 16) % 1000)


def answer_text(answer: str) -> str:
    return f"The answer is \\boxed{{{answer}}}"


@dataclass(frozen=True)
class MockModelProfile:
    """Behaviour of one mock model.

    ``length_scale`` is the mean natural response length in tokens; a response
    whose natural length exceeds ``max_tokens`` is cut and loses its final
    answer. With ``fixed_output_tokens`` set, each response has exactly that
    natural length. ``charge_input=False`` makes requests cost output tokens
    only, which gives a per-example cost independent of how ``n`` is split.
    """

    length_scale: int = 200
    fixed_output_tokens: int | None = None
    charge_input: bool = True
    skill: float = 0.6
    best_randomness: float = 0.7
    randomness_sensitivity: float = 0.5
    prompt_bonus: Mapping[str, float] = field(default_factory=dict)
    seed: int = 0

    def success_probability(self, randomness: float, prompt: str) -> float:
        p = self.skill - self.randomness_sensitivity * abs(randomness - self.best_randomness)
        p += sum(b for k, b in self.prompt_bonus.items() if k in prompt)
        return min(1.0, max(0.0, p))

    @classmethod
    def from_dict(cls, d: Mapping) -> MockModelProfile:
        return cls(**d)


def _join(words: list[str]) -> tuple[str, list[int]]:
    """Render words (newlines attach without spaces); also return each word's end offset."""
    parts, ends, pos = [], [], 0
    for i, w in enumerate(words):
        piece = w if (w == "\n" or i == 0 or words[i - 1] == "\n") else " " + w
        parts.append(piece)
        pos += len(piece)
        ends.append(pos)
    return "".join(parts), ends


def _rng(*parts) -> random.Random:
    digest = hashlib.sha256(json.dumps(parts).encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


class MockBackend:
    name = "mock"

    def __init__(
        self,
        profiles: Mapping[str, MockModelProfile] | None = None,
        default: MockModelProfile | None = None,
        oracle: Callable[[str], str] = sum_oracle,
    ):
        self.profiles = dict(profiles or {})
        self.default = default or MockModelProfile()
        self.oracle = oracle
        self.calls = 0

    @property
    def identity(self) -> str:
        described = {m: repr(p) for m, p in sorted(self.profiles.items())}
        return "mock:" + json.dumps([repr(self.default), described, self.oracle.__qualname__])

    def profile(self, model: str) -> MockModelProfile:
        return self.profiles.get(model, self.default)

    def _response(self, req: CompletionRequest, profile: MockModelProfile, index: int):
        randomness = req.temperature if req.temperature is not None else req.top_p
        # zero randomness: every response index produces the same greedy text
        effective_index = index if randomness > 0 else 0
        rng = _rng(
            profile.seed, req.model, req.rendered_prompt, effective_index,
            req.temperature, req.top_p, req.presence_penalty, req.frequency_penalty,
        )
        if profile.fixed_output_tokens is not None:
            natural = profile.fixed_output_tokens
        else:
            natural = 1 + int(rng.random() * 2 * profile.length_scale)
        truth = self.oracle(req.rendered_prompt)
        correct = rng.random() < profile.success_probability(randomness, req.rendered_prompt)
        if correct:
            answer = truth
        elif truth.lstrip("-").isdigit():
            answer = str(int(truth) + rng.choice((-3, -2, -1, 1, 2, 3)))
        else:
            answer = truth + "?"
        tail = answer_text(answer).split(" ")
        words = rng.choices(_FILLER, k=max(0, natural - len(tail))) + tail
        words = words[:natural]
        logprob = -(0.2 + rng.random()) - (0.0 if correct else 0.3)

        emitted = words[: req.max_tokens]
        text, ends = _join(emitted)
        tokens = len(emitted)
        if req.stop:
            hits = [(text.find(s), s) for s in req.stop if s and text.find(s) >= 0]
            if hits:
                cut, stop = min(hits, key=lambda h: (h[0], -len(h[1])))
                # tokens generated up to and including the one completing the stop string
                tokens = bisect.bisect_left(ends, cut + len(stop)) + 1
                text = text[:cut]
        return text, logprob, max(min(tokens, len(emitted)), 1)

    def complete(self, request: CompletionRequest) -> ResponseSet:
        self.calls += 1
        profile = self.profile(request.model)
        input_tokens = len(request.rendered_prompt.split()) if profile.charge_input else 0
        texts, logprobs = [], []
        output_tokens = 0
        if request.best_of > 1:
            # candidates are indexed by best_of windows; only the top one is returned
            best = None
            for i in range(request.offset, request.offset + request.best_of):
                text, lp, tokens = self._response(request, profile, i)
                output_tokens += tokens
                if best is None or lp > best[1]:
                    best = (text, lp)
            texts.append(best[0])
            logprobs.append(best[1])
        else:
            for i in range(request.offset, request.offset + request.n):
                text, lp, tokens = self._response(request, profile, i)
                output_tokens += tokens
                texts.append(text)
                logprobs.append(lp)
        usage = Usage(input_tokens, output_tokens, input_tokens + output_tokens)
        return ResponseSet(tuple(texts), tuple(logprobs), usage)
