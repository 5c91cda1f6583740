"""Configuration evaluation with cost-based pruning.

The pruned evaluator consults a registry of known valid/invalid
``(response count, max_tokens)`` pairs before spending anything, then doubles
the response count from a known-valid starting point and, for each count,
doubles the number of examples looked at. After every subset it compares the
average cost with the inference budget widened or narrowed by a
sampling-without-replacement (Hoeffding-Serfling style) margin.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

from .backend.base import EMPTY, BackendError, CompletionRequest, ResponseSet, Usage, render_prompt
from .metrics import token_cost
from .space import Configuration

BOUND_WIDTH = 0.1
PRE_CHECK = "pre_check"

RegistryKey = tuple  # (model, prompt template, stop tuple or None)


def registry_key(config: Configuration) -> RegistryKey:
    return (config.model, config.prompt, config.stop)


@dataclass
class ValidityRegistry:
    """Known-valid and known-invalid (count, max_tokens) pairs per (model, prompt, stop)."""

    valid: dict[RegistryKey, set[tuple[int, int]]] = field(default_factory=dict)
    invalid: dict[RegistryKey, set[tuple[int, int]]] = field(default_factory=dict)

    def add(self, verdict: str, key: RegistryKey, n: int, max_tokens: int) -> None:
        target = self.valid if verdict == "valid" else self.invalid
        target.setdefault(key, set()).add((n, max_tokens))


def max_valid_n(config: Configuration, registry: ValidityRegistry) -> int:
    entries = registry.valid.get(registry_key(config), ())
    return max((n for n, mt in entries if mt >= config.max_tokens), default=1)


def min_invalid_n(config: Configuration, registry: ValidityRegistry) -> float:
    entries = registry.invalid.get(registry_key(config), ())
    return min((n for n, mt in entries if mt <= config.max_tokens), default=math.inf)


def rho(k: int, size: int) -> float:
    """Finite-population correction for a prefix of ``k`` out of ``size`` examples."""
    if not 1 <= k <= size:
        raise ValueError(f"need 1 <= k <= size, got k={k}, size={size}")
    if 2 * k > size:
        return (1 - k / size) * (1 + 1 / k)
    return 1 - (k - 1) / size


@dataclass(frozen=True)
class Evaluate:
    start_n: int


@dataclass(frozen=True)
class Prune:
    pass


def pre_check(config: Configuration, registry: ValidityRegistry) -> Evaluate | Prune:
    # the "expected valid" test comes first so an inconsistent registry still allows evaluation
    count = config.count
    known_valid = max_valid_n(config, registry)
    if count <= known_valid:
        return Evaluate(count)
    if count >= min_invalid_n(config, registry):
        return Prune()
    return Evaluate(known_valid)


@dataclass(frozen=True)
class TrialResult:
    valid: bool
    utility: float
    avg_cost: float | None
    tokens_spent: int
    examples_touched: int
    dataset_size: int
    prune_stage: str | tuple[int, int] | None = None
    registry_updates: tuple[tuple[str, int, int], ...] = ()

    def __post_init__(self) -> None:
        if not self.valid and self.utility != 0:
            raise ValueError("an invalid trial must carry utility 0")
        if isinstance(self.prune_stage, list):
            object.__setattr__(self, "prune_stage", tuple(self.prune_stage))
        object.__setattr__(
            self, "registry_updates", tuple(tuple(u) for u in self.registry_updates)
        )

    @property
    def pruned(self) -> bool:
        return self.prune_stage is not None

    def to_dict(self) -> dict[str, Any]:
        stage = self.prune_stage
        return {
            "valid": self.valid,
            "utility": self.utility,
            "avg_cost": self.avg_cost,
            "tokens_spent": self.tokens_spent,
            "examples_touched": self.examples_touched,
            "dataset_size": self.dataset_size,
            "prune_stage": list(stage) if isinstance(stage, tuple) else stage,
            "registry_updates": [list(u) for u in self.registry_updates],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> TrialResult:
        return cls(**d)


class TrialError(RuntimeError):
    """A trial could not finish for operational reasons (not a budget verdict)."""

    def __init__(self, message: str, tokens_spent: int):
        super().__init__(message)
        self.tokens_spent = tokens_spent


UtilityFn = Callable[[Mapping[str, Any], ResponseSet, Configuration], float]
CostFn = Callable[[Usage, str], float]


class _Session:
    """Responses gathered so far for each example position of one trial."""

    def __init__(self, config, data, order, backend, logprobs_wanted, parallelism):
        self.config = config
        self.examples = [data[i] for i in order]
        self.backend = backend
        self.logprobs_wanted = logprobs_wanted
        self.parallelism = max(1, parallelism)
        self.responses: dict[int, ResponseSet] = {}
        self.covered: dict[int, int] = {}
        self.prompts: dict[int, str] = {}
        self.spent = 0

    def _request(self, pos: int, count: int) -> tuple[int, int, ResponseSet]:
        if pos not in self.prompts:
            self.prompts[pos] = render_prompt(self.config.prompt, self.examples[pos])
        have = self.covered.get(pos, 0)
        req = CompletionRequest.for_config(
            self.config, self.prompts[pos], count - have, offset=have,
            logprobs_wanted=self.logprobs_wanted,
        )
        return pos, count, self.backend.complete(req)

    def top_up(self, positions: Sequence[int], count: int) -> None:
        """Make sure every position holds responses 0..count-1, requesting only what is missing."""
        todo = [p for p in positions if self.covered.get(p, 0) < count]
        if not todo:
            return
        failure: BaseException | None = None
        if self.parallelism == 1 or len(todo) == 1:
            outcomes = []
            for p in todo:
                try:
                    outcomes.append(self._request(p, count))
                except BackendError as e:
                    failure = e
                    break
        else:
            with ThreadPoolExecutor(max_workers=min(self.parallelism, len(todo))) as pool:
                futures = [pool.submit(self._request, p, count) for p in todo]
            outcomes = []
            for fut in futures:
                if fut.exception() is not None:
                    failure = failure or fut.exception()
                else:
                    outcomes.append(fut.result())
        for pos, count_, rs in outcomes:
            self.responses[pos] = self.responses.get(pos, EMPTY) + rs
            self.covered[pos] = count_
            self.spent += rs.usage.total_tokens
        if failure is not None:
            raise TrialError(f"backend failure: {failure}", self.spent) from failure

    def for_utility(self, pos: int) -> ResponseSet:
        rs = self.responses[pos]
        if self.config.count_field == "best_of" and len(rs) > 1:
            # one best-of candidate window per request; keep the overall top response
            top = max(range(len(rs)), key=lambda i: (rs.logprobs[i], -i))
            return ResponseSet((rs.texts[top],), (rs.logprobs[top],), rs.usage)
        return rs


def _mean_utility(session: _Session, utility: UtilityFn, size: int) -> float:
    total = 0.0
    for pos in range(size):
        u = utility(session.examples[pos], session.for_utility(pos), session.config)
        if not 0.0 <= u <= 1.0:
            raise ValueError(f"utility {u} outside [0, 1]")
        total += u
    return total / size


def evaluate_pruned(
    config: Configuration,
    data: Sequence[Mapping[str, Any]],
    budget: float,
    registry: ValidityRegistry,
    backend,
    utility: UtilityFn,
    *,
    bound_width: float = BOUND_WIDTH,
    parallelism: int = 1,
    order: Sequence[int] | None = None,
    cost: CostFn = token_cost,
    logprobs_wanted: bool = False,
) -> TrialResult:
    """Validity and average utility of ``config`` over ``data``, stopping early when possible.

    ``registry`` is read for the initial check and updated with every bound
    decision. ``order`` fixes the sequence in which examples are consumed.
    """
    if budget <= 0:
        raise ValueError("inference budget must be positive")
    size = len(data)
    key = registry_key(config)
    target = config.count
    updates: list[tuple[str, int, int]] = []

    def record(verdict: str, n: int) -> None:
        registry.add(verdict, key, n, config.max_tokens)
        updates.append((verdict, n, config.max_tokens))

    decision = pre_check(config, registry)
    if isinstance(decision, Prune):
        record("invalid", target)
        return TrialResult(False, 0.0, None, 0, 0, size, PRE_CHECK, tuple(updates))

    session = _Session(
        config, data, order if order is not None else range(size), backend,
        logprobs_wanted, parallelism,
    )
    n = decision.start_n
    touched = 0
    while True:
        k, k_prev = 1, 0
        while True:
            session.top_up(range(k_prev, k), n)
            k_prev = k
            touched = max(touched, k)
            avg = sum(cost(session.responses[p].usage, config.model) for p in range(k)) / k
            margin = bound_width * math.sqrt(rho(k, size) / k)
            if avg > budget * (1 + margin):
                record("invalid", n)
                return TrialResult(
                    False, 0.0, avg, session.spent, touched, size, (n, k), tuple(updates)
                )
            if avg <= budget * (1 - margin) and (n < target or k == size):
                record("valid", n)
                if n < target:
                    break  # valid at this count: skip the remaining examples
            if k < size:
                k = min(2 * k, size)
            else:
                break
        if n < target:
            n = min(2 * n, target)
        else:
            u = _mean_utility(session, utility, size)
            return TrialResult(True, u, avg, session.spent, touched, size, None, tuple(updates))


def evaluate_simple(
    config: Configuration,
    data: Sequence[Mapping[str, Any]],
    budget: float,
    backend,
    utility: UtilityFn,
    *,
    parallelism: int = 1,
    order: Sequence[int] | None = None,
    cost: CostFn = token_cost,
    logprobs_wanted: bool = False,
) -> TrialResult:
    """Request every response for every example, then compare the average cost with ``budget``."""
    if budget <= 0:
        raise ValueError("inference budget must be positive")
    size = len(data)
    session = _Session(
        config, data, order if order is not None else range(size), backend,
        logprobs_wanted, parallelism,
    )
    session.top_up(range(size), config.count)
    avg = sum(cost(session.responses[p].usage, config.model) for p in range(size)) / size
    if avg > budget:
        return TrialResult(False, 0.0, avg, session.spent, size, size)
    return TrialResult(True, _mean_utility(session, utility, size), avg, session.spent, size, size)
