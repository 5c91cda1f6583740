"""Global sampling blended with prioritized randomized direct-search threads.

Global proposals are uniform samples from the space. A good global result
starts a local thread that perturbs its incumbent with a shrinking step. Each
call to ``propose`` picks the proposer (a thread or the global sampler) with
the highest optimistic score: best utility so far plus an exploration bonus.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

from .evaluator import TrialResult
from .space import Configuration, SearchSpace, perturb, sample

GLOBAL = "global"


class NoValidTrial(LookupError):
    """No reported trial met the inference budget."""


@dataclass
class SearcherSettings:
    step_init: float = 0.5
    step_min: float = 1 / 64
    failure_factor: int = 2
    exploration: float = 0.5
    max_retries: int = 20

    def __post_init__(self) -> None:
        if not 0 < self.step_init <= 1:
            raise ValueError("step_init must lie in (0, 1]")
        if self.step_min <= 0:
            raise ValueError("step_min must be positive")


@dataclass
class LocalThread:
    incumbent: Configuration
    incumbent_utility: float
    step: float
    created_at_trial: int
    consecutive_failures: int = 0
    trials: int = 0
    step_history: list[float] = field(default_factory=list)

    def converged(self, step_min: float) -> bool:
        return self.step < step_min


@dataclass
class Trial:
    index: int
    config: Configuration
    result: TrialResult
    source: int | str


class Searcher:
    def __init__(self, space: SearchSpace, settings: SearcherSettings | None = None):
        self.space = space
        self.settings = settings or SearcherSettings()
        self.history: list[Trial] = []
        self.threads: list[LocalThread] = []
        self.trial_counter = 0
        self.global_trials = 0
        self.global_best = 0.0
        self.last_duplicate = False
        self._seen: set[str] = set()
        self._pending: dict[str, int | str] = {}

    @property
    def failure_threshold(self) -> int:
        return self.settings.failure_factor * max(1, self.space.dimension)

    def _bonus(self, trials: int) -> float:
        return self.settings.exploration * math.sqrt(
            math.log(self.trial_counter + 1) / (trials + 1)
        )

    def prioritize(self) -> int | str:
        """Index of the thread to draw from, or ``"global"``; ties favour global, then lower index."""
        choice: int | str = GLOBAL
        best = self.global_best + self._bonus(self.global_trials)
        for i, t in enumerate(self.threads):
            if t.converged(self.settings.step_min):
                continue
            score = t.incumbent_utility + self._bonus(t.trials)
            if score > best:
                choice, best = i, score
        return choice

    def _fail(self, thread: LocalThread) -> None:
        thread.consecutive_failures += 1
        if thread.consecutive_failures >= self.failure_threshold:
            thread.step /= 2
            thread.step_history.append(thread.step)
            thread.consecutive_failures = 0

    def propose(self, rng: random.Random) -> Configuration:
        """Next configuration to try; avoids repeats for up to ``max_retries`` draws each."""
        retries = self.settings.max_retries
        self.last_duplicate = False
        source = self.prioritize()
        if source != GLOBAL:
            thread = self.threads[source]
            for _ in range(retries):
                config = perturb(thread.incumbent, self.space, thread.step, rng)
                if config.key() not in self._seen:
                    self._pending[config.key()] = source
                    return config
            # the neighbourhood looks exhausted at this step size
            self._fail(thread)
        config = sample(self.space, rng)
        for _ in range(retries):
            if config.key() not in self._seen:
                break
            config = sample(self.space, rng)
        else:
            self.last_duplicate = True
        self._pending[config.key()] = GLOBAL
        return config

    def report(self, config: Configuration, result: TrialResult) -> None:
        if not result.valid and result.utility != 0:
            raise ValueError("invalid result must carry utility 0")
        if result.valid and not 0.0 <= result.utility <= 1.0:
            raise ValueError("utility must lie in [0, 1]")
        key = config.key()
        source = self._pending.pop(key, GLOBAL)
        self._seen.add(key)
        self.history.append(Trial(self.trial_counter, config, result, source))
        self.trial_counter += 1
        u = result.utility if result.valid else None

        if source == GLOBAL:
            self.global_trials += 1
            if u is not None and u > self.global_best:
                self.global_best = u
            if u is not None:
                live = [
                    t.incumbent_utility for t in self.threads
                    if not t.converged(self.settings.step_min)
                ]
                if not live or u > max(live):
                    self.threads.append(
                        LocalThread(config, u, self.settings.step_init, self.trial_counter - 1)
                    )
            return

        thread = self.threads[source]
        thread.trials += 1
        if u is not None and u > thread.incumbent_utility:
            thread.incumbent = config
            thread.incumbent_utility = u
            thread.consecutive_failures = 0
        else:
            self._fail(thread)

    def best(self) -> Trial:
        """Highest-utility valid trial; ties go to lower average cost, then the earlier trial."""
        valid = [t for t in self.history if t.result.valid]
        if not valid:
            raise NoValidTrial("no valid configuration was found within the inference budget")
        return min(valid, key=lambda t: (-t.result.utility, t.result.avg_cost, t.index))
