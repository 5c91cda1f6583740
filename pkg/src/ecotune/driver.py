"""Optimization loop, run-spec parsing, append-only trial log and resume."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import yaml

from .backend import CachedBackend, HttpBackend, MockBackend, MockModelProfile, ResponseCache
from .data import TuningSet
from .evaluator import (
    BOUND_WIDTH,
    PRE_CHECK,
    TrialError,
    TrialResult,
    ValidityRegistry,
    evaluate_pruned,
    evaluate_simple,
    registry_key,
)
from .metrics import (
    CommandChecker,
    CostLedger,
    ExactMatchChecker,
    PriceTable,
    UtilityBinding,
    token_cost,
)
from .searcher import Searcher, SearcherSettings
from .space import Configuration, SearchSpace, check_config, default_space, derive_rng, validate_space

logger = logging.getLogger(__name__)

LOG_VERSION = 1
# consecutive proposals that repeat an evaluated configuration before a finite space counts as exhausted
DUPLICATE_LIMIT = 3


class SpecError(ValueError):
    pass


class ResumeMismatch(SpecError):
    pass


@dataclass
class RunSpec:
    space: SearchSpace
    data: TuningSet
    utility: Callable
    budget_inference: float
    budget_optimization: float
    backend: Any
    evaluator: str = "pruned"
    searcher: SearcherSettings = field(default_factory=SearcherSettings)
    seed: int = 0
    parallelism: int = 1
    bound_width: float = BOUND_WIDTH
    max_trials: int | None = None
    prices: PriceTable | None = None

    def problems(self) -> list[str]:
        out = validate_space(self.space, self.data.fields)
        if self.budget_inference <= 0:
            out.append("inference budget must be positive")
        if self.budget_optimization < self.budget_inference:
            out.append("optimization budget must be at least the inference budget")
        if self.evaluator not in ("pruned", "simple"):
            out.append(f"unknown evaluator {self.evaluator!r}")
        if self.parallelism < 1:
            out.append("parallelism must be >= 1")
        if self.bound_width < 0:
            out.append("bound_width must be non-negative")
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise SpecError("invalid run spec:\n  " + "\n  ".join(problems))

    @property
    def logprobs_wanted(self) -> bool:
        return bool(getattr(self.utility, "logprobs_wanted", False))

    def cost_fn(self):
        return self.prices.cost if self.prices is not None else token_cost

    def fingerprint(self) -> dict[str, Any]:
        """Everything a resumed run must share with the run that wrote the log."""
        return {
            "space": self.space.to_decl(),
            "data": self.data.fingerprint(),
            "budget_inference": self.budget_inference,
            "budget_optimization": self.budget_optimization,
            "evaluator": self.evaluator,
            "searcher": asdict(self.searcher),
            "seed": self.seed,
            "bound_width": self.bound_width,
        }

    @classmethod
    def from_file(cls, path: str | os.PathLike, **overrides) -> RunSpec:
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8"))
        except (OSError, yaml.YAMLError) as e:
            raise SpecError(f"cannot read run spec {path}: {e}") from e
        if not isinstance(raw, dict):
            raise SpecError("run spec must be a mapping")
        return cls.from_dict(raw, base_dir=path.parent, **overrides)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any], base_dir: str | os.PathLike = ".", **overrides) -> RunSpec:
        base = Path(base_dir)
        try:
            space = SearchSpace.from_decl(raw["space"]) if "space" in raw else None
            if space is None:
                space = default_space()
            data_path = base / raw["data"]
            if not data_path.exists():
                raise SpecError(f"tuning data {data_path} does not exist")
            data = TuningSet.from_jsonl(data_path)
            budget = raw["budget"]
            spec = cls(
                space=space,
                data=data,
                utility=_utility_from(raw.get("utility", {})),
                budget_inference=float(budget["inference"]),
                budget_optimization=float(budget["optimization"]),
                backend=_backend_from(raw.get("backend", {"type": "mock"}), base),
                evaluator=raw.get("evaluator", "pruned"),
                searcher=SearcherSettings(**raw.get("searcher", {})),
                seed=int(raw.get("seed", 0)),
                parallelism=int(raw.get("parallelism", 1)),
                bound_width=float(raw.get("bound_width", BOUND_WIDTH)),
                max_trials=raw.get("max_trials"),
                prices=PriceTable({m: tuple(p) for m, p in raw["prices"].items()})
                if raw.get("prices") else None,
            )
        except SpecError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise SpecError(f"invalid run spec: {e!r}") from e
        for k, v in overrides.items():
            if v is not None:
                setattr(spec, k, v)
        spec.validate()
        return spec


def _utility_from(raw: Mapping[str, Any]) -> UtilityBinding:
    checker_raw = raw.get("checker", {"exact_match": {}})
    if "command" in checker_raw:
        command = checker_raw["command"]
        if isinstance(command, str):
            command = [command]
        checker = CommandChecker(
            tuple(command) + tuple(checker_raw.get("args", ())),
            float(checker_raw.get("timeout", 30.0)),
        )
    else:
        checker = ExactMatchChecker(**(checker_raw.get("exact_match") or {}))
    return UtilityBinding(
        mode=raw.get("mode", "best_of"),
        checker=checker,
        extract=raw.get("extract"),
        answer_field=raw.get("answer_field", "answer"),
    )


def _backend_from(raw: Mapping[str, Any], base: Path):
    kind = raw.get("type", "mock")
    if kind == "mock":
        profiles = {m: MockModelProfile.from_dict(p) for m, p in raw.get("profiles", {}).items()}
        backend = MockBackend(profiles, MockModelProfile.from_dict(raw.get("default_profile", {})))
    elif kind == "http":
        backend = HttpBackend(
            raw["base_url"],
            chat_models=raw.get("chat_models", ()),
            timeout=float(raw.get("timeout", 60.0)),
        )
    else:
        raise SpecError(f"unknown backend type {kind!r}")
    if raw.get("cache_dir"):
        backend = CachedBackend(backend, ResponseCache(base / raw["cache_dir"]))
    return backend


# -- report ------------------------------------------------------------------


@dataclass
class OptimizationReport:
    best_config: Configuration | None
    best_result: TrialResult | None
    best_trial: int | None
    trials: int
    tokens_spent: int
    pre_check_prunes: int
    bound_prunes: dict[str, int]
    stop_reason: str
    cheapest_invalid: dict[str, Any] | None = None

    @property
    def succeeded(self) -> bool:
        return self.best_config is not None

    def to_dict(self) -> dict[str, Any]:
        return {
            "best_config": self.best_config.to_dict() if self.best_config else None,
            "best_result": self.best_result.to_dict() if self.best_result else None,
            "best_trial": self.best_trial,
            "trials": self.trials,
            "tokens_spent": self.tokens_spent,
            "pre_check_prunes": self.pre_check_prunes,
            "bound_prunes": self.bound_prunes,
            "stop_reason": self.stop_reason,
            "cheapest_invalid": self.cheapest_invalid,
        }


def stage_label(stage) -> str:
    return f"n={stage[0]},k={stage[1]}"


# -- trial log ---------------------------------------------------------------


def _dumps(record: Mapping[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, ensure_ascii=False)


def read_log(path: str | os.PathLike) -> tuple[dict | None, list[dict]]:
    header, trials = None, []
    p = Path(path)
    if not p.exists():
        return None, []
    with p.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: unreadable log record: {e}") from e
            if record.get("kind") == "header":
                header = record
            elif record.get("kind") == "trial":
                trials.append(record)
    return header, trials


def _diff(a: Mapping[str, Any], b: Mapping[str, Any]) -> list[str]:
    return [
        f"{k}: log has {a.get(k)!r}, spec has {b.get(k)!r}"
        for k in sorted(set(a) | set(b))
        if a.get(k) != b.get(k)
    ]


# -- the loop ----------------------------------------------------------------


class Tuner:
    """One optimization run; state can be rebuilt from a trial log."""

    def __init__(self, spec: RunSpec, log_path: str | os.PathLike | None = None):
        spec.validate()
        self.spec = spec
        self.log_path = Path(log_path) if log_path else None
        self.searcher = Searcher(spec.space, spec.searcher)
        self.registry = ValidityRegistry()
        self.ledger = CostLedger(spec.budget_optimization)
        self.trials: list[dict] = []
        self.proposals = 0
        self.stop_reason = ""

    # log handling
    def _write(self, record: Mapping[str, Any]) -> None:
        if self.log_path is None:
            return
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        with self.log_path.open("a", encoding="utf-8") as fh:
            fh.write(_dumps(record) + "\n")

    def _header(self) -> dict[str, Any]:
        return {"kind": "header", "version": LOG_VERSION, "spec": self.spec.fingerprint()}

    def _next_proposal(self) -> Configuration | None:
        """Propose until something new comes up; None once the space looks exhausted."""
        for _ in range(DUPLICATE_LIMIT):
            rng = derive_rng(self.spec.seed, "propose", self.proposals)
            self.proposals += 1
            config = self.searcher.propose(rng)
            if not self.searcher.last_duplicate:
                return config
        return None

    def _apply(self, config: Configuration, result: TrialResult) -> None:
        key = registry_key(config)
        for verdict, n, max_tokens in result.registry_updates:
            self.registry.add(verdict, key, n, max_tokens)

    def replay(self, records: list[dict]) -> None:
        for record in records:
            config = self._next_proposal()
            logged = Configuration.from_dict(record["config"])
            if config is None or config.key() != logged.key():
                raise ResumeMismatch(
                    f"trial {record['trial']}: searcher proposes {config} but the log has {logged}"
                )
            result = TrialResult.from_dict(record["result"])
            self._apply(config, result)
            self.ledger.charge(result.tokens_spent)
            self.searcher.report(config, result)
            self.trials.append(record)

    def evaluate(self, config: Configuration, trial: int) -> TrialResult:
        spec = self.spec
        order = list(range(len(spec.data)))
        derive_rng(spec.seed, "order", trial).shuffle(order)
        common = dict(
            parallelism=spec.parallelism,
            order=order,
            cost=spec.cost_fn(),
            logprobs_wanted=spec.logprobs_wanted,
        )
        if spec.evaluator == "simple":
            return evaluate_simple(
                config, spec.data, spec.budget_inference, spec.backend, spec.utility, **common
            )
        return evaluate_pruned(
            config, spec.data, spec.budget_inference, self.registry, spec.backend,
            spec.utility, bound_width=spec.bound_width, **common,
        )

    def run(self) -> OptimizationReport:
        if self.log_path is not None and not self.trials and not (
            self.log_path.exists() and self.log_path.stat().st_size
        ):
            self._write(self._header())
        while True:
            if self.ledger.exhausted:
                self.stop_reason = "optimization budget exhausted"
                break
            if self.spec.max_trials is not None and len(self.trials) >= self.spec.max_trials:
                self.stop_reason = "trial limit reached"
                break
            config = self._next_proposal()
            if config is None:
                self.stop_reason = "search space exhausted"
                break
            problems = check_config(config, self.spec.space)
            if problems:
                raise AssertionError(f"searcher proposed an out-of-space config: {problems}")
            index = len(self.trials)
            started = time.perf_counter()
            try:
                result = self.evaluate(config, index)
            except TrialError as e:
                self.ledger.charge(e.tokens_spent)
                raise
            self.ledger.charge(result.tokens_spent)
            self.searcher.report(config, result)
            record = {
                "kind": "trial",
                "trial": index,
                "proposal": self.proposals - 1,
                "config": config.to_dict(),
                "result": result.to_dict(),
                "cumulative_tokens": int(self.ledger.total),
                "wall_time": round(time.perf_counter() - started, 6),
            }
            self.trials.append(record)
            self._write(record)
            logger.info(
                "trial %d: valid=%s utility=%.4f cost=%s tokens=%d",
                index, result.valid, result.utility, result.avg_cost, result.tokens_spent,
            )
        return self.report()

    def report(self) -> OptimizationReport:
        return summarize(self.trials, self.stop_reason)


def summarize(trials: list[dict], stop_reason: str = "") -> OptimizationReport:
    """Report over logged trial records (best = brute-force argmax over valid trials)."""
    best = None
    pre, bound = 0, {}
    cheapest = None
    for rec in trials:
        r = rec["result"]
        stage = r["prune_stage"]
        if stage == PRE_CHECK:
            pre += 1
        elif stage is not None:
            bound[stage_label(stage)] = bound.get(stage_label(stage), 0) + 1
        if r["valid"]:
            rank = (-r["utility"], r["avg_cost"], rec["trial"])
            if best is None or rank < best[0]:
                best = (rank, rec)
        elif r["avg_cost"] is not None and (cheapest is None or r["avg_cost"] < cheapest["avg_cost"]):
            cheapest = {"trial": rec["trial"], "avg_cost": r["avg_cost"], "config": rec["config"]}
    tokens = trials[-1]["cumulative_tokens"] if trials else 0
    if best is None:
        return OptimizationReport(None, None, None, len(trials), tokens, pre, bound,
                                  stop_reason, cheapest)
    rec = best[1]
    return OptimizationReport(
        Configuration.from_dict(rec["config"]),
        TrialResult.from_dict(rec["result"]),
        rec["trial"],
        len(trials),
        tokens,
        pre,
        bound,
        stop_reason,
        cheapest,
    )


def run(spec: RunSpec, log_path: str | os.PathLike | None = None) -> OptimizationReport:
    return Tuner(spec, log_path).run()


def resume(log_path: str | os.PathLike, spec: RunSpec) -> OptimizationReport:
    """Rebuild searcher, registry and ledger from ``log_path`` and keep appending to it."""
    header, records = read_log(log_path)
    tuner = Tuner(spec, log_path)
    if header is not None:
        diff = _diff(header["spec"], spec.fingerprint())
        if diff:
            raise ResumeMismatch("run spec does not match the log:\n  " + "\n  ".join(diff))
    elif records:
        raise ResumeMismatch("log has trial records but no header")
    tuner.replay(records)
    return tuner.run()


# -- log reporting -----------------------------------------------------------


def pruning_savings(record: Mapping[str, Any]) -> float | None:
    """Tokens a full evaluation would have cost beyond what a bound-pruned trial spent.

    A full evaluation is estimated as every example at the target count, each at
    the per-example cost observed at the prune point scaled to the target count.
    """
    r = record["result"]
    stage = r["prune_stage"]
    if stage is None or stage == PRE_CHECK or r["avg_cost"] is None:
        return None
    n, _ = stage
    target = Configuration.from_dict(record["config"]).count
    return r["dataset_size"] * target * r["avg_cost"] / n - r["tokens_spent"]


def log_summary(path: str | os.PathLike) -> dict[str, Any]:
    _, trials = read_log(path)
    report = summarize(trials)
    rows = []
    savings = 0.0
    for rec in trials:
        r = rec["result"]
        s = pruning_savings(rec)
        savings += s or 0.0
        rows.append({
            "trial": rec["trial"],
            "valid": r["valid"],
            "utility": r["utility"],
            "avg_cost": r["avg_cost"],
            "tokens_spent": r["tokens_spent"],
            "prune_stage": r["prune_stage"],
            "estimated_savings": s,
        })
    return {
        "trials": rows,
        "best": {"trial": report.best_trial, "config": report.best_config.to_dict(),
                 "result": report.best_result.to_dict()} if report.succeeded else None,
        "tokens_spent": report.tokens_spent,
        "pre_check_prunes": report.pre_check_prunes,
        "bound_prunes": report.bound_prunes,
        "estimated_savings": savings,
    }


def format_summary(summary: Mapping[str, Any]) -> str:
    lines = [f"{'trial':>5}  {'valid':>5}  {'utility':>8}  {'avg_cost':>10}  {'tokens':>9}  stage"]
    for row in summary["trials"]:
        cost = "-" if row["avg_cost"] is None else f"{row['avg_cost']:.1f}"
        stage = row["prune_stage"]
        stage = "-" if stage is None else (stage if isinstance(stage, str) else stage_label(stage))
        lines.append(
            f"{row['trial']:>5}  {str(row['valid']):>5}  {row['utility']:>8.4f}  "
            f"{cost:>10}  {row['tokens_spent']:>9}  {stage}"
        )
    best = summary["best"]
    if best is None:
        lines.append("best: none valid")
    else:
        lines.append(
            f"best: trial {best['trial']} utility={best['result']['utility']:.4f} "
            f"avg_cost={best['result']['avg_cost']:.1f} config={json.dumps(best['config'])}"
        )
    lines.append(
        f"tokens spent: {summary['tokens_spent']}  pre-check prunes: {summary['pre_check_prunes']}  "
        f"bound prunes: {sum(summary['bound_prunes'].values())}  "
        f"estimated pruning savings: {summary['estimated_savings']:.0f} tokens"
    )
    return "\n".join(lines)
