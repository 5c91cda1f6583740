"""Budget-constrained hyperparameter optimization for text-generation inference."""

from .data import TuningSet
from .driver import OptimizationReport, RunSpec, Tuner, resume, run
from .evaluator import (
    TrialResult,
    ValidityRegistry,
    evaluate_pruned,
    evaluate_simple,
    max_valid_n,
    min_invalid_n,
    pre_check,
    rho,
)
from .metrics import CostLedger, UtilityBinding
from .searcher import Searcher, SearcherSettings
from .space import Configuration, SearchSpace, default_space, perturb, sample, validate_space

__all__ = [
    "Configuration",
    "CostLedger",
    "OptimizationReport",
    "RunSpec",
    "SearchSpace",
    "Searcher",
    "SearcherSettings",
    "TrialResult",
    "Tuner",
    "TuningSet",
    "UtilityBinding",
    "ValidityRegistry",
    "default_space",
    "evaluate_pruned",
    "evaluate_simple",
    "max_valid_n",
    "min_invalid_n",
    "perturb",
    "pre_check",
    "resume",
    "rho",
    "run",
    "sample",
    "validate_space",
]
