from __future__ import annotations

import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecotune.backend import MockBackend, MockModelProfile, TransportError
from ecotune.evaluator import (
    PRE_CHECK,
    Evaluate,
    Prune,
    TrialError,
    TrialResult,
    ValidityRegistry,
    evaluate_pruned,
    evaluate_simple,
    max_valid_n,
    min_invalid_n,
    pre_check,
    registry_key,
    rho,
)
from ecotune.metrics import UtilityBinding
from ecotune.space import Configuration

from support import arithmetic_set, constant_cost_backend, constant_utility


def cfg(n=1, mt=500, **kw) -> Configuration:
    return Configuration("mock-1", "{prompt}", mt, temperature=kw.pop("temperature", 0.7), n=n, **kw)


class Recording:
    """Backend wrapper that keeps every request and reply."""

    def __init__(self, backend):
        self.backend = backend
        self.identity = backend.identity
        self.requests = []
        self.replies = []

    def complete(self, request):
        reply = self.backend.complete(request)
        self.requests.append(request)
        self.replies.append(reply)
        return reply


# -- registry queries ----------------------------------------------------------


def test_registry_examples():
    reg = ValidityRegistry()
    x = cfg(mt=500)
    assert max_valid_n(x, reg) == 1
    assert min_invalid_n(x, reg) == math.inf
    reg.add("valid", registry_key(x), 8, 600)
    assert max_valid_n(x, reg) == 8
    reg.add("valid", registry_key(x), 16, 400)
    assert max_valid_n(x, reg) == 8
    reg.add("invalid", registry_key(x), 32, 800)
    assert min_invalid_n(x, reg) == math.inf
    reg.add("invalid", registry_key(x), 32, 400)
    assert min_invalid_n(x, reg) == 32


def test_registry_is_keyed_by_model_prompt_and_stop():
    reg = ValidityRegistry()
    reg.add("invalid", registry_key(cfg(stop=("\n",))), 2, 100)
    assert min_invalid_n(cfg(mt=500), reg) == math.inf
    assert min_invalid_n(cfg(mt=500, stop=("\n",)), reg) == 2
    # stop comparison is order-sensitive
    reg.add("invalid", registry_key(cfg(stop=("a", "b"))), 3, 100)
    assert min_invalid_n(cfg(mt=500, stop=("b", "a")), reg) == math.inf


# -- rho ---------------------------------------------------------------------------


def test_rho_examples():
    assert rho(1, 20) == 1.0
    assert rho(20, 20) == 0.0
    assert rho(11, 20) == pytest.approx((1 - 11 / 20) * (1 + 1 / 11), abs=1e-15)


@given(st.integers(2, 2000).flatmap(lambda d: st.tuples(st.integers(1, d), st.just(d))))
def test_rho_in_unit_interval(pair):
    k, d = pair
    assert 0.0 <= rho(k, d) <= 1.0


def test_rho_rejects_out_of_range():
    with pytest.raises(ValueError):
        rho(0, 5)
    with pytest.raises(ValueError):
        rho(6, 5)


# -- pre_check -------------------------------------------------------------------


def test_pre_check_cases():
    reg = ValidityRegistry()
    assert pre_check(cfg(n=16), reg) == Evaluate(1)
    key = registry_key(cfg())
    reg.add("invalid", key, 8, 100)
    assert pre_check(cfg(n=10), reg) == Prune()
    reg.add("valid", key, 4, 900)
    assert pre_check(cfg(n=3), reg) == Evaluate(3)
    assert pre_check(cfg(n=6), reg) == Evaluate(4)
    assert pre_check(cfg(n=8), reg) == Prune()


def test_pre_check_prune_records_invalid_and_spends_nothing():
    reg = ValidityRegistry()
    reg.add("invalid", registry_key(cfg()), 4, 500)
    backend = Recording(constant_cost_backend(10))
    r = evaluate_pruned(cfg(n=5), arithmetic_set(4), 100, reg, backend, constant_utility(1))
    assert not r.valid and r.prune_stage == PRE_CHECK and r.tokens_spent == 0
    assert r.avg_cost is None
    assert backend.requests == []
    assert (5, 500) in reg.invalid[registry_key(cfg())]
    assert r.registry_updates == (("invalid", 5, 500),)


# -- evaluate_pruned ----------------------------------------------------------------


def test_cost_twice_budget_prunes_at_first_example():
    r = evaluate_pruned(
        cfg(n=8), arithmetic_set(20), 50, ValidityRegistry(), constant_cost_backend(100),
        constant_utility(1),
    )
    assert not r.valid and r.utility == 0
    assert r.prune_stage == (1, 1) and r.examples_touched == 1


def test_single_count_walks_all_subset_sizes():
    backend = Recording(constant_cost_backend(10))
    reg = ValidityRegistry()
    r = evaluate_pruned(cfg(n=1), arithmetic_set(10), 100, reg, backend, constant_utility(0.5))
    assert r.valid and r.utility == 0.5 and r.avg_cost == 10
    assert r.examples_touched == 10
    assert len(backend.requests) == 10
    assert all(req.n == 1 for req in backend.requests)
    assert (1, 500) in reg.valid[registry_key(cfg())]


def test_boundary_cost_is_valid_and_one_over_is_invalid():
    data = arithmetic_set(6)
    for evaluate in ("pruned", "simple"):
        ok = _eval(evaluate, cfg(n=4), data, 40, constant_cost_backend(10))
        over = _eval(evaluate, cfg(n=4), data, 39, constant_cost_backend(10))
        assert ok.valid and ok.avg_cost == 40
        assert not over.valid and over.utility == 0


def _eval(kind, config, data, budget, backend, utility=constant_utility(1.0)):
    if kind == "simple":
        return evaluate_simple(config, data, budget, backend, utility)
    return evaluate_pruned(config, data, budget, ValidityRegistry(), backend, utility)


def test_responses_are_reused_across_doublings():
    backend = Recording(constant_cost_backend(5))
    data = arithmetic_set(8)
    r = evaluate_pruned(cfg(n=8), data, 1000, ValidityRegistry(), backend, constant_utility(1))
    assert r.valid
    per_example = {}
    for req in backend.requests:
        per_example.setdefault(req.rendered_prompt, []).append((req.offset, req.n))
    for windows in per_example.values():
        # windows tile [0, N) without overlap
        covered = 0
        for offset, n in sorted(windows):
            assert offset == covered
            covered += n
        assert covered <= 8


def test_token_conservation_and_response_cap():
    rng = random.Random(3)
    utility = UtilityBinding()
    for i in range(150):
        profile = MockModelProfile(length_scale=rng.randint(5, 80), seed=i)
        backend = Recording(MockBackend(default=profile))
        size = rng.randint(1, 12)
        n = rng.randint(1, 16)
        config = cfg(n=n, mt=rng.randint(5, 120), temperature=rng.random())
        r = evaluate_pruned(
            config, arithmetic_set(size, seed=i), rng.randint(10, 800), ValidityRegistry(),
            backend, utility,
        )
        assert r.tokens_spent == sum(x.usage.total_tokens for x in backend.replies)
        counts = {}
        for req in backend.requests:
            counts[req.rendered_prompt] = counts.get(req.rendered_prompt, 0) + req.n
        assert all(c <= n for c in counts.values())
        if r.valid:
            assert r.examples_touched == size
            assert r.avg_cost <= 800
        else:
            assert r.utility == 0


def test_pre_check_never_prunes_simple_valid_with_exact_registry():
    # registry built only from full-set measurements on a monotone backend
    rng = random.Random(8)
    data = arithmetic_set(6)
    profile = MockModelProfile(length_scale=40)
    budget = 120
    reg = ValidityRegistry()
    key = registry_key(cfg())
    for _ in range(60):
        c = cfg(n=rng.randint(1, 12), mt=rng.choice([20, 40, 80, 160]))
        r = evaluate_simple(c, data, budget, MockBackend(default=profile), constant_utility(1))
        reg.add("valid" if r.valid else "invalid", key, c.n, c.max_tokens)
    for _ in range(200):
        c = cfg(n=rng.randint(1, 12), mt=rng.choice([20, 40, 80, 160]))
        simple = evaluate_simple(c, data, budget, MockBackend(default=profile), constant_utility(1))
        if simple.valid:
            assert pre_check(c, reg) != Prune()


def test_registry_grows_only():
    reg = ValidityRegistry()
    backend = MockBackend(default=MockModelProfile(length_scale=50))
    seen = 0
    rng = random.Random(1)
    for _ in range(40):
        evaluate_pruned(
            cfg(n=rng.randint(1, 20), mt=rng.choice([30, 60, 120])), arithmetic_set(8), 150, reg,
            backend, constant_utility(1),
        )
        size = sum(len(v) for v in reg.valid.values()) + sum(len(v) for v in reg.invalid.values())
        assert size >= seen
        seen = size


def test_backend_failure_is_operational_error():
    class Broken:
        identity = "broken"

        def __init__(self):
            self.ok = 2

        def complete(self, request):
            if self.ok == 0:
                raise TransportError("down")
            self.ok -= 1
            return constant_cost_backend(7).complete(request)

    with pytest.raises(TrialError) as info:
        evaluate_pruned(cfg(n=1), arithmetic_set(8), 100, ValidityRegistry(), Broken(), constant_utility(1))
    assert info.value.tokens_spent == 14


def test_parallel_requests_match_sequential():
    data = arithmetic_set(12)
    utility = UtilityBinding()
    c = cfg(n=6, mt=200)
    backend = MockBackend(default=MockModelProfile(length_scale=30))
    a = evaluate_pruned(c, data, 400, ValidityRegistry(), backend, utility)
    b = evaluate_pruned(c, data, 400, ValidityRegistry(), backend, utility, parallelism=4)
    assert a == b


def test_best_of_counts_candidates():
    backend = Recording(constant_cost_backend(10))
    c = Configuration("mock-1", "{prompt}", 100, temperature=0.8, n=1, best_of=4)
    r = evaluate_pruned(c, arithmetic_set(4), 40, ValidityRegistry(), backend, constant_utility(1))
    assert r.valid and r.avg_cost == 40
    assert all(req.n == 1 for req in backend.requests)
    assert sum(req.best_of for req in backend.requests) == 16


def test_simple_zero_cost_example():
    class Free:
        identity = "free"

        def complete(self, request):
            from ecotune.backend import ResponseSet

            return ResponseSet(("x",) * request.n)

    r = evaluate_simple(cfg(n=3), arithmetic_set(3), 10, Free(), constant_utility(0.25))
    assert r.valid and r.avg_cost == 0 and r.utility == 0.25


def test_invalid_results_must_have_zero_utility():
    with pytest.raises(ValueError):
        TrialResult(False, 0.3, 10.0, 1, 1, 1)


def test_trial_result_round_trip():
    r = TrialResult(False, 0.0, 12.5, 30, 2, 8, (4, 2), (("valid", 2, 100), ("invalid", 4, 100)))
    assert TrialResult.from_dict(r.to_dict()) == r


def test_utility_outside_unit_interval_is_rejected():
    with pytest.raises(ValueError):
        evaluate_simple(cfg(), arithmetic_set(2), 1000, constant_cost_backend(1), constant_utility(1.5))


def test_non_positive_budget_is_rejected():
    with pytest.raises(ValueError):
        evaluate_pruned(cfg(), arithmetic_set(2), 0, ValidityRegistry(), constant_cost_backend(1),
                        constant_utility(1))


@settings(max_examples=200, deadline=None)
@given(
    size=st.integers(1, 16),
    n=st.integers(1, 8),
    per=st.integers(1, 50),
    budget=st.integers(1, 500),
    seed=st.integers(0, 1000),
)
def test_constant_cost_equivalence_property(size, n, per, budget, seed):
    data = arithmetic_set(size, seed)
    utility = UtilityBinding()
    profile = MockModelProfile(fixed_output_tokens=per, charge_input=False, seed=seed)
    c = cfg(n=n, mt=100)
    a = evaluate_simple(c, data, budget, MockBackend(default=profile), utility)
    b = evaluate_pruned(c, data, budget, ValidityRegistry(), MockBackend(default=profile), utility)
    assert a.valid == b.valid
    if a.valid:
        assert a.utility == b.utility
