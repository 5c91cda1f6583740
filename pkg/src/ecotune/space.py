"""Hyperparameter search space: domains, sampling and local perturbation."""

from __future__ import annotations

import hashlib
import json
import math
import random
import string
from dataclasses import dataclass, field, fields, replace
from typing import Any, Mapping, Sequence, Union

DEFAULT_MODELS = (
    "text-ada-001",
    "text-babbage-001",
    "text-davinci-003",
    "gpt-3.5-turbo",
    "gpt-4",
)

# hyperparameter name -> (kind, lower, upper) used for range checks
_HYPERPARAMETERS: dict[str, tuple[str, float | None, float | None]] = {
    "model": ("str", None, None),
    "prompt": ("str", None, None),
    "max_tokens": ("int", 1, None),
    "temperature": ("float", 0.0, 1.0),
    "top_p": ("float", 0.0, 1.0),
    "n": ("int", 1, None),
    "stop": ("stop", None, None),
    "presence_penalty": ("float", -2.0, 2.0),
    "frequency_penalty": ("float", -2.0, 2.0),
    "best_of": ("int", 1, None),
}
RANDOMNESS_KEYS = ("temperature", "top_p")


# -- domains -----------------------------------------------------------------


@dataclass(frozen=True)
class Constant:
    value: Any


@dataclass(frozen=True)
class Choice:
    values: tuple

    def __init__(self, values: Sequence[Any]):
        object.__setattr__(self, "values", tuple(values))


@dataclass(frozen=True)
class RandInt:
    lo: int
    hi: int


@dataclass(frozen=True)
class LogRandInt:
    lo: int
    hi: int


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float


@dataclass(frozen=True)
class Hierarchical:
    """Exactly one of ``branches`` (each a name -> Domain map) is used per sample."""

    branches: tuple

    def __init__(self, branches: Sequence[Mapping[str, Any]]):
        object.__setattr__(
            self, "branches", tuple(tuple(dict(b).items()) for b in branches)
        )

    def branch(self, i: int) -> dict[str, Any]:
        return dict(self.branches[i])


Domain = Union[Constant, Choice, RandInt, LogRandInt, Uniform, Hierarchical]


def lograndint_value(lo: int, hi: int, u: float) -> int:
    """Map u in [0, 1] onto the log-uniform integer range [lo, hi] (round half up)."""
    x = math.exp(math.log(lo) + u * (math.log(hi) - math.log(lo)))
    return min(hi, max(lo, math.floor(x + 0.5)))


def _freeze(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


def _thaw(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_thaw(v) for v in value]
    return value


# -- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class Configuration:
    """One concrete point of the search space."""

    model: str
    prompt: str
    max_tokens: int
    temperature: float | None = None
    top_p: float | None = None
    n: int = 1
    stop: tuple[str, ...] | None = None
    presence_penalty: float = 0.0
    frequency_penalty: float = 0.0
    best_of: int = 1

    def __post_init__(self) -> None:
        if isinstance(self.stop, list):
            object.__setattr__(self, "stop", tuple(self.stop))

    @property
    def randomness(self) -> float:
        return self.temperature if self.temperature is not None else self.top_p

    @property
    def count_field(self) -> str:
        """The response-count hyperparameter: ``best_of`` when it is in use, else ``n``."""
        return "best_of" if self.best_of > 1 else "n"

    @property
    def count(self) -> int:
        return self.best_of if self.best_of > 1 else self.n

    def with_count(self, count: int) -> Configuration:
        return replace(self, **{self.count_field: count})

    def to_dict(self) -> dict[str, Any]:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["stop"] = list(self.stop) if self.stop is not None else None
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Configuration:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("stop") is not None:
            d["stop"] = tuple(d["stop"])
        return cls(**d)

    def key(self) -> str:
        """Canonical serialization; equal keys mean byte-identical configurations."""
        return json.dumps(self.to_dict(), sort_keys=True)

    def problems(self) -> list[str]:
        out = []
        if self.max_tokens < 1:
            out.append("max_tokens must be >= 1")
        if self.n < 1:
            out.append("n must be >= 1")
        if self.best_of < 1:
            out.append("best_of must be >= 1")
        if self.best_of > 1 and self.n != 1:
            out.append("best_of > 1 requires n = 1")
        if (self.temperature is None) == (self.top_p is None):
            out.append("exactly one of temperature / top_p must be set")
        for name in ("temperature", "top_p"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                out.append(f"{name} must lie in [0, 1]")
        for name in ("presence_penalty", "frequency_penalty"):
            if not -2.0 <= getattr(self, name) <= 2.0:
                out.append(f"{name} must lie in [-2, 2]")
        return out


_CONFIG_DEFAULTS = {
    "n": 1,
    "stop": None,
    "presence_penalty": 0.0,
    "frequency_penalty": 0.0,
    "best_of": 1,
}


# -- prompt templates --------------------------------------------------------


def template_fields(template: str) -> list[str]:
    """Placeholder names of a ``{field}`` template (``{{`` / ``}}`` are literal braces)."""
    names = []
    for _, name, spec, conv in string.Formatter().parse(template):
        if name is None:
            continue
        if not name.isidentifier() or spec or conv:
            raise ValueError(f"unsupported placeholder {{{name}}} in template {template!r}")
        names.append(name)
    return names


# -- search space ------------------------------------------------------------


@dataclass(frozen=True)
class SearchSpace:
    domains: Mapping[str, Domain] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "domains", dict(self.domains))

    def __getitem__(self, name: str) -> Domain:
        return self.domains[name]

    def __getattr__(self, name: str) -> Domain:
        # attribute-style access to domains, e.g. space.max_tokens
        domains = self.__dict__.get("domains", {})
        if name in domains:
            return domains[name]
        raise AttributeError(name)

    def __hash__(self) -> int:
        return hash(json.dumps(self.to_decl(), sort_keys=True))

    @property
    def fixed_keys(self) -> frozenset[str]:
        return frozenset(k for k, d in self.domains.items() if isinstance(d, Constant))

    @property
    def dimension(self) -> int:
        """Number of independently movable dimensions."""
        d = 0
        for dom in self.domains.values():
            if isinstance(dom, Hierarchical):
                d += len(dom.branches) > 1
                d += max(
                    sum(not _is_fixed(sub) for _, sub in b) for b in dom.branches
                )
            elif not _is_fixed(dom):
                d += 1
        return d

    def leaf_domains(self) -> dict[str, list[Domain]]:
        """Hyperparameter name -> every domain that can produce it."""
        out: dict[str, list[Domain]] = {}
        for name, dom in self.domains.items():
            if isinstance(dom, Hierarchical):
                for branch in dom.branches:
                    for sub_name, sub in branch:
                        out.setdefault(sub_name, []).append(sub)
            else:
                out.setdefault(name, []).append(dom)
        return out

    # declarations use the run-spec vocabulary
    def to_decl(self) -> dict[str, Any]:
        return {name: domain_to_decl(d) for name, d in self.domains.items()}

    @classmethod
    def from_decl(cls, decl: Mapping[str, Any]) -> SearchSpace:
        return cls({name: domain_from_decl(v) for name, v in decl.items()})


def _is_fixed(dom: Domain) -> bool:
    if isinstance(dom, Constant):
        return True
    if isinstance(dom, Choice):
        return len(dom.values) == 1
    if isinstance(dom, (RandInt, LogRandInt, Uniform)):
        return dom.lo == dom.hi
    return False


def domain_to_decl(dom: Domain) -> Any:
    if isinstance(dom, Constant):
        return {"constant": _thaw(dom.value)}
    if isinstance(dom, Choice):
        return {"choice": [_thaw(v) for v in dom.values]}
    if isinstance(dom, RandInt):
        return {"randint": [dom.lo, dom.hi]}
    if isinstance(dom, LogRandInt):
        return {"lograndint": [dom.lo, dom.hi]}
    if isinstance(dom, Uniform):
        return {"uniform": [dom.lo, dom.hi]}
    if isinstance(dom, Hierarchical):
        return {
            "one_of": [
                {k: domain_to_decl(v) for k, v in branch} for branch in dom.branches
            ]
        }
    raise TypeError(f"not a domain: {dom!r}")


def domain_from_decl(value: Any) -> Domain:
    """Parse one declaration entry; bare values are constants."""
    if isinstance(value, dict) and len(value) == 1:
        (kind, arg), = value.items()
        if kind == "constant":
            return Constant(_freeze(arg))
        if kind == "choice":
            return Choice([_freeze(v) for v in arg])
        if kind in ("randint", "lograndint", "uniform"):
            if not isinstance(arg, (list, tuple)) or len(arg) != 2:
                raise ValueError(f"{kind} expects [lo, hi], got {arg!r}")
            lo, hi = arg
            if kind == "uniform":
                return Uniform(float(lo), float(hi))
            if int(lo) != lo or int(hi) != hi:
                raise ValueError(f"{kind} bounds must be integers, got {arg!r}")
            cls = RandInt if kind == "randint" else LogRandInt
            return cls(int(lo), int(hi))
        if kind == "one_of":
            return Hierarchical(
                [{k: domain_from_decl(v) for k, v in b.items()} for b in arg]
            )
    if isinstance(value, dict):
        raise ValueError(f"cannot parse domain declaration {value!r}")
    return Constant(_freeze(value))


def default_space() -> SearchSpace:
    return SearchSpace(
        {
            "model": Choice(DEFAULT_MODELS),
            "prompt": Choice(["{prompt}"]),
            "max_tokens": LogRandInt(100, 1000),
            "temperature_or_top_p": Hierarchical(
                [{"temperature": Uniform(0.0, 1.0)}, {"top_p": Uniform(0.0, 1.0)}]
            ),
            "n": RandInt(1, 100),
            "stop": Constant(None),
            "presence_penalty": Constant(0.0),
            "frequency_penalty": Constant(0.0),
            "best_of": Constant(1),
        }
    )


# -- validation --------------------------------------------------------------


def _domain_violations(name: str, dom: Domain, nested: bool) -> list[str]:
    out = []
    if isinstance(dom, Hierarchical):
        if nested:
            out.append(f"{name}: Hierarchical domains cannot be nested")
        if not dom.branches:
            out.append(f"{name}: Hierarchical needs at least one branch")
        for i, branch in enumerate(dom.branches):
            if not branch:
                out.append(f"{name}: Hierarchical branch {i} is empty")
            for sub_name, sub in branch:
                out += _domain_violations(f"{name}[{i}].{sub_name}", sub, True)
                out += _range_violations(sub_name, sub, f"{name}[{i}].{sub_name}")
        return out
    if isinstance(dom, Choice) and not dom.values:
        out.append(f"{name}: Choice list must be non-empty")
    if isinstance(dom, (RandInt, LogRandInt, Uniform)) and dom.lo > dom.hi:
        out.append(f"{name}: lower bound {dom.lo} exceeds upper bound {dom.hi}")
    if isinstance(dom, LogRandInt) and dom.lo < 1:
        out.append(f"{name}: LogRandInt lower bound must be >= 1")
    return out


def _domain_values(dom: Domain) -> list[Any] | None:
    if isinstance(dom, Constant):
        return [dom.value]
    if isinstance(dom, Choice):
        return list(dom.values)
    if isinstance(dom, (RandInt, LogRandInt, Uniform)):
        return [dom.lo, dom.hi]
    return None


def _range_violations(hp: str, dom: Domain, label: str) -> list[str]:
    if hp not in _HYPERPARAMETERS:
        return [f"{label}: unknown hyperparameter {hp!r}"]
    kind, lo, hi = _HYPERPARAMETERS[hp]
    values = _domain_values(dom)
    if values is None:
        return []
    out = []
    if kind == "int" and isinstance(dom, Uniform):
        out.append(f"{label}: integer hyperparameter cannot use a uniform domain")
    for v in values:
        if kind == "str":
            if not isinstance(v, str):
                out.append(f"{label}: value {v!r} must be a string")
        elif kind == "stop":
            if v is not None and not (
                isinstance(v, (tuple, list)) and all(isinstance(s, str) for s in v)
            ):
                out.append(f"{label}: stop must be null or a list of strings")
        else:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                out.append(f"{label}: value {v!r} must be numeric")
                continue
            if kind == "int" and int(v) != v:
                out.append(f"{label}: value {v!r} must be an integer")
            if lo is not None and v < lo:
                out.append(f"{label}: value {v!r} below minimum {lo}")
            if hi is not None and v > hi:
                out.append(f"{label}: value {v!r} above maximum {hi}")
    return out


def validate_space(space: SearchSpace, data_fields: Sequence[str] | None = None) -> list[str]:
    """Return every violated invariant; an empty list means the space is usable."""
    out: list[str] = []
    for name, dom in space.domains.items():
        out += _domain_violations(name, dom, nested=False)
        if not isinstance(dom, Hierarchical):
            out += _range_violations(name, dom, name)
    leaves = space.leaf_domains()
    for required in ("model", "prompt", "max_tokens"):
        if required not in leaves:
            out.append(f"missing required hyperparameter {required!r}")
    for dom in space.domains.values():
        if isinstance(dom, Hierarchical):
            for branch in dom.branches:
                for sub_name, _ in branch:
                    if sub_name in space.domains:
                        out.append(
                            f"{sub_name} is declared both at top level and inside a hierarchical domain"
                        )

    top_random = [k for k in RANDOMNESS_KEYS if k in space.domains]
    if len(top_random) == 2:
        if any(not _is_fixed(space.domains[k]) for k in top_random):
            out.append(
                "temperature and top_p cannot both be searched: they must not be "
                "altered together; use a hierarchical one_of domain instead"
            )
        else:
            out.append("temperature and top_p cannot both be set; exactly one is used")
    for dom in space.domains.values():
        if isinstance(dom, Hierarchical):
            for i, branch in enumerate(dom.branches):
                keys = dict(branch)
                if all(k in keys for k in RANDOMNESS_KEYS):
                    out.append(f"hierarchical branch {i} sets both temperature and top_p")

    n_multi = "n" in leaves and any(_max_value(d) > 1 for d in leaves["n"])
    best_of_multi = "best_of" in leaves and any(_max_value(d) > 1 for d in leaves["best_of"])
    if n_multi and best_of_multi:
        out.append("n and best_of cannot both exceed 1; fix n to 1 when searching best_of")

    if data_fields is not None:
        for dom in leaves.get("prompt", []):
            for template in _domain_values(dom) or []:
                if not isinstance(template, str):
                    continue
                try:
                    names = template_fields(template)
                except ValueError as e:
                    out.append(str(e))
                    continue
                for ph in names:
                    if ph not in data_fields:
                        out.append(
                            f"prompt placeholder {{{ph}}} does not name a tuning-data field"
                        )
    return out


def _max_value(dom: Domain) -> float:
    values = _domain_values(dom) or [1]
    return max(v for v in values if isinstance(v, (int, float)))


def check_config(config: Configuration, space: SearchSpace) -> list[str]:
    """Violations of ``config`` against its own invariants and ``space``'s domains."""
    out = config.problems()
    values = config.to_dict()
    for name, dom in space.domains.items():
        if isinstance(dom, Hierarchical):
            idx = branch_of(config, dom)
            if idx is None:
                out.append(f"{name}: configuration matches no hierarchical branch")
            continue
        if not _contains(dom, values[name]):
            out.append(f"{name}: value {values[name]!r} outside {domain_to_decl(dom)}")
    return out


def _contains(dom: Domain, value: Any) -> bool:
    if isinstance(dom, Constant):
        return _freeze(value) == dom.value
    if isinstance(dom, Choice):
        return _freeze(value) in dom.values
    if value is None:
        return False
    if isinstance(dom, (RandInt, LogRandInt)):
        return int(value) == value and dom.lo <= value <= dom.hi
    if isinstance(dom, Uniform):
        return dom.lo <= value <= dom.hi
    return False


def branch_of(config: Configuration, dom: Hierarchical) -> int | None:
    """Index of the hierarchical branch that produced ``config``."""
    values = config.to_dict()
    for i, branch in enumerate(dom.branches):
        if all(values.get(k) is not None and _contains(sub, values[k]) for k, sub in branch):
            return i
    return None


# -- sampling ----------------------------------------------------------------


def derive_rng(seed: int, *keys: Any) -> random.Random:
    """Independent random stream for (seed, keys): stream i never depends on stream j."""
    material = json.dumps([seed, *keys]).encode()
    return random.Random(int.from_bytes(hashlib.sha256(material).digest()[:8], "big"))


def sample_domain(dom: Domain, rng: random.Random) -> Any:
    if isinstance(dom, Constant):
        return dom.value
    if isinstance(dom, Choice):
        return dom.values[rng.randrange(len(dom.values))]
    if isinstance(dom, RandInt):
        return rng.randint(dom.lo, dom.hi)
    if isinstance(dom, LogRandInt):
        return lograndint_value(dom.lo, dom.hi, rng.random())
    if isinstance(dom, Uniform):
        return rng.uniform(dom.lo, dom.hi)
    raise TypeError(f"cannot sample {dom!r} directly")


def _assemble(values: dict[str, Any]) -> Configuration:
    merged = {**_CONFIG_DEFAULTS, **values}
    if merged.get("temperature") is None and merged.get("top_p") is None:
        merged["temperature"] = 1.0
    return Configuration.from_dict(
        {k: _thaw(v) if k == "stop" else v for k, v in merged.items()}
    )


def sample(space: SearchSpace, rng: random.Random) -> Configuration:
    values: dict[str, Any] = {}
    for name, dom in space.domains.items():
        if isinstance(dom, Hierarchical):
            branch = dom.branch(rng.randrange(len(dom.branches)))
            for sub_name, sub in branch.items():
                values[sub_name] = sample_domain(sub, rng)
        else:
            values[name] = sample_domain(dom, rng)
    return _assemble(values)


def _move(dom: Domain, value: Any, step: float, rng: random.Random) -> Any:
    if _is_fixed(dom) or step <= 0:
        return value
    if isinstance(dom, Choice):
        if rng.random() < min(step, 1.0):
            return dom.values[rng.randrange(len(dom.values))]
        return value
    sign = 1 if rng.random() < 0.5 else -1
    if isinstance(dom, RandInt):
        moved = value + sign * round(step * (dom.hi - dom.lo))
        return min(dom.hi, max(dom.lo, moved))
    if isinstance(dom, LogRandInt):
        span = math.log(dom.hi) - math.log(dom.lo)
        x = math.exp(math.log(value) + sign * step * span)
        return min(dom.hi, max(dom.lo, math.floor(x + 0.5)))
    if isinstance(dom, Uniform):
        return min(dom.hi, max(dom.lo, value + sign * step * (dom.hi - dom.lo)))
    raise TypeError(f"cannot perturb {dom!r}")


def perturb(
    config: Configuration, space: SearchSpace, step: float, rng: random.Random
) -> Configuration:
    """Random neighbour of ``config`` at distance ``step`` (a fraction of each range)."""
    if step <= 0:
        return config
    current = config.to_dict()
    values: dict[str, Any] = {}
    for name, dom in space.domains.items():
        if isinstance(dom, Hierarchical):
            idx = branch_of(config, dom)
            resample = idx is None or (
                len(dom.branches) > 1 and rng.random() < min(step, 1.0)
            )
            if resample:
                idx = rng.randrange(len(dom.branches))
                for sub_name, sub in dom.branch(idx).items():
                    values[sub_name] = sample_domain(sub, rng)
            else:
                for sub_name, sub in dom.branch(idx).items():
                    values[sub_name] = _move(sub, current[sub_name], step, rng)
        else:
            values[name] = _move(dom, _freeze(current[name]), step, rng)
    return _assemble(values)
