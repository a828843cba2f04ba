"""Design plans: per-stratum sample and arm sizes plus balance thresholds."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .population import Population
from .statkit import chi2_cdf, chi2_quantile

__all__ = [
    "PlanError",
    "DesignPlan",
    "CheckedPlan",
    "calibrate_threshold",
    "default_max_attempts",
    "validate_plan",
    "plan_from_dict",
    "load_plan",
]


class PlanError(ValueError):
    """A design plan violates a size or threshold constraint."""


def calibrate_threshold(J: int, p: float) -> float:
    """Asymptotic threshold a with P(chi2_J <= a) = p; p = 1 gives inf."""
    if J < 1:
        raise PlanError(f"covariate dimension must be >= 1, got {J}")
    if not 0.0 < p <= 1.0:
        raise PlanError(f"acceptance level must be in (0, 1], got {p}")
    if p == 1.0:
        return math.inf
    return chi2_quantile(J, p)


def default_max_attempts(p: float) -> int:
    # the small offset keeps 50 / 0.01 = 5000.000000000001 from rounding up
    return 1 if p >= 1.0 else int(math.ceil(50.0 / p - 1e-9))


@dataclass(frozen=True)
class DesignPlan:
    """Per-stratum sizes n_[k], n_[k]1 and the two balance criteria.

    Each stage takes either a threshold (``a_S``/``a_T``) or an acceptance
    level (``p_S``/``p_T``).  Leaving both unset means no rejection.
    """

    n: tuple[int, ...]
    n1: tuple[int, ...]
    a_S: float | None = None
    a_T: float | None = None
    p_S: float | None = None
    p_T: float | None = None
    max_attempts: int | None = None
    min_arm: int = 2

    def __post_init__(self):
        object.__setattr__(self, "n", tuple(int(v) for v in np.atleast_1d(self.n)))
        object.__setattr__(self, "n1", tuple(int(v) for v in np.atleast_1d(self.n1)))

    @classmethod
    def proportional(cls, pop: Population, f: float, e: float = 0.5, **kw) -> "DesignPlan":
        """n_[k] = round(f N_[k]) and n_[k]1 = round(e n_[k]) in every stratum."""
        n = np.rint(f * pop.sizes).astype(int)
        n1 = np.rint(e * n).astype(int)
        return cls(tuple(n), tuple(n1), **kw)

    @classmethod
    def from_fractions(cls, pop: Population, f_k, e_k, **kw) -> "DesignPlan":
        n = np.rint(np.asarray(f_k) * pop.sizes).astype(int)
        n1 = np.rint(np.asarray(e_k) * n).astype(int)
        return cls(tuple(n), tuple(n1), **kw)

    def with_thresholds(self, **kw) -> "DesignPlan":
        vals = {k: getattr(self, k) for k in ("n", "n1", "a_S", "a_T", "p_S", "p_T", "max_attempts", "min_arm")}
        vals.update(kw)
        return DesignPlan(**vals)

    def to_dict(self) -> dict:
        def enc(v):
            return "inf" if isinstance(v, float) and math.isinf(v) else v

        return {
            "n": list(self.n), "n1": list(self.n1), "a_S": enc(self.a_S), "a_T": enc(self.a_T),
            "p_S": self.p_S, "p_T": self.p_T, "max_attempts": self.max_attempts, "min_arm": self.min_arm,
        }


@dataclass(frozen=True)
class CheckedPlan:
    """A plan validated against a population, with derived fractions."""

    N: np.ndarray
    n: np.ndarray
    n1: np.ndarray
    a_S: float
    a_T: float
    source_S: str
    source_T: str
    max_attempts_S: int
    max_attempts_T: int
    J1: int
    J2: int
    weights: np.ndarray = field(repr=False)

    @property
    def K(self) -> int:
        return self.N.size

    @property
    def n0(self) -> np.ndarray:
        return self.n - self.n1

    @property
    def n_total(self) -> int:
        return int(self.n.sum())

    @property
    def f(self) -> float:
        return self.n_total / float(self.N.sum())

    @property
    def f_k(self) -> np.ndarray:
        return self.n / self.N

    @property
    def e1(self) -> np.ndarray:
        return self.n1 / self.n

    @property
    def e0(self) -> np.ndarray:
        return self.n0 / self.n

    @property
    def pi(self) -> np.ndarray:
        return self.n / self.n_total

    @property
    def scale(self) -> np.ndarray:
        """Pi_[k]^2 / pi_[k], the stratum weight in every V block."""
        return self.weights**2 / self.pi

    @property
    def p_S(self) -> float:
        return 1.0 if math.isinf(self.a_S) else chi2_cdf(self.J1, self.a_S)

    @property
    def p_T(self) -> float:
        return 1.0 if math.isinf(self.a_T) else chi2_cdf(self.J2, self.a_T)

    @property
    def design_tag(self) -> str:
        s, t = math.isfinite(self.a_S), math.isfinite(self.a_T)
        return {(False, False): "SRSE", (True, False): "SRSE-S", (False, True): "SRSE-R", (True, True): "SRSRR"}[(s, t)]

    def derived(self) -> dict:
        return {
            "f": self.f, "f_k": self.f_k.tolist(), "e1": self.e1.tolist(), "e0": self.e0.tolist(),
            "pi": self.pi.tolist(), "a_S": self.a_S, "a_T": self.a_T,
            "threshold_source": {"S": self.source_S, "T": self.source_T},
            "asymptotic_acceptance": {"S": self.p_S, "T": self.p_T},
        }


def _resolve(stage: str, a, p, J: int) -> tuple[float, str]:
    if a is not None and p is not None:
        raise PlanError(f"stage {stage}: give either a threshold or an acceptance level, not both")
    if a is not None:
        a = float(a)
        if not a > 0:
            raise PlanError(f"stage {stage}: threshold must be in (0, inf], got {a}")
        if math.isfinite(a) and J == 0:
            raise PlanError(f"stage {stage}: finite threshold but no balance covariates")
        return a, "a"
    if p is not None:
        p = float(p)
        if p < 1.0 and J == 0:
            raise PlanError(f"stage {stage}: acceptance level < 1 but no balance covariates")
        return (math.inf if p == 1.0 else calibrate_threshold(J, p)), "p"
    return math.inf, "none"


def validate_plan(pop: Population, plan: DesignPlan) -> CheckedPlan:
    """Check sizes against ``pop`` and resolve thresholds.

    Requires min_arm <= n_[k]1 <= n_[k] - min_arm and n_[k] <= N_[k].  The
    default ``min_arm = 2`` is what variance estimation needs; enumeration
    studies on tiny populations may lower it to 1.
    """
    n = np.asarray(plan.n, dtype=np.int64)
    n1 = np.asarray(plan.n1, dtype=np.int64)
    if n.size != pop.K or n1.size != pop.K:
        raise PlanError(f"plan covers {n.size} strata, population has {pop.K}")
    if plan.min_arm < 1:
        raise PlanError("min_arm must be >= 1")
    for k in range(pop.K):
        lab = pop.labels[k]
        if n[k] > pop.sizes[k]:
            raise PlanError(f"stratum {lab}: n={n[k]} exceeds N={pop.sizes[k]}")
        if not plan.min_arm <= n1[k] <= n[k] - plan.min_arm:
            raise PlanError(
                f"stratum {lab}: need {plan.min_arm} <= n1 <= n - {plan.min_arm}, got n={n[k]}, n1={n1[k]}"
            )
    a_S, src_S = _resolve("S", plan.a_S, plan.p_S, pop.J1)
    a_T, src_T = _resolve("T", plan.a_T, plan.p_T, pop.J2)
    pS = 1.0 if math.isinf(a_S) else chi2_cdf(pop.J1, a_S)
    pT = 1.0 if math.isinf(a_T) else chi2_cdf(pop.J2, a_T)
    if plan.max_attempts is not None and plan.max_attempts < 1:
        raise PlanError("max_attempts must be positive")
    mS = plan.max_attempts or default_max_attempts(pS)
    mT = plan.max_attempts or default_max_attempts(pT)
    for arr in (n, n1):
        arr.setflags(write=False)
    return CheckedPlan(
        N=pop.sizes.copy(), n=n, n1=n1, a_S=a_S, a_T=a_T, source_S=src_S, source_T=src_T,
        max_attempts_S=mS, max_attempts_T=mT, J1=pop.J1, J2=pop.J2, weights=pop.weights,
    )


PLAN_KEYS = {"schema_version", "n", "n1", "f", "e", "a_S", "a_T", "p_S", "p_T", "max_attempts", "min_arm"}


def _num(v):
    if v is None:
        return None
    if isinstance(v, str):
        if v.strip().lower() in ("inf", "infinity"):
            return math.inf
        raise PlanError(f"expected a number or 'inf', got {v!r}")
    return float(v)


def plan_from_dict(raw: dict, pop: Population | None = None) -> DesignPlan:
    """Build a plan from explicit ``n``/``n1`` lists or proportional ``f``/``e``.

    Thresholds may be written as the string ``"inf"``.
    """
    extra = set(raw) - PLAN_KEYS
    if extra:
        raise PlanError(f"unknown plan keys: {sorted(extra)}")
    if raw.get("schema_version", 1) != 1:
        raise PlanError(f"unsupported plan schema_version {raw['schema_version']}")
    kw = {k: _num(raw.get(k)) for k in ("a_S", "a_T", "p_S", "p_T")}
    if raw.get("max_attempts") is not None:
        kw["max_attempts"] = int(raw["max_attempts"])
    if raw.get("min_arm") is not None:
        kw["min_arm"] = int(raw["min_arm"])
    if "n" in raw or "n1" in raw:
        if "f" in raw or "e" in raw:
            raise PlanError("give either n/n1 or f/e, not both")
        if "n" not in raw or "n1" not in raw:
            raise PlanError("plan needs both n and n1")
        return DesignPlan(tuple(raw["n"]), tuple(raw["n1"]), **kw)
    if "f" in raw:
        if pop is None:
            raise PlanError("a proportional plan (f, e) needs the population")
        return DesignPlan.proportional(pop, float(raw["f"]), float(raw.get("e", 0.5)), **kw)
    raise PlanError("plan needs n/n1 or f")


def load_plan(path, pop: Population | None = None) -> DesignPlan:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise PlanError(f"plan file is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise PlanError("plan file must hold a JSON object")
    return plan_from_dict(raw, pop)
