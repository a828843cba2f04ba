"""Difference-in-means estimation, variance components and confidence
intervals under stratified rejective sampling and rerandomization.

Scaling convention: every variance block describes sqrt(n) times the
estimator error, so an interval half-width is quantile / sqrt(n).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from statistics import NormalDist

import numpy as np

from .design import Assignment, SampleSelection
from .plan import CheckedPlan, validate_plan
from .population import Population, PopulationError, group_moments, stratum_moments
from .statkit import RngStream, SpdMatrix, TruncSpec, _as_generator, nu, sample_trunc_first_coord

__all__ = [
    "NotSupportedError",
    "ExperimentData",
    "observe",
    "from_analysis",
    "diff_in_means",
    "oracle_covariance",
    "OracleSummary",
    "oracle_summary",
    "VarianceComponents",
    "variance_components",
    "ConvolutionBank",
    "ConvolutionSpec",
    "convolution_quantile",
    "EstimateReport",
    "ci_unadjusted",
    "variance_gain_vs_crse",
    "srsrr_asymptotic_variance",
    "nu_factors",
    "clamp_weights",
    "estimated_V_tt",
    "REPORT_FIELDS",
]


class NotSupportedError(ValueError):
    """Strata with a single unit in an arm need other variance estimators."""


# ---------------------------------------------------------------------------
# observed data
# ---------------------------------------------------------------------------


@dataclass
class ExperimentData:
    """One realized experiment: sample, assignment and observed outcomes.

    ``y`` is aligned with ``selection.idx``.  Arm statistics are computed
    lazily and cached, so the same object can feed the unadjusted and the
    adjusted analyses.
    """

    pop: Population
    selection: SampleSelection
    assignment: Assignment
    y: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        K = self.pop.K
        codes = self.selection.codes
        t = np.asarray(self.assignment.t)
        self.n_k = np.bincount(codes, minlength=K).astype(float)
        self.n1_k = np.bincount(codes, weights=t, minlength=K)
        self.n0_k = self.n_k - self.n1_k

    @property
    def n(self) -> int:
        return int(self.n_k.sum())

    @property
    def f_k(self) -> np.ndarray:
        return self.n_k / self.pop.sizes

    @property
    def e1(self) -> np.ndarray:
        return self.n1_k / self.n_k

    @property
    def e0(self) -> np.ndarray:
        return self.n0_k / self.n_k

    @property
    def scale(self) -> np.ndarray:
        """Pi_[k]^2 / pi_[k]."""
        return self.pop.weights**2 * self.n / self.n_k

    def arm_stats(self, blocks: tuple[str, ...] = ()):
        """Per-(stratum, arm) means and covariances of [y, blocks...].

        Returns (means (K, 2, p), cov (K, 2, p, p)); arm index 1 is treated.
        """
        key = ("arm",) + tuple(blocks)
        if key not in self._cache:
            K = self.pop.K
            cols = [self.y[:, None]] + [self.pop.block(b)[self.selection.idx] for b in blocks]
            data = np.column_stack(cols)
            codes = 2 * self.selection.codes + np.asarray(self.assignment.t, dtype=np.int64)
            _, means, cov = group_moments(codes, 2 * K, data)
            p = data.shape[1]
            self._cache[key] = (means.reshape(K, 2, p), cov.reshape(K, 2, p, p))
        return self._cache[key]

    def sampled_cov(self, block: str) -> np.ndarray:
        """S^2_[k]B|S over sampled units (divisor n_k - 1)."""
        key = ("S", block)
        if key not in self._cache:
            xs = self.pop.block(block)[self.selection.idx]
            self._cache[key] = group_moments(self.selection.codes, self.pop.K, xs)[2]
        return self._cache[key]

    def population_cov(self, block: str) -> np.ndarray:
        key = ("P", block)
        if key not in self._cache:
            self._cache[key] = group_moments(self.pop.strata, self.pop.K, self.pop.block(block))[2]
        return self._cache[key]

    def tau_block(self, block: str) -> np.ndarray:
        """sum_k Pi_k (Bbar_k1 - Bbar_k0) for an assignment-stage block."""
        key = ("tau", block)
        if key not in self._cache:
            codes = self.selection.codes
            t = np.asarray(self.assignment.t)
            w = self.pop.weights
            coef = np.where(t == 1, (w / self.n1_k)[codes], -(w / self.n0_k)[codes])
            self._cache[key] = coef @ self.pop.block(block)[self.selection.idx]
        return self._cache[key]

    def delta_block(self, block: str) -> np.ndarray:
        """sum_k Pi_k Bbar_kS - Bbar for a sampling-stage block."""
        key = ("delta", block)
        if key not in self._cache:
            codes = self.selection.codes
            coef = (self.pop.weights / self.n_k)[codes]
            B = self.pop.block(block)
            self._cache[key] = coef @ B[self.selection.idx] - B.mean(axis=0)
        return self._cache[key]


def observe(pop: Population, selection: SampleSelection, assignment: Assignment) -> ExperimentData:
    """Reveal Y(T) for sampled units of an oracle population."""
    if not pop.has_oracle:
        raise PopulationError("observe() needs potential outcomes")
    idx = selection.idx
    y = np.where(np.asarray(assignment.t) == 1, pop.y1[idx], pop.y0[idx])
    return ExperimentData(pop, selection, assignment, y)


def from_analysis(pop: Population) -> ExperimentData:
    """Rebuild sample, assignment and outcomes from z, t, y columns."""
    if pop.z is None:
        raise PopulationError("population has no z/t/y columns")
    parts = [m[pop.z[m] == 1] for m in pop.members]
    idx = np.concatenate(parts)
    offsets = np.concatenate([[0], np.cumsum([p.size for p in parts])]).astype(np.int64)
    sel = SampleSelection(z=pop.z.copy(), idx=idx, offsets=offsets, m_s=math.nan, attempts=0)
    asg = Assignment(t=pop.t[idx].astype(np.int8), m_t=math.nan, attempts=0)
    return ExperimentData(pop, sel, asg, pop.y[idx])


def _check_arms(data: ExperimentData, need: int):
    small = np.minimum(data.n1_k, data.n0_k)
    if np.any(small < 1):
        k = int(np.argmin(small))
        raise ValueError(f"stratum {data.pop.labels[k]} has an empty arm")
    if need > 1 and np.any(small < need):
        k = int(np.argmin(small))
        raise NotSupportedError(
            f"stratum {data.pop.labels[k]} has a single unit in an arm; variance estimation "
            "needs >= 2 treated and >= 2 control units per stratum (finely stratified "
            "designs need a different variance estimator)"
        )


def diff_in_means(data: ExperimentData) -> tuple[float, np.ndarray]:
    """tau_hat = sum_k Pi_k (Ybar_k1 - Ybar_k0) and the stratum estimates."""
    _check_arms(data, 1)
    codes = data.selection.codes
    t = np.asarray(data.assignment.t)
    K = data.pop.K
    s1 = np.bincount(codes, weights=data.y * (t == 1), minlength=K)
    s0 = np.bincount(codes, weights=data.y * (t == 0), minlength=K)
    tau_k = s1 / data.n1_k - s0 / data.n0_k
    return float(data.pop.weights @ tau_k), tau_k


# ---------------------------------------------------------------------------
# oracle covariance
# ---------------------------------------------------------------------------


def _as_checked(pop: Population, plan) -> CheckedPlan:
    return plan if isinstance(plan, CheckedPlan) else validate_plan(pop, plan)


def oracle_covariance(pop: Population, plan, sample_block: str = "w", assign_block: str = "x") -> np.ndarray:
    """Covariance of sqrt(n)(tau_hat - tau, tau_X, delta_W) under SRSE.

    Ordered (tau, assignment block, sampling block).  Passing
    ``sample_block="e", assign_block="c"`` gives the analysis-stage analogue.
    """
    P = _as_checked(pop, plan)
    M = stratum_moments(pop, "oracle")
    e1, e0, fk, sc = P.e1, P.e0, P.f_k, P.scale
    JX = pop.block(assign_block).shape[1]
    JW = pop.block(sample_block).shape[1]
    d = 1 + JX + JW
    V = np.zeros((d, d))
    V[0, 0] = sc @ (M.S2_1 / e1 + M.S2_0 / e0 - fk * M.S2_tau)
    if JX:
        tx = np.einsum("k,kj->j", sc, M.covy(assign_block, "1") / e1[:, None] + M.covy(assign_block, "0") / e0[:, None])
        V[0, 1:1 + JX] = V[1:1 + JX, 0] = tx
        V[1:1 + JX, 1:1 + JX] = np.einsum("k,kij->ij", sc / (e1 * e0), M.cov(assign_block))
    if JW:
        tw = np.einsum("k,kj->j", sc * (1.0 - fk), M.covy(sample_block, "tau"))
        V[0, 1 + JX:] = V[1 + JX:, 0] = tw
        V[1 + JX:, 1 + JX:] = np.einsum("k,kij->ij", sc * (1.0 - fk), M.cov(sample_block))
    return V


@dataclass(frozen=True)
class OracleSummary:
    V: np.ndarray
    V_tt: float
    R2_W: float
    R2_X: float
    J1: int
    J2: int


def _r2(V: np.ndarray, block: slice) -> float:
    v = V[0, block]
    if v.size == 0 or V[0, 0] <= 0:
        return 0.0
    return SpdMatrix(V[block, block]).quad(v) / V[0, 0]


def oracle_summary(pop: Population, plan, sample_block: str = "w", assign_block: str = "x") -> OracleSummary:
    """V together with the population squared multiple correlations."""
    V = oracle_covariance(pop, plan, sample_block, assign_block)
    JX = pop.block(assign_block).shape[1]
    r2x = _r2(V, slice(1, 1 + JX))
    r2w = _r2(V, slice(1 + JX, V.shape[0]))
    return OracleSummary(V=V, V_tt=float(V[0, 0]), R2_W=r2w, R2_X=r2x, J1=V.shape[0] - 1 - JX, J2=JX)


# ---------------------------------------------------------------------------
# estimated components
# ---------------------------------------------------------------------------


@dataclass
class VarianceComponents:
    """Plug-in variance blocks and squared multiple correlations.

    ``weights`` are the convolution weights actually used: (normal, W, X).
    When R2_W + R2_X > 1 the normal weight is set to 0, the two truncated
    weights are rescaled to sum to 1 and ``clamped`` is set.
    """

    V_tt: float
    V_XX: np.ndarray
    V_Xt: np.ndarray
    V_Wt: np.ndarray
    V_WW: np.ndarray
    R2_W: float
    R2_X: float
    n: int
    J1: int
    J2: int
    a_S: float = math.inf
    a_T: float = math.inf
    clamped: bool = False
    degenerate: bool = False
    weights: tuple[float, float, float] = (1.0, 0.0, 0.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, np.ndarray):
                d[k] = v.tolist()
        d["weights"] = list(self.weights)
        return d


def _assign_stage(data: ExperimentData, block: str, V_tt: float):
    """(V_BB, V_Bt, R2) for an assignment-stage block (X or C)."""
    J = data.pop.block(block).shape[1]
    if J == 0:
        return np.zeros((0, 0)), np.zeros(0), 0.0
    means, cov = data.arm_stats((block,))
    s1 = cov[:, 1, 1:, 0]
    s0 = cov[:, 0, 1:, 0]
    sc = data.scale
    V_Bt = np.einsum("k,kj->j", sc, s1 / data.e1[:, None] + s0 / data.e0[:, None])
    V_BB = np.einsum("k,kij->ij", sc / (data.e1 * data.e0), data.sampled_cov(block))
    r2 = SpdMatrix(V_BB).quad(V_Bt) / V_tt if V_tt > 0 else math.nan
    return V_BB, V_Bt, r2


def _sample_stage(data: ExperimentData, block: str, V_tt: float):
    """(V_BB, V_Bt, R2) for a sampling-stage block (W or E); V_BB from the population."""
    J = data.pop.block(block).shape[1]
    if J == 0:
        return np.zeros((0, 0)), np.zeros(0), 0.0
    means, cov = data.arm_stats((block,))
    s1 = cov[:, 1, 1:, 0]
    s0 = cov[:, 0, 1:, 0]
    c = data.scale * (1.0 - data.f_k)
    V_Bt = np.einsum("k,kj->j", c, s1 - s0)
    V_BB = np.einsum("k,kij->ij", c, data.population_cov(block))
    r2 = SpdMatrix(V_BB).quad(V_Bt) / V_tt if V_tt > 0 else math.nan
    return V_BB, V_Bt, r2


def estimated_V_tt(data: ExperimentData) -> float:
    means, cov = data.arm_stats(())
    s1, s0 = cov[:, 1, 0, 0], cov[:, 0, 0, 0]
    return float(data.scale @ (s1 / data.e1 + s0 / data.e0))


def clamp_weights(r2_a: float, r2_b: float) -> tuple[tuple[float, float, float], bool]:
    """Convolution weights (normal, a, b) with the over-one clamping rule."""
    r2_a, r2_b = max(r2_a, 0.0), max(r2_b, 0.0)
    total = r2_a + r2_b
    if total > 1.0:
        return (0.0, r2_a / total, r2_b / total), True
    return (1.0 - total, r2_a, r2_b), False


def variance_components(data: ExperimentData, a_S: float = math.inf, a_T: float = math.inf) -> VarianceComponents:
    """Conservative plug-in estimates of V_tt, V_XX, V_Xt, V_Wt plus V_WW.

    V_Xt carries the Pi^2/pi stratum weight like every other block.
    """
    _check_arms(data, 2)
    V_tt = estimated_V_tt(data)
    degenerate = not V_tt > 0
    V_XX, V_Xt, r2x = _assign_stage(data, "x", V_tt)
    V_WW, V_Wt, r2w = _sample_stage(data, "w", V_tt)
    if degenerate:
        weights, clamped = (1.0, 0.0, 0.0), False
        r2w = r2x = math.nan
    else:
        weights, clamped = clamp_weights(r2w, r2x)
    return VarianceComponents(
        V_tt=V_tt, V_XX=V_XX, V_Xt=V_Xt, V_Wt=V_Wt, V_WW=V_WW, R2_W=r2w, R2_X=r2x,
        n=data.n, J1=data.pop.J1, J2=data.pop.J2, a_S=a_S, a_T=a_T,
        clamped=clamped, degenerate=degenerate, weights=weights,
    )


# ---------------------------------------------------------------------------
# convolution quantile
# ---------------------------------------------------------------------------


class ConvolutionBank:
    """Standardized draws (eps, L_{J1,aS}, L_{J2,aT}) reused across quantiles.

    Reusing one bank for many intervals (common random numbers) keeps a
    simulation study cheap; each call to ``quantile`` is a linear
    combination plus one selection.
    """

    def __init__(self, J1: int, a_S: float, J2: int, a_T: float, draws: int, rng):
        gen = _as_generator(rng.child(0) if isinstance(rng, RngStream) else rng)
        self.specs = (TruncSpec(max(J1, 1), a_S), TruncSpec(max(J2, 1), a_T))
        self.draws = int(draws)
        self.eps = gen.standard_normal(self.draws)
        self.L1 = sample_trunc_first_coord(self.specs[0], gen, self.draws)
        self.L2 = sample_trunc_first_coord(self.specs[1], gen, self.draws)

    def quantile(self, weights, xi: float) -> tuple[float, float]:
        """Quantile of the unit-scale convolution and its order-statistic SE."""
        w0, w1, w2 = (math.sqrt(max(w, 0.0)) for w in weights)
        comb = w0 * self.eps
        if w1:
            comb = comb + w1 * self.L1
        if w2:
            comb = comb + w2 * self.L2
        return _quantile_with_se(comb, xi)


def _quantile_with_se(x: np.ndarray, xi: float) -> tuple[float, float]:
    M = x.size
    h = max(int(math.sqrt(M)), 1)
    pos = xi * (M - 1)
    lo_i = max(int(math.floor(pos)) - h, 0)
    hi_i = min(int(math.floor(pos)) + 1 + h, M - 1)
    kth = sorted({lo_i, int(math.floor(pos)), min(int(math.floor(pos)) + 1, M - 1), hi_i})
    part = np.partition(x, kth)
    i = int(math.floor(pos))
    frac = pos - i
    q = part[i] + frac * (part[min(i + 1, M - 1)] - part[i])  # type 7
    spread = part[hi_i] - part[lo_i]
    density = (hi_i - lo_i) / (M * spread) if spread > 0 else math.inf
    se = math.sqrt(xi * (1.0 - xi) / M) / density
    return float(q), float(se)


@dataclass
class ConvolutionSpec:
    """Inputs of the distribution whose quantiles set the interval."""

    scale: float
    weights: tuple[float, float, float]
    trunc: tuple[TruncSpec, TruncSpec]
    mc_draws: int = 2_000_000
    rng: object = None
    bank: ConvolutionBank | None = None

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        if any(v < 0 for v in w) or sum(w) > 1.0 + 1e-12:
            raise ValueError(f"invalid convolution weights {w}")
        self.weights = w
        if not self.scale >= 0:
            raise ValueError("scale must be nonnegative")

    @property
    def is_normal(self) -> bool:
        _, w1, w2 = self.weights
        return (w1 == 0 or math.isinf(self.trunc[0].a)) and (w2 == 0 or math.isinf(self.trunc[1].a))


def convolution_quantile(spec: ConvolutionSpec, xi: float) -> tuple[float, float]:
    """xi-quantile of V^{1/2}(sqrt(w0) eps + sqrt(w1) L1 + sqrt(w2) L2).

    Returns (quantile, Monte Carlo SE).  Without effective truncation the
    distribution is exactly normal and the quantile is computed exactly.
    """
    if not 0.0 < xi < 1.0:
        raise ValueError("xi must lie in (0, 1)")
    root = math.sqrt(spec.scale)
    if spec.is_normal or root == 0.0:
        total = sum(spec.weights)
        return root * math.sqrt(total) * NormalDist().inv_cdf(xi), 0.0
    bank = spec.bank
    if bank is None:
        J1, J2 = spec.trunc[0].J, spec.trunc[1].J
        rng = spec.rng if spec.rng is not None else RngStream(0)
        bank = ConvolutionBank(J1, spec.trunc[0].a, J2, spec.trunc[1].a, spec.mc_draws, rng)
    q, se = bank.quantile(spec.weights, xi)
    return root * q, root * se


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

REPORT_FIELDS = [
    "method", "design", "tau_hat", "ci_lower", "ci_upper", "alpha", "n", "V_tt",
    "R2_1", "R2_2", "quantile", "quantile_se", "clamped", "degenerate",
]


@dataclass
class EstimateReport:
    """Point estimate and interval with the inputs that produced them."""

    tau_hat: float
    tau_k: np.ndarray
    ci_lower: float
    ci_upper: float
    alpha: float
    n: int
    method: str
    design: str
    quantile: float
    quantile_se: float
    components: dict
    clamped: bool = False
    degenerate: bool = False
    notes: list = field(default_factory=list)

    @property
    def length(self) -> float:
        return self.ci_upper - self.ci_lower

    def covers(self, tau: float) -> bool:
        return self.ci_lower <= tau <= self.ci_upper

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tau_k"] = np.asarray(self.tau_k).tolist()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default)

    def csv_row(self) -> list:
        c = self.components
        r1 = c.get("R2_W", c.get("R2_E"))
        r2 = c.get("R2_X", c.get("R2_C"))
        return [self.method, self.design, repr(self.tau_hat), repr(self.ci_lower), repr(self.ci_upper),
                self.alpha, self.n, repr(c.get("V_tt")), repr(r1), repr(r2), repr(self.quantile),
                repr(self.quantile_se), int(self.clamped), int(self.degenerate)]


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serializable: {type(o)}")


def ci_unadjusted(
    data: ExperimentData,
    alpha: float = 0.05,
    a_S: float = math.inf,
    a_T: float = math.inf,
    design: str = "SRSRR",
    mc_draws: int = 2_000_000,
    rng=None,
    bank: ConvolutionBank | None = None,
    components: VarianceComponents | None = None,
) -> EstimateReport:
    """tau_hat -+ nu_{1-alpha/2} / sqrt(n) from the estimated convolution."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    tau_hat, tau_k = diff_in_means(data)
    vc = components or variance_components(data, a_S, a_T)
    spec = ConvolutionSpec(
        scale=max(vc.V_tt, 0.0), weights=vc.weights,
        trunc=(TruncSpec(max(vc.J1, 1), a_S if vc.J1 else math.inf), TruncSpec(max(vc.J2, 1), a_T if vc.J2 else math.inf)),
        mc_draws=mc_draws, rng=rng, bank=bank,
    )
    q, se = convolution_quantile(spec, 1.0 - alpha / 2.0)
    half = q / math.sqrt(data.n)
    notes = []
    if vc.clamped:
        notes.append("R2_W + R2_X exceeded 1; normal weight clamped to 0")
    if vc.degenerate:
        notes.append("estimated V_tt is zero; interval is degenerate")
    return EstimateReport(
        tau_hat=tau_hat, tau_k=tau_k, ci_lower=tau_hat - half, ci_upper=tau_hat + half, alpha=alpha,
        n=data.n, method="unadjusted", design=design, quantile=q, quantile_se=se,
        components=vc.to_dict(), clamped=vc.clamped, degenerate=vc.degenerate, notes=notes,
    )


# ---------------------------------------------------------------------------
# efficiency comparisons
# ---------------------------------------------------------------------------


def variance_gain_vs_crse(pop: Population, plan) -> dict:
    """V_tt,C - V_tt split into between- and within-strata terms.

    Needs equal sampling fractions and treated proportions in all strata.
    """
    P = _as_checked(pop, plan)
    if not (np.allclose(P.f_k, P.f_k[0], rtol=0, atol=1e-12) and np.allclose(P.e1, P.e1[0], rtol=0, atol=1e-12)):
        raise ValueError("variance gain decomposition needs equal f_[k] and e_[k]1 across strata")
    M = stratum_moments(pop, "oracle")
    e1, e0, f = float(P.e1[0]), float(P.e0[0]), float(P.f_k[0])
    N = pop.N
    Pi = pop.weights
    y1bar, y0bar = pop.y1.mean(), pop.y0.mean()
    dev1 = M.means["y1"] - y1bar
    dev0 = M.means["y0"] - y0bar
    tau_k = M.means["y1"] - M.means["y0"]
    d = (math.sqrt(e0 / e1) * dev1 + math.sqrt(e1 / e0) * dev0) ** 2 + (1.0 - f) * (tau_k - pop.tau) ** 2
    V_k = M.S2_1 / e1 + M.S2_0 / e0 - f * M.S2_tau
    between = N / (N - 1.0) * float(Pi @ d)
    within = float((1.0 - Pi) @ V_k) / (N - 1.0)
    return {"between": between, "within": within, "total": between - within, "d": d}


def srsrr_asymptotic_variance(V_tt: float, R2_W: float, R2_X: float, nu_W: float, nu_X: float) -> dict:
    """Asymptotic variance under SRSRR and its percentage reduction."""
    loss = (1.0 - nu_W) * R2_W + (1.0 - nu_X) * R2_X
    return {"variance": V_tt * (1.0 - loss), "reduction_pct": 100.0 * loss}


def nu_factors(J1: int, a_S: float, J2: int, a_T: float) -> tuple[float, float]:
    return (nu(J1, a_S) if J1 else 1.0, nu(J2, a_T) if J2 else 1.0)
