"""Monte Carlo studies: the synthetic random-effect population, replication
loops over designs, metric tables and report files.
"""

from __future__ import annotations

import csv
import json
import math
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .adjustment import ci_adjusted, fit_adjustment
from .design import DesignEngine, DesignFailure
from .equivalence import equivalence_probe
from .estimator import ConvolutionBank, ci_unadjusted, observe, variance_components
from .plan import DesignPlan, validate_plan
from .population import Population
from .statkit import RngStream, SingularMatrixError, _as_generator

__all__ = [
    "CASE_LAYOUTS",
    "DESIGNS",
    "ESTIMATORS",
    "CSV_HEADER",
    "DgpSpec",
    "ScenarioConfig",
    "MetricsTable",
    "generate_population",
    "pooled",
    "shrink_population",
    "run_study",
    "emit_report",
    "check_orderings",
    "equivalence_probe",
]

CASE_LAYOUTS = {
    1: (200,) * 40,
    2: (200,) * 20 + (2000,) * 2,
    3: (4000,) * 2,
}
DESIGNS = ("CRSE", "CRSE-S", "CRSE-R", "RRSE", "SRSE", "SRSE-S", "SRSE-R", "SRSRR")
ESTIMATORS = ("unadjusted", "adjusted")
CSV_HEADER = ["case", "design", "estimator", "bias", "sd", "rmse", "ci_length", "coverage", "reps", "failures"]

# (stratified, rejective sampling, rerandomization)
_DESIGN_FLAGS = {
    "CRSE": (False, False, False), "CRSE-S": (False, True, False),
    "CRSE-R": (False, False, True), "RRSE": (False, True, True),
    "SRSE": (True, False, False), "SRSE-S": (True, True, False),
    "SRSE-R": (True, False, True), "SRSRR": (True, True, True),
}


@dataclass(frozen=True)
class DgpSpec:
    """Random-effect outcome model on AR(0.5)-correlated Gaussian covariates."""

    sizes: tuple[int, ...] = CASE_LAYOUTS[1]
    heterogeneous: bool = False
    snr: float = 10.0
    rho: float = 0.5
    n_cov: int = 4

    @classmethod
    def for_case(cls, case: int) -> "DgpSpec":
        if case not in CASE_LAYOUTS:
            raise ValueError(f"unknown case {case}")
        return cls(sizes=CASE_LAYOUTS[case], heterogeneous=(case == 3))


def _t3(gen: np.random.Generator, size) -> np.ndarray:
    return gen.standard_normal(size) / np.sqrt(gen.chisquare(3, size) / 3.0)


def generate_population(spec: DgpSpec, rng) -> Population:
    """Draw covariates, coefficients, stratum effects and noise once.

    W = C1, X = (C1, C2), E = (C1, C2, C3) and the analysis set C is all
    four covariates.  The noise variance is the average of the two signal
    variances divided by ``spec.snr``.
    """
    gen = _as_generator(rng)
    sizes = np.asarray(spec.sizes)
    N, K, J = int(sizes.sum()), sizes.size, spec.n_cov
    lag = np.abs(np.subtract.outer(np.arange(J), np.arange(J)))
    chol = np.linalg.cholesky(spec.rho**lag)
    C = gen.standard_normal((N, J)) @ chol.T
    strata = np.repeat(np.arange(K), sizes)

    def coefs():
        b11 = _t3(gen, J)
        b12 = 0.1 * _t3(gen, J)
        b01 = b11 + _t3(gen, J)
        b02 = b12 + 0.1 * _t3(gen, J)
        return b11, b12, b01, b02

    D = _t3(gen, K)
    shared = None if spec.heterogeneous else coefs()
    sig1, sig0 = np.empty(N), np.empty(N)
    for k in range(K):
        b11, b12, b01, b02 = coefs() if spec.heterogeneous else shared
        m = strata == k
        sig1[m] = C[m] @ b11 + np.exp(C[m] @ b12) + D[k]
        sig0[m] = C[m] @ b01 + np.exp(C[m] @ b02) + D[k]
    sigma2 = 0.5 * (sig1.var() + sig0.var()) / spec.snr
    y1 = sig1 + math.sqrt(sigma2) * gen.standard_normal(N)
    y0 = sig0 + math.sqrt(sigma2) * gen.standard_normal(N)
    return Population(
        strata, w=C[:, :1], x=C[:, :2], e=C[:, :3], c=C, y1=y1, y0=y0,
        labels=[str(k + 1) for k in range(K)],
    )


def pooled(pop: Population) -> Population:
    """The same units as one stratum (for the non-stratified designs)."""
    return Population(
        np.zeros(pop.N, dtype=np.int64), pop.w, pop.x, pop.e, pop.c, pop.y1, pop.y0,
        unit_ids=pop.unit_ids, labels=["all"], check_nesting=False,
    )


def shrink_population(pop: Population, lam: float) -> Population:
    """Shrink Y(0) toward its mean by ``lam`` and keep every unit's effect.

    Y*(0) = Ybar(0) + lam (Y(0) - Ybar(0)); Y*(1) = Y*(0) + tau_i.
    """
    if not pop.has_oracle:
        raise ValueError("shrinkage needs potential outcomes")
    y0 = pop.y0.mean() + lam * (pop.y0 - pop.y0.mean())
    y1 = y0 + (pop.y1 - pop.y0)
    return pop.with_outcomes(y1, y0)


@dataclass(frozen=True)
class ScenarioConfig:
    case: int | str = 1
    sizes: tuple[int, ...] | None = None
    heterogeneous: bool = False
    f: float = 0.1
    e: float = 0.5
    p_S: float = 0.01
    p_T: float = 0.01
    reps: int = 2000
    seed: int = 2024
    dgp_seed: int = 0
    designs: tuple[str, ...] = ("SRSE", "SRSE-S", "SRSE-R", "SRSRR")
    estimators: tuple[str, ...] = ESTIMATORS
    alpha: float = 0.05
    mc_draws: int = 200_000
    threads: int = 1
    keep_samples: bool = True

    def __post_init__(self):
        for d in self.designs:
            if d not in _DESIGN_FLAGS:
                raise ValueError(f"unknown design {d!r}")
        for est in self.estimators:
            if est not in ESTIMATORS:
                raise ValueError(f"unknown estimator {est!r}")
        if self.reps < 1:
            raise ValueError("reps must be positive")

    def dgp(self) -> DgpSpec:
        if self.sizes is not None:
            return DgpSpec(sizes=tuple(self.sizes), heterogeneous=self.heterogeneous)
        return DgpSpec.for_case(int(self.case))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class MetricsTable:
    """Per (design, estimator) metrics with Monte Carlo standard errors.

    SD uses the divisor R so that RMSE^2 = bias^2 + SD^2 exactly.
    """

    case: str
    tau: float
    rows: list = field(default_factory=list)
    samples: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    runtime: float = 0.0

    def row(self, design: str, estimator: str) -> dict:
        for r in self.rows:
            if r["design"] == design and r["estimator"] == estimator:
                return r
        raise KeyError((design, estimator))


def _summarize(case: str, design: str, est: str, tau: float, values, lengths, covers, failures: int) -> dict:
    x = np.asarray(values, dtype=float)
    R = x.size
    if R == 0:
        nan = math.nan
        return dict(case=case, design=design, estimator=est, bias=nan, sd=nan, rmse=nan,
                    ci_length=nan, coverage=nan, reps=0, failures=failures,
                    se_bias=nan, se_coverage=nan)
    mean = math.fsum(x) / R
    bias = mean - tau
    sd = math.sqrt(math.fsum((x - mean) ** 2) / R)
    rmse = math.sqrt(bias * bias + sd * sd)
    cov = math.fsum(covers) / R
    return dict(
        case=case, design=design, estimator=est, bias=bias, sd=sd, rmse=rmse,
        ci_length=math.fsum(lengths) / R, coverage=cov, reps=R, failures=failures,
        se_bias=sd / math.sqrt(R), se_coverage=math.sqrt(cov * (1 - cov) / R),
    )


class _DesignRunner:
    """Everything needed to replicate one design."""

    def __init__(self, name: str, pop: Population, cfg: ScenarioConfig, index: int):
        strat, use_s, use_t = _DESIGN_FLAGS[name]
        self.name = name
        self.index = index
        self.pop = pop if strat else pooled(pop)
        plan = DesignPlan.proportional(
            self.pop, cfg.f, cfg.e,
            p_S=cfg.p_S if use_s else 1.0, p_T=cfg.p_T if use_t else 1.0,
        )
        self.plan = validate_plan(self.pop, plan)
        self.engine = DesignEngine(self.pop, self.plan)
        self.cfg = cfg
        self.bank = None
        if "unadjusted" in cfg.estimators and (use_s or use_t):
            bank_stream = RngStream(cfg.seed, (1 << 32, index))
            self.bank = ConvolutionBank(self.pop.J1, self.plan.a_S, self.pop.J2, self.plan.a_T, cfg.mc_draws, bank_stream)

    def replicate(self, r: int) -> dict:
        stream = RngStream(self.cfg.seed, (r, self.index))
        try:
            sel, asg = self.engine.draw(stream)
            data = observe(self.pop, sel, asg)
            out = {"attempts_S": sel.attempts, "attempts_T": asg.attempts}
            if "unadjusted" in self.cfg.estimators:
                vc = variance_components(data, self.plan.a_S, self.plan.a_T)
                rep = ci_unadjusted(
                    data, self.cfg.alpha, self.plan.a_S, self.plan.a_T, design=self.name,
                    bank=self.bank, components=vc,
                )
                out["unadjusted"] = (rep.tau_hat, rep.ci_lower, rep.ci_upper, vc.V_tt)
            if "adjusted" in self.cfg.estimators:
                rep = ci_adjusted(fit_adjustment(data), self.cfg.alpha, design=self.name)
                out["adjusted"] = (rep.tau_hat, rep.ci_lower, rep.ci_upper, math.nan)
            return out
        except (DesignFailure, SingularMatrixError, ValueError) as exc:
            return {"failure": f"{type(exc).__name__}: {exc}"}


def run_study(config: ScenarioConfig, pop: Population | None = None, progress=None) -> MetricsTable:
    """Replicate every requested design ``config.reps`` times.

    Replication r of design j always uses stream (seed, (r, j)), so the
    table does not depend on ``config.threads``.
    """
    t0 = time.perf_counter()
    if pop is None:
        pop = generate_population(config.dgp(), RngStream(config.dgp_seed))
    tau = pop.tau
    case = str(config.case)
    table = MetricsTable(case=case, tau=tau, config=config.to_dict())
    for j, name in enumerate(config.designs):
        runner = _DesignRunner(name, pop, config, j)
        if config.threads > 1:
            with ThreadPoolExecutor(max_workers=config.threads) as ex:
                results = list(ex.map(runner.replicate, range(config.reps), chunksize=8))
        else:
            results = [runner.replicate(r) for r in range(config.reps)]
        failures = sum("failure" in res for res in results)
        good = [res for res in results if "failure" not in res]
        table.samples[(name, "attempts")] = np.array([[g["attempts_S"], g["attempts_T"]] for g in good])
        for est in config.estimators:
            vals = np.array([g[est] for g in good]) if good else np.zeros((0, 4))
            est_, lo, hi, vtt = (vals[:, i] for i in range(4))
            covers = (lo <= tau) & (tau <= hi)
            table.rows.append(_summarize(case, name, est, tau, est_, hi - lo, covers, failures))
            if config.keep_samples:
                table.samples[(name, est)] = vals
        if progress:
            progress(name)
    table.runtime = time.perf_counter() - t0
    return table


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def emit_report(table: MetricsTable, outdir, stem: str = "metrics") -> dict[str, Path]:
    """Write ``<stem>.csv`` (full precision) and ``<stem>_report.json``."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CSV_HEADER)
        for r in table.rows:
            wr.writerow([r[k] if not isinstance(r[k], float) else repr(r[k]) for k in CSV_HEADER])
    report = {
        "config": table.config,
        "tau": table.tau,
        "runtime_seconds": round(table.runtime, 3),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "rows": [{k: _fmt(v) for k, v in r.items()} for r in table.rows],
    }
    rep_path = out / f"{stem}_report.json"
    rep_path.write_text(json.dumps(report, indent=2) + "\n")
    return {"csv": csv_path, "report": rep_path}


# pooled counterpart of each stratified design
_COUNTERPARTS = {"SRSE": "CRSE", "SRSE-S": "CRSE-S", "SRSE-R": "CRSE-R", "SRSRR": "RRSE"}


def _boot_sd(x: np.ndarray, B: int, gen: np.random.Generator) -> np.ndarray:
    idx = gen.integers(0, x.size, size=(B, x.size))
    return x[idx].std(axis=1)


def check_orderings(table: MetricsTable, B: int = 1000, seed: int = 0,
                    coverage_band=(0.935, 0.965), reduction_band=(0.03, 0.25)) -> list[dict]:
    """Range and ordering checks for a finished study.

    Each entry has ``name``, ``passed`` and ``detail``; checks whose designs
    are absent from the table are skipped.
    """
    out = []

    def add(name, passed, detail):
        out.append({"name": name, "passed": bool(passed), "detail": detail})

    present = {(r["design"], r["estimator"]): r for r in table.rows}
    for (d, e), r in present.items():
        if r["reps"]:
            lo, hi = coverage_band
            add(f"coverage {d}/{e}", lo <= r["coverage"] <= hi, f"{r['coverage']:.4f} in [{lo}, {hi}]")
    u = "unadjusted"
    if ("SRSE", u) in present and ("SRSRR", u) in present:
        red = 1.0 - present[("SRSRR", u)]["sd"] / present[("SRSE", u)]["sd"]
        lo, hi = reduction_band
        add("sd reduction SRSE->SRSRR", lo <= red <= hi, f"{100 * red:.2f}% in [{100 * lo:g}, {100 * hi:g}]%")
        a, b = table.samples.get(("SRSRR", u)), table.samples.get(("SRSE", u))
        if a is not None and b is not None and len(a) and len(b):
            gen = np.random.default_rng(seed)
            conf = float(np.mean(_boot_sd(a[:, 0], B, gen) < _boot_sd(b[:, 0], B, gen)))
            add("sd SRSRR < SRSE (bootstrap)", conf >= 0.95, f"confidence {conf:.3f} >= 0.95")
    chain = [d for d in ("SRSRR", "SRSE-R", "SRSE") if (d, u) in present]
    for lo_d, hi_d in zip(chain, chain[1:]):
        s1, s2 = present[(lo_d, u)]["sd"], present[(hi_d, u)]["sd"]
        add(f"sd {lo_d} <= {hi_d}", s1 <= s2, f"{s1:.5g} vs {s2:.5g}")
    for strat, pool in _COUNTERPARTS.items():
        if (strat, u) in present and (pool, u) in present:
            s1, s2 = present[(strat, u)]["sd"], present[(pool, u)]["sd"]
            add(f"sd {strat} <= {pool}", s1 <= s2, f"{s1:.5g} vs {s2:.5g}")
    for d in dict.fromkeys(r["design"] for r in table.rows):
        if (d, u) in present and (d, "adjusted") in present:
            ru, ra = present[(d, u)], present[(d, "adjusted")]
            add(f"rmse adjusted < unadjusted {d}", ra["rmse"] < ru["rmse"], f"{ra['rmse']:.5g} vs {ru['rmse']:.5g}")
            add(f"ci length adjusted <= unadjusted {d}", ra["ci_length"] <= ru["ci_length"],
                f"{ra['ci_length']:.5g} vs {ru['ci_length']:.5g}")
    return out

