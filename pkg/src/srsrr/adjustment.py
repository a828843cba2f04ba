"""Analysis-stage linear regression adjustment of the difference in means."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .estimator import (
    EstimateReport,
    ExperimentData,
    _assign_stage,
    _check_arms,
    _sample_stage,
    clamp_weights,
    diff_in_means,
    estimated_V_tt,
)
from .population import PopulationError, _contained
from .statkit import SpdMatrix

__all__ = ["NestingError", "AdjustmentFit", "fit_adjustment", "ci_adjusted"]


class NestingError(PopulationError):
    """Design-stage covariates are missing from the analysis-stage sets."""


@dataclass
class AdjustmentFit:
    beta: np.ndarray
    gamma: np.ndarray
    tau_C: np.ndarray
    delta_E: np.ndarray
    V_CC: np.ndarray
    V_EE: np.ndarray
    R2_E: float
    R2_C: float
    tau_hat: float
    tau_adj: float
    V_tt: float
    n: int
    tau_k: np.ndarray
    clamped: bool = False
    degenerate: bool = False
    diagnostics: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


def _check_nesting(data: ExperimentData):
    pop = data.pop
    if pop.J1 and not (pop.J3 and _contained(pop.w, pop.e)):
        raise NestingError("nesting violation: W must be contained in E for adjustment")
    if pop.J2 and not (pop.J4 and _contained(pop.x, pop.c)):
        raise NestingError("nesting violation: X must be contained in C for adjustment")


def fit_adjustment(data: ExperimentData, check_nesting: bool = True) -> AdjustmentFit:
    """beta_hat = V_CC^-1 V_Ct and gamma_hat = V_EE^-1 V_Et, both plug-in.

    V_EE comes from the whole population (E is known for every unit); V_CC
    and the cross terms come from the sampled units.
    """
    if check_nesting:
        _check_nesting(data)
    _check_arms(data, 2)
    tau_hat, tau_k = diff_in_means(data)
    V_tt = estimated_V_tt(data)
    V_CC, V_Ct, r2c = _assign_stage(data, "c", V_tt)
    V_EE, V_Et, r2e = _sample_stage(data, "e", V_tt)
    beta = SpdMatrix(V_CC).solve(V_Ct) if V_Ct.size else np.zeros(0)
    gamma = SpdMatrix(V_EE).solve(V_Et) if V_Et.size else np.zeros(0)
    tau_C = data.tau_block("c") if data.pop.J4 else np.zeros(0)
    delta_E = data.delta_block("e") if data.pop.J3 else np.zeros(0)
    tau_adj = tau_hat - float(beta @ tau_C) - float(gamma @ delta_E)

    degenerate = not V_tt > 0
    diagnostics = []
    if degenerate:
        clamped = False
        r2c = r2e = math.nan
    else:
        _, clamped = clamp_weights(r2e, r2c)
        if data.pop.J1:
            _, _, r2w = _sample_stage(data, "w", V_tt)
            if r2e < r2w:
                diagnostics.append(f"R2_E={r2e:.4g} below R2_W={r2w:.4g}")
        if data.pop.J2:
            _, _, r2x = _assign_stage(data, "x", V_tt)
            if r2c < r2x:
                diagnostics.append(f"R2_C={r2c:.4g} below R2_X={r2x:.4g}")
    return AdjustmentFit(
        beta=beta, gamma=gamma, tau_C=tau_C, delta_E=delta_E, V_CC=V_CC, V_EE=V_EE,
        R2_E=r2e, R2_C=r2c, tau_hat=tau_hat, tau_adj=tau_adj, V_tt=V_tt, n=data.n, tau_k=tau_k,
        clamped=clamped, degenerate=degenerate, diagnostics=diagnostics,
    )


def ci_adjusted(fit: AdjustmentFit, alpha: float = 0.05, design: str = "SRSRR") -> EstimateReport:
    """tau_adj -+ q_{1-alpha/2} sqrt(V_tt (1 - R2_E - R2_C) / n)."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if fit.degenerate:
        w0 = 1.0
    else:
        (w0, _, _), _ = clamp_weights(fit.R2_E, fit.R2_C)
    q = NormalDist().inv_cdf(1.0 - alpha / 2.0) * math.sqrt(max(fit.V_tt, 0.0) * w0)
    half = q / math.sqrt(fit.n)
    notes = list(fit.diagnostics)
    if fit.clamped:
        notes.append("R2_E + R2_C exceeded 1; residual weight clamped to 0")
    comps = {"V_tt": fit.V_tt, "R2_E": fit.R2_E, "R2_C": fit.R2_C,
             "beta": fit.beta.tolist(), "gamma": fit.gamma.tolist()}
    return EstimateReport(
        tau_hat=fit.tau_adj, tau_k=fit.tau_k, ci_lower=fit.tau_adj - half, ci_upper=fit.tau_adj + half,
        alpha=alpha, n=fit.n, method="adjusted", design=design, quantile=q, quantile_se=0.0,
        components=comps, clamped=fit.clamped, degenerate=fit.degenerate, notes=notes,
    )
