import dataclasses
import math
from statistics import NormalDist

import numpy as np
import pytest
from scipy import stats

from _support import experiment_from_combo, make_population
from srsrr.adjustment import NestingError, ci_adjusted, fit_adjustment
from srsrr.design import DesignEngine
from srsrr.estimator import ci_unadjusted, observe, oracle_covariance, variance_components
from srsrr.plan import DesignPlan, validate_plan
from srsrr.population import Population
from srsrr.statkit import RngStream, spd_solve


def _draw(pop, plan, seed):
    sel, asg = DesignEngine(pop, plan).draw(RngStream(seed))
    return observe(pop, sel, asg)


def test_constant_outcome_gives_zero_coefficients(toy):
    flat = toy.with_outcomes(np.full(toy.N, 2.0), np.full(toy.N, 2.0))
    fit = fit_adjustment(_draw(flat, DesignPlan(n=(6, 8), n1=(3, 4)), 0))
    np.testing.assert_array_equal(fit.beta, 0)
    np.testing.assert_array_equal(fit.gamma, 0)
    assert fit.tau_adj == fit.tau_hat == 0.0


def test_balanced_draw_leaves_estimate_unchanged():
    v = np.array([-3.0, -1.0, 1.0, 3.0, -3.0, -1.0, 1.0, 3.0])
    gen = np.random.default_rng(0)
    y0 = v + gen.normal(size=8)
    pop = Population([0] * 8, w=v, x=v, e=v, c=v, y1=y0 + 2 + gen.normal(size=8), y0=y0)
    # sample {-3, 3, -3, 3} has the population mean; arms {-3, 3} and {-3, 3} balance
    fit = fit_adjustment(experiment_from_combo(pop, [((0, 3, 4, 7), (0, 3))]))
    assert fit.tau_C[0] == 0 and fit.delta_E[0] == 0
    assert fit.beta[0] != 0
    assert fit.tau_adj == fit.tau_hat


def test_adjusted_estimate_formula(toy):
    data = _draw(toy, DesignPlan(n=(6, 8), n1=(3, 4)), 3)
    fit = fit_adjustment(data)
    Pi = toy.weights
    t = data.assignment.t
    tau_c = np.zeros(3)
    delta_e = -toy.e.mean(axis=0)
    for k in range(toy.K):
        units = data.selection.stratum(k)
        tk = t[data.selection.offsets[k]:data.selection.offsets[k + 1]]
        tau_c += Pi[k] * (toy.c[units[tk == 1]].mean(axis=0) - toy.c[units[tk == 0]].mean(axis=0))
        delta_e += Pi[k] * toy.e[units].mean(axis=0)
    np.testing.assert_allclose(fit.tau_C, tau_c, rtol=1e-12)
    np.testing.assert_allclose(fit.delta_E, delta_e, rtol=1e-12, atol=1e-15)
    expect = fit.tau_hat - fit.beta @ tau_c - fit.gamma @ delta_e
    assert fit.tau_adj == pytest.approx(expect, rel=1e-12)


def test_translation_invariance(toy):
    shift_c = np.array([5.0, -2.0, 0.5])
    moved = Population(toy.strata, w=toy.w + 5.0, x=toy.x + shift_c[:2], e=toy.e + shift_c[:2],
                       c=toy.c + shift_c, y1=toy.y1, y0=toy.y0)
    plan = DesignPlan(n=(6, 8), n1=(3, 4))
    for seed in range(5):
        a = fit_adjustment(_draw(toy, plan, seed))
        b = fit_adjustment(_draw(moved, plan, seed))
        np.testing.assert_allclose(a.beta, b.beta, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(a.gamma, b.gamma, rtol=1e-9, atol=1e-12)
        assert a.tau_adj == pytest.approx(b.tau_adj, rel=1e-10)


def test_design_covariates_reused_give_identical_r2(toy):
    same = Population(toy.strata, w=toy.w, x=toy.x, e=toy.w, c=toy.x, y1=toy.y1, y0=toy.y0)
    data = _draw(same, DesignPlan(n=(6, 8), n1=(3, 4)), 1)
    fit = fit_adjustment(data)
    vc = variance_components(data)
    assert fit.R2_E == vc.R2_W
    assert fit.R2_C == vc.R2_X


def test_nesting_violation_rejected(toy):
    broken = Population(toy.strata, w=toy.w, x=toy.x, e=toy.c[:, 1:], c=toy.c, y1=toy.y1, y0=toy.y0,
                        check_nesting=False)
    with pytest.raises(NestingError):
        fit_adjustment(_draw(broken, DesignPlan(n=(6, 8), n1=(3, 4)), 0))


def test_zero_r2_matches_normal_interval(toy):
    data = _draw(toy, DesignPlan(n=(6, 8), n1=(3, 4)), 2)
    fit = dataclasses.replace(fit_adjustment(data), R2_E=0.0, R2_C=0.0)
    adj = ci_adjusted(fit)
    unadj = ci_unadjusted(data)
    assert adj.length == pytest.approx(unadj.length, rel=1e-12)
    z = NormalDist().inv_cdf(0.975)
    assert adj.length == pytest.approx(2 * z * math.sqrt(fit.V_tt / fit.n), rel=1e-12)


@pytest.fixture(scope="module")
def srse_replications():
    pop = make_population((200, 300), seed=12)
    plan = validate_plan(pop, DesignPlan(n=(40, 60), n1=(20, 30)))
    eng = DesignEngine(pop, plan)
    betas, gammas, raw, adj = [], [], [], []
    for r in range(10_000):
        sel, asg = eng.draw(RngStream(5, (r,)))
        fit = fit_adjustment(observe(pop, sel, asg))
        betas.append(fit.beta)
        gammas.append(fit.gamma)
        raw.append(fit.tau_hat)
        adj.append(fit.tau_adj)
    return pop, plan, np.array(betas), np.array(gammas), np.array(raw), np.array(adj)


def test_beta_converges_to_population_coefficient(srse_replications):
    pop, plan, betas, gammas, _, _ = srse_replications
    V = oracle_covariance(pop, plan, sample_block="e", assign_block="c")
    J4 = pop.J4
    beta_opt = spd_solve(V[1:1 + J4, 1:1 + J4], V[0, 1:1 + J4])
    gamma_opt = spd_solve(V[1 + J4:, 1 + J4:], V[0, 1 + J4:])
    se_b = betas.std(axis=0) / math.sqrt(len(betas))
    se_g = gammas.std(axis=0) / math.sqrt(len(gammas))
    assert np.all(np.abs(betas.mean(axis=0) - beta_opt) <= 4 * se_b)
    # gamma is a noisier ratio; its mean is checked at the same tolerance
    assert np.all(np.abs(gammas.mean(axis=0) - gamma_opt) <= 4 * se_g)


def test_adjusted_variance_not_larger(srse_replications):
    _, _, _, _, raw, adj = srse_replications
    v_raw, v_adj = raw.var(), adj.var()
    c = raw - raw.mean()
    se = math.sqrt(np.mean((c**2 - v_raw) ** 2) / raw.size)
    assert v_adj <= v_raw + 4 * se
    assert v_adj < v_raw


def test_adjusted_estimate_normal_under_srsrr(case1_population):
    pop = case1_population
    plan = validate_plan(pop, DesignPlan.proportional(pop, 0.1, p_S=0.01, p_T=0.01))
    eng = DesignEngine(pop, plan)
    vals = []
    for r in range(800):
        sel, asg = eng.draw(RngStream(31, (r,)))
        vals.append(fit_adjustment(observe(pop, sel, asg)).tau_adj)
    x = math.sqrt(800) * (np.array(vals) - pop.tau)
    res = stats.anderson(x, "norm")
    assert res.statistic < res.critical_values[-1]
