import itertools
import math
from collections import Counter

import numpy as np
import pytest
from scipy import stats

from _support import enumerate_designs, make_population
from srsrr.design import (
    Assignment,
    DesignEngine,
    DesignFailure,
    SampleSelection,
    export_draw,
    joint_srsrr,
    mahalanobis_assignment,
    mahalanobis_sampling,
    rejective_sample,
    rerandomize,
    stratified_sample,
)
from srsrr.plan import DesignPlan, validate_plan
from srsrr.population import Population, stratum_moments
from srsrr.statkit import RngStream


def _selection(pop, units_by_stratum):
    idx = np.concatenate([np.asarray(u, dtype=np.int64) for u in units_by_stratum])
    offsets = np.concatenate([[0], np.cumsum([len(u) for u in units_by_stratum])])
    z = np.zeros(pop.N, dtype=np.int8)
    z[idx] = 1
    return SampleSelection(z=z, idx=idx, offsets=offsets, m_s=math.nan, attempts=0)


def brute_m_s(pop, sub_by_stratum):
    """M_S straight from the definition, population covariances with ddof=1."""
    Pi = pop.weights
    metric = np.zeros((pop.J1, pop.J1))
    d = -pop.w.mean(axis=0)
    for k, sub in enumerate(sub_by_stratum):
        n, N = len(sub), pop.sizes[k]
        metric += Pi[k] ** 2 * (1 / n - 1 / N) * np.atleast_2d(np.cov(pop.w[pop.members[k]], rowvar=False))
        d = d + Pi[k] * pop.w[list(sub)].mean(axis=0)
    return float(d @ np.linalg.solve(metric, d))


def brute_m_t(pop, combo):
    Pi = pop.weights
    metric = np.zeros((pop.J2, pop.J2))
    tx = np.zeros(pop.J2)
    for k, (sub, tr) in enumerate(combo):
        ctrl = [i for i in sub if i not in tr]
        n, n1, n0 = len(sub), len(tr), len(ctrl)
        metric += Pi[k] ** 2 * n / (n1 * n0) * np.atleast_2d(np.cov(pop.x[list(sub)], rowvar=False))
        tx += Pi[k] * (pop.x[list(tr)].mean(axis=0) - pop.x[ctrl].mean(axis=0))
    return float(tx @ np.linalg.solve(metric, tx))


# hand computations -------------------------------------------------------

def test_m_s_hand_value():
    pop = Population([0] * 4, w=[0.0, 1.0, 2.0, 3.0], y1=np.ones(4), y0=np.zeros(4))
    sel = _selection(pop, [[2, 3]])
    # metric (1/2 - 1/4) * 5/3 = 5/12, mean gap 2.5 - 1.5 = 1
    assert mahalanobis_sampling(pop, stratum_moments(pop), sel) == pytest.approx(2.4, rel=1e-14)
    eng = DesignEngine(pop, DesignPlan(n=(2,), n1=(1,), min_arm=1))
    assert eng.m_s(sel) == pytest.approx(2.4, rel=1e-14)
    assert mahalanobis_sampling(pop, stratum_moments(pop), _selection(pop, [[0, 3]])) == 0.0


def test_m_t_hand_value():
    pop = Population([0] * 4, w=[0.0, 1.0, 2.0, 3.0], x=[0.0, 1.0, 2.0, 3.0], y1=np.ones(4), y0=np.zeros(4))
    sel = _selection(pop, [[0, 1, 2, 3]])
    asg = Assignment(t=np.array([0, 0, 1, 1], dtype=np.int8), m_t=math.nan, attempts=0)
    # metric (4 / 4) * 5/3, tau_X = 2.5 - 0.5 = 2
    assert mahalanobis_assignment(pop, sel, asg) == pytest.approx(2.4, rel=1e-14)
    even = Assignment(t=np.array([1, 0, 0, 1], dtype=np.int8), m_t=math.nan, attempts=0)
    assert mahalanobis_assignment(pop, sel, even) == 0.0


# unconditioned draws -----------------------------------------------------

def test_full_sample_selects_everything():
    pop = make_population((6, 8))
    sel = stratified_sample(pop, DesignPlan(n=(6, 8), n1=(3, 4)), 0)
    assert sel.z.sum() == 14 and sel.attempts == 1


def test_single_stratum_subsets_uniform():
    pop = Population([0] * 4, w=[0.0, 1.0, 2.0, 3.0])
    eng = DesignEngine(pop, DesignPlan(n=(2,), n1=(1,), min_arm=1))
    gen = np.random.default_rng(1)
    R = 30000
    counts = Counter(tuple(sorted(eng.sample(gen).idx.tolist())) for _ in range(R))
    assert len(counts) == 6
    se = math.sqrt((1 / 6) * (5 / 6) / R)
    for c in counts.values():
        assert abs(c / R - 1 / 6) <= 4 * se


def test_strata_independent_and_inclusion_rates():
    pop = make_population((4, 4))
    eng = DesignEngine(pop, DesignPlan(n=(2, 2), n1=(1, 1), min_arm=1))
    gen = np.random.default_rng(2)
    R = 20000
    subsets = [list(itertools.combinations(m.tolist(), 2)) for m in pop.members]
    table = np.zeros((6, 6))
    incl = np.zeros(pop.N)
    for _ in range(R):
        sel = eng.sample(gen)
        table[subsets[0].index(tuple(sorted(sel.stratum(0)))), subsets[1].index(tuple(sorted(sel.stratum(1))))] += 1
        incl += sel.z
    assert stats.chi2_contingency(table).pvalue > 1e-3
    se = math.sqrt(0.25 / R)
    assert np.all(np.abs(incl / R - 0.5) <= 4 * se)


def test_inclusion_frequency_unequal_fractions():
    pop = make_population((20, 30))
    eng = DesignEngine(pop, DesignPlan(n=(5, 12), n1=(2, 6)))
    gen = np.random.default_rng(3)
    R = 20000
    incl = sum(eng.sample(gen).z.astype(float) for _ in range(R)) / R
    f = np.repeat([5 / 20, 12 / 30], [20, 30])
    assert np.all(np.abs(incl - f) <= 4 * np.sqrt(f * (1 - f) / R))


def test_treated_frequency_matches_e():
    pop = make_population((20, 30))
    eng = DesignEngine(pop, DesignPlan(n=(10, 12), n1=(3, 6)))
    sel = eng.sample(np.random.default_rng(0))
    gen = np.random.default_rng(4)
    R = 20000
    freq = sum(eng.assign(sel, gen).t.astype(float) for _ in range(R)) / R
    e = np.repeat([0.3, 0.5], [10, 12])
    assert np.all(np.abs(freq - e) <= 4 * np.sqrt(e * (1 - e) / R))


# rejection ---------------------------------------------------------------

def test_infinite_thresholds_take_one_attempt():
    pop = make_population((12, 16))
    plan = DesignPlan(n=(6, 8), n1=(3, 4))
    for seed in range(20):
        sel, asg = DesignEngine(pop, plan).draw(RngStream(seed))
        assert sel.attempts == 1 and asg.attempts == 1
    sel, asg = joint_srsrr(pop, plan, 3)
    assert sel.attempts == 1


def test_accepted_draws_respect_thresholds_and_recompute():
    pop = make_population((12, 16), seed=5)
    plan = DesignPlan(n=(6, 8), n1=(3, 4), p_S=0.2, p_T=0.2)
    P = validate_plan(pop, plan)
    for seed in range(30):
        sel = rejective_sample(pop, plan, RngStream(seed, (0,)))
        asg = rerandomize(pop, sel, plan, RngStream(seed, (1,)))
        assert sel.m_s <= P.a_S and asg.m_t <= P.a_T
        subs = [sel.stratum(k).tolist() for k in range(pop.K)]
        assert sel.m_s == pytest.approx(brute_m_s(pop, subs), rel=1e-10, abs=1e-12)
        t = asg.full(sel)
        combo = [(s, [i for i in s if t[i]]) for s in subs]
        assert asg.m_t == pytest.approx(brute_m_t(pop, combo), rel=1e-10, abs=1e-12)
        assert np.all(np.bincount(sel.codes, weights=asg.t) == [3, 4])


def _tiny_exact(pop, n, n1):
    """Exact acceptance probabilities over the full enumeration."""
    ms = {}
    mt = []
    for combo in enumerate_designs(pop, n, n1):
        key = tuple(s for s, _ in combo)
        if key not in ms:
            ms[key] = brute_m_s(pop, key)
        mt.append((key, brute_m_t(pop, combo)))
    return ms, mt


def test_expected_attempts_follow_exact_acceptance():
    pop = make_population((4, 4), seed=8)
    n, n1 = (3, 3), (1, 1)
    ms, mt = _tiny_exact(pop, n, n1)
    a_S = float(np.median(list(ms.values())))
    a_T = float(np.median([v for _, v in mt]))
    p_S = np.mean([v <= a_S for v in ms.values()])
    p_both = np.mean([ms[key] <= a_S and v <= a_T for key, v in mt])
    plan = DesignPlan(n=n, n1=n1, a_S=a_S, a_T=a_T, min_arm=1, max_attempts=10_000)
    eng = DesignEngine(pop, plan)
    R = 3000
    att_s = np.array([eng.sample(RngStream(1, (r,))).attempts for r in range(R)])
    assert abs(att_s.mean() - 1 / p_S) <= 4 * math.sqrt((1 - p_S) / p_S**2 / R)
    att_j = np.array([eng.joint(RngStream(2, (r,)))[0].attempts for r in range(R)])
    assert abs(att_j.mean() - 1 / p_both) <= 4 * math.sqrt((1 - p_both) / p_both**2 / R)
    for r in range(200):
        sel, asg = eng.joint(RngStream(3, (r,)))
        assert sel.m_s <= a_S and asg.m_t <= a_T


def test_failure_carries_best_draw():
    pop = make_population((12, 16))
    plan = DesignPlan(n=(6, 8), n1=(3, 4), a_S=1e-14, max_attempts=40)
    with pytest.raises(DesignFailure) as info:
        rejective_sample(pop, plan, 0)
    err = info.value
    assert err.attempts == 40 and err.stage == "sampling"
    assert err.best.m_s == err.best_m > 1e-14
    assert err.best.z.sum() == 14


# affine invariance -------------------------------------------------------

def test_affine_invariance_of_both_metrics():
    pop = make_population((12, 16), seed=4)
    gen = np.random.default_rng(9)
    A = gen.normal(size=(2, 2)) + 2 * np.eye(2)
    b = gen.normal(size=2)
    x2 = pop.x @ A.T + b
    pop2 = Population(pop.strata, w=3.0 * pop.w - 7.0, x=x2, y1=pop.y1, y0=pop.y0, check_nesting=False)
    pop1 = Population(pop.strata, w=pop.w, x=pop.x, y1=pop.y1, y0=pop.y0)
    plan = DesignPlan(n=(6, 8), n1=(3, 4))
    e1, e2 = DesignEngine(pop1, plan), DesignEngine(pop2, plan)
    for r in range(50):
        sel = e1.sample(RngStream(r))
        assert e2.m_s(sel) == pytest.approx(sel.m_s, rel=1e-9, abs=1e-12)
        asg = e1.assign(sel, RngStream(r, (1,)))
        assert e2.m_t(sel, asg) == pytest.approx(asg.m_t, rel=1e-9, abs=1e-12)


# export ------------------------------------------------------------------

def test_export_draw(tmp_path):
    pop = make_population((6, 8))
    eng = DesignEngine(pop, DesignPlan(n=(4, 4), n1=(2, 2)))
    sel, asg = eng.draw(RngStream(0))
    export_draw(tmp_path / "d.csv", pop, sel, asg)
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "unit_id,z,t,attempt_count,m_s,m_t"
    assert len(lines) == pop.N + 1
    z = np.array([int(r.split(",")[1]) for r in lines[1:]])
    t = np.array([int(r.split(",")[2]) for r in lines[1:]])
    np.testing.assert_array_equal(z, sel.z)
    assert t.sum() == 4 and np.all(t <= z)
