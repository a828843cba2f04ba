import dataclasses
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _support import make_population
from srsrr.allocator import (
    AllocationError,
    AllocationInput,
    allocation_objective,
    arm_score,
    load_moments_csv,
    optimal_adjusted,
    optimal_srse,
    optimal_srsrr,
    save_moments_csv,
)
from srsrr.plan import calibrate_threshold
from srsrr.population import stratum_moments


def _plain(S2_1, S2_0, f=0.2, sizes=None, **kw):
    K = len(S2_1)
    sizes = np.full(K, 1000.0) if sizes is None else np.asarray(sizes, float)
    return AllocationInput(weights=sizes / sizes.sum(), sizes=sizes, S2_1=S2_1, S2_0=S2_0,
                           S2_tau=np.zeros(K), f=f, **kw)


def _moments_input(pop, f, mode, **kw):
    return AllocationInput.from_moments(stratum_moments(pop), f, mode, **kw)


# closed forms -------------------------------------------------------------

def test_srse_fraction_ratio():
    res = optimal_srse(_plain([4.0, 16.0], [4.0, 16.0], f=0.3))
    np.testing.assert_allclose(res.e1, 0.5)
    np.testing.assert_allclose(res.f_k, [0.3 * 2 / 3, 0.3 * 4 / 3], rtol=1e-12)


def test_srse_treated_share():
    res = optimal_srse(_plain([4.0, 9.0], [1.0, 9.0]))
    np.testing.assert_allclose(res.e1, [2 / 3, 0.5], rtol=1e-12)


def test_homogeneous_strata_give_flat_allocation():
    res = optimal_srse(_plain([2.5] * 4, [2.5] * 4, f=0.15))
    np.testing.assert_allclose(res.f_k, 0.15, rtol=1e-12)
    np.testing.assert_allclose(res.e1, 0.5)


def test_arm_score_value():
    assert arm_score(1.0, 0.5, 0.25) == 1.0
    np.testing.assert_allclose(arm_score([4.0, 1.0], [0.0, 3.0], [0.0, 2.0]), [2.0, 0.0])


def test_srse_objective_matches_variance_formula():
    inp = _plain([4.0, 16.0], [1.0, 9.0], f=0.3)
    inp.S2_tau = np.array([0.5, 2.0])
    f_k, e1 = np.array([0.2, 0.4]), np.array([0.6, 0.5])
    Pi = inp.weights
    expect = sum(Pi[k] ** 2 / (f_k[k] / 0.3 * Pi[k])
                 * (inp.S2_1[k] / e1[k] + inp.S2_0[k] / (1 - e1[k]) - f_k[k] * inp.S2_tau[k]) for k in range(2))
    assert allocation_objective(inp, f_k, e1) == pytest.approx(expect, rel=1e-12)


# collapse to SRSE --------------------------------------------------------

def test_infinite_thresholds_collapse_to_srse(toy):
    big = make_population((300, 500), seed=4)
    inp = _moments_input(big, 0.2, "srsrr")
    a, b = optimal_srse(inp.with_mode("srse")), optimal_srsrr(inp)
    np.testing.assert_allclose(b.f_k, a.f_k, rtol=1e-10)
    np.testing.assert_allclose(b.e1, a.e1, rtol=1e-10)
    assert b.converged


def test_uncorrelated_covariates_collapse_to_srse():
    big = make_population((300, 500), seed=4)
    inp = _moments_input(big, 0.2, "srsrr", a_S=0.05, a_T=0.05)
    for side in (inp.S_y1, inp.S_y0):
        for b in side:
            side[b] = np.zeros_like(side[b])
    a, b = optimal_srse(inp.with_mode("srse")), optimal_srsrr(inp)
    np.testing.assert_allclose(b.f_k, a.f_k, rtol=1e-10)
    np.testing.assert_allclose(b.e1, a.e1, rtol=1e-10)


# invariants --------------------------------------------------------------

@pytest.mark.parametrize("mode", ["srse", "srsrr", "srsrr_adjusted"])
def test_budget_conserved_and_feasible(mode):
    pop = make_population((60, 200, 400), seed=9)
    a = calibrate_threshold(1, 0.05)
    inp = _moments_input(pop, 0.25, mode, a_S=a, a_T=calibrate_threshold(2, 0.05))
    res = {"srse": optimal_srse, "srsrr": optimal_srsrr, "srsrr_adjusted": optimal_adjusted}[mode](inp)
    assert inp.weights @ res.f_k == pytest.approx(0.25, rel=1e-12)
    assert np.all(res.f_k <= 1.0) and np.all(res.f_k > 0)
    assert np.all((res.e1 >= 0.01) & (res.e1 <= 0.99))
    assert res.converged and not res.non_monotone


@given(st.floats(0.01, 100.0))
@settings(max_examples=20, deadline=None)
def test_outcome_scale_equivariance(c):
    pop = make_population((300, 500), seed=4)
    inp = _moments_input(pop, 0.2, "srsrr", a_S=0.1, a_T=0.3)
    scaled = dataclasses.replace(
        inp, S2_1=inp.S2_1 * c**2, S2_0=inp.S2_0 * c**2, S2_tau=inp.S2_tau * c**2,
        S_y1={b: v * c for b, v in inp.S_y1.items()}, S_y0={b: v * c for b, v in inp.S_y0.items()},
    )
    a, b = optimal_srsrr(inp), optimal_srsrr(scaled)
    np.testing.assert_allclose(b.f_k, a.f_k, rtol=1e-7)
    np.testing.assert_allclose(b.e1, a.e1, rtol=1e-7)
    assert b.objective == pytest.approx(a.objective * c**2, rel=1e-7)


def test_budget_too_small_rejected():
    with pytest.raises(AllocationError):
        optimal_srse(_plain([1.0, 1.0], [1.0, 1.0], f=0.01, sizes=[100, 100]))


# grid oracle -------------------------------------------------------------

@pytest.mark.parametrize("mode", ["srse", "srsrr", "srsrr_adjusted"])
def test_solver_not_beaten_by_grid(mode):
    pop = make_population((400, 1600), seed=7, effect=0.5)
    inp = _moments_input(pop, 0.2, mode, a_S=calibrate_threshold(1, 0.05), a_T=calibrate_threshold(2, 0.05))
    res = {"srse": optimal_srse, "srsrr": optimal_srsrr, "srsrr_adjusted": optimal_adjusted}[mode](inp)
    Pi = inp.weights
    best = np.inf
    for f1, e_a, e_b in itertools.product(np.linspace(0.05, 0.35, 25), np.linspace(0.2, 0.8, 25),
                                          np.linspace(0.2, 0.8, 25)):
        f2 = (0.2 - Pi[0] * f1) / Pi[1]
        if not 0 < f2 <= 1:
            continue
        best = min(best, allocation_objective(inp, [f1, f2], [e_a, e_b], mode))
    assert res.objective <= best * (1 + 1e-9)


# moments files -----------------------------------------------------------

def test_moments_csv_round_trip(tmp_path):
    pop = make_population((120, 160, 200), seed=2)
    inp = _moments_input(pop, 0.2, "srsrr_adjusted")
    save_moments_csv(tmp_path / "m.csv", inp)
    back = load_moments_csv(tmp_path / "m.csv", 0.2, "srsrr_adjusted")
    for name in ("weights", "sizes", "S2_1", "S2_0", "S2_tau"):
        np.testing.assert_array_equal(getattr(back, name), getattr(inp, name))
    for b in inp.S2:
        # only the upper triangle is stored; the source carries ~1e-17 asymmetry
        np.testing.assert_allclose(back.S2[b], inp.S2[b], rtol=1e-14, atol=1e-16)
        np.testing.assert_array_equal(back.S_y1[b], inp.S_y1[b])
    assert optimal_adjusted(back).objective == pytest.approx(optimal_adjusted(inp).objective, rel=1e-12)


def test_moments_csv_unknown_column(tmp_path):
    (tmp_path / "m.csv").write_text("stratum,N,S2_1,S2_0,S2_tau,bogus\n1,100,1,1,0,3\n")
    with pytest.raises(AllocationError, match="unknown"):
        load_moments_csv(tmp_path / "m.csv", 0.2)
