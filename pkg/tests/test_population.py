import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _support import make_population
from srsrr.plan import DesignPlan, PlanError, calibrate_threshold, load_plan, plan_from_dict, validate_plan
from srsrr.population import (
    CovariateSchema,
    Population,
    PopulationError,
    load_population,
    load_schema,
    save_population,
    stratum_moments,
)
from srsrr.simlab import DgpSpec, generate_population
from srsrr.statkit import RngStream

HEADER = "unit_id,stratum,w_1,x_1,y1,y0\n"


def _write(tmp_path, rows, header=HEADER, name="pop.csv"):
    path = tmp_path / name
    path.write_text(header + "".join(rows))
    return path


def _rows(strata):
    out = []
    for i, s in enumerate(strata):
        out.append(f"u{i},{s},{i % 4},{i % 4},{i + 1.5},{i}\n")
    return out


SCHEMA = CovariateSchema(w=("w_1",), x=("x_1",))


# loading -----------------------------------------------------------------

def test_load_eight_rows_two_strata(tmp_path):
    path = _write(tmp_path, _rows("AAAABBBB"))
    pop = load_population(path, SCHEMA)
    assert (pop.N, pop.K, pop.J1, pop.J2) == (8, 2, 1, 1)
    assert pop.labels == ["A", "B"]
    assert list(pop.unit_ids) == [f"u{i}" for i in range(8)]
    np.testing.assert_array_equal(pop.y1, np.arange(8) + 1.5)


def test_stratum_too_small(tmp_path):
    path = _write(tmp_path, _rows("AAAABBB"))
    with pytest.raises(PopulationError, match="stratum too small"):
        load_population(path, SCHEMA)


def test_missing_column(tmp_path):
    path = _write(tmp_path, [r.rsplit(",", 1)[0] + "\n" for r in _rows("AAAABBBB")],
                  header="unit_id,stratum,w_1,x_1,y1\n")
    with pytest.raises(PopulationError, match="y0"):
        load_population(path, SCHEMA)


def test_non_numeric_covariate(tmp_path):
    rows = _rows("AAAABBBB")
    rows[3] = "u3,A,oops,1,2,3\n"
    with pytest.raises(PopulationError, match="w_1"):
        load_population(_write(tmp_path, rows), SCHEMA)


def test_nesting_violation(tmp_path):
    rows = [f"u{i},{'AB'[i // 4]},{i % 4},{(i * 7) % 5},1,0\n" for i in range(8)]
    with pytest.raises(PopulationError, match="nesting"):
        load_population(_write(tmp_path, rows), SCHEMA)


def test_constant_column_flagged_but_loaded(tmp_path):
    rows = [f"u{i},{'AB'[i // 4]},1,1,{i},0\n" for i in range(8)]
    with pytest.warns(UserWarning, match="constant"):
        pop = load_population(_write(tmp_path, rows), SCHEMA)
    assert pop.constant_columns == ["w_1", "x_1"]
    assert np.all(stratum_moments(pop).cov("w") == 0)


def test_schema_sidecar_round_trip(tmp_path):
    pop = make_population((5, 6), seed=1)
    schema = save_population(pop, tmp_path / "p.csv")
    (tmp_path / "p.schema.json").write_text(json.dumps(schema.to_dict()))
    back = load_population(tmp_path / "p.csv", load_schema(tmp_path / "p.schema.json"))
    for b in ("w", "x", "e", "c", "y1", "y0"):
        np.testing.assert_array_equal(getattr(back, b), getattr(pop, b))


def test_case1_file_has_equal_weights(tmp_path):
    pop = generate_population(DgpSpec.for_case(1), RngStream(0))
    schema = save_population(pop, tmp_path / "case1.csv")
    back = load_population(tmp_path / "case1.csv", schema)
    assert (back.N, back.K) == (8000, 40)
    np.testing.assert_allclose(back.weights, 0.025, rtol=0, atol=1e-15)


# moments -----------------------------------------------------------------

def test_hand_variance_of_w():
    pop = Population([0] * 4, w=[0, 1, 2, 3], y1=[1, 2, 3, 4], y0=[0, 0, 0, 0])
    assert stratum_moments(pop).cov("w")[0, 0, 0] == pytest.approx(5 / 3, rel=1e-15)


def test_constant_effect_gives_zero_tau_variance():
    gen = np.random.default_rng(0)
    y0 = gen.normal(size=12)
    strata = np.repeat([0, 1, 2], 4)
    pop = Population(strata, w=gen.normal(size=12), y1=y0 + np.array([1.0, 2.0, 3.0])[strata], y0=y0)
    np.testing.assert_allclose(stratum_moments(pop).S2_tau, 0, atol=1e-14)


def test_moments_match_numpy(toy):
    m = stratum_moments(toy)
    for k, idx in enumerate(toy.members):
        data = np.column_stack([toy.y1[idx], toy.y0[idx], toy.c[idx]])
        ref = np.cov(data, rowvar=False)
        assert m.S2_1[k] == pytest.approx(ref[0, 0], rel=1e-12)
        assert m.S2_0[k] == pytest.approx(ref[1, 1], rel=1e-12)
        np.testing.assert_allclose(m.cov("c")[k], ref[2:, 2:], rtol=1e-12)
        np.testing.assert_allclose(m.covy("c", "1")[k], ref[2:, 0], rtol=1e-12, atol=1e-14)
        tau = toy.y1[idx] - toy.y0[idx]
        assert m.S2_tau[k] == pytest.approx(np.var(tau, ddof=1), rel=1e-12)
        # S2_tau = S2_1 + S2_0 - 2 S_10
        assert m.S2_tau[k] == pytest.approx(m.S2_1[k] + m.S2_0[k] - 2 * m.S_10[k], rel=1e-10)


def test_weighted_means_reconstruct_grand_mean(toy):
    m = stratum_moments(toy)
    for b in ("w", "x", "c"):
        np.testing.assert_allclose(toy.weights @ m.means[b], toy.block(b).mean(axis=0), rtol=1e-12, atol=1e-15)
    assert toy.weights @ m.means["y1"] == pytest.approx(toy.y1.mean(), rel=1e-12)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_moments_invariant_to_within_stratum_permutation(seed):
    pop = make_population((6, 9), seed=2)
    gen = np.random.default_rng(seed)
    perm = np.concatenate([gen.permutation(m) for m in pop.members])
    shuffled = Population(pop.strata[perm], pop.w[perm], pop.x[perm], pop.e[perm], pop.c[perm],
                          pop.y1[perm], pop.y0[perm], labels=pop.labels)
    a, b = stratum_moments(pop), stratum_moments(shuffled)
    for key in ("w", "x", "c"):
        np.testing.assert_allclose(a.cov(key), b.cov(key), rtol=1e-10, atol=1e-13)
    np.testing.assert_allclose(a.S2_tau, b.S2_tau, rtol=1e-10)


def test_sampled_only_agrees_with_oracle(toy):
    o, s = stratum_moments(toy, "oracle"), stratum_moments(toy, "sampled-only")
    assert s.S2_1 is None and not s.cross
    for b in ("w", "x", "e", "c"):
        np.testing.assert_allclose(o.cov(b), s.cov(b), rtol=1e-13, atol=1e-15)
        np.testing.assert_allclose(o.means[b], s.means[b], rtol=1e-13, atol=1e-15)


def test_oracle_moments_need_outcomes():
    pop = Population([0] * 4, w=[0, 1, 2, 3])
    with pytest.raises(PopulationError):
        stratum_moments(pop, "oracle")


# plans -------------------------------------------------------------------

def test_plan_derived_quantities():
    pop = Population(np.repeat([0, 1], 200), w=np.arange(400) % 7)
    P = validate_plan(pop, DesignPlan(n=(20, 20), n1=(10, 10)))
    np.testing.assert_allclose(P.f_k, 0.1)
    np.testing.assert_allclose(P.e1, 0.5)
    np.testing.assert_allclose(P.pi, 0.5)
    assert P.f == pytest.approx(0.1)
    assert P.design_tag == "SRSE"


@pytest.mark.parametrize("n,n1,match", [
    ((20, 20), (1, 10), "n1"),
    ((20, 20), (10, 19), "n1"),
    ((201, 20), (10, 10), "exceeds"),
    ((20,), (10,), "covers"),
])
def test_plan_bound_violations(n, n1, match):
    pop = Population(np.repeat([0, 1], 200), w=np.arange(400) % 7)
    with pytest.raises(PlanError, match=match):
        validate_plan(pop, DesignPlan(n=n, n1=n1))


def test_plan_threshold_resolution():
    pop = make_population((40, 40))
    P = validate_plan(pop, DesignPlan(n=(10, 10), n1=(5, 5), p_S=0.1, a_T=3.0))
    assert P.a_S == pytest.approx(calibrate_threshold(1, 0.1))
    assert (P.source_S, P.source_T, P.a_T) == ("p", "a", 3.0)
    assert P.design_tag == "SRSRR"
    with pytest.raises(PlanError, match="not both"):
        validate_plan(pop, DesignPlan(n=(10, 10), n1=(5, 5), p_S=0.1, a_S=1.0))


def test_calibrate_threshold():
    from scipy import stats

    assert calibrate_threshold(1, 0.01) == pytest.approx(stats.chi2.ppf(0.01, 1), rel=1e-10)
    assert calibrate_threshold(3, 1.0) == float("inf")
    for bad in (0.0, -0.5, 1.2):
        with pytest.raises(PlanError):
            calibrate_threshold(2, bad)


def test_plan_file(tmp_path):
    pop = make_population((40, 60))
    (tmp_path / "plan.json").write_text(json.dumps({"f": 0.2, "e": 0.5, "a_S": "inf", "p_T": 0.1}))
    plan = load_plan(tmp_path / "plan.json", pop)
    assert plan.n == (8, 12) and plan.n1 == (4, 6) and plan.a_S == float("inf")
    with pytest.raises(PlanError, match="unknown plan keys"):
        plan_from_dict({"n": [4, 4], "n1": [2, 2], "p_s": 0.1})


def test_default_max_attempts():
    pop = make_population((40, 40))
    P = validate_plan(pop, DesignPlan(n=(10, 10), n1=(5, 5), p_S=0.01))
    assert P.max_attempts_S == 5000 and P.max_attempts_T == 1


def test_population_is_read_only(toy):
    with pytest.raises(ValueError):
        toy.y1[0] = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert toy.tau == pytest.approx(np.mean(toy.y1 - toy.y0))
