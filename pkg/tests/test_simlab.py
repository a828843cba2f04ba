import csv

import numpy as np
import pytest

from srsrr.simlab import (
    CSV_HEADER,
    DESIGNS,
    DgpSpec,
    MetricsTable,
    ScenarioConfig,
    check_orderings,
    emit_report,
    generate_population,
    pooled,
    run_study,
    shrink_population,
)
from srsrr.statkit import RngStream


def test_case_layouts():
    assert DgpSpec.for_case(1).sizes == (200,) * 40
    assert DgpSpec.for_case(2).sizes == (200,) * 20 + (2000,) * 2
    assert DgpSpec.for_case(3).sizes == (4000, 4000) and DgpSpec.for_case(3).heterogeneous
    with pytest.raises(ValueError):
        DgpSpec.for_case(4)


def test_covariate_correlation(case1_population):
    c = case1_population.c
    r = np.corrcoef(c, rowvar=False)
    assert r[0, 2] == pytest.approx(0.25, abs=0.03)
    lag = np.abs(np.subtract.outer(np.arange(4), np.arange(4)))
    np.testing.assert_allclose(r, 0.5**lag, atol=0.03)
    np.testing.assert_allclose(c.var(axis=0), 1.0, atol=0.05)


def test_nested_blocks(case1_population):
    pop = case1_population
    np.testing.assert_array_equal(pop.w[:, 0], pop.c[:, 0])
    np.testing.assert_array_equal(pop.x, pop.c[:, :2])
    np.testing.assert_array_equal(pop.e, pop.c[:, :3])


def _stratum_slopes(pop):
    out = []
    for m in pop.members:
        A = np.column_stack([np.ones(m.size), pop.c[m]])
        out.append(np.linalg.lstsq(A, pop.y1[m], rcond=None)[0][1:])
    return np.array(out)


def test_heterogeneous_coefficients_vary_by_stratum():
    homo = generate_population(DgpSpec(sizes=(4000, 4000), snr=1e8), RngStream(1))
    het = generate_population(DgpSpec(sizes=(4000, 4000), heterogeneous=True, snr=1e8), RngStream(1))
    gap_homo = np.abs(np.diff(_stratum_slopes(homo), axis=0)).max()
    gap_het = np.abs(np.diff(_stratum_slopes(het), axis=0)).max()
    assert gap_homo < 0.1
    assert gap_het > 5 * gap_homo


def test_population_deterministic():
    a = generate_population(DgpSpec(sizes=(50, 60)), RngStream(9))
    b = generate_population(DgpSpec(sizes=(50, 60)), RngStream(9))
    c = generate_population(DgpSpec(sizes=(50, 60)), RngStream(10))
    assert a.y1.tobytes() == b.y1.tobytes() and a.c.tobytes() == b.c.tobytes()
    assert a.y1.tobytes() != c.y1.tobytes()


def test_pooled_and_shrunk(toy):
    p = pooled(toy)
    assert p.K == 1 and p.tau == toy.tau
    s = shrink_population(toy, 0.3)
    np.testing.assert_allclose(s.y1 - s.y0, toy.y1 - toy.y0, rtol=1e-12, atol=1e-12)
    assert s.y0.var() == pytest.approx(0.09 * toy.y0.var(), rel=1e-10)
    assert s.y0.mean() == pytest.approx(toy.y0.mean(), rel=1e-12)


# studies -----------------------------------------------------------------

def _small(**kw):
    base = dict(case="toy", sizes=(100, 100, 100), reps=30, seed=5, mc_draws=5000, designs=DESIGNS,
                p_S=0.05, p_T=0.05)
    base.update(kw)
    return ScenarioConfig(**base)


@pytest.fixture(scope="module")
def small_study():
    return run_study(_small())


def test_metric_identities(small_study):
    t = small_study
    assert len(t.rows) == len(DESIGNS) * 2
    for r in t.rows:
        assert r["reps"] + r["failures"] == 30
        assert r["rmse"] ** 2 == pytest.approx(r["bias"] ** 2 + r["sd"] ** 2, rel=1e-12)
        assert 0.0 <= r["coverage"] <= 1.0 and r["ci_length"] > 0
    vals = t.samples[("SRSE", "unadjusted")][:, 0]
    r = t.row("SRSE", "unadjusted")
    assert r["bias"] == pytest.approx(vals.mean() - t.tau, rel=1e-10, abs=1e-14)
    assert r["sd"] == pytest.approx(vals.std(), rel=1e-10)


def test_report_files(small_study, tmp_path):
    paths = emit_report(small_study, tmp_path)
    with open(paths["csv"], newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == CSV_HEADER
    assert len(rows) == 1 + len(DESIGNS) * 2
    assert {r[1] for r in rows[1:]} == set(DESIGNS)
    again = emit_report(run_study(_small()), tmp_path / "again")
    assert paths["csv"].read_bytes() == again["csv"].read_bytes()


def test_threads_do_not_change_results(tmp_path):
    cfg1 = _small(designs=("SRSE", "SRSRR"), reps=24)
    cfg4 = _small(designs=("SRSE", "SRSRR"), reps=24, threads=4)
    a = emit_report(run_study(cfg1), tmp_path / "one")
    b = emit_report(run_study(cfg4), tmp_path / "four")
    assert a["csv"].read_bytes() == b["csv"].read_bytes()


def test_rejective_designs_respect_thresholds(small_study):
    att = small_study.samples[("SRSRR", "attempts")]
    # p = 0.05 on each check, so a few dozen tries per draw on average
    assert att[:, 0].mean() > 5 and att[:, 1].mean() > 5
    assert np.all(small_study.samples[("SRSE", "attempts")] == 1)


def test_check_orderings_on_synthetic_table():
    def row(d, e, sd, cov=0.95, length=1.0):
        return dict(design=d, estimator=e, sd=sd, rmse=sd, coverage=cov, ci_length=length, reps=100)

    t = MetricsTable(case="x", tau=0.0, rows=[
        row("SRSE", "unadjusted", 1.0), row("SRSE-R", "unadjusted", 0.95), row("SRSRR", "unadjusted", 0.9),
        row("SRSRR", "adjusted", 0.8, length=0.9), row("CRSE", "unadjusted", 1.2, cov=0.90),
    ])
    res = {c["name"]: c["passed"] for c in check_orderings(t)}
    assert res["sd reduction SRSE->SRSRR"]
    assert res["sd SRSRR <= SRSE-R"] and res["sd SRSE-R <= SRSE"]
    assert res["sd SRSE <= CRSE"]
    assert not res["coverage CRSE/unadjusted"]
    assert res["rmse adjusted < unadjusted SRSRR"] and res["ci length adjusted <= unadjusted SRSRR"]
