import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdcopf.acopf import solve_acopf
from pdcopf.calibrate import calibrate_beta
from pdcopf.case_io import enumerate_n_minus_1
from pdcopf.dcopf import solve_pdcopf
from pdcopf.evaluate import (
    EVALUATE_ARTIFACTS,
    Ecdf,
    SampleMetrics,
    aggregate,
    cost_error,
    dispatch_rmse,
    ecdfs,
    evaluate_sample,
    n1_study,
    read_metrics_csv,
    write_metrics_csv,
    write_report,
)
from pdcopf.mlp import MlpModel
from pdcopf.model import Branch, DemandSample, Network

from conftest import bus, gen, two_bus


def test_cost_error_examples():
    assert cost_error(100, 108) == pytest.approx(8.0)
    assert cost_error(100, 100) == 0.0
    assert cost_error(100, 92) == pytest.approx(8.0)
    for bad in (0.0, -5.0):
        with pytest.raises(ValueError):
            cost_error(bad, 1.0)


def test_dispatch_rmse_examples():
    assert dispatch_rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert dispatch_rmse([0.5], [0.7]) == pytest.approx(0.2)
    assert dispatch_rmse([0.0] * 4, [0.1] * 4) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        dispatch_rmse([1.0], [1.0, 2.0])


def _metrics(errors, cr=True):
    return [SampleMetrics(k, cost_error_dc=float(e), cr_ok=cr, ra_ok=True) for k, e in enumerate(errors)]


def test_aggregate_examples():
    s = aggregate(_metrics([1.0, 2.0, 3.0]))
    st_ = s["metrics"]["cost_error_dc"]
    assert (st_["min"], st_["mean"], st_["max"]) == (1.0, 2.0, 3.0)
    assert ecdfs(_metrics([1.0, 2.0, 3.0]))["cost_error_dc"](2.0) == pytest.approx(2 / 3)
    assert s["fractions"]["cr_ok"] == 1.0
    assert s["fractions"]["cr_and_ra_ok"] == 1.0
    assert s["metrics"]["cost_error_pdc"] is None
    with pytest.raises(ValueError):
        aggregate([])


def test_aggregate_is_permutation_invariant():
    rng = np.random.default_rng(0)
    ms = _metrics(rng.uniform(0, 10, 37))
    for m in ms:
        m.cr_ok = bool(rng.random() < 0.9)
        m.lmp_dc = rng.uniform(1000, 4000, 5)
    shuffled = list(ms)
    random.Random(1).shuffle(shuffled)
    assert aggregate(ms) == aggregate(shuffled)


def test_p98_quantile():
    e = Ecdf(np.arange(1, 101, dtype=float))
    assert e.quantile(0.98) == 98.0
    assert e.quantile(1.0) == 100.0 and e.quantile(0.0) == 1.0
    with pytest.raises(ValueError):
        e.quantile(1.5)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50), st.floats(-2e6, 2e6), st.floats(-2e6, 2e6))
def test_ecdf_properties(values, a, b):
    e = Ecdf(values)
    assert e(-np.inf) == 0.0 and e(np.inf) == 1.0
    lo, hi = min(a, b), max(a, b)
    assert 0.0 <= e(lo) <= e(hi) <= 1.0
    # right-continuous: every sample point counts itself
    for v in values:
        assert e(v) >= 1.0 / len(values)
    assert e(max(values)) == 1.0
    assert e(e.quantile(0.5)) >= 0.5


def test_metrics_csv_round_trip(tmp_path):
    ms = _metrics([0.1, 0.25])
    ms[1].dist_feas_dc = None
    ms[0].note("x failed")
    write_metrics_csv(ms, tmp_path / "m.csv")
    again = read_metrics_csv(tmp_path / "m.csv")
    assert [m.cost_error_dc for m in again] == [0.1, 0.25]
    assert again[0].notes == "x failed" and again[1].dist_feas_dc is None


@pytest.fixture(scope="module")
def case30_nominal(case30):
    d = DemandSample.nominal(case30)
    ac = solve_acopf(case30, d)
    return d, ac, calibrate_beta(case30, d, ac)


def test_case30_nominal_dc_error_band(case30, case30_nominal):
    d, ac, _ = case30_nominal
    m = evaluate_sample(case30, d, ac=ac, distance=False)
    assert 8.08 <= m.cost_error_dc <= 9.52


def test_calibrated_beta_bypass_is_consistent(case30, case30_nominal):
    d, ac, res = case30_nominal
    at_calibration = cost_error(ac.objective, solve_pdcopf(case30, d, res.beta_star).objective)
    m = evaluate_sample(case30, d, beta=res.beta_star.beta, ac=ac)
    assert m.cost_error_pdc <= at_calibration + 1e-6
    assert m.cr_ok and m.ra_ok
    assert m.cost_error_pdc < m.cost_error_dc
    assert m.dist_feas_pdc is not None and 0.0 <= m.dist_feas_pdc <= 0.01


def test_lossless_dc_dispatch_is_ac_feasible():
    net = two_bus(pd2=0.5, r=0.0, x=0.1)
    m = evaluate_sample(net, DemandSample.nominal(net))
    assert m.dist_feas_dc is not None
    assert m.dist_feas_dc <= 1e-6


def test_failed_ac_gives_null_metrics():
    net = two_bus(pd2=5.0)
    m = evaluate_sample(net, DemandSample.nominal(net))
    assert m.cost_ac is None and m.cost_error_dc is None
    assert m.notes.startswith("acopf")


def test_n1_variants_match_enumeration(case30):
    d = DemandSample.nominal(case30)
    model = MlpModel.initialize([60, 4, 30], 0)
    variants = enumerate_n_minus_1(case30)[:3]
    res = n1_study(case30, model, [d], variants=variants)
    assert res.variants == [v.removed_branch for v in variants]
    assert len(res.metrics) == 3
    assert {m.topology for m in res.metrics} == set(res.variants)
    assert res.excluded == sum(1 for m in res.metrics if m.cost_ac is None)
    assert len(enumerate_n_minus_1(case30)) == 38


def _symmetric():
    buses = (bus(0, True), bus(1), bus(2))
    branches = (Branch(0, 1, 0.01, 0.1), Branch(0, 2, 0.01, 0.1), Branch(1, 2, 0.01, 0.1))
    return Network(100.0, buses, branches, (gen(0, 5.0, 10.0),), np.array([0.0, 0.4, 0.4]),
                   np.array([0.0, 0.1, 0.1]), name="symmetric")


def test_zero_flow_branch_outage_leaves_dc_error_unchanged():
    net = _symmetric()
    samples = [DemandSample(np.array([0.0, s, s]), np.array([0.0, 0.1, 0.1]), k) for k, s in enumerate((0.3, 0.5))]
    variants = enumerate_n_minus_1(net)
    cross = next(v for v in variants if v.removed_branch == 2)
    for s in samples:
        base = evaluate_sample(net, s, distance=False)
        out = evaluate_sample(cross.network, s, distance=False)
        assert abs(out.cost_error_dc - base.cost_error_dc) <= 1e-6


def test_report_artifacts(case30, case30_nominal, tmp_path):
    d, ac, res = case30_nominal
    ms = [evaluate_sample(case30, d, beta=res.beta_star.beta, ac=ac)]
    summary = write_report(ms, case30, tmp_path)
    for name in EVALUATE_ARTIFACTS:
        assert (tmp_path / name).stat().st_size > 0
    assert json.loads((tmp_path / "summary.json").read_text()) == json.loads(json.dumps(summary))
    assert summary["lmp"]["ac"]["units"] == "$/MWh"
