import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdcopf.acopf import OpfFailure
from pdcopf.dcopf import DcopfSolution, ScalingVector, ptdf_matrix, solve_dcopf, solve_pdcopf
from pdcopf.model import DemandSample
from pdcopf.pipeline import sample_demands
from pdcopf.solver import Status

from conftest import gen, triangle, two_bus


def nominal(net):
    return DemandSample.nominal(net)


def congested():
    gens = (gen(0, 0.0, 10.0), gen(1, 0.0, 30.0))
    return two_bus(pd2=2.0, s_max=1.0, gens=gens)


def test_single_marginal_unit():
    net = two_bus(pd2=1.0)
    sol = solve_dcopf(net, nominal(net))
    assert sol.p_gen[0] == pytest.approx(1.0, abs=1e-8)
    np.testing.assert_allclose(sol.lmp, [20.0, 20.0], atol=1e-6)


def test_congested_two_bus():
    sol = solve_dcopf(congested(), nominal(congested()))
    np.testing.assert_allclose(sol.p_gen, [1.0, 1.0], atol=1e-7)
    np.testing.assert_allclose(sol.lmp, [10.0, 30.0], atol=1e-6)
    assert sol.mu_flow_hi[0] == pytest.approx(20.0, abs=1e-6)
    assert sol.mu_flow_lo[0] == pytest.approx(0.0, abs=1e-6)


def test_zero_demand():
    net = two_bus(pd2=0.0)
    sol = solve_dcopf(net, nominal(net))
    assert sol.p_gen[0] == pytest.approx(0.0, abs=1e-8)
    assert sol.objective == pytest.approx(0.0, abs=1e-8)


def test_shortfall_infeasible():
    net = two_bus(pd2=3.0)
    with pytest.raises(OpfFailure) as err:
        solve_dcopf(net, nominal(net))
    assert err.value.status == Status.INFEASIBLE


def test_pdcopf_examples():
    net = two_bus(pd2=1.0)
    d = nominal(net)
    sol = solve_pdcopf(net, d, [1.0, 1.05])
    assert sol.p_gen[0] == pytest.approx(1.05, abs=1e-8)
    np.testing.assert_allclose(sol.lmp, 20.5, atol=1e-6)
    zero = solve_pdcopf(net, d, [0.0, 0.0])
    assert zero.p_gen[0] == pytest.approx(0.0, abs=1e-8)


def test_scaling_vector_validation():
    with pytest.raises(ValueError):
        ScalingVector([-0.1, 1.0])
    with pytest.raises(ValueError):
        ScalingVector([np.nan])
    np.testing.assert_array_equal(ScalingVector.clamped([-1.0, 2.0]).beta, [0.0, 2.0])
    assert len(ScalingVector.ones(3)) == 3


@pytest.mark.parametrize("name", ["case30", "case57"])
def test_beta_one_is_plain_dcopf(name, request):
    net = request.getfixturevalue(name)
    d = nominal(net)
    a = solve_dcopf(net, d)
    b = solve_pdcopf(net, d, ScalingVector.ones(net.n_bus))
    assert b.objective == pytest.approx(a.objective, rel=1e-8)
    np.testing.assert_allclose(b.p_gen, a.p_gen, atol=1e-8)
    np.testing.assert_allclose(b.lmp, a.lmp, atol=1e-8 * max(1.0, np.abs(a.lmp).max()))


def test_ptdf_two_bus():
    np.testing.assert_allclose(ptdf_matrix(two_bus()), [[0.0, -1.0]], atol=1e-12)


def test_ptdf_triangle_split():
    net = triangle()
    flows = ptdf_matrix(net) @ np.array([0.0, 1.0, -1.0])
    # branches: 0-1, 1-2, 0-2; direct path 1->2 carries 2/3, the detour 1->0->2 carries 1/3
    np.testing.assert_allclose(flows, [-1 / 3, 2 / 3, 1 / 3], atol=1e-12)


def _decomposition_error(net, sol):
    ptdf = ptdf_matrix(net)
    lam_ref = sol.lmp[net.ref_bus]
    recon = lam_ref - ptdf.T @ (sol.mu_flow_hi - sol.mu_flow_lo)
    return np.max(np.abs(recon - sol.lmp))


@pytest.mark.parametrize("name", ["case30", "case57"])
def test_invariants_on_sampled_instances(name, request):
    net = request.getfixturevalue(name)
    ptdf = ptdf_matrix(net)
    assert not ptdf[:, net.ref_bus].any()
    bf_theta = None
    for d in sample_demands(net, 5, 11):
        sol = solve_dcopf(net, d)
        inj = net.gen_incidence @ sol.p_gen - d.pd - net.g_shunt
        np.testing.assert_allclose(ptdf @ inj, sol.p_flow, atol=1e-8)
        assert abs(sol.p_gen.sum() - d.pd.sum() - net.g_shunt.sum()) <= 1e-9
        lim = np.array([b.limited for b in net.branches])
        assert np.all(np.abs(sol.p_flow[lim]) <= net.s_max[lim] + 1e-9)
        assert _decomposition_error(net, sol) <= 1e-6
        bf_theta = sol
    f, t = net.branch_from, net.branch_to
    b = -net.b_series
    np.testing.assert_allclose(bf_theta.p_flow, b * (bf_theta.theta[f] - bf_theta.theta[t]), atol=1e-9)


def test_congested_decomposition():
    net = congested()
    assert _decomposition_error(net, solve_dcopf(net, nominal(net))) <= 1e-6


@given(st.lists(st.floats(0.0, 1.5), min_size=30, max_size=30))
@settings(max_examples=15, deadline=None)
def test_pdcopf_summation_identity(case30, beta):
    d = nominal(case30)
    sol = solve_pdcopf(case30, d, beta)
    assert abs(sol.p_gen.sum() - np.dot(beta, d.pd) - case30.g_shunt.sum()) <= 1e-9


def test_solution_json_round_trip(case30):
    sol = solve_pdcopf(case30, nominal(case30), np.full(30, 1.02))
    again = DcopfSolution.from_dict(sol.to_dict())
    np.testing.assert_array_equal(again.lmp, sol.lmp)
    np.testing.assert_array_equal(again.beta, sol.beta)
    assert sol.to_dict()["kind"] == "pdc"
