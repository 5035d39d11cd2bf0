import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdcopf.model import (
    Branch,
    Bus,
    BusKind,
    DemandSample,
    Generator,
    Network,
    NetworkError,
    branch_admittance,
    scale_demand,
    total_cost,
)

from conftest import bus, gen, one_bus, triangle


@pytest.mark.parametrize("r,x,expected", [
    (0.0, 0.1, (0.0, -10.0)),
    (0.01, 0.1, (0.990099, -9.90099)),
    (1.0, 0.0, (1.0, 0.0)),
])
def test_branch_admittance(r, x, expected):
    g, b = branch_admittance(r, x)
    assert g == pytest.approx(expected[0], rel=1e-6, abs=1e-12)
    assert b == pytest.approx(expected[1], rel=1e-6, abs=1e-12)


def test_zero_impedance_rejected():
    with pytest.raises(NetworkError, match="zero-impedance"):
        branch_admittance(0.0, 0.0)


@given(st.floats(-5, 5), st.floats(-5, 5))
def test_admittance_inverts(r, x):
    if r * r + x * x < 1e-6:
        return
    g, b = branch_admittance(r, x)
    z = 1.0 / complex(g, b)
    assert z.real == pytest.approx(r, rel=1e-12, abs=1e-12)
    assert z.imag == pytest.approx(x, rel=1e-12, abs=1e-12)


def _gens(c2, c1):
    return tuple(gen(0, a, b) for a, b in zip(c2, c1))


def test_total_cost_examples():
    net = one_bus(c2=5.0, c1=10.0)
    assert total_cost(net, [1.0]) == 15.0
    assert total_cost(net, [0.0]) == 0.0
    two = Network(100.0, (bus(0, True),), (), _gens([1, 1], [2, 2]), np.zeros(1), np.zeros(1))
    assert total_cost(two, [1.0, 2.0]) == 11.0


def test_total_cost_shape_checked():
    with pytest.raises(ValueError):
        total_cost(one_bus(), [1.0, 2.0])


@given(st.lists(st.floats(0, 10), min_size=3, max_size=3), st.integers(0, 2), st.floats(0, 1))
@settings(max_examples=50)
def test_total_cost_monotone(p, k, bump):
    net = Network(100.0, (bus(0, True),), (), _gens([1.0, 0.5, 0.0], [2.0, 0.0, 3.0]), np.zeros(1), np.zeros(1))
    q = list(p)
    q[k] += bump
    assert total_cost(net, q) >= total_cost(net, p)


def test_scale_demand(case30):
    nom = scale_demand(case30, 1.0, 1.0)
    np.testing.assert_array_equal(nom.pd, case30.nominal_pd)
    np.testing.assert_array_equal(nom.qd, case30.nominal_qd)
    s = scale_demand(case30, 1.3, 0.85)
    np.testing.assert_allclose(s.pd, 1.3 * case30.nominal_pd)
    np.testing.assert_allclose(s.qd, 0.85 * case30.nominal_qd)
    z = scale_demand(case30, 0.0, 0.0)
    assert not z.pd.any() and not z.qd.any()


def test_incidence_rows_cancel(case30, case57):
    for net in (case30, case57, triangle()):
        np.testing.assert_array_equal(net.incidence.sum(axis=1), 0.0)


def test_validation():
    with pytest.raises(NetworkError):
        Bus(0, v_min=1.2, v_max=1.1)
    with pytest.raises(NetworkError):
        Branch(1, 1, 0.0, 0.1)
    with pytest.raises(NetworkError):
        Generator(0, 1.0, 0.5, 0, 1)
    with pytest.raises(NetworkError, match="nonconvex"):
        Generator(0, 0, 1, 0, 1, c2=-1.0)
    with pytest.raises(NetworkError, match="reference"):
        Network(100.0, (Bus(0), Bus(1)), (Branch(0, 1, 0, 0.1),), (), np.zeros(2), np.zeros(2))
    with pytest.raises(NetworkError, match="connect"):
        Network(100.0, (bus(0, True), bus(1)), (), (), np.zeros(2), np.zeros(2))
    with pytest.raises(NetworkError, match="dangling"):
        Network(100.0, (bus(0, True),), (), (gen(5),), np.zeros(1), np.zeros(1))


def test_out_of_service_branch_excluded():
    net = triangle().with_branch_out(0)
    assert not net.incidence[0].any()
    assert net.is_connected()
    assert triangle().branches[0].in_service


def test_network_is_immutable(case30):
    with pytest.raises(ValueError):
        case30.nominal_pd[0] = 1.0
    d = DemandSample.nominal(case30)
    d.pd[0] = 5.0
    assert case30.nominal_pd[0] != 5.0


def test_lmp_units(case30):
    assert case30.lmp_to_mwh([100.0])[0] == pytest.approx(100.0 / case30.base_mva)
    assert case30.buses[0].bus_kind in tuple(BusKind)
