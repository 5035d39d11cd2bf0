import json

import numpy as np
import pytest

from pdcopf.case_io import (
    CaseFormatError,
    bridges,
    connectivity_check,
    enumerate_n_minus_1,
    load_case,
    network_from_json,
    network_hash,
    network_to_json,
    parse_case,
    serialize_case,
)
from pdcopf.model import UNLIMITED

from conftest import path3, triangle, two_bus

TWO_BUS = """function mpc = two
mpc.version = '2';
mpc.baseMVA = 100;
% bus data
mpc.bus = [
	1	3	0	0	0	0	1	1	0	135	1	1.1	0.9;
	2	1	50	10	0	0	1	1	0	135	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	100	-100	1	100	1	200	0;
];
mpc.branch = [
	1	2	0.01	0.1	0.02	{rate}	0	0	0	0	1	-360	360;
];
mpc.gencost = [
	2	0	0	3	0.01	20	0;
];
"""


def fixture(rate=100, **swap):
    text = TWO_BUS.format(rate=rate)
    for old, new in swap.items():
        text = text.replace(old.replace("_", " "), new)
    return text


def test_two_bus_fixture_fields():
    net = parse_case(fixture())
    np.testing.assert_allclose(net.nominal_pd, [0.0, 0.5])
    np.testing.assert_allclose(net.nominal_qd, [0.0, 0.1])
    assert net.branches[0].s_max == pytest.approx(1.0)
    assert net.branches[0].b_charging == pytest.approx(0.02)
    g = net.generators[0]
    assert (g.p_max, g.p_min, g.q_max, g.q_min) == pytest.approx((2.0, 0.0, 1.0, -1.0))
    # $/MWh^2 -> $/h per p.u.^2
    assert g.c2 == pytest.approx(0.01 * 100**2)
    assert g.c1 == pytest.approx(20 * 100)


def test_zero_rate_is_unlimited():
    net = parse_case(fixture(rate=0))
    assert net.branches[0].s_max == UNLIMITED
    assert not net.branches[0].limited


def test_dangling_generator_bus():
    text = fixture().replace("\t1\t0\t0\t100\t-100", "\t99\t0\t0\t100\t-100")
    with pytest.raises(CaseFormatError, match="dangling generator bus"):
        parse_case(text)


def test_missing_matrix_and_bad_token():
    with pytest.raises(CaseFormatError, match="missing matrix 'gencost'"):
        parse_case(fixture().split("mpc.gencost")[0])
    with pytest.raises(CaseFormatError, match="non-numeric token") as err:
        parse_case(fixture().replace("0.01\t0.1", "0.01\tabc"))
    assert err.value.line is not None


def test_gencost_row_count():
    text = fixture().replace("\t2\t0\t0\t3\t0.01\t20\t0;\n", "\t2\t0\t0\t3\t0.01\t20\t0;\n\t2\t0\t0\t3\t0.01\t20\t0;\n")
    with pytest.raises(CaseFormatError, match="gencost rows"):
        parse_case(text)


def test_offline_generator_dropped():
    text = fixture().replace(
        "\t1\t0\t0\t100\t-100\t1\t100\t1\t200\t0;",
        "\t1\t0\t0\t100\t-100\t1\t100\t1\t200\t0;\n\t2\t0\t0\t100\t-100\t1\t100\t0\t200\t0;")
    text = text.replace("\t2\t0\t0\t3\t0.01\t20\t0;", "\t2\t0\t0\t3\t0.01\t20\t0;\n\t2\t0\t0\t3\t0.02\t30\t0;")
    assert parse_case(text).n_gen == 1


def test_bundled_cases_load(case30, case57):
    assert (case30.n_bus, case30.n_branch, case30.n_gen) == (30, 41, 6)
    assert (case57.n_bus, case57.n_branch, case57.n_gen) == (57, 80, 7)


def test_missing_file():
    with pytest.raises(FileNotFoundError, match="case not found"):
        load_case("/nonexistent/case.m")


@pytest.mark.parametrize("name", ["case30", "case57"])
def test_serialize_round_trip(name):
    net = load_case(name)
    again = parse_case(serialize_case(net), name=name)
    assert again == net
    assert network_hash(again) == network_hash(net)


def test_json_round_trip(case30):
    text = network_to_json(case30)
    assert len(json.loads(text)["buses"]) == 30
    assert network_from_json(text) == case30


def test_n_minus_1_small_graphs():
    assert len(enumerate_n_minus_1(triangle())) == 3
    assert len(enumerate_n_minus_1(path3())) == 0
    spur = triangle(spur=True)
    variants = enumerate_n_minus_1(spur)
    assert len(variants) == 3
    assert 3 not in [v.removed_branch for v in variants]


def test_connectivity_check():
    assert connectivity_check(triangle())
    assert not connectivity_check(two_bus(), removed=(0,))


@pytest.mark.parametrize("name", ["case30", "case57"])
def test_n_minus_1_matches_exhaustive_search(name):
    net = load_case(name)
    brute = [i for i in range(net.n_branch) if net.branches[i].in_service and connectivity_check(net, (i,))]
    variants = enumerate_n_minus_1(net)
    assert [v.removed_branch for v in variants] == brute
    assert len(variants) == sum(b.in_service for b in net.branches) - len(bridges(net))
    for v in variants:
        assert not v.network.branches[v.removed_branch].in_service
        assert v.network.is_connected()


def test_parallel_branches_are_not_bridges():
    from pdcopf.model import Branch
    import dataclasses
    base = two_bus()
    net = dataclasses.replace(base, branches=base.branches + (Branch(0, 1, 0.0, 0.2),))
    assert bridges(net) == set()
    assert len(enumerate_n_minus_1(net)) == 2
