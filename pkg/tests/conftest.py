import os
from pathlib import Path

import numpy as np
import pytest

from pdcopf.case_io import load_case
from pdcopf.model import Branch, Bus, BusKind, Generator, Network

CACHE = Path(os.environ.get("PDCOPF_TEST_CACHE", Path(__file__).resolve().parent.parent / ".test_cache"))


def bus(i, ref=False, **kw):
    return Bus(i, bus_kind=BusKind.REFERENCE if ref else BusKind.LOAD, **kw)


def gen(b, c2=0.0, c1=10.0, p_min=0.0, p_max=2.0, q_min=-1.0, q_max=1.0):
    return Generator(b, p_min, p_max, q_min, q_max, c2, c1)


def one_bus(pd=1.0, c2=0.0, c1=10.0, g_shunt=0.0):
    return Network(100.0, (bus(0, True, g_shunt=g_shunt),), (), (gen(0, c2, c1),),
                   np.array([pd]), np.array([0.0]), name="one-bus")


def two_bus(pd2=0.5, r=0.0, x=0.1, s_max=10.0, gens=None, pd1=0.0, v=(0.9, 1.1)):
    gens = gens if gens is not None else (gen(0, 5.0, 10.0),)
    buses = (bus(0, True, v_min=v[0], v_max=v[1]), bus(1, v_min=v[0], v_max=v[1]))
    return Network(100.0, buses, (Branch(0, 1, r, x, s_max=s_max),), tuple(gens),
                   np.array([pd1, pd2]), np.zeros(2), name="two-bus")


def triangle(x=0.1, pd=(0.0, 0.3, 0.3), spur=False):
    n = 4 if spur else 3
    buses = tuple(bus(i, i == 0) for i in range(n))
    branches = [Branch(0, 1, 0.0, x), Branch(1, 2, 0.0, x), Branch(0, 2, 0.0, x)]
    if spur:
        branches.append(Branch(2, 3, 0.0, x))
    load = np.zeros(n)
    load[: len(pd)] = pd
    return Network(100.0, buses, tuple(branches), (gen(0, 1.0, 10.0),), load, np.zeros(n), name="triangle")


def path3():
    buses = tuple(bus(i, i == 0) for i in range(3))
    return Network(100.0, buses, (Branch(0, 1, 0.0, 0.1), Branch(1, 2, 0.0, 0.1)), (gen(0),),
                   np.array([0.0, 0.2, 0.2]), np.zeros(3), name="path")


def random_two_bus(rng):
    c1 = rng.uniform(5, 50, 2)
    c2 = rng.uniform(0.5, 5, 2) * 100
    gens = (gen(0, c2[0], c1[0]), gen(1, c2[1], c1[1]))
    return two_bus(pd2=rng.uniform(0.5, 1.5), pd1=rng.uniform(0.2, 1.0), s_max=rng.uniform(0.2, 1.0), gens=gens)


@pytest.fixture(scope="session")
def case30():
    return load_case("case30")


@pytest.fixture(scope="session")
def case57():
    return load_case("case57")


@pytest.fixture(scope="session")
def cache_dir():
    CACHE.mkdir(parents=True, exist_ok=True)
    return CACHE


def fd_check(problem, x, y=None, z=None, h=1e-6):
    """Worst relative error of gradient, Jacobians and Lagrangian Hessian vs central differences."""
    n = problem.n
    m_eq, m_in = len(problem.c(x)), len(problem.h(x))
    rng = np.random.default_rng(0)
    y = rng.normal(size=m_eq) if y is None else y
    z = rng.uniform(0.1, 1.0, m_in) if z is None else z

    def lag_grad(u):
        return problem.gradient(u) - problem.jc(u).T @ y + problem.jh(u).T @ z

    def rel(a, b):
        return float(np.max(np.abs(a - b)) / (1.0 + np.max(np.abs(b), initial=0.0)))

    fd_g, fd_jc, fd_jh, fd_hess = (np.zeros(n), np.zeros((m_eq, n)), np.zeros((m_in, n)), np.zeros((n, n)))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        fd_g[j] = (problem.objective(x + e) - problem.objective(x - e)) / (2 * h)
        fd_jc[:, j] = (problem.c(x + e) - problem.c(x - e)) / (2 * h)
        fd_jh[:, j] = (problem.h(x + e) - problem.h(x - e)) / (2 * h)
        fd_hess[:, j] = (lag_grad(x + e) - lag_grad(x - e)) / (2 * h)
    return max(
        rel(problem.gradient(x), fd_g),
        rel(problem.jc(x), fd_jc) if m_eq else 0.0,
        rel(problem.jh(x), fd_jh) if m_in else 0.0,
        rel(problem.hessian(x, y, z, 1.0), fd_hess),
    )


# acceptance lines collected by test_acceptance, echoed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
