import itertools

import numpy as np
import pytest

from pdcopf.solver import (
    LdlFactor,
    NlpProblem,
    SingularSystem,
    SolverOptions,
    Status,
    check_kkt,
    quadratic_program,
    solve_ipm,
)


def enumerate_qp(Q, q, A_eq, b_eq, G, h):
    """Brute force over active sets of ``G x <= h``; feasible minimum of the equality solves."""
    n, m = len(q), len(h)
    best = None
    for k in range(m + 1):
        for act in itertools.combinations(range(m), k):
            A = np.vstack([A_eq, G[list(act)]]) if len(act) else A_eq
            b = np.concatenate([b_eq, h[list(act)]]) if len(act) else b_eq
            r = len(b)
            kkt = np.block([[Q, A.T], [A, np.zeros((r, r))]])
            rhs = np.concatenate([-q, b])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            if np.linalg.norm(kkt @ sol - rhs) > 1e-9 * (1 + np.linalg.norm(rhs)):
                continue
            x = sol[:n]
            if np.any(G @ x > h + 1e-9) or np.linalg.norm(A_eq @ x - b_eq) > 1e-9:
                continue
            f = 0.5 * x @ Q @ x + q @ x
            if best is None or f < best[0]:
                best = (f, x)
    return best


def random_qp(rng):
    n = int(rng.integers(1, 5))
    m_eq = int(rng.integers(0, min(n, 2) + 1)) if n > 1 else 0
    m_in = int(rng.integers(1, 4))
    M = rng.normal(size=(n, n))
    Q = M @ M.T + 0.1 * np.eye(n)
    q = rng.normal(size=n) * 3
    x0 = rng.normal(size=n)
    A_eq = rng.normal(size=(m_eq, n))
    b_eq = A_eq @ x0
    G = rng.normal(size=(m_in, n))
    h = G @ x0 + rng.uniform(0, 1, m_in)
    return Q, q, A_eq, b_eq, G, h


def test_equality_multiplier_sign():
    # min x^2 s.t. x = 3
    rep = solve_ipm(quadratic_program([[2.0]], [0.0], [[1.0]], [3.0]), np.zeros(1))
    assert rep.status == Status.OPTIMAL
    assert rep.x[0] == pytest.approx(3.0, abs=1e-8)
    assert rep.y_eq[0] == pytest.approx(6.0, abs=1e-6)


def test_inequality_multiplier():
    # min x^2 + y^2 s.t. x + y >= 2
    prob = quadratic_program(2 * np.eye(2), np.zeros(2), A_in=[[-1.0, -1.0]], b_in=[-2.0])
    rep = solve_ipm(prob, np.zeros(2))
    assert rep.ok
    np.testing.assert_allclose(rep.x, [1.0, 1.0], atol=1e-7)
    assert rep.z_ineq[0] == pytest.approx(2.0, abs=1e-6)


def test_check_kkt_small_at_optimum_and_large_when_perturbed():
    prob = quadratic_program([[2.0]], [0.0], [[1.0]], [3.0])
    rep = solve_ipm(prob, np.zeros(1))
    assert max(check_kkt(prob, rep)) <= 1e-8
    rep.x = rep.x + 1e-2
    assert check_kkt(prob, rep)[0] > 1e-3


def test_random_qps_match_active_set_enumeration():
    rng = np.random.default_rng(20240611)
    worst = 0.0
    for _ in range(200):
        Q, q, A_eq, b_eq, G, h = random_qp(rng)
        ref = enumerate_qp(Q, q, A_eq, b_eq, G, h)
        assert ref is not None
        rep = solve_ipm(quadratic_program(Q, q, A_eq if len(A_eq) else None, b_eq, G, h), np.zeros(len(q)))
        assert rep.ok, rep.message
        gap = abs(rep.objective - ref[0])
        worst = max(worst, gap)
        assert gap <= 1e-7 * (1 + abs(ref[0]))
    assert worst < 1e-7


def test_rhs_sensitivity_matches_multiplier():
    rng = np.random.default_rng(3)
    for _ in range(10):
        n = 3
        M = rng.normal(size=(n, n))
        Q = M @ M.T + np.eye(n)
        q = rng.normal(size=n)
        A = rng.normal(size=(2, n))
        b = rng.normal(size=2)
        rep = solve_ipm(quadratic_program(Q, q, A, b), np.zeros(n))
        for i in range(2):
            d = 1e-5
            bp, bm = b.copy(), b.copy()
            bp[i] += d
            bm[i] -= d
            fp = solve_ipm(quadratic_program(Q, q, A, bp), np.zeros(n)).objective
            fm = solve_ipm(quadratic_program(Q, q, A, bm), np.zeros(n)).objective
            fd = (fp - fm) / (2 * d)
            assert fd == pytest.approx(rep.y_eq[i], rel=1e-4, abs=1e-6)


def test_bounds_and_multipliers():
    # min (x - 2)^2 with x <= 1: upper-bound multiplier 2
    prob = quadratic_program([[2.0]], [-4.0], lower=[-5.0], upper=[1.0])
    rep = solve_ipm(prob, np.zeros(1))
    assert rep.x[0] == pytest.approx(1.0, abs=1e-7)
    assert rep.z_upper[0] == pytest.approx(2.0, abs=1e-6)


def test_infeasible_qp_reported():
    prob = quadratic_program(np.eye(1), [0.0], A_in=[[1.0], [-1.0]], b_in=[-1.0, -1.0])
    rep = solve_ipm(prob, np.zeros(1))
    assert rep.status == Status.INFEASIBLE


def test_iteration_cap():
    prob = quadratic_program(np.eye(2), [1.0, -1.0], A_in=[[1.0, 1.0]], b_in=[0.5])
    rep = solve_ipm(prob, np.zeros(2), SolverOptions(max_iter=1))
    assert rep.status == Status.MAX_ITER


def test_convex_path_is_deterministic():
    rng = np.random.default_rng(9)
    Q, q, A_eq, b_eq, G, h = random_qp(rng)
    prob = quadratic_program(Q, q, A_eq if len(A_eq) else None, b_eq, G, h)
    a = solve_ipm(prob, np.zeros(len(q)))
    b = solve_ipm(prob, np.zeros(len(q)))
    assert a.x.tobytes() == b.x.tobytes()
    assert a.iterations == b.iterations
    assert a.history == b.history


def test_nonconvex_problem_inertia_correction():
    # min -x^2 + x^4/4 on [-3, 3]: minima at +-sqrt(2), start on the positive side
    prob = NlpProblem(
        1,
        objective=lambda x: float(-x[0] ** 2 + 0.25 * x[0] ** 4),
        gradient=lambda x: np.array([-2 * x[0] + x[0] ** 3]),
        hessian=lambda x, y, z, s: s * np.array([[-2 + 3 * x[0] ** 2]]),
        lower=[-3.0], upper=[3.0],
    )
    rep = solve_ipm(prob, np.array([0.1]))
    assert rep.ok
    assert abs(rep.x[0]) == pytest.approx(np.sqrt(2), abs=1e-6)


def test_ldl_inertia_and_solve():
    A = np.array([[2.0, 1.0, 0.0], [1.0, -3.0, 0.0], [0.0, 0.0, 1.0]])
    f = LdlFactor(A)
    assert f.inertia == (2, 1, 0)
    b = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(A @ f.solve(b), b, atol=1e-12)


def test_ldl_singular():
    with pytest.raises(SingularSystem):
        LdlFactor(np.zeros((2, 2))).solve(np.ones(2))
