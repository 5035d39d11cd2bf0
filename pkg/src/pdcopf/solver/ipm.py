"""Primal-dual interior-point method for smooth NLPs and convex QPs.

Problem form::

    min f(x)  s.t.  c(x) = 0,  h(x) <= 0,  lower <= x <= upper

Multiplier convention: ``grad f = Jc^T y - Jh^T z_h - z_upper + z_lower`` at a
KKT point, so ``y_i`` is the derivative of the optimal objective with respect
to the right-hand side of ``c_i(x) = rhs``, and all inequality multipliers are
nonnegative.

The iteration is a barrier Newton scheme on the slack-augmented system (bounds
are handled as linear inequalities) with Mehrotra predictor-corrector centering.  In nonconvex mode the
reduced KKT matrix is regularized until its inertia is ``(n, m, 0)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .linalg import LdlFactor, SingularSystem

PHASE1_MAX_ITER = 50


class Status(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max-iter"
    NUMERICAL_FAILURE = "numerical-failure"


@dataclass
class NlpProblem:
    """Callback bundle.

    ``hessian(x, y, z, sigma)`` returns the dense Hessian of
    ``sigma * f(x) - y @ c(x) + z @ h(x)``.
    """

    n: int
    objective: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[..., np.ndarray]
    eq: Callable[[np.ndarray], np.ndarray] | None = None
    eq_jacobian: Callable[[np.ndarray], np.ndarray] | None = None
    ineq: Callable[[np.ndarray], np.ndarray] | None = None
    ineq_jacobian: Callable[[np.ndarray], np.ndarray] | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    convex: bool = False
    name: str = "nlp"

    def __post_init__(self):
        lo = np.full(self.n, -np.inf) if self.lower is None else np.asarray(self.lower, float)
        up = np.full(self.n, np.inf) if self.upper is None else np.asarray(self.upper, float)
        if lo.shape != (self.n,) or up.shape != (self.n,):
            raise ValueError("bounds must have length n")
        if np.any(lo > up):
            raise ValueError("lower bound exceeds upper bound")
        self.lower, self.upper = lo, up

    def c(self, x):
        return np.zeros(0) if self.eq is None else np.asarray(self.eq(x), float)

    def jc(self, x):
        return np.zeros((0, self.n)) if self.eq is None else np.asarray(self.eq_jacobian(x), float)

    def h(self, x):
        return np.zeros(0) if self.ineq is None else np.asarray(self.ineq(x), float)

    def jh(self, x):
        return np.zeros((0, self.n)) if self.ineq is None else np.asarray(self.ineq_jacobian(x), float)


@dataclass
class SolverOptions:
    tolerance: float = 1e-8
    max_iter: int = 200
    fraction_to_boundary: float = 0.995
    sigma_min: float = 1e-4
    initial_regularization: float = 1e-4
    max_regularization: float = 1e20
    infeasibility_threshold: float = 1e-6
    detect_infeasibility: bool = True
    cost_tolerance: float | None = None


@dataclass
class SolveReport:
    x: np.ndarray
    y_eq: np.ndarray
    z_ineq: np.ndarray
    z_lower: np.ndarray
    z_upper: np.ndarray
    objective: float
    status: Status
    iterations: int
    kkt_residuals: tuple[float, float, float]
    message: str = ""
    history: list = field(default_factory=list, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == Status.OPTIMAL


def check_kkt(problem: NlpProblem, report: SolveReport) -> tuple[float, float, float]:
    """Scaled (stationarity, primal feasibility, complementarity) infinity norms."""
    return kkt_residuals(
        problem, report.x, report.y_eq, report.z_ineq, report.z_lower, report.z_upper
    )


def kkt_residuals(problem, x, y, z, zl, zu, parts=None):
    if parts is None:
        parts = (problem.gradient(x), problem.c(x), problem.jc(x), problem.h(x), problem.jh(x))
    g, c, jc, h, jh = parts
    lo, up = problem.lower, problem.upper
    r = g - jc.T @ y + jh.T @ z + zu - zl
    scale = 1.0 + max(_inf(g), _inf(y), _inf(z), _inf(zl), _inf(zu))
    stationarity = _inf(r) / scale

    viol = [_inf(c), np.max(h, initial=0.0)]
    fin_u, fin_l = np.isfinite(up), np.isfinite(lo)
    viol.append(np.max(x[fin_u] - up[fin_u], initial=0.0))
    viol.append(np.max(lo[fin_l] - x[fin_l], initial=0.0))
    primal = max(viol) / (1.0 + _inf(x))

    comp = [np.max(np.abs(z * h), initial=0.0)]
    comp.append(np.max(np.abs(zu[fin_u] * (up[fin_u] - x[fin_u])), initial=0.0))
    comp.append(np.max(np.abs(zl[fin_l] * (x[fin_l] - lo[fin_l])), initial=0.0))
    # zero-width bounds carry no complementarity information
    complementarity = max(comp) / scale
    return float(stationarity), float(primal), float(complementarity)


def _inf(v):
    return float(np.max(np.abs(v), initial=0.0))


class _Layout:
    """Maps the user problem to ``C(x) = 0, H(x) <= 0`` with bounds folded in."""

    def __init__(self, problem: NlpProblem):
        p = problem
        lo, up = p.lower, p.upper
        self.fixed = np.flatnonzero(np.isfinite(lo) & (up - lo <= 1e-14 * (1 + np.abs(lo))))
        free = np.ones(p.n, bool)
        free[self.fixed] = False
        self.ub = np.flatnonzero(np.isfinite(up) & free)
        self.lb = np.flatnonzero(np.isfinite(lo) & free)
        self.problem = p

    def evaluate(self, x):
        p = self.problem
        c = np.concatenate([p.c(x), x[self.fixed] - p.lower[self.fixed]])
        jc_user = p.jc(x)
        jfix = np.zeros((len(self.fixed), p.n))
        jfix[np.arange(len(self.fixed)), self.fixed] = 1.0
        jc = np.vstack([jc_user, jfix])
        h_user = p.h(x)
        h = np.concatenate([h_user, x[self.ub] - p.upper[self.ub], p.lower[self.lb] - x[self.lb]])
        jh_user = p.jh(x)
        jub = np.zeros((len(self.ub), p.n))
        jub[np.arange(len(self.ub)), self.ub] = 1.0
        jlb = np.zeros((len(self.lb), p.n))
        jlb[np.arange(len(self.lb)), self.lb] = -1.0
        jh = np.vstack([jh_user, jub, jlb])
        return c, jc, h, jh, len(h_user), len(jc_user)

    def split(self, lam, mu, n_h_user, n_c_user):
        """Internal multipliers -> user convention (y, z_h, z_lower, z_upper)."""
        n = self.problem.n
        y = -lam[:n_c_user]
        z = mu[:n_h_user]
        zu = np.zeros(n)
        zl = np.zeros(n)
        zu[self.ub] = mu[n_h_user : n_h_user + len(self.ub)]
        zl[self.lb] = mu[n_h_user + len(self.ub) :]
        # multiplier of x_j = l_j acts as an unsigned bound multiplier
        fix_mult = -lam[n_c_user:]
        zl[self.fixed] = np.maximum(fix_mult, 0.0)
        zu[self.fixed] = np.maximum(-fix_mult, 0.0)
        return y, z, zl, zu


def solve_ipm(problem: NlpProblem, start, opts: SolverOptions | None = None) -> SolveReport:
    opts = opts or SolverOptions()
    start = np.asarray(start, float)
    report = _solve(problem, start, opts)
    if report.status != Status.OPTIMAL and opts.detect_infeasibility:
        for x0 in (start, report.x):
            verdict = _elastic_infeasible(problem, x0, opts)
            if verdict is not None:
                break
        if verdict:
            report.status = Status.INFEASIBLE
            report.message = f"minimum constraint violation {verdict:.3g} > 0 (phase-1 local optimum)"
    return report


def _interior_start(problem, x0):
    lo, up = problem.lower, problem.upper
    x = np.clip(x0, lo, up)
    width = up - lo
    both = np.isfinite(width) & (width > 0)
    push = np.where(both, np.minimum(0.01 * width, 0.01), 0.01)
    inner_lo = np.where(np.isfinite(lo), lo + push, -np.inf)
    inner_up = np.where(np.isfinite(up), up - push, np.inf)
    fixed = np.isfinite(width) & (width <= 0)
    x = np.where(fixed, lo, np.clip(x, np.minimum(inner_lo, inner_up), np.maximum(inner_lo, inner_up)))
    return x


def _solve(problem: NlpProblem, x0: np.ndarray, opts: SolverOptions) -> SolveReport:
    lay = _Layout(problem)
    n = problem.n
    x = _interior_start(problem, x0)
    if not np.all(np.isfinite(x)):
        raise ValueError("start point must be finite")

    g0 = problem.gradient(x)
    obj_scale = max(1.0, _inf(g0))
    sigma_f = 1.0 / obj_scale

    c, jc, h, jh, nh_user, nc_user = lay.evaluate(x)
    m, p = len(c), len(h)
    z = np.maximum(-h, 1.0) if p else np.zeros(0)
    mu = np.ones(p)
    lam = np.zeros(m)
    f = problem.objective(x) * sigma_f
    delta_last = 0.0
    history = []
    cost_tol = opts.cost_tolerance if opts.cost_tolerance is not None else opts.tolerance
    status = Status.MAX_ITER
    message = ""
    residuals = (np.inf, np.inf, np.inf)

    for it in range(opts.max_iter + 1):
        g = problem.gradient(x) * sigma_f
        lx = g + jc.T @ lam + jh.T @ mu
        y, zh, zl, zu = lay.split(lam, mu, nh_user, nc_user)
        parts = (g * obj_scale, problem.c(x), jc[:nc_user], problem.h(x), jh[:nh_user])
        residuals = kkt_residuals(problem, x, y * obj_scale, zh * obj_scale, zl * obj_scale,
                                  zu * obj_scale, parts)
        history.append((it, f * obj_scale) + residuals)
        if not all(np.isfinite(residuals)):
            status, message = Status.NUMERICAL_FAILURE, "non-finite iterate"
            break
        if it > 0 and max(residuals) <= opts.tolerance and abs(f - f_prev) <= cost_tol * (1 + abs(f_prev)):
            status = Status.OPTIMAL
            break
        if it == opts.max_iter:
            break

        hess = problem.hessian(x, -lam[:nc_user] * obj_scale, mu[:nh_user] * obj_scale, 1.0) * sigma_f
        if p:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                zinv = 1.0 / z
                mmat = hess + (jh.T * (mu * zinv)) @ jh
        else:
            mmat = hess
        if not np.all(np.isfinite(mmat)):
            status, message = Status.NUMERICAL_FAILURE, "barrier terms overflowed"
            break
        try:
            fac, delta_last = _kkt_factor(mmat, jc, problem.convex, delta_last, opts)
        except SingularSystem as exc:
            status, message = Status.NUMERICAL_FAILURE, str(exc)
            break

        def direction(target):
            # target is the desired z*mu after the step (vector)
            nvec = lx + jh.T @ (zinv * (mu * h + target)) if p else lx
            sol = fac.solve(np.concatenate([-nvec, -c]))
            dx, dlam = sol[:n], sol[n:]
            if not p:
                return dx, dlam, np.zeros(0), np.zeros(0)
            dz = -h - z - jh @ dx
            dmu = -mu + zinv * (target - mu * dz)
            return dx, dlam, dz, dmu

        if p:
            # Mehrotra predictor-corrector: affine step sets the centering weight
            avg = float(z @ mu) / p
            dx, dlam, dz, dmu = direction(np.zeros(p))
            ap = _step(z, dz, 1.0)
            ad = _step(mu, dmu, 1.0)
            avg_aff = float((z + ap * dz) @ (mu + ad * dmu)) / p
            centering = min(1.0, max(opts.sigma_min, (avg_aff / avg) ** 3))
            dx, dlam, dz, dmu = direction(centering * avg - dz * dmu)
            alpha_p = _step(z, dz, opts.fraction_to_boundary)
            alpha_d = _step(mu, dmu, opts.fraction_to_boundary)
        else:
            dx, dlam, dz, dmu = direction(None)
            alpha_p = alpha_d = 1.0

        x = x + alpha_p * dx
        z = z + alpha_p * dz
        lam = lam + alpha_d * dlam
        mu = mu + alpha_d * dmu
        f_prev = f
        f = problem.objective(x) * sigma_f
        c, jc, h, jh, _, _ = lay.evaluate(x)

    y, zh, zl, zu = lay.split(lam, mu, nh_user, nc_user)
    return SolveReport(
        x=x,
        y_eq=y * obj_scale,
        z_ineq=zh * obj_scale,
        z_lower=zl * obj_scale,
        z_upper=zu * obj_scale,
        objective=float(problem.objective(x)),
        status=status,
        iterations=it,
        kkt_residuals=residuals,
        message=message,
        history=history,
    )


def _step(v, dv, tau):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, tau * np.min(-v[neg] / dv[neg])))


def _kkt_factor(mmat, jc, convex, delta_last, opts):
    """Factor ``[[M + dw I, Jc'], [Jc, -dc I]]`` with inertia ``(n, m, 0)``."""
    n, m = mmat.shape[0], jc.shape[0]
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = mmat
    kkt[n:, :n] = jc
    kkt[:n, n:] = jc.T

    def factor(dw, dc):
        k = kkt.copy()
        if dw:
            k[np.arange(n), np.arange(n)] += dw
        if dc:
            k[np.arange(n, n + m), np.arange(n, n + m)] -= dc
        return LdlFactor(k)

    fac = factor(0.0, 0.0)
    if fac.inertia == (n, m, 0):
        return fac, 0.0
    if convex and fac.inertia[2] == 0 and fac.inertia[1] <= m:
        # inertia is only off by rank deficiency of jc; already solvable
        return fac, 0.0
    delta_c = 1e-8 if fac.inertia[2] else 0.0
    if convex:
        delta = 1e-10
    else:
        delta = opts.initial_regularization if delta_last == 0.0 else max(1e-20, delta_last / 3.0)
    growth = 100.0 if delta_last == 0.0 else 8.0
    while delta <= opts.max_regularization:
        fac = factor(delta, delta_c)
        if fac.inertia == (n, m, 0):
            return fac, delta
        if fac.inertia[2] or fac.inertia[1] < m:
            # zero or missing negative pivots come from a rank-deficient jc
            delta_c = 1e-8 if not delta_c else min(100.0 * delta_c, 1e-2)
            fac = factor(delta, delta_c)
            if fac.inertia == (n, m, 0):
                return fac, delta
        delta *= growth
    raise SingularSystem("KKT matrix could not be regularized to the correct inertia")


def _elastic_infeasible(problem: NlpProblem, x0: np.ndarray, opts: SolverOptions):
    """Phase-one check: minimize total constraint violation with elastic slacks.

    Returns the violation if it is significant, ``0.0`` if the constraints
    can be met, and ``None`` when phase one itself fails to converge.
    """
    n = problem.n
    m = len(problem.c(x0))
    q = len(problem.h(x0))
    if m + q == 0:
        return 0.0
    nn = n + 2 * m + q

    def parts(v):
        return v[:n], v[n : n + m], v[n + m : n + 2 * m], v[n + 2 * m :]

    def eq(v):
        x, ep, en, _ = parts(v)
        return problem.c(x) - ep + en

    def eq_jac(v):
        x = v[:n]
        return np.hstack([problem.jc(x), -np.eye(m), np.eye(m), np.zeros((m, q))])

    def ineq(v):
        x, _, _, t = parts(v)
        return problem.h(x) - t

    def ineq_jac(v):
        x = v[:n]
        return np.hstack([problem.jh(x), np.zeros((q, 2 * m)), -np.eye(q)])

    def hess(v, y, z, sigma):
        hh = np.zeros((nn, nn))
        hh[:n, :n] = problem.hessian(v[:n], y, z, 0.0)
        return hh

    lo = np.concatenate([problem.lower, np.zeros(2 * m + q)])
    up = np.concatenate([problem.upper, np.full(2 * m + q, np.inf)])
    cost = np.concatenate([np.zeros(n), np.ones(2 * m + q)])
    phase = NlpProblem(
        nn,
        objective=lambda v: float(cost @ v),
        gradient=lambda v: cost,
        hessian=hess,
        eq=eq if m else None,
        eq_jacobian=eq_jac if m else None,
        ineq=ineq if q else None,
        ineq_jacobian=ineq_jac if q else None,
        lower=lo,
        upper=up,
        convex=problem.convex,
        name=problem.name + "-elastic",
    )
    x = np.clip(x0, problem.lower, problem.upper)
    c0 = problem.c(x)
    h0 = problem.h(x)
    v0 = np.concatenate([x, np.maximum(c0, 0) + 1.0, np.maximum(-c0, 0) + 1.0, np.maximum(h0, 0) + 1.0])
    # a phase one that has not settled within PHASE1_MAX_ITER is reported as undecided
    rep = _solve(phase, v0, SolverOptions(tolerance=1e-7, max_iter=min(opts.max_iter, PHASE1_MAX_ITER),
                                          detect_infeasibility=False))
    if rep.status != Status.OPTIMAL:
        return None
    violation = float(cost @ rep.x)
    return violation if violation > opts.infeasibility_threshold * (1.0 + _inf(x)) else 0.0


def quadratic_program(Q, q, A_eq=None, b_eq=None, A_in=None, b_in=None, lower=None, upper=None,
                      name="qp") -> NlpProblem:
    """``min 1/2 x'Qx + q'x  s.t.  A_eq x = b_eq, A_in x <= b_in, bounds``."""
    Q = np.asarray(Q, float)
    q = np.asarray(q, float)
    n = len(q)
    has_eq = A_eq is not None and len(A_eq)
    has_in = A_in is not None and len(A_in)
    if has_eq:
        A_eq, b_eq = np.atleast_2d(np.asarray(A_eq, float)), np.asarray(b_eq, float)
    if has_in:
        A_in, b_in = np.atleast_2d(np.asarray(A_in, float)), np.asarray(b_in, float)
    return NlpProblem(
        n,
        objective=lambda x: float(0.5 * x @ Q @ x + q @ x),
        gradient=lambda x: Q @ x + q,
        hessian=lambda x, y, z, sigma: sigma * Q,
        eq=(lambda x: A_eq @ x - b_eq) if has_eq else None,
        eq_jacobian=(lambda x: A_eq) if has_eq else None,
        ineq=(lambda x: A_in @ x - b_in) if has_in else None,
        ineq_jacobian=(lambda x: A_in) if has_in else None,
        lower=lower,
        upper=upper,
        convex=True,
        name=name,
    )
