"""AC optimal power flow in polar coordinates and the dispatch projection.

Decision vector ``x = [theta (nb), v (nb), pg (ng), qg (ng)]``.  Branch flows
and the lifted products ``c_ii, c_ij, s_ij`` are expressions of ``(v, theta)``,
never separate variables.  Thermal limits apply at both branch ends.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .model import DemandSample, Network
from .solver import NlpProblem, SolverOptions, Status, check_kkt, solve_ipm

log = logging.getLogger(__name__)

SCHEMA = "pdcopf.opf_solution"
KKT_ACCEPT = 1e-6


class OpfFailure(RuntimeError):
    """Raised when an OPF cannot be solved; ``status`` tells why."""

    def __init__(self, message: str, status: Status, report=None):
        super().__init__(message)
        self.status = status
        self.report = report


@dataclass
class AcopfSolution:
    p_gen: np.ndarray
    q_gen: np.ndarray
    v: np.ndarray
    theta: np.ndarray
    p_flow: np.ndarray
    q_flow: np.ndarray
    p_flow_to: np.ndarray
    q_flow_to: np.ndarray
    lambda_p: np.ndarray
    lambda_q: np.ndarray
    objective: float
    status: Status = Status.OPTIMAL
    iterations: int = 0
    kkt_residuals: tuple = (0.0, 0.0, 0.0)
    attempts: list = field(default_factory=list)

    # lifted quantities ------------------------------------------------------------
    @property
    def c_ii(self) -> np.ndarray:
        return self.v**2

    def lifted(self, network: Network):
        """``(c_ij, s_ij)`` per branch, from-bus first."""
        f, t = network.branch_from, network.branch_to
        vv = self.v[f] * self.v[t]
        d = self.theta[f] - self.theta[t]
        return vv * np.cos(d), -vv * np.sin(d)

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "version": 1,
            "kind": "ac",
            "status": self.status.value,
            "objective": self.objective,
            "iterations": self.iterations,
            "kkt_residuals": list(self.kkt_residuals),
            "p_gen": self.p_gen.tolist(),
            "q_gen": self.q_gen.tolist(),
            "v": self.v.tolist(),
            "theta": self.theta.tolist(),
            "p_flow": self.p_flow.tolist(),
            "q_flow": self.q_flow.tolist(),
            "p_flow_to": self.p_flow_to.tolist(),
            "q_flow_to": self.q_flow_to.tolist(),
            "lambda_p": self.lambda_p.tolist(),
            "lambda_q": self.lambda_q.tolist(),
            "mu_flow_hi": None,
            "mu_flow_lo": None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AcopfSolution":
        if d.get("schema") != SCHEMA or d.get("kind") != "ac":
            raise ValueError("not an AC-OPF solution document")
        arr = lambda k: np.asarray(d[k], dtype=float)  # noqa: E731
        return cls(
            p_gen=arr("p_gen"), q_gen=arr("q_gen"), v=arr("v"), theta=arr("theta"),
            p_flow=arr("p_flow"), q_flow=arr("q_flow"),
            p_flow_to=arr("p_flow_to"), q_flow_to=arr("q_flow_to"),
            lambda_p=arr("lambda_p"), lambda_q=arr("lambda_q"),
            objective=float(d["objective"]), status=Status(d["status"]),
            iterations=int(d["iterations"]), kkt_residuals=tuple(d["kkt_residuals"]),
        )


class AcModel:
    """Callbacks of the AC network equations for one (network, demand) pair."""

    def __init__(self, network: Network, demand: DemandSample):
        net = network
        nb, ng = net.n_bus, net.n_gen
        if demand.pd.shape != (nb,):
            raise ValueError(f"demand has {demand.pd.shape[0]} buses, network has {nb}")
        self.net = net
        self.pd = demand.pd
        self.qd = demand.qd
        self.nb, self.ng = nb, ng
        self.n = 2 * nb + 2 * ng
        act = net.active_branches
        self.active = act
        f, t = net.branch_from[act], net.branch_to[act]
        # every active branch contributes two ends: (f -> t) then (t -> f)
        self.end_a = np.concatenate([f, t])
        self.end_b = np.concatenate([t, f])
        g, b, bsh = net.g_series[act], net.b_series[act], net.b_shunt_half[act]
        tau, phi = net.tap[act], net.shift[act]
        self.gs = np.concatenate([g / tau**2, g])
        self.bs = np.concatenate([(b + bsh) / tau**2, b + bsh])
        self.gm = np.tile(g / tau, 2)
        self.bm = np.tile(b / tau, 2)
        self.phase = np.concatenate([-phi, phi])
        self.idx = np.column_stack([self.end_a, self.end_b, nb + self.end_a, nb + self.end_b])
        smax = np.tile(net.s_max[act], 2)
        lim = np.tile(np.array([net.branches[i].limited for i in act], dtype=bool), 2)
        self.lim_ends = np.flatnonzero(lim)
        self.smax2 = smax[self.lim_ends] ** 2
        self.gen_bus = net.gen_bus
        iu, ju = np.triu_indices(4)
        self._iu, self._ju = iu, ju
        self._offdiag = iu != ju

    # slices ---------------------------------------------------------------------
    def unpack(self, x):
        nb, ng = self.nb, self.ng
        return x[:nb], x[nb : 2 * nb], x[2 * nb : 2 * nb + ng], x[2 * nb + ng :]

    def bounds(self):
        net, nb, ng = self.net, self.nb, self.ng
        lo = np.concatenate([np.full(nb, -np.inf), net.v_min, net.p_min, net.q_min])
        up = np.concatenate([np.full(nb, np.inf), net.v_max, net.p_max, net.q_max])
        lo[net.ref_bus] = up[net.ref_bus] = 0.0
        return lo, up

    def flat_start(self):
        net, nb = self.net, self.nb
        return np.concatenate(
            [np.zeros(nb), np.ones(nb), 0.5 * (net.p_min + net.p_max), 0.5 * (net.q_min + net.q_max)]
        )

    def _locals(self, x):
        th, v, _, _ = self.unpack(x)
        a, b = self.end_a, self.end_b
        return v[a], v[b], th[a] - th[b] + self.phase

    def flows(self, x):
        va, vb, d = self._locals(x)
        return _kernels.branch_flows(self.gs, self.bs, self.gm, self.bm, va, vb, d)

    # constraints ------------------------------------------------------------------
    def eq(self, x):
        th, v, pg, qg = self.unpack(x)
        p, q, _, _ = self.flows(x)
        net, nb = self.net, self.nb
        cp = np.bincount(self.gen_bus, pg, nb) - self.pd - net.g_shunt * v * v
        cq = np.bincount(self.gen_bus, qg, nb) - self.qd + net.b_shunt * v * v
        cp -= np.bincount(self.end_a, p, nb)
        cq -= np.bincount(self.end_a, q, nb)
        return np.concatenate([cp, cq])

    def eq_jacobian(self, x):
        _, v, _, _ = self.unpack(x)
        _, _, dp, dq = self.flows(x)
        nb, ng, net = self.nb, self.ng, self.net
        jac = np.zeros((2 * nb, self.n))
        rows = np.repeat(self.end_a, 4)
        cols = self.idx.ravel()
        np.add.at(jac, (rows, cols), -dp.ravel())
        np.add.at(jac, (nb + rows, cols), -dq.ravel())
        buses = np.arange(nb)
        jac[buses, nb + buses] += -2.0 * net.g_shunt * v
        jac[nb + buses, nb + buses] += 2.0 * net.b_shunt * v
        gens = np.arange(ng)
        np.add.at(jac, (self.gen_bus, 2 * nb + gens), 1.0)
        np.add.at(jac, (nb + self.gen_bus, 2 * nb + ng + gens), 1.0)
        return jac

    def ineq(self, x):
        p, q, _, _ = self.flows(x)
        e = self.lim_ends
        return p[e] ** 2 + q[e] ** 2 - self.smax2

    def ineq_jacobian(self, x):
        p, q, dp, dq = self.flows(x)
        e = self.lim_ends
        jac = np.zeros((len(e), self.n))
        vals = 2.0 * p[e, None] * dp[e] + 2.0 * q[e, None] * dq[e]
        rows = np.repeat(np.arange(len(e)), 4)
        np.add.at(jac, (rows, self.idx[e].ravel()), vals.ravel())
        return jac

    def constraint_hessian(self, x, y, z):
        """``-sum y_i hess(c_i) + sum z_j hess(h_j)``."""
        nb = self.nb
        a = self.end_a
        va, vb, d = self._locals(x)
        p, q, dp, dq = _kernels.branch_flows(self.gs, self.bs, self.gm, self.bm, va, vb, d)
        yp, yq = y[:nb], y[nb : 2 * nb]
        wp = yp[a].copy()
        wq = yq[a].copy()
        wo = np.zeros(len(a))
        e = self.lim_ends
        if len(e):
            wp[e] += 2.0 * z * p[e]
            wq[e] += 2.0 * z * q[e]
            wo[e] = 2.0 * z
        blocks = _kernels.branch_hessians(
            self.gs, self.bs, self.gm, self.bm, va, vb, d, wp, wq, wo, dp, dq
        )
        hess = np.zeros((self.n, self.n))
        ri = self.idx[:, self._iu]
        ci = self.idx[:, self._ju]
        np.add.at(hess, (ri.ravel(), ci.ravel()), blocks.ravel())
        off = self._offdiag
        np.add.at(hess, (ci[:, off].ravel(), ri[:, off].ravel()), blocks[:, off].ravel())
        buses = np.arange(nb)
        hess[nb + buses, nb + buses] += 2.0 * yp * self.net.g_shunt - 2.0 * yq * self.net.b_shunt
        return hess

    # problems -----------------------------------------------------------------------
    def problem(self, objective, gradient, obj_hessian, name) -> NlpProblem:
        lo, up = self.bounds()
        has_h = len(self.lim_ends) > 0

        def hessian(x, y, z, sigma):
            return sigma * obj_hessian(x) + self.constraint_hessian(x, y, z)

        return NlpProblem(
            self.n,
            objective=objective,
            gradient=gradient,
            hessian=hessian,
            eq=self.eq,
            eq_jacobian=self.eq_jacobian,
            ineq=self.ineq if has_h else None,
            ineq_jacobian=self.ineq_jacobian if has_h else None,
            lower=lo,
            upper=up,
            convex=False,
            name=name,
        )

    def cost_problem(self) -> NlpProblem:
        net, nb, ng = self.net, self.nb, self.ng
        sl = slice(2 * nb, 2 * nb + ng)
        c2, c1 = net.c2, net.c1
        hdiag = np.zeros(self.n)
        hdiag[sl] = 2.0 * c2
        hmat = np.diag(hdiag)

        def objective(x):
            pg = x[sl]
            return float(np.sum(c2 * pg * pg + c1 * pg))

        def gradient(x):
            g = np.zeros(self.n)
            g[sl] = 2.0 * c2 * x[sl] + c1
            return g

        return self.problem(objective, gradient, lambda x: hmat, "acopf")

    def projection_problem(self, target) -> NlpProblem:
        nb, ng = self.nb, self.ng
        sl = slice(2 * nb, 2 * nb + ng)
        target = np.asarray(target, dtype=float)
        hdiag = np.zeros(self.n)
        hdiag[sl] = 2.0
        hmat = np.diag(hdiag)

        def objective(x):
            d = x[sl] - target
            return float(d @ d)

        def gradient(x):
            g = np.zeros(self.n)
            g[sl] = 2.0 * (x[sl] - target)
            return g

        return self.problem(objective, gradient, lambda x: hmat, "projection")

    def solution(self, report, objective=None) -> AcopfSolution:
        x = report.x.copy()
        x[self.net.ref_bus] = 0.0  # fixed variable; strip interior-point round-off
        th, v, pg, qg = self.unpack(x)
        p, q, _, _ = self.flows(x)
        nbr, na = self.net.n_branch, len(self.active)
        pf, qf, pt, qt = (np.zeros(nbr) for _ in range(4))
        pf[self.active], pt[self.active] = p[:na], p[na:]
        qf[self.active], qt[self.active] = q[:na], q[na:]
        return AcopfSolution(
            p_gen=pg.copy(), q_gen=qg.copy(), v=v.copy(), theta=th.copy(),
            p_flow=pf, q_flow=qf, p_flow_to=pt, q_flow_to=qt,
            lambda_p=report.y_eq[: self.nb].copy(), lambda_q=report.y_eq[self.nb :].copy(),
            objective=float(report.objective if objective is None else objective),
            status=report.status, iterations=report.iterations,
            kkt_residuals=tuple(report.kkt_residuals),
        )

    def start_from(self, sol: AcopfSolution):
        return np.concatenate([sol.theta, sol.v, sol.p_gen, sol.q_gen])


def ac_residuals(network: Network, demand: DemandSample, sol: AcopfSolution) -> dict:
    """Constraint violations of a candidate AC operating point (all p.u.)."""
    m = AcModel(network, demand)
    x = m.start_from(sol)
    lo, up = m.bounds()
    viol_bounds = float(np.max(np.concatenate([x - up, lo - x]), initial=0.0))
    h = m.ineq(x) if len(m.lim_ends) else np.zeros(0)
    # express thermal violation in apparent power, not squared units
    s = np.sqrt(np.maximum(h + m.smax2, 0.0)) - np.sqrt(m.smax2)
    return {
        "balance": float(np.max(np.abs(m.eq(x)), initial=0.0)),
        "thermal": float(np.max(s, initial=0.0)),
        "bounds": viol_bounds,
    }


def _attempt(model: AcModel, problem: NlpProblem, start, opts: SolverOptions):
    report = solve_ipm(problem, start, opts)
    res = check_kkt(problem, report)
    accepted = report.status == Status.OPTIMAL and max(res) <= KKT_ACCEPT
    return report, accepted


def _ladder(model: AcModel, problem_factory, warm, opts):
    """Flat/warm start, then DC angles, then heavier regularization, then load homotopy."""
    opts = opts or SolverOptions()
    attempts = []
    starts = []
    if warm is not None:
        starts.append(("warm", model.start_from(warm)))
    starts.append(("flat", model.flat_start()))
    problem = problem_factory(model)
    last = None
    for label, x0 in starts:
        # the flat start right after decides infeasibility; phase one from a
        # foreign warm point rarely settles and costs more than the solve
        run_opts = replace(opts, detect_infeasibility=False) if label == "warm" else opts
        report, ok = _attempt(model, problem, x0, run_opts)
        attempts.append((label, report.status.value, report.iterations))
        if ok:
            return report, attempts
        if report.status == Status.INFEASIBLE:
            return report, attempts
        last = report

    dc_start = _dc_angles_start(model)
    if dc_start is not None:
        report, ok = _attempt(model, problem, dc_start, opts)
        attempts.append(("dc-angles", report.status.value, report.iterations))
        if ok:
            return report, attempts
        last = report

    heavy = SolverOptions(
        tolerance=opts.tolerance, max_iter=2 * opts.max_iter,
        initial_regularization=1e-2, sigma_min=0.1, fraction_to_boundary=0.99,
        detect_infeasibility=False,
    )
    report, ok = _attempt(model, problem, model.flat_start(), heavy)
    attempts.append(("regularized", report.status.value, report.iterations))
    if ok:
        return report, attempts
    last = report

    x = model.flat_start()
    base = DemandSample(model.pd, model.qd)
    for frac in (0.9, 0.95, 1.0):
        sub = AcModel(model.net, DemandSample(base.pd * frac, base.qd * frac))
        rep, ok = _attempt(sub, problem_factory(sub), x, opts)
        attempts.append((f"homotopy-{frac:.2f}", rep.status.value, rep.iterations))
        if not ok:
            break
        x = rep.x
    else:
        return rep, attempts
    return last, attempts


def _dc_angles_start(model: AcModel):
    from .dcopf import solve_dcopf  # local import: dcopf is a sibling consumer of this module

    try:
        dc = solve_dcopf(model.net, DemandSample(model.pd, model.qd))
    except OpfFailure:
        return None
    x = model.flat_start()
    x[: model.nb] = dc.theta
    x[2 * model.nb : 2 * model.nb + model.ng] = dc.p_gen
    return x


def _capacity_shortfall(network: Network, demand: DemandSample) -> bool:
    need = float(np.sum(demand.pd) + np.sum(network.g_shunt) * network.v_min.min() ** 2)
    return need > float(np.sum(network.p_max)) + 1e-9


def solve_acopf(network: Network, demand: DemandSample, warm: AcopfSolution | None = None,
                opts: SolverOptions | None = None) -> AcopfSolution:
    """Minimum-cost AC dispatch; raises :class:`OpfFailure` when none is found."""
    model = AcModel(network, demand)
    if _capacity_shortfall(network, demand):
        raise OpfFailure("acopf infeasible: demand exceeds generation capacity", Status.INFEASIBLE)
    report, attempts = _ladder(model, lambda m: m.cost_problem(), warm, opts)
    if report.status != Status.OPTIMAL or max(report.kkt_residuals) > KKT_ACCEPT:
        status = report.status if report.status != Status.OPTIMAL else Status.NUMERICAL_FAILURE
        raise OpfFailure(f"acopf {status.value}: {report.message or 'no acceptable point'}",
                         status, report)
    sol = model.solution(report)
    sol.attempts = attempts
    return sol


def project_dispatch(network: Network, demand: DemandSample, target, warm=None,
                     opts: SolverOptions | None = None):
    """Closest AC-feasible active dispatch to ``target`` and its RMS distance."""
    p_bar, dist, _ = projection_solve(network, demand, target, warm, opts)
    return p_bar, dist


def projection_solve(network: Network, demand: DemandSample, target, warm=None,
                     opts: SolverOptions | None = None):
    """Like :func:`project_dispatch` but also returns the full operating point."""
    target = np.asarray(target, dtype=float)
    if target.shape != (network.n_gen,):
        raise ValueError(f"target has shape {target.shape}, expected ({network.n_gen},)")
    model = AcModel(network, demand)
    report, attempts = _ladder(model, lambda m: m.projection_problem(target), warm, opts)
    if report.status != Status.OPTIMAL or max(report.kkt_residuals) > KKT_ACCEPT:
        status = report.status if report.status != Status.OPTIMAL else Status.NUMERICAL_FAILURE
        raise OpfFailure(f"projection {status.value}: {report.message}", status, report)
    sol = model.solution(report, objective=network.total_cost(report.x[2 * model.nb : 2 * model.nb + model.ng]))
    sol.attempts = attempts
    p_bar = sol.p_gen
    dist = float(np.sqrt(np.mean((p_bar - target) ** 2))) if len(target) else 0.0
    return p_bar, dist, sol
