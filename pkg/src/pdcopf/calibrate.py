"""Bilevel calibration of the demand-scaling vector beta.

Upper level::

    min  gp/|G| |p - p*|^2 + gl/|N| |lam - lam*|^2 + gb/|N| |beta|^2
    s.t. cost recovery, revenue adequacy at the ORIGINAL demand,
         (p, lam) optimal primal/dual pair of the beta-scaled DC-OPF.

The lower level is replaced by its KKT system written through the PTDF map:
injections ``inj = Ag p - beta*Pd - Gsh``, flows ``F inj``, prices
``lam = lam_ref - F'(mu_hi - mu_lo)`` and generator stationarity
``2 c2 p + c1 - lam_i(k) + nu_hi - nu_lo = 0``.  Once it is known which lines
and generator bounds are active, every remaining condition is linear (or, for
revenue adequacy with a free dispatch, convex quadratic), so the calibration
is a convex program.  The active set comes from

* fixed dispatch (``p = p*``): a short active-set loop seeded by the binding
  lines of the relaxed primal problem, falling back to a Fischer-Burmeister
  smoothing of the complementarity conditions;
* free dispatch: a strong-duality relaxation ``gap <= t`` driven to zero, from
  several starting points.

Prices are carried internally in units of ``price_scale`` (the largest
marginal cost) so that multipliers and flows are both of order one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .acopf import AcopfSolution
from .dcopf import ScalingVector, ptdf_matrix, solve_pdcopf
from .market import DEFAULT_TOL, MarketAudit, audit
from .model import DemandSample, Network
from .solver import NlpProblem, SolverOptions, Status, quadratic_program, solve_ipm

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CalibrationConfig:
    gamma_p: float = 1.0
    gamma_lambda: float = 0.0
    gamma_beta: float = 1.0
    enforce_market: bool = True
    fix_dispatch: bool = True
    max_outer_iters: int = 20
    tolerance: float = 1e-7
    market_tol: float = DEFAULT_TOL
    multistart: int = 4
    seed: int = 0
    bound_tol: float = 1e-6
    method: str = "auto"  # fixed dispatch: auto | active-set | fischer-burmeister

    def __post_init__(self):
        if self.method not in ("auto", "active-set", "fischer-burmeister"):
            raise ValueError(f"unknown calibration method {self.method!r}")
        gammas = (self.gamma_p, self.gamma_lambda, self.gamma_beta)
        if min(gammas) < 0:
            raise ValueError("calibration weights must be nonnegative")
        if max(gammas) <= 0:
            raise ValueError("at least one calibration weight must be positive")
        if self.max_outer_iters < 1:
            raise ValueError("max_outer_iters must be >= 1")


@dataclass
class CalibrationResult:
    beta_star: ScalingVector | None
    lmp: np.ndarray | None
    dispatch: np.ndarray | None
    upper_objective: float
    market_audit: MarketAudit | None
    status: Status
    method: str = ""
    iterations: int = 0
    message: str = ""
    binding_lines: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == Status.OPTIMAL


# --------------------------------------------------------------------------------
# problem data


class _Data:
    """Linear maps of the reduced lower-level KKT system.

    Variable vector ``z = [beta (N), p (G), lam_ref, mu_hi (L), mu_lo (L),
    nu_hi (G), nu_lo (G)]`` with prices scaled by ``price_scale``.
    """

    def __init__(self, network: Network, demand: DemandSample, p_star, lam_star):
        net = network
        self.net = net
        self.pd = np.asarray(demand.pd, dtype=float)
        self.p_star = np.asarray(p_star, dtype=float)
        self.lam_star = np.asarray(lam_star, dtype=float) if lam_star is not None else None
        N, G = net.n_bus, net.n_gen
        lim = np.array([br.in_service and br.limited for br in net.branches], dtype=bool)
        self.lines = np.flatnonzero(lim)
        L = len(self.lines)
        self.N, self.G, self.L = N, G, L
        ptdf = ptdf_matrix(net) if net.n_branch else np.zeros((0, N))
        self.F = ptdf[self.lines]
        self.s = net.s_max[self.lines]
        self.ag = net.gen_incidence
        self.gsh = net.g_shunt
        mc = net.marginal_cost(self.p_star)
        self.price_scale = float(max(1.0, np.max(np.abs(mc), initial=0.0),
                                     np.max(np.abs(self.lam_star), initial=0.0) if self.lam_star is not None else 0.0))
        o = np.cumsum([0, N, G, 1, L, L, G, G])
        self.sl_beta = slice(o[0], o[1])
        self.sl_p = slice(o[1], o[2])
        self.i_ref = o[2]
        self.sl_mu_hi = slice(o[3], o[4])
        self.sl_mu_lo = slice(o[4], o[5])
        self.sl_nu_hi = slice(o[5], o[6])
        self.sl_nu_lo = slice(o[6], o[7])
        self.nz = int(o[7])
        nz = self.nz

        # scaled prices: lam = lam_map @ z
        self.lam_map = np.zeros((N, nz))
        self.lam_map[:, self.i_ref] = 1.0
        self.lam_map[:, self.sl_mu_hi] = -self.F.T
        self.lam_map[:, self.sl_mu_lo] = self.F.T
        # injections = inj_map @ z + inj_const
        self.inj_map = np.zeros((N, nz))
        self.inj_map[:, self.sl_p] = self.ag
        self.inj_map[:, self.sl_beta] = -np.diag(self.pd)
        self.inj_const = -self.gsh
        self.flow_map = self.F @ self.inj_map
        self.flow_const = self.F @ self.inj_const
        self.bal_row = self.inj_map.sum(axis=0)
        self.bal_const = float(self.inj_const.sum())
        # stationarity: (2 c2 p + c1)/P - lam_i(k) + nu_hi - nu_lo = 0
        P = self.price_scale
        self.stat_map = np.zeros((G, nz))
        self.stat_map[np.arange(G), self.sl_p.start + np.arange(G)] = 2.0 * net.c2 / P
        self.stat_map -= self.lam_map[net.gen_bus]
        self.stat_map[np.arange(G), self.sl_nu_hi.start + np.arange(G)] = 1.0
        self.stat_map[np.arange(G), self.sl_nu_lo.start + np.arange(G)] = -1.0
        self.stat_const = net.c1 / P

    def lam(self, z):
        return self.price_scale * (self.lam_map @ z)

    def flows(self, z):
        return self.flow_map @ z + self.flow_const

    def upper_objective(self, cfg: CalibrationConfig, z) -> float:
        beta, p = z[self.sl_beta], z[self.sl_p]
        val = cfg.gamma_beta / self.N * float(beta @ beta)
        if self.G:
            d = p - self.p_star
            val += cfg.gamma_p / self.G * float(d @ d)
        if cfg.gamma_lambda and self.lam_star is not None:
            d = self.lam(z) - self.lam_star
            val += cfg.gamma_lambda / self.N * float(d @ d)
        return val

    def objective_quadratic(self, cfg: CalibrationConfig):
        """``0.5 z'Qz + q'z + const`` equal to the upper objective."""
        nz, N, G = self.nz, self.N, self.G
        Q = np.zeros((nz, nz))
        q = np.zeros(nz)
        const = 0.0
        ib = np.arange(self.sl_beta.start, self.sl_beta.stop)
        gb = cfg.gamma_beta if cfg.gamma_beta > 0 else 1e-9
        Q[ib, ib] += 2.0 * gb / N
        if cfg.gamma_beta == 0:
            # weak pull towards plain DC-OPF picks one point of a flat optimum
            q[ib] += -2.0 * gb / N
        if G:
            ip = np.arange(self.sl_p.start, self.sl_p.stop)
            Q[ip, ip] += 2.0 * cfg.gamma_p / G
            q[ip] += -2.0 * cfg.gamma_p / G * self.p_star
            const += cfg.gamma_p / G * float(self.p_star @ self.p_star)
        if cfg.gamma_lambda and self.lam_star is not None:
            A = self.price_scale * self.lam_map
            w = cfg.gamma_lambda / N
            Q += 2.0 * w * A.T @ A
            q += -2.0 * w * A.T @ self.lam_star
            const += w * float(self.lam_star @ self.lam_star)
        return Q, q, const


@dataclass
class _ActiveSet:
    hi: frozenset = frozenset()
    lo: frozenset = frozenset()
    at_max: frozenset = frozenset()
    at_min: frozenset = frozenset()

    def lines(self):
        return sorted([(int(i), 1) for i in self.hi] + [(int(i), -1) for i in self.lo])


def _classify_gens(data: _Data, p, tol):
    net = data.net
    at_max = frozenset(np.flatnonzero(p >= net.p_max - tol * (1 + np.abs(net.p_max))).tolist())
    at_min = frozenset(np.flatnonzero(p <= net.p_min + tol * (1 + np.abs(net.p_min))).tolist())
    return at_max, at_min


# --------------------------------------------------------------------------------
# convex program for a fixed active set


def _market_rows(data: _Data, act: _ActiveSet, fixed_p):
    """Market constraints as ``h(z) <= 0`` pieces valid on the active set.

    Returns linear rows ``(A, b)`` and the revenue-adequacy row split into a
    linear part and a diagonal quadratic part on ``p``.
    """
    net, P = data.net, data.price_scale
    G = data.G
    rows, rhs = [], []
    bound = act.at_max | act.at_min
    for k in range(G):
        if k not in act.at_min:
            # lam >= marginal cost here, so profit >= c2 p^2 >= 0 already
            continue
        pk = fixed_p[k] if fixed_p is not None else net.p_min[k]
        if pk <= 0:
            continue
        cost = net.c2[k] * pk * pk + net.c1[k] * pk
        # -(P lam_i pk - cost) <= 0
        rows.append(-P * pk * data.lam_map[net.gen_bus[k]])
        rhs.append(-cost)
    cr_a = np.array(rows).reshape(-1, data.nz)
    cr_b = np.array(rhs)

    # revenue adequacy: -P pd'lam + sum_k P lam_i(k) p_k <= 0
    ra_lin = -P * data.pd @ data.lam_map
    ra_quad = np.zeros(data.nz)
    ra_const = 0.0
    for k in range(G):
        i = net.gen_bus[k]
        if fixed_p is not None:
            ra_lin = ra_lin + P * fixed_p[k] * data.lam_map[i]
        elif k in bound:
            pk = net.p_max[k] if k in act.at_max else net.p_min[k]
            ra_lin = ra_lin + P * pk * data.lam_map[i]
        else:
            # lam_i(k) p_k = (2 c2 p + c1) p on an interior generator
            j = data.sl_p.start + k
            ra_quad[j] += 2.0 * net.c2[k]
            ra_lin = ra_lin.copy()
            ra_lin[j] += net.c1[k]
    return cr_a, cr_b, (ra_lin, ra_quad, ra_const)


def _bounds(data: _Data, act: _ActiveSet, fixed_p, fix_beta=None):
    nz, net = data.nz, data.net
    lo = np.zeros(nz)
    up = np.zeros(nz)
    lo[data.sl_beta], up[data.sl_beta] = 0.0, np.inf
    if fix_beta is not None:
        lo[data.sl_beta] = up[data.sl_beta] = fix_beta
    if fixed_p is not None:
        lo[data.sl_p] = up[data.sl_p] = fixed_p
    else:
        lo[data.sl_p], up[data.sl_p] = net.p_min, net.p_max
        for k in act.at_max:
            lo[data.sl_p.start + k] = net.p_max[k]
        for k in act.at_min:
            up[data.sl_p.start + k] = net.p_min[k]
    lo[data.i_ref], up[data.i_ref] = -np.inf, np.inf
    for i in act.hi:
        up[data.sl_mu_hi.start + i] = np.inf
    for i in act.lo:
        up[data.sl_mu_lo.start + i] = np.inf
    for k in act.at_max:
        up[data.sl_nu_hi.start + k] = np.inf
    for k in act.at_min:
        up[data.sl_nu_lo.start + k] = np.inf
    return lo, up


def _active_set_program(data: _Data, cfg: CalibrationConfig, act: _ActiveSet, fixed_p,
                        objective="upper", fix_beta=None, fix_p=None):
    nz = data.nz
    if objective == "upper":
        Q, q, _ = data.objective_quadratic(cfg)
    else:
        # minimum-norm prices among those consistent with the active set
        Q = 2.0 * data.lam_map.T @ data.lam_map / data.N
        q = np.zeros(nz)
    a_eq = [data.bal_row[None, :], data.stat_map]
    b_eq = [np.array([-data.bal_const]), -data.stat_const]
    for i in sorted(act.hi):
        a_eq.append(data.flow_map[i][None, :])
        b_eq.append(np.array([data.s[i] - data.flow_const[i]]))
    for i in sorted(act.lo):
        a_eq.append(data.flow_map[i][None, :])
        b_eq.append(np.array([-data.s[i] - data.flow_const[i]]))
    a_eq = np.vstack(a_eq)
    b_eq = np.concatenate(b_eq)

    free = [i for i in range(data.L) if i not in act.hi and i not in act.lo]
    a_in = [data.flow_map[free], -data.flow_map[free]]
    b_in = [data.s[free] - data.flow_const[free], data.s[free] + data.flow_const[free]]
    ra = None
    if cfg.enforce_market:
        cr_a, cr_b, ra = _market_rows(data, act, fixed_p)
        a_in.append(cr_a)
        b_in.append(cr_b)
    a_in = np.vstack(a_in) if a_in else np.zeros((0, nz))
    b_in = np.concatenate(b_in) if b_in else np.zeros(0)

    lo, up = _bounds(data, act, fixed_p, fix_beta)
    if fix_p is not None:
        lo[data.sl_p] = up[data.sl_p] = fix_p

    if ra is None or not np.any(ra[1]):
        if ra is not None:
            a_in = np.vstack([a_in, ra[0][None, :]])
            b_in = np.concatenate([b_in, [-ra[2]]])
        return quadratic_program(Q, q, a_eq, b_eq, a_in, b_in, lo, up, name="calibration-qp")

    ra_lin, ra_quad, ra_const = ra

    def ineq(z):
        return np.concatenate([a_in @ z - b_in, [ra_lin @ z + 0.5 * ra_quad @ (z * z) + ra_const]])

    def ineq_jac(z):
        return np.vstack([a_in, (ra_lin + ra_quad * z)[None, :]])

    def hessian(z, y, w, sigma):
        return sigma * Q + np.diag(w[-1] * ra_quad)

    return NlpProblem(
        nz,
        objective=lambda z: float(0.5 * z @ Q @ z + q @ z),
        gradient=lambda z: Q @ z + q,
        hessian=hessian,
        eq=lambda z: a_eq @ z - b_eq,
        eq_jacobian=lambda z: a_eq,
        ineq=ineq,
        ineq_jacobian=ineq_jac,
        lower=lo,
        upper=up,
        convex=True,
        name="calibration-qcqp",
    )


def _start(data: _Data, beta0=None, fixed_p=None):
    z = np.zeros(data.nz)
    z[data.sl_beta] = 1.0 if beta0 is None else beta0
    z[data.sl_p] = data.p_star if fixed_p is None else fixed_p
    if data.G:
        z[data.i_ref] = float(np.mean(data.net.marginal_cost(data.p_star))) / data.price_scale
    return z


def _solve_active(data, cfg, act, fixed_p, z0):
    prob = _active_set_program(data, cfg, act, fixed_p)
    rep = solve_ipm(prob, z0, SolverOptions(tolerance=1e-9))
    if rep.status != Status.OPTIMAL:
        return None
    z = rep.x
    if cfg.gamma_lambda == 0 and data.L:
        # prices are not unique when they do not enter the objective
        tie = _active_set_program(data, cfg, act, fixed_p, objective="lambda_norm",
                                  fix_beta=z[data.sl_beta], fix_p=z[data.sl_p])
        rep2 = solve_ipm(tie, z, SolverOptions(tolerance=1e-9))
        if rep2.status == Status.OPTIMAL:
            z = rep2.x
    return z


def _binding(data: _Data, z, rel=1e-6):
    f = data.flows(z)
    tol = rel * (1.0 + data.s)
    hi = frozenset(np.flatnonzero(f >= data.s - tol).tolist())
    lo = frozenset(np.flatnonzero(f <= -data.s + tol).tolist())
    return hi, lo


def _primal_only(data: _Data, cfg, fixed_p):
    """Relaxed problem without lower-level duals: minimum-norm feasible beta."""
    N = data.N
    gb = cfg.gamma_beta if cfg.gamma_beta > 0 else 1e-9
    Q = 2.0 * gb / N * np.eye(N)
    q = -2.0 * gb / N * np.ones(N) if cfg.gamma_beta == 0 else np.zeros(N)
    fixed_inj = data.ag @ fixed_p + data.inj_const
    F = data.F
    a_eq = (-data.pd)[None, :]
    b_eq = np.array([-fixed_inj.sum()])
    flow_b = F @ fixed_inj
    fmat = -F * data.pd[None, :]
    a_in = np.vstack([fmat, -fmat]) if data.L else None
    b_in = np.concatenate([data.s - flow_b, data.s + flow_b]) if data.L else None
    qp = quadratic_program(Q, q, a_eq, b_eq, a_in, b_in, np.zeros(N), np.full(N, np.inf),
                           name="calibration-primal")
    total = float(fixed_inj.sum())
    denom = float(data.pd @ data.pd)
    beta0 = data.pd * total / denom if denom > 0 else np.ones(N)
    rep = solve_ipm(qp, np.maximum(beta0, 0.0) + 0.1, SolverOptions(tolerance=1e-9))
    return rep


def _idle_lines(data: _Data, z, act: _ActiveSet):
    mu = np.concatenate([z[data.sl_mu_hi], z[data.sl_mu_lo]])
    tol = 1e-7 * (1.0 + np.max(np.abs(mu), initial=0.0))
    hi = frozenset(i for i in act.hi if z[data.sl_mu_hi.start + i] <= tol)
    lo = frozenset(i for i in act.lo if z[data.sl_mu_lo.start + i] <= tol)
    return hi, lo


def _release_idle(data: _Data, cfg, z, act: _ActiveSet, fixed_p, rounds=10):
    """Drop forced lines that carry no price while the objective does not worsen."""
    obj = data.upper_objective(cfg, z)
    for _ in range(rounds):
        hi, lo = _idle_lines(data, z, act)
        if not hi and not lo:
            break
        trial = _ActiveSet(act.hi - hi, act.lo - lo, act.at_max, act.at_min)
        zt = _solve_active(data, cfg, trial, fixed_p, z)
        if zt is None or data.upper_objective(cfg, zt) > obj + 1e-12:
            break
        z, act, obj = zt, trial, data.upper_objective(cfg, zt)
    return z, act


def _sparse_dual(data: _Data, cfg, at_max, at_min, fixed_p, weights):
    """Cheapest set of congested lines that can support the prices (L1 LP)."""
    L = data.L
    full = _ActiveSet(hi=frozenset(range(L)), lo=frozenset(range(L)), at_max=at_max, at_min=at_min)
    lo, up = _bounds(data, full, fixed_p, fix_beta=np.zeros(data.N))
    q = np.zeros(data.nz)
    q[data.sl_mu_hi] = weights[:L]
    q[data.sl_mu_lo] = weights[L:]
    a_in = b_in = None
    if cfg.enforce_market:
        cr_a, cr_b, ra = _market_rows(data, full, fixed_p)
        a_in = np.vstack([cr_a, ra[0][None, :]])
        b_in = np.concatenate([cr_b, [-ra[2]]])
    qp = quadratic_program(np.zeros((data.nz, data.nz)), q, data.stat_map, -data.stat_const,
                           a_in, b_in, lo, up, name="calibration-sparse-dual")
    rep = solve_ipm(qp, _start(data, np.zeros(data.N), fixed_p), SolverOptions(tolerance=1e-10))
    if rep.status != Status.OPTIMAL:
        return None
    mu = np.concatenate([rep.x[data.sl_mu_hi], rep.x[data.sl_mu_lo]])
    used = mu > 1e-6 * (1.0 + np.max(mu, initial=0.0))
    return frozenset(np.flatnonzero(used[:L]).tolist()), frozenset(np.flatnonzero(used[L:]).tolist())


def _sparse_dual_search(data: _Data, cfg, at_max, at_min, fixed_p, beta0, rounds):
    """Alternate L1 dual line selection with primal feasibility of the selection."""
    f = data.flows(_start(data, beta0, fixed_p))
    gap = np.concatenate([data.s - f, data.s + f]) / np.tile(np.maximum(data.s, 1e-9), 2)
    weights = np.maximum(gap, 0.0) + 1e-3
    z0 = _start(data, beta0, fixed_p)
    for _ in range(rounds):
        sel = _sparse_dual(data, cfg, at_max, at_min, fixed_p, weights)
        if sel is None:
            return None
        act = _ActiveSet(sel[0], sel[1], at_max, at_min)
        z = _solve_active(data, cfg, act, fixed_p, z0)
        if z is not None:
            return z, act
        # the chosen lines cannot all be driven to their limits: make them dearer
        for i in sel[0]:
            weights[i] *= 10.0
        for i in sel[1]:
            weights[data.L + i] *= 10.0
    return None


# --------------------------------------------------------------------------------
# smoothed complementarity (fixed dispatch fallback)


def _fb_problem(data: _Data, cfg, act_gens: _ActiveSet, fixed_p, eps):
    """Fischer-Burmeister smoothing ``mu + s - sqrt(mu^2 + s^2 + 2 eps^2) = 0``."""
    nz, L = data.nz, data.L
    Q, q, _ = data.objective_quadratic(cfg)
    full = _ActiveSet(hi=frozenset(range(L)), lo=frozenset(range(L)),
                      at_max=act_gens.at_max, at_min=act_gens.at_min)
    lo, up = _bounds(data, full, fixed_p)
    # the smoothed equation already keeps mu > 0 and the slack > 0; explicit
    # bounds on mu would duplicate it and leave the barrier without an interior
    lo[data.sl_mu_hi] = lo[data.sl_mu_lo] = -np.inf
    a_lin = np.vstack([data.bal_row[None, :], data.stat_map])
    b_lin = np.concatenate([[-data.bal_const], -data.stat_const])
    # slack_hi = s - F(...) ; slack_lo = s + F(...)
    s_hi_map, s_hi_c = -data.flow_map, data.s - data.flow_const
    s_lo_map, s_lo_c = data.flow_map, data.s + data.flow_const
    mu_hi_idx = np.arange(data.sl_mu_hi.start, data.sl_mu_hi.stop)
    mu_lo_idx = np.arange(data.sl_mu_lo.start, data.sl_mu_lo.stop)
    smap = np.vstack([s_hi_map, s_lo_map])
    sconst = np.concatenate([s_hi_c, s_lo_c])
    midx = np.concatenate([mu_hi_idx, mu_lo_idx])
    e2 = 2.0 * eps * eps

    def fb_parts(z):
        a = z[midx]
        b = smap @ z + sconst
        r = np.sqrt(a * a + b * b + e2)
        return a, b, r

    def eq(z):
        a, b, r = fb_parts(z)
        return np.concatenate([a_lin @ z - b_lin, a + b - r])

    def eq_jac(z):
        a, b, r = fb_parts(z)
        jac = (1.0 - b / r)[:, None] * smap
        jac[np.arange(2 * L), midx] += 1.0 - a / r
        return np.vstack([a_lin, jac])

    def hessian(z, y, w, sigma):
        a, b, r = fb_parts(z)
        yf = y[len(b_lin):]
        r3 = r**3
        haa = -(b * b + e2) / r3
        hab = a * b / r3
        hbb = -(a * a + e2) / r3
        # minus sign: user convention subtracts y * hess(c)
        h = sigma * Q
        h = h - (smap.T * (yf * hbb)) @ smap
        cross = (yf * hab)[:, None] * smap
        np.add.at(h, (midx, slice(None)), -cross)
        np.add.at(h, (slice(None), midx), -cross.T)
        h[midx, midx] -= yf * haa
        return h

    ineq = ineq_jac = None
    if cfg.enforce_market:
        cr_a, cr_b, ra = _market_rows(data, full, fixed_p)
        a_in = np.vstack([cr_a, ra[0][None, :]])
        b_in = np.concatenate([cr_b, [-ra[2]]])
        ineq = lambda z: a_in @ z - b_in  # noqa: E731
        ineq_jac = lambda z: a_in  # noqa: E731

    return NlpProblem(
        nz,
        objective=lambda z: float(0.5 * z @ Q @ z + q @ z),
        gradient=lambda z: Q @ z + q,
        hessian=hessian,
        eq=eq,
        eq_jacobian=eq_jac,
        ineq=ineq,
        ineq_jacobian=ineq_jac,
        lower=lo,
        upper=up,
        convex=False,
        name=f"calibration-fb-{eps:g}",
    )


def _usable(rep) -> bool:
    """Relaxed iterates only guide active-set identification; the polish verifies."""
    if rep.status == Status.OPTIMAL:
        return True
    return rep.status == Status.MAX_ITER and max(rep.kkt_residuals) <= 1e-6


def _identify_lines(data: _Data, z):
    f = data.flows(z)
    mu_hi, mu_lo = z[data.sl_mu_hi], z[data.sl_mu_lo]
    hi = frozenset(np.flatnonzero(mu_hi > np.maximum(data.s - f, 1e-9)).tolist())
    lo = frozenset(np.flatnonzero(mu_lo > np.maximum(data.s + f, 1e-9)).tolist())
    return hi, lo


# --------------------------------------------------------------------------------
# strong-duality relaxation (free dispatch)


def _gap_problem(data: _Data, cfg, t):
    """All KKT conditions with the summed complementarity (duality gap) <= t."""
    nz, L, G, net = data.nz, data.L, data.G, data.net
    Q, q, _ = data.objective_quadratic(cfg)
    full = _ActiveSet(hi=frozenset(range(L)), lo=frozenset(range(L)),
                      at_max=frozenset(range(G)), at_min=frozenset(range(G)))
    lo, up = _bounds(data, full, None)
    lo[data.sl_p], up[data.sl_p] = net.p_min, net.p_max
    a_eq = np.vstack([data.bal_row[None, :], data.stat_map])
    b_eq = np.concatenate([[-data.bal_const], -data.stat_const])
    # gap = mu_hi'(s - f) + mu_lo'(s + f) + nu_hi'(pmax - p) + nu_lo'(p - pmin)
    gq = np.zeros((nz, nz))
    gl = np.zeros(nz)
    ih = np.arange(data.sl_mu_hi.start, data.sl_mu_hi.stop)
    il = np.arange(data.sl_mu_lo.start, data.sl_mu_lo.stop)
    gl[ih] += data.s - data.flow_const
    gl[il] += data.s + data.flow_const
    gq[ih, :] += -data.flow_map
    gq[il, :] += data.flow_map
    jh = np.arange(data.sl_nu_hi.start, data.sl_nu_hi.stop)
    jl = np.arange(data.sl_nu_lo.start, data.sl_nu_lo.stop)
    ip = np.arange(data.sl_p.start, data.sl_p.stop)
    gl[jh] += net.p_max
    gl[jl] += -net.p_min
    gq[jh, ip] += -1.0
    gq[jl, ip] += 1.0
    gsym = gq + gq.T  # gap = 0.5 z' gsym z + gl' z

    rows = [np.vstack([data.flow_map, -data.flow_map])]
    rhs = [np.concatenate([data.s - data.flow_const, data.s + data.flow_const])]
    lin_in = np.vstack(rows)
    lin_b = np.concatenate(rhs)

    # market: CR_k: c(p) - P lam_i p <= 0 ; RA: P lam'(Ag p) - P pd'lam <= 0
    P = data.price_scale
    gen_lam = data.lam_map[net.gen_bus]  # G x nz

    def market(z):
        if not cfg.enforce_market:
            return np.zeros(0)
        p = z[data.sl_p]
        lam_g = gen_lam @ z
        cr = net.c2 * p * p + net.c1 * p - P * lam_g * p
        ra = P * (lam_g @ p) - P * data.pd @ (data.lam_map @ z)
        return np.concatenate([cr, [ra]])

    def market_jac(z):
        if not cfg.enforce_market:
            return np.zeros((0, nz))
        p = z[data.sl_p]
        lam_g = gen_lam @ z
        jcr = -P * p[:, None] * gen_lam
        jcr[np.arange(G), ip] += 2.0 * net.c2 * p + net.c1 - P * lam_g
        jra = P * (gen_lam.T @ p) - P * data.pd @ data.lam_map
        jra = jra.copy()
        jra[ip] += P * lam_g
        return np.vstack([jcr, jra[None, :]])

    def market_hess(z, w):
        h = np.zeros((nz, nz))
        if not cfg.enforce_market:
            return h
        wc, wr = w[:G], w[G]
        # CR_k: c2 p^2 - P lam_k p
        h[ip, ip] += 2.0 * net.c2 * wc
        cross = -P * (wc[:, None] * gen_lam)  # d2/dp_k dz
        cross = cross + P * wr * gen_lam
        h[ip, :] += cross
        h[:, ip] += cross.T
        return h

    def ineq(z):
        return np.concatenate([lin_in @ z - lin_b, [0.5 * z @ gsym @ z + gl @ z - t], market(z)])

    def ineq_jac(z):
        return np.vstack([lin_in, (gsym @ z + gl)[None, :], market_jac(z)])

    n_lin = len(lin_b)

    def hessian(z, y, w, sigma):
        return sigma * Q + w[n_lin] * gsym + market_hess(z, w[n_lin + 1:])

    return NlpProblem(
        nz,
        objective=lambda z: float(0.5 * z @ Q @ z + q @ z),
        gradient=lambda z: Q @ z + q,
        hessian=hessian,
        eq=lambda z: a_eq @ z - b_eq,
        eq_jacobian=lambda z: a_eq,
        ineq=ineq,
        ineq_jacobian=ineq_jac,
        lower=lo,
        upper=up,
        convex=False,
        name=f"calibration-gap-{t:g}",
    )


def _identify_all(data: _Data, z):
    hi, lo = _identify_lines(data, z)
    net = data.net
    p = z[data.sl_p]
    nh, nl = z[data.sl_nu_hi], z[data.sl_nu_lo]
    at_max = frozenset(np.flatnonzero(nh > np.maximum(net.p_max - p, 1e-9)).tolist())
    at_min = frozenset(np.flatnonzero(nl > np.maximum(p - net.p_min, 1e-9)).tolist())
    return _ActiveSet(hi, lo, at_max, at_min)


# --------------------------------------------------------------------------------
# drivers


def _finish(data: _Data, cfg, network, demand, z, method, iterations, act):
    beta = np.maximum(z[data.sl_beta], 0.0)
    p = z[data.sl_p].copy()
    lam = data.lam(z)
    aud = audit(network, demand, p, lam, cfg.market_tol)
    status = Status.OPTIMAL
    message = ""
    if cfg.enforce_market and not aud.passes:
        status = Status.NUMERICAL_FAILURE
        message = "market audit failed on the calibrated point"
    return CalibrationResult(
        beta_star=ScalingVector(beta),
        lmp=lam,
        dispatch=p,
        upper_objective=data.upper_objective(cfg, z),
        market_audit=aud,
        status=status,
        method=method,
        iterations=iterations,
        message=message,
        binding_lines=[(int(data.lines[i]), s) for i, s in act.lines()],
    )


def _failure(status, message, method, iterations=0):
    return CalibrationResult(None, None, None, float("nan"), None, status, method, iterations, message)


def _calibrate_fixed(network, demand, data: _Data, cfg, ac_solution):
    p_star = data.p_star
    at_max, at_min = _classify_gens(data, p_star, cfg.bound_tol)
    prim = _primal_only(data, cfg, p_star)
    if prim.status != Status.OPTIMAL:
        status = Status.INFEASIBLE if prim.status == Status.INFEASIBLE else prim.status
        return _failure(status, "no beta reproduces the fixed dispatch within line limits",
                        "active-set")
    beta0 = prim.x
    z0 = _start(data, beta0, p_star)
    hi, lo = _binding(data, z0)
    act = _ActiveSet(hi, lo, at_max, at_min)

    tried = set()
    best = None
    it = 0
    loop = cfg.max_outer_iters if cfg.method != "fischer-burmeister" else 0
    for it in range(1, loop + 1):
        key = (act.hi, act.lo)
        if key in tried:
            break
        tried.add(key)
        z = _solve_active(data, cfg, act, p_star, z0)
        if z is None:
            # dual side infeasible: add lines congested in the AC solution
            extra_hi, extra_lo = _ac_congested(data, ac_solution)
            grown = _ActiveSet(act.hi | extra_hi, act.lo | extra_lo, at_max, at_min)
            if (grown.hi, grown.lo) == key:
                break
            act = grown
            continue
        obj = data.upper_objective(cfg, z)
        if best is None or obj < best[0] - 1e-12:
            best = (obj, z, act)
        # lines forced to their limit without a positive price can be released
        idle_hi, idle_lo = _idle_lines(data, z, act)
        if not idle_hi and not idle_lo:
            break
        act = _ActiveSet(act.hi - idle_hi, act.lo - idle_lo, at_max, at_min)
        z0 = z
    if best is not None:
        return _finish(data, cfg, network, demand, best[1], "active-set", it, best[2])

    found = None
    if cfg.method == "auto":
        found = _sparse_dual_search(data, cfg, at_max, at_min, p_star, beta0, cfg.max_outer_iters)
    if found is not None:
        zs, act = _release_idle(data, cfg, found[0], found[1], p_star)
        return _finish(data, cfg, network, demand, zs, "sparse-dual", it, act)

    if cfg.method == "active-set":
        return _failure(Status.MAX_ITER, "active-set loop found no consistent set of binding lines",
                        "active-set", it)

    # smoothed complementarity from the primal-only point
    z = _start(data, beta0, p_star)
    gens = _ActiveSet(at_max=at_max, at_min=at_min)
    for eps in (1e-1, 1e-2, 1e-3, 1e-4, 1e-6):
        rep = solve_ipm(_fb_problem(data, cfg, gens, p_star, eps), z,
                        SolverOptions(tolerance=1e-8, max_iter=300, detect_infeasibility=False))
        if not _usable(rep):
            break
        z = rep.x
    hi, lo = _identify_lines(data, z)
    act = _ActiveSet(hi, lo, at_max, at_min)
    zp = _solve_active(data, cfg, act, p_star, z)
    if zp is not None:
        zp, act = _release_idle(data, cfg, zp, act, p_star)
    if zp is None:
        return _failure(Status.INFEASIBLE, "no beta supports the fixed dispatch as a DC optimum"
                        + (" with market properties" if cfg.enforce_market else ""),
                        "fischer-burmeister", it)
    return _finish(data, cfg, network, demand, zp, "fischer-burmeister", it + 1, act)


def _ac_congested(data: _Data, ac_solution, frac=0.95):
    if ac_solution is None or data.L == 0:
        return frozenset(), frozenset()
    pf = np.asarray(ac_solution.p_flow)[data.lines]
    pt = np.asarray(ac_solution.p_flow_to)[data.lines]
    sf = np.hypot(pf, np.asarray(ac_solution.q_flow)[data.lines])
    st = np.hypot(pt, np.asarray(ac_solution.q_flow_to)[data.lines])
    tight = np.maximum(sf, st) >= frac * data.s
    hi = frozenset(np.flatnonzero(tight & (pf >= 0)).tolist())
    lo = frozenset(np.flatnonzero(tight & (pf < 0)).tolist())
    return hi, lo


def _calibrate_free(network, demand, data: _Data, cfg):
    rng = np.random.default_rng(cfg.seed)
    starts = [np.ones(data.N)]
    for _ in range(cfg.multistart):
        starts.append(np.clip(1.0 + 0.1 * rng.standard_normal(data.N), 0.0, None))
    best = None
    tried = 0
    for beta0 in starts:
        tried += 1
        z = _start(data, beta0)
        z[data.sl_p] = np.clip(data.p_star, data.net.p_min, data.net.p_max)
        for t in (1e-1, 1e-2, 1e-3, 1e-4, 1e-6, 1e-8):
            rep = solve_ipm(_gap_problem(data, cfg, t), z,
                            SolverOptions(tolerance=1e-8, max_iter=300, detect_infeasibility=False))
            if _usable(rep):
                z = rep.x
                continue
            # a stalled iterate can still name the right active set; the polish decides
            if np.all(np.isfinite(rep.x)):
                z = rep.x
            break
        act = _identify_all(data, z)
        zp = _solve_active(data, cfg, act, None, z)
        if zp is None:
            continue
        obj = data.upper_objective(cfg, zp)
        if best is None or obj < best[0] - 1e-12:
            best = (obj, zp, act)
    if best is None:
        return _failure(Status.INFEASIBLE, "no start reached a KKT point of the bilevel program",
                        "strong-duality", tried)
    return _finish(data, cfg, network, demand, best[1], "strong-duality", tried, best[2])


def calibrate_beta(network: Network, demand: DemandSample, ac_solution: AcopfSolution | None,
                   config: CalibrationConfig | None = None, p_star=None, lam_star=None) -> CalibrationResult:
    """Optimal scaling vector for one demand sample.

    ``ac_solution`` supplies the target dispatch and prices; ``p_star`` and
    ``lam_star`` override them (useful for synthetic targets).
    """
    cfg = config or CalibrationConfig()
    if ac_solution is not None:
        p_star = ac_solution.p_gen if p_star is None else p_star
        lam_star = ac_solution.lambda_p if lam_star is None else lam_star
    if p_star is None:
        raise ValueError("a target dispatch is required (ac_solution or p_star)")
    if ac_solution is not None and ac_solution.status != Status.OPTIMAL:
        return _failure(Status.INFEASIBLE, "AC-OPF reference did not solve", "skipped")
    data = _Data(network, demand, p_star, lam_star)
    if cfg.fix_dispatch:
        return _calibrate_fixed(network, demand, data, cfg, ac_solution)
    return _calibrate_free(network, demand, data, cfg)


# --------------------------------------------------------------------------------
# oracle and reference stubs


@dataclass
class GridSearchResult:
    beta: np.ndarray | None
    upper_objective: float
    evaluated: int
    admissible: int

    @property
    def empty(self) -> bool:
        return self.beta is None


def grid_search_oracle(network: Network, demand: DemandSample, ac_solution: AcopfSolution | None,
                       config: CalibrationConfig | None = None, grid_step: float = 0.01,
                       beta_max: float = 2.0, p_star=None, lam_star=None,
                       coarse_step: float | None = None) -> GridSearchResult:
    """Exhaustive evaluation of the upper objective on a beta grid (<= 3 buses).

    Each grid point solves the scaled DC-OPF; points violating the market
    properties (when enforced) are discarded.  With ``coarse_step`` the box is
    first scanned at that spacing and the ``grid_step`` scan is restricted to
    one coarse cell around the best coarse point.
    """
    cfg = config or CalibrationConfig()
    if network.n_bus > 3:
        raise ValueError("grid search is limited to networks with at most 3 buses")
    if grid_step <= 0 or (coarse_step is not None and coarse_step <= grid_step):
        raise ValueError("grid_step must be positive and smaller than coarse_step")
    if ac_solution is not None:
        p_star = ac_solution.p_gen if p_star is None else p_star
        lam_star = ac_solution.lambda_p if lam_star is None else lam_star
    p_star = np.asarray(p_star, dtype=float)
    N, G = network.n_bus, network.n_gen

    def value(beta):
        try:
            sol = solve_pdcopf(network, demand, beta)
        except Exception:  # noqa: BLE001 - infeasible grid points are simply skipped
            return None
        if cfg.enforce_market and not audit(network, demand, sol.p_gen, sol.lmp, cfg.market_tol).passes:
            return None
        val = cfg.gamma_beta / N * float(beta @ beta)
        if G:
            d = sol.p_gen - p_star
            val += cfg.gamma_p / G * float(d @ d)
        if cfg.gamma_lambda and lam_star is not None:
            d = sol.lmp - np.asarray(lam_star)
            val += cfg.gamma_lambda / N * float(d @ d)
        return val

    def scan(lo, hi, step):
        axis = lambda a, b: np.round(np.arange(a, b + 0.5 * step, step), 12)  # noqa: E731
        # buses without demand do not affect the lower level; keep their beta at 0
        axes = [axis(lo[i], hi[i]) if demand.pd[i] != 0 else np.array([0.0]) for i in range(N)]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, N)
        best_val, best_beta, ok = np.inf, None, 0
        for beta in mesh:
            val = value(beta)
            if val is None:
                continue
            ok += 1
            if val < best_val:
                best_val, best_beta = val, beta.copy()
        return best_val, best_beta, len(mesh), ok

    box_lo, box_hi = np.zeros(N), np.full(N, float(beta_max))
    evaluated = admissible = 0
    if coarse_step is not None:
        val, beta, n, ok = scan(box_lo, box_hi, coarse_step)
        evaluated, admissible = n, ok
        if beta is None:
            return GridSearchResult(None, float("inf"), evaluated, admissible)
        box_lo = np.maximum(beta - coarse_step, 0.0)
        box_hi = np.minimum(beta + coarse_step, beta_max)
        # keep the fine grid aligned with the global lattice
        box_lo = np.floor(box_lo / grid_step + 1e-9) * grid_step
    val, beta, n, ok = scan(box_lo, box_hi, grid_step)
    return GridSearchResult(beta, float(val), evaluated + n, admissible + ok)


def fortuny_amat_reformulation(*_args, **_kwargs):
    """Big-M mixed-integer reformulation of the complementarity conditions.

    Not provided: it needs a branch-and-bound MIQP solver.  The formulation
    would introduce a binary ``u_l`` per complementarity pair with
    ``mu_l <= M u_l`` and ``slack_l <= M (1 - u_l)``; :func:`calibrate_beta`
    instead resolves the same conditions by active-set enumeration.
    """
    raise NotImplementedError("the big-M MIQP reformulation needs a mixed-integer solver")
