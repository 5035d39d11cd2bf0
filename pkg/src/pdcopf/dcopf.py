"""DC-OPF and its demand-scaled variant as convex QPs, plus the PTDF map.

Decision vector ``x = [pg (ng), theta (nb)]``.  Branch flows use the physical
orientation ``p_ij = b_dc * (theta_i - theta_j)`` with ``b_dc = x / (r^2 + x^2)``
(the negated series susceptance), so DC angles share sign with AC angles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .acopf import SCHEMA, OpfFailure
from .model import DemandSample, Network
from .solver import SolverOptions, Status, quadratic_program, solve_ipm


@dataclass(frozen=True)
class ScalingVector:
    beta: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=float).copy()
        if b.ndim != 1:
            raise ValueError("beta must be a vector")
        if np.any(b < 0) or not np.all(np.isfinite(b)):
            raise ValueError("beta must be finite and nonnegative")
        b.setflags(write=False)
        object.__setattr__(self, "beta", b)

    @classmethod
    def ones(cls, n: int) -> "ScalingVector":
        return cls(np.ones(n))

    @classmethod
    def clamped(cls, values) -> "ScalingVector":
        return cls(np.maximum(np.asarray(values, dtype=float), 0.0))

    def __len__(self):
        return len(self.beta)


@dataclass
class DcopfSolution:
    p_gen: np.ndarray
    theta: np.ndarray
    p_flow: np.ndarray
    lmp: np.ndarray
    mu_flow_hi: np.ndarray
    mu_flow_lo: np.ndarray
    mu_pmin: np.ndarray
    mu_pmax: np.ndarray
    objective: float
    status: Status = Status.OPTIMAL
    iterations: int = 0
    kkt_residuals: tuple = (0.0, 0.0, 0.0)
    beta: np.ndarray | None = None

    @property
    def lambda_(self) -> np.ndarray:
        return self.lmp

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "version": 1,
            "kind": "dc" if self.beta is None else "pdc",
            "status": self.status.value,
            "objective": self.objective,
            "iterations": self.iterations,
            "kkt_residuals": list(self.kkt_residuals),
            "p_gen": self.p_gen.tolist(),
            "q_gen": None,
            "v": None,
            "theta": self.theta.tolist(),
            "p_flow": self.p_flow.tolist(),
            "q_flow": None,
            "lambda_p": self.lmp.tolist(),
            "lambda_q": None,
            "mu_flow_hi": self.mu_flow_hi.tolist(),
            "mu_flow_lo": self.mu_flow_lo.tolist(),
            "mu_pmin": self.mu_pmin.tolist(),
            "mu_pmax": self.mu_pmax.tolist(),
            "beta": None if self.beta is None else self.beta.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DcopfSolution":
        if d.get("schema") != SCHEMA or d.get("kind") not in ("dc", "pdc"):
            raise ValueError("not a DC-OPF solution document")
        arr = lambda k: np.asarray(d[k], dtype=float)  # noqa: E731
        return cls(
            p_gen=arr("p_gen"), theta=arr("theta"), p_flow=arr("p_flow"), lmp=arr("lambda_p"),
            mu_flow_hi=arr("mu_flow_hi"), mu_flow_lo=arr("mu_flow_lo"),
            mu_pmin=arr("mu_pmin"), mu_pmax=arr("mu_pmax"),
            objective=float(d["objective"]), status=Status(d["status"]),
            iterations=int(d["iterations"]), kkt_residuals=tuple(d["kkt_residuals"]),
            beta=None if d.get("beta") is None else arr("beta"),
        )


def dc_susceptance(network: Network) -> np.ndarray:
    """Per-branch ``b_dc`` (zero for out-of-service branches)."""
    b = -network.b_series.copy()
    for i, br in enumerate(network.branches):
        if not br.in_service:
            b[i] = 0.0
    return b


def flow_matrix(network: Network) -> np.ndarray:
    """``Bf`` with ``p_flow = Bf @ theta``."""
    return dc_susceptance(network)[:, None] * network.incidence


def ptdf_matrix(network: Network) -> np.ndarray:
    """``|E| x |N|`` injection-to-flow sensitivities; reference column is zero."""
    bf = flow_matrix(network)
    bbus = network.incidence.T @ bf
    keep = np.setdiff1d(np.arange(network.n_bus), [network.ref_bus])
    reduced = bbus[np.ix_(keep, keep)]
    ptdf = np.zeros((network.n_branch, network.n_bus))
    try:
        ptdf[:, keep] = np.linalg.solve(reduced, bf[:, keep].T).T
    except np.linalg.LinAlgError as exc:
        raise OpfFailure(f"singular reduced susceptance matrix: {exc}", Status.NUMERICAL_FAILURE)
    return ptdf


def _effective_demand(network: Network, demand: DemandSample, beta) -> np.ndarray:
    pd = np.asarray(demand.pd, dtype=float)
    if pd.shape != (network.n_bus,):
        raise ValueError(f"demand has shape {pd.shape}, expected ({network.n_bus},)")
    if beta is None:
        return pd
    b = beta.beta if isinstance(beta, ScalingVector) else ScalingVector(beta).beta
    if b.shape != pd.shape:
        raise ValueError("beta must have one entry per bus")
    return pd * b


def _solve(network: Network, load: np.ndarray, beta, opts):
    nb, ng = network.n_bus, network.n_gen
    n = ng + nb
    if float(np.sum(load) + np.sum(network.g_shunt)) > float(np.sum(network.p_max)) + 1e-9:
        raise OpfFailure("dcopf infeasible: demand exceeds generation capacity", Status.INFEASIBLE)
    bf = flow_matrix(network)
    bbus = network.incidence.T @ bf

    q_mat = np.zeros((n, n))
    q_mat[np.arange(ng), np.arange(ng)] = 2.0 * network.c2
    q_vec = np.concatenate([network.c1, np.zeros(nb)])

    # balance rows (rhs = load + shunt) followed by the reference-angle pin
    a_eq = np.zeros((nb + 1, n))
    a_eq[:nb, :ng] = network.gen_incidence
    a_eq[:nb, ng:] = -bbus
    a_eq[nb, ng + network.ref_bus] = 1.0
    b_eq = np.concatenate([load + network.g_shunt, [0.0]])

    lim = np.array([br.limited and br.in_service for br in network.branches], dtype=bool)
    rows = np.flatnonzero(lim)
    a_in = np.zeros((2 * len(rows), n))
    a_in[: len(rows), ng:] = bf[rows]
    a_in[len(rows) :, ng:] = -bf[rows]
    b_in = np.concatenate([network.s_max[rows], network.s_max[rows]])

    lower = np.concatenate([network.p_min, np.full(nb, -np.inf)])
    upper = np.concatenate([network.p_max, np.full(nb, np.inf)])
    qp = quadratic_program(q_mat, q_vec, a_eq, b_eq, a_in, b_in, lower, upper, name="dcopf")

    x0 = np.concatenate([0.5 * (network.p_min + network.p_max), np.zeros(nb)])
    report = solve_ipm(qp, x0, opts or SolverOptions())
    if report.status != Status.OPTIMAL:
        raise OpfFailure(f"dcopf {report.status.value}: {report.message}", report.status, report)

    x = report.x
    theta = x[ng:]
    mu_hi = np.zeros(network.n_branch)
    mu_lo = np.zeros(network.n_branch)
    mu_hi[rows] = report.z_ineq[: len(rows)]
    mu_lo[rows] = report.z_ineq[len(rows) :]
    return DcopfSolution(
        p_gen=x[:ng].copy(),
        theta=theta.copy(),
        p_flow=bf @ theta,
        lmp=report.y_eq[:nb].copy(),
        mu_flow_hi=mu_hi,
        mu_flow_lo=mu_lo,
        mu_pmin=report.z_lower[:ng].copy(),
        mu_pmax=report.z_upper[:ng].copy(),
        objective=float(report.objective),
        status=report.status,
        iterations=report.iterations,
        kkt_residuals=tuple(report.kkt_residuals),
        beta=None if beta is None else np.asarray(getattr(beta, "beta", beta), dtype=float).copy(),
    )


def solve_dcopf(network: Network, demand: DemandSample, opts: SolverOptions | None = None) -> DcopfSolution:
    return _solve(network, _effective_demand(network, demand, None), None, opts)


def solve_pdcopf(network: Network, demand: DemandSample, beta, opts: SolverOptions | None = None) -> DcopfSolution:
    """DC-OPF with nodal demand ``beta_i * pd_i``; ``beta`` must be nonnegative."""
    if not isinstance(beta, ScalingVector):
        beta = ScalingVector(beta)
    return _solve(network, _effective_demand(network, demand, beta), beta, opts)
