"""Cost recovery and revenue adequacy audits of a (dispatch, price) pair.

Prices are per-unit ($/h per p.u.), the same units the solvers return.  The
shared tolerance is relative: a quantity passes if it is at least
``-tol * (1 + |payment scale|)``, so solver round-off on large payments does
not flip a verdict.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import DemandSample, Network

DEFAULT_TOL = 1e-6


@dataclass(frozen=True)
class CostRecoveryAudit:
    profit: np.ndarray
    ok: np.ndarray
    tol: float

    @property
    def all_ok(self) -> bool:
        return bool(np.all(self.ok))


@dataclass(frozen=True)
class RevenueAdequacyAudit:
    consumer_payments: float
    producer_revenues: float
    tol: float

    @property
    def merchandising_surplus(self) -> float:
        return self.consumer_payments - self.producer_revenues

    @property
    def ok(self) -> bool:
        scale = 1.0 + max(abs(self.consumer_payments), abs(self.producer_revenues))
        return self.merchandising_surplus >= -self.tol * scale


@dataclass(frozen=True)
class MarketAudit:
    profit: np.ndarray
    cost_recovery_ok: np.ndarray
    merchandising_surplus: float
    revenue_adequacy_ok: bool
    tol: float

    @property
    def passes(self) -> bool:
        return bool(np.all(self.cost_recovery_ok)) and self.revenue_adequacy_ok

    def to_dict(self) -> dict:
        return {
            "profit": self.profit.tolist(),
            "cost_recovery_ok": [bool(v) for v in self.cost_recovery_ok],
            "merchandising_surplus": self.merchandising_surplus,
            "revenue_adequacy_ok": bool(self.revenue_adequacy_ok),
            "tol": self.tol,
        }


def _vectors(network: Network, dispatch, lmp):
    p = np.asarray(dispatch, dtype=float)
    lam = np.asarray(lmp, dtype=float)
    if p.shape != (network.n_gen,):
        raise ValueError(f"dispatch has shape {p.shape}, expected ({network.n_gen},)")
    if lam.shape != (network.n_bus,):
        raise ValueError(f"lmp has shape {lam.shape}, expected ({network.n_bus},)")
    return p, lam


def check_cost_recovery(network: Network, dispatch, lmp, tol: float = DEFAULT_TOL) -> CostRecoveryAudit:
    p, lam = _vectors(network, dispatch, lmp)
    revenue = lam[network.gen_bus] * p
    cost = network.c2 * p * p + network.c1 * p
    profit = revenue - cost
    # tol acts on dispatch (p.u.), so it is weighted by the local price
    return CostRecoveryAudit(profit=profit, ok=profit >= -tol * (1.0 + np.abs(lam[network.gen_bus])), tol=tol)


def check_revenue_adequacy(network: Network, original_demand: DemandSample, dispatch, lmp,
                           tol: float = DEFAULT_TOL) -> RevenueAdequacyAudit:
    """Consumers pay for their original (unscaled) demand."""
    p, lam = _vectors(network, dispatch, lmp)
    pd = np.asarray(original_demand.pd, dtype=float)
    return RevenueAdequacyAudit(
        consumer_payments=float(lam @ pd),
        producer_revenues=float(lam[network.gen_bus] @ p),
        tol=tol,
    )


def audit(network: Network, original_demand: DemandSample, dispatch, lmp,
          tol: float = DEFAULT_TOL) -> MarketAudit:
    cr = check_cost_recovery(network, dispatch, lmp, tol)
    ra = check_revenue_adequacy(network, original_demand, dispatch, lmp, tol)
    return MarketAudit(
        profit=cr.profit,
        cost_recovery_ok=cr.ok,
        merchandising_surplus=ra.merchandising_surplus,
        revenue_adequacy_ok=ra.ok,
        tol=tol,
    )
