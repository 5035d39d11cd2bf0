"""Evaluation suite: cost error, dispatch error, distance to AC feasibility,
LMP statistics, market-property fractions, eCDFs and the N-1 study."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .acopf import AcopfSolution, OpfFailure, ac_residuals, projection_solve, solve_acopf
from .case_io import enumerate_n_minus_1
from .dcopf import ScalingVector, solve_dcopf, solve_pdcopf
from .market import DEFAULT_TOL, audit
from .mlp import MlpModel, predict_beta
from .model import DemandSample, Network

log = logging.getLogger(__name__)

FEAS_TOL = 1e-6
LMP_BINS = 50


def cost_error(cost_ac: float, cost_x: float) -> float:
    """Absolute relative cost gap in percent."""
    if not cost_ac > 0:
        raise ValueError("reference AC cost must be positive")
    return 100.0 * abs(cost_ac - cost_x) / cost_ac


def dispatch_rmse(p_ref, p_x) -> float:
    a = np.asarray(p_ref, dtype=float)
    b = np.asarray(p_x, dtype=float)
    if a.shape != b.shape:
        raise ValueError("dispatch vectors must have equal length")
    if a.size == 0:
        return 0.0
    return float(np.sqrt(np.mean((a - b) ** 2)))


@dataclass
class SampleMetrics:
    sample_id: int
    topology: int | None = None
    cost_ac: float | None = None
    cost_dc: float | None = None
    cost_pdc: float | None = None
    cost_error_dc: float | None = None
    cost_error_pdc: float | None = None
    dispatch_rmse_dc: float | None = None
    dispatch_rmse_pdc: float | None = None
    dist_feas_dc: float | None = None
    dist_feas_pdc: float | None = None
    cr_ok: bool | None = None
    ra_ok: bool | None = None
    cr_ok_dc: bool | None = None
    ra_ok_dc: bool | None = None
    lmp_ac: np.ndarray | None = field(default=None, repr=False)
    lmp_dc: np.ndarray | None = field(default=None, repr=False)
    lmp_pdc: np.ndarray | None = field(default=None, repr=False)
    notes: str = ""

    def note(self, text):
        self.notes = f"{self.notes}; {text}" if self.notes else text

    SCALARS = ("cost_ac", "cost_dc", "cost_pdc", "cost_error_dc", "cost_error_pdc",
               "dispatch_rmse_dc", "dispatch_rmse_pdc", "dist_feas_dc", "dist_feas_pdc")
    FLAGS = ("cr_ok", "ra_ok", "cr_ok_dc", "ra_ok_dc")


@dataclass
class Ecdf:
    values: np.ndarray

    def __post_init__(self):
        v = np.sort(np.asarray(self.values, dtype=float).ravel())
        self.values = v[~np.isnan(v)]

    def __call__(self, q):
        return self.query(q)

    def query(self, q):
        """Fraction of values ``<= q`` (right-continuous step function)."""
        n = len(self.values)
        if n == 0:
            raise ValueError("empty eCDF")
        return np.searchsorted(self.values, q, side="right") / n

    def quantile(self, p: float) -> float:
        """Smallest value whose eCDF is at least ``p``."""
        if not 0.0 <= p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        n = len(self.values)
        k = max(int(math.ceil(p * n)) - 1, 0)
        return float(self.values[min(k, n - 1)])


# ---------------------------------------------------------------------------------
# per-sample evaluation


def _distance(network, demand, target, warm, metrics, label):
    """Projection distance, reported only when the projected point is AC-feasible."""
    try:
        _, dist, sol = projection_solve(network, demand, target, warm)
    except OpfFailure as exc:
        metrics.note(f"{label} projection failed: {exc.status.value}")
        return None
    res = ac_residuals(network, demand, sol)
    if max(res.values()) > FEAS_TOL:
        metrics.note(f"{label} projection not verified feasible ({max(res.values()):.2e})")
        return None
    return dist


def evaluate_sample(network: Network, demand: DemandSample, model: MlpModel | None = None,
                    beta=None, ac: AcopfSolution | None = None, warm: AcopfSolution | None = None,
                    distance: bool = True, topology: int | None = None,
                    market_tol: float = DEFAULT_TOL) -> SampleMetrics:
    """AC reference, plain DC and predicted-beta pDC on one demand sample.

    ``beta`` bypasses the model.  Failures leave the affected metrics ``None``
    and record the reason in ``notes``.
    """
    m = SampleMetrics(demand.sample_id, topology)
    if ac is None:
        try:
            ac = solve_acopf(network, demand, warm=warm)
        except OpfFailure as exc:
            m.note(f"acopf {exc.status.value}")
            return m
    m.cost_ac = float(ac.objective)
    m.lmp_ac = ac.lambda_p.copy()

    try:
        dc = solve_dcopf(network, demand)
    except OpfFailure as exc:
        dc = None
        m.note(f"dcopf {exc.status.value}")
    if dc is not None:
        m.cost_dc = dc.objective
        m.cost_error_dc = cost_error(m.cost_ac, dc.objective)
        m.dispatch_rmse_dc = dispatch_rmse(ac.p_gen, dc.p_gen)
        m.lmp_dc = dc.lmp.copy()
        aud = audit(network, demand, dc.p_gen, dc.lmp, market_tol)
        m.cr_ok_dc, m.ra_ok_dc = bool(np.all(aud.cost_recovery_ok)), bool(aud.revenue_adequacy_ok)
        if distance:
            m.dist_feas_dc = _distance(network, demand, dc.p_gen, ac, m, "dc")

    if beta is None and model is None:
        return m
    b = ScalingVector.clamped(beta) if beta is not None else predict_beta(model, demand.pd, demand.qd)
    try:
        pdc = solve_pdcopf(network, demand, b)
    except OpfFailure as exc:
        m.note(f"pdcopf {exc.status.value}")
        return m
    m.cost_pdc = pdc.objective
    m.cost_error_pdc = cost_error(m.cost_ac, pdc.objective)
    m.dispatch_rmse_pdc = dispatch_rmse(ac.p_gen, pdc.p_gen)
    m.lmp_pdc = pdc.lmp.copy()
    aud = audit(network, demand, pdc.p_gen, pdc.lmp, market_tol)
    m.cr_ok, m.ra_ok = bool(np.all(aud.cost_recovery_ok)), bool(aud.revenue_adequacy_ok)
    if distance:
        m.dist_feas_pdc = _distance(network, demand, pdc.p_gen, ac, m, "pdc")
    return m


def evaluate_samples(network, samples, model=None, betas=None, acs=None, distance=True, topology=None):
    out = []
    for k, demand in enumerate(samples):
        out.append(evaluate_sample(
            network, demand, model,
            beta=None if betas is None else betas[k],
            ac=None if acs is None else acs[k],
            distance=distance, topology=topology,
        ))
    return out


# ---------------------------------------------------------------------------------
# aggregation


def _stats(vals) -> dict | None:
    # sorted first so the mean does not depend on sample order
    v = np.sort(np.array([x for x in vals if x is not None], dtype=float))
    if v.size == 0:
        return None
    e = Ecdf(v)
    return {"count": int(v.size), "min": float(v.min()), "mean": float(v.mean()),
            "max": float(v.max()), "p98": e.quantile(0.98)}


def _fraction(flags) -> float | None:
    f = [bool(x) for x in flags if x is not None]
    return float(np.mean(f)) if f else None


def aggregate(metrics: list[SampleMetrics], network: Network | None = None) -> dict:
    """Min/mean/max/98th percentile per metric, market pass fractions, LMP quantiles."""
    if not metrics:
        raise ValueError("no metrics to aggregate")
    summary = {"n_samples": len(metrics), "metrics": {}, "fractions": {}, "lmp": {}}
    for name in SampleMetrics.SCALARS:
        summary["metrics"][name] = _stats(getattr(m, name) for m in metrics)
    for name in SampleMetrics.FLAGS:
        summary["fractions"][name] = _fraction(getattr(m, name) for m in metrics)
    both = [None if m.cr_ok is None else (m.cr_ok and m.ra_ok) for m in metrics]
    summary["fractions"]["cr_and_ra_ok"] = _fraction(both)
    scale = network.base_mva if network is not None else 1.0
    for kind in ("ac", "dc", "pdc"):
        vecs = [getattr(m, f"lmp_{kind}") for m in metrics if getattr(m, f"lmp_{kind}") is not None]
        if not vecs:
            summary["lmp"][kind] = None
            continue
        pooled = np.concatenate(vecs) / scale
        qs = np.quantile(pooled, [0.0, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0])
        summary["lmp"][kind] = {"units": "$/MWh" if network is not None else "$/h per p.u.",
                                "quantiles": dict(zip(["min", "q05", "q25", "median", "q75", "q95", "max"],
                                                      map(float, qs)))}
    summary["notes"] = sum(1 for m in metrics if m.notes)
    return summary


def ecdfs(metrics: list[SampleMetrics]) -> dict[str, Ecdf]:
    out = {}
    for name in SampleMetrics.SCALARS:
        vals = [getattr(m, name) for m in metrics if getattr(m, name) is not None]
        if vals:
            out[name] = Ecdf(vals)
    return out


# ---------------------------------------------------------------------------------
# N-1


@dataclass
class N1Result:
    metrics: list[SampleMetrics]
    variants: list[int]
    excluded: int
    pooled: Ecdf | None

    def per_topology(self) -> dict[int, dict]:
        out = {}
        for t in self.variants:
            rows = [m for m in self.metrics if m.topology == t]
            out[t] = {"pdc": _stats(m.cost_error_pdc for m in rows),
                      "dc": _stats(m.cost_error_dc for m in rows),
                      "evaluated": sum(1 for m in rows if m.cost_ac is not None)}
        return out


def n1_study(network: Network, model: MlpModel, samples, base_acs=None, distance: bool = False,
             variants=None) -> N1Result:
    """Every non-islanding single-branch outage, the unchanged model, every sample.

    AC-OPF runs warm-start from the base-topology solution of the same sample;
    AC-infeasible (variant, sample) pairs are excluded and counted.
    """
    samples = list(samples)
    if base_acs is None:
        base_acs = []
        for s in samples:
            try:
                base_acs.append(solve_acopf(network, s))
            except OpfFailure:
                base_acs.append(None)
    variants = enumerate_n_minus_1(network) if variants is None else variants
    metrics, excluded = [], 0
    for var in variants:
        for s, warm in zip(samples, base_acs):
            m = evaluate_sample(var.network, s, model, warm=warm, distance=distance,
                                topology=var.removed_branch)
            if m.cost_ac is None:
                excluded += 1
            metrics.append(m)
    errs = [m.cost_error_pdc for m in metrics if m.cost_error_pdc is not None]
    return N1Result(metrics, [v.removed_branch for v in variants], excluded,
                    Ecdf(errs) if errs else None)


# ---------------------------------------------------------------------------------
# output files


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def write_metrics_csv(metrics: list[SampleMetrics], path) -> None:
    cols = ["sample_id", "topology", *SampleMetrics.SCALARS, *SampleMetrics.FLAGS, "notes"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for m in metrics:
            w.writerow([_fmt(getattr(m, c)) for c in cols])


def read_metrics_csv(path) -> list[SampleMetrics]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            m = SampleMetrics(int(row["sample_id"]), None if row["topology"] == "" else int(row["topology"]))
            for c in SampleMetrics.SCALARS:
                setattr(m, c, None if row[c] == "" else float(row[c]))
            for c in SampleMetrics.FLAGS:
                setattr(m, c, None if row[c] == "" else bool(int(row[c])))
            m.notes = row["notes"]
            out.append(m)
    return out


def write_summary(summary: dict, path) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "pdcopf"  # stable element ids across runs
    return plt


def plot_cost_scatter(metrics, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 5))
    ac = np.array([m.cost_ac for m in metrics if m.cost_ac is not None and m.cost_dc is not None])
    dc = np.array([m.cost_dc for m in metrics if m.cost_ac is not None and m.cost_dc is not None])
    ax.scatter(ac, dc, s=8, label="DC-OPF")
    pairs = [(m.cost_ac, m.cost_pdc) for m in metrics if m.cost_ac is not None and m.cost_pdc is not None]
    if pairs:
        pa, pp = np.array(pairs).T
        ax.scatter(pa, pp, s=8, label="pDC-OPF")
    if ac.size:
        lo, hi = float(min(ac.min(), dc.min())), float(max(ac.max(), dc.max()))
        ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
    ax.set_xlabel("AC-OPF cost ($/h)")
    ax.set_ylabel("approximate cost ($/h)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_dispatch_box(metrics, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    data = [[m.dispatch_rmse_dc for m in metrics if m.dispatch_rmse_dc is not None],
            [m.dispatch_rmse_pdc for m in metrics if m.dispatch_rmse_pdc is not None]]
    labels = ["DC-OPF", "pDC-OPF"]
    keep = [(d, lab) for d, lab in zip(data, labels) if d]
    if keep:
        ax.boxplot([d for d, _ in keep], tick_labels=[lab for _, lab in keep])
    ax.set_ylabel("dispatch RMSE vs AC-OPF (p.u.)")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _ecdf_plot(series: dict, xlabel, path, log_x=False):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, vals in series.items():
        if len(vals) == 0:
            continue
        e = Ecdf(vals)
        y = np.arange(1, len(e.values) + 1) / len(e.values)
        ax.step(e.values, y, where="post", label=label)
    if log_x:
        ax.set_xscale("symlog", linthresh=1e-4)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("eCDF")
    ax.set_ylim(0, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_distance_ecdf(metrics, path):
    _ecdf_plot({
        "DC-OPF": [m.dist_feas_dc for m in metrics if m.dist_feas_dc is not None],
        "pDC-OPF": [m.dist_feas_pdc for m in metrics if m.dist_feas_pdc is not None],
    }, "distance to AC feasibility (p.u.)", path, log_x=True)


def plot_lmp_histogram(metrics, network, path, bins=LMP_BINS):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    pooled = {}
    for kind, label in (("ac", "AC-OPF"), ("dc", "DC-OPF"), ("pdc", "pDC-OPF")):
        vecs = [getattr(m, f"lmp_{kind}") for m in metrics if getattr(m, f"lmp_{kind}") is not None]
        if vecs:
            pooled[label] = network.lmp_to_mwh(np.concatenate(vecs))
    if pooled:
        allv = np.concatenate(list(pooled.values()))
        edges = np.linspace(allv.min(), allv.max() + 1e-9, bins + 1)
        for label, v in pooled.items():
            ax.hist(v, bins=edges, histtype="step", label=label)
        ax.legend()
    ax.set_xlabel("LMP ($/MWh)")
    ax.set_ylabel("count (bus x sample)")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_n1_ecdf(base_metrics, n1: N1Result, path):
    _ecdf_plot({
        "base pDC-OPF": [m.cost_error_pdc for m in base_metrics if m.cost_error_pdc is not None],
        "N-1 pDC-OPF": [m.cost_error_pdc for m in n1.metrics if m.cost_error_pdc is not None],
        "N-1 DC-OPF": [m.cost_error_dc for m in n1.metrics if m.cost_error_dc is not None],
    }, "cost error (%)", path)


EVALUATE_ARTIFACTS = ("metrics.csv", "summary.json", "cost_scatter.svg", "dispatch_error_box.svg",
                      "distance_ecdf.svg", "lmp_histogram.svg")


def write_report(metrics, network, out_dir, extra: dict | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = aggregate(metrics, network)
    if extra:
        summary.update(extra)
    write_metrics_csv(metrics, out / "metrics.csv")
    write_summary(summary, out / "summary.json")
    plot_cost_scatter(metrics, out / "cost_scatter.svg")
    plot_dispatch_box(metrics, out / "dispatch_error_box.svg")
    plot_distance_ecdf(metrics, out / "distance_ecdf.svg")
    plot_lmp_histogram(metrics, network, out / "lmp_histogram.svg")
    return summary


def write_n1_report(base_metrics, n1: N1Result, network, out_dir, extra: dict | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = aggregate(n1.metrics, network)
    summary["topologies"] = len(n1.variants)
    summary["excluded_pairs"] = n1.excluded
    summary["pooled_pdc_p98"] = None if n1.pooled is None else n1.pooled.quantile(0.98)
    base = [m.cost_error_pdc for m in base_metrics if m.cost_error_pdc is not None]
    summary["base_pdc_p98"] = Ecdf(base).quantile(0.98) if base else None
    summary["per_topology"] = {str(k): v for k, v in n1.per_topology().items()}
    if extra:
        summary.update(extra)
    write_metrics_csv(n1.metrics, out / "metrics.csv")
    write_summary(summary, out / "summary.json")
    plot_n1_ecdf(base_metrics, n1, out / "n1_ecdf.svg")
    return summary
