"""Offline stage: sample demands, solve AC-OPF, calibrate beta, persist records.

A dataset lives in a directory::

    manifest.json    network hash, configuration, seed, counts, completeness
    records.csv      one flat row per calibrated sample (training input)
    failures.csv     ledger of samples that produced no record, with reasons
    sol_<id>.json    AC-OPF solution and calibration outcome per record

Floats are written with ``repr`` so a read-back is bit-exact.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .acopf import AcopfSolution, OpfFailure, solve_acopf
from .calibrate import CalibrationConfig, calibrate_beta
from .case_io import network_hash
from .model import DemandSample, Network

log = logging.getLogger(__name__)

PD_RANGE = (0.7, 1.3)
QD_RANGE = (0.85, 1.0)
DATASET_SCHEMA = "pdcopf.dataset"


class DatasetIOError(OSError):
    """Persistence failed; the directory is left marked as partial."""


def sample_demands(network: Network, n: int, seed: int, pd_range=PD_RANGE, qd_range=QD_RANGE,
                   start_id: int = 0) -> list[DemandSample]:
    """Independent per-bus uniform factors times nominal demand."""
    if n <= 0:
        raise ValueError("n must be positive")
    lo_p, hi_p = pd_range
    lo_q, hi_q = qd_range
    if lo_p > hi_p or lo_q > hi_q:
        raise ValueError("sampling ranges must satisfy low <= high")
    rng = np.random.default_rng(seed)
    nb = network.n_bus
    fp = rng.uniform(lo_p, hi_p, size=(n, nb))
    fq = rng.uniform(lo_q, hi_q, size=(n, nb))
    return [
        DemandSample(network.nominal_pd * fp[k], network.nominal_qd * fq[k], start_id + k, seed)
        for k in range(n)
    ]


@dataclass
class CalibrationRecord:
    sample_id: int
    pd: np.ndarray
    qd: np.ndarray
    ac_dispatch: np.ndarray
    ac_lmp: np.ndarray
    ac_cost: float
    beta_star: np.ndarray | None
    upper_objective: float
    cr_ok: bool
    ra_ok: bool
    status: str = "optimal"
    method: str = ""

    def __post_init__(self):
        if self.beta_star is not None and self.status != "optimal":
            raise ValueError("beta_star is only stored for optimal calibrations")

    @property
    def demand(self) -> DemandSample:
        return DemandSample(self.pd, self.qd, self.sample_id)

    def __eq__(self, other):
        if not isinstance(other, CalibrationRecord):
            return NotImplemented
        same = lambda a, b: (a is None and b is None) or (  # noqa: E731
            a is not None and b is not None and np.array_equal(a, b))
        return (
            self.sample_id == other.sample_id
            and all(same(getattr(self, k), getattr(other, k))
                    for k in ("pd", "qd", "ac_dispatch", "ac_lmp", "beta_star"))
            and _feq(self.ac_cost, other.ac_cost)
            and _feq(self.upper_objective, other.upper_objective)
            and (self.cr_ok, self.ra_ok, self.status, self.method)
            == (other.cr_ok, other.ra_ok, other.status, other.method)
        )


def _feq(a, b):
    return a == b or (math.isnan(a) and math.isnan(b))


@dataclass
class FailureEntry:
    sample_id: int
    stage: str
    reason: str


@dataclass
class PipelineConfig:
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    workers: int = 1

    def to_dict(self) -> dict:
        return {"calibration": asdict(self.calibration), "workers": self.workers}


@dataclass
class Dataset:
    network_hash: str
    records: list[CalibrationRecord]
    failures: list[FailureEntry]
    n_bus: int
    n_gen: int
    path: Path | None = None
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def subset(self, records) -> "Dataset":
        return Dataset(self.network_hash, list(records), [], self.n_bus, self.n_gen, None, dict(self.manifest))

    def features(self) -> np.ndarray:
        return np.array([np.concatenate([r.pd, r.qd]) for r in self.records]).reshape(-1, 2 * self.n_bus)

    def demands(self) -> np.ndarray:
        return np.array([r.pd for r in self.records]).reshape(-1, self.n_bus)

    def betas(self) -> np.ndarray:
        return np.array([r.beta_star for r in self.records]).reshape(-1, self.n_bus)


# -------------------------------------------------------------------------------
# processing


def process_sample(network: Network, demand: DemandSample, calibration: CalibrationConfig):
    """One sample end to end; returns ``(record, ac_solution)`` or a failure entry."""
    try:
        ac = solve_acopf(network, demand)
    except OpfFailure as exc:
        reason = "acopf infeasible" if exc.status.value == "infeasible" else f"acopf {exc.status.value}"
        msg = str(exc)
        return FailureEntry(demand.sample_id, "acopf", msg if msg.startswith(reason) else f"{reason}: {msg}")
    res = calibrate_beta(network, demand, ac, calibration)
    if not res.ok:
        return FailureEntry(demand.sample_id, "calibrate", f"calibration {res.status.value}: {res.message}")
    aud = res.market_audit
    rec = CalibrationRecord(
        sample_id=demand.sample_id,
        pd=demand.pd.copy(),
        qd=demand.qd.copy(),
        ac_dispatch=ac.p_gen.copy(),
        ac_lmp=ac.lambda_p.copy(),
        ac_cost=float(ac.objective),
        beta_star=res.beta_star.beta.copy(),
        upper_objective=float(res.upper_objective),
        cr_ok=bool(np.all(aud.cost_recovery_ok)),
        ra_ok=bool(aud.revenue_adequacy_ok),
        status=res.status.value,
        method=res.method,
    )
    extra = {"calibration": {
        "beta_star": rec.beta_star.tolist(),
        "lmp": res.lmp.tolist(),
        "dispatch": res.dispatch.tolist(),
        "upper_objective": res.upper_objective,
        "method": res.method,
        "binding_lines": res.binding_lines,
        "market_audit": aud.to_dict(),
    }}
    return rec, ac, extra


def _job(args):
    network, demand, calibration = args
    return process_sample(network, demand, calibration)


def run_samples(network: Network, samples, config: PipelineConfig):
    """Yield per-sample outcomes in sample order (bounded worker pool)."""
    jobs = [(network, s, config.calibration) for s in samples]
    if config.workers <= 1:
        for job in jobs:
            yield _job(job)
        return
    with ProcessPoolExecutor(max_workers=config.workers) as pool:
        yield from pool.map(_job, jobs, chunksize=4)


def build_dataset(network: Network, samples, config: PipelineConfig | None = None,
                  out_dir=None, seed: int | None = None) -> Dataset:
    """Solve and calibrate every sample; failures go to the ledger, never abort."""
    samples = list(samples)
    if not samples:
        raise ValueError("samples must be nonempty")
    config = config or PipelineConfig()
    writer = _Writer(Path(out_dir), network, config, seed) if out_dir is not None else None
    records, failures = [], []
    for outcome in run_samples(network, samples, config):
        if isinstance(outcome, FailureEntry):
            log.info("sample %d dropped at %s: %s", outcome.sample_id, outcome.stage, outcome.reason)
            failures.append(outcome)
            if writer:
                writer.failure(outcome)
            continue
        rec, ac, extra = outcome
        records.append(rec)
        if writer:
            writer.record(rec, ac, extra)
    ds = Dataset(network_hash(network), records, failures, network.n_bus, network.n_gen)
    if writer:
        ds.manifest = writer.close(len(samples), len(records), len(failures))
        ds.path = writer.root
    return ds


def collect_records(network: Network, n_records: int, seed: int, config: PipelineConfig | None = None,
                    out_dir=None, batch: int | None = None, max_draws: int | None = None,
                    pd_range=PD_RANGE, qd_range=QD_RANGE) -> Dataset:
    """Draw samples until ``n_records`` calibrated records exist.

    Sample ids are consecutive across draws and every drawn sample ends up as
    either a record or a ledger entry.
    """
    if n_records <= 0:
        raise ValueError("n_records must be positive")
    batch = batch or max(8, n_records)
    max_draws = max_draws or 4 * n_records + 16
    config = config or PipelineConfig()
    writer = _Writer(Path(out_dir), network, config, seed) if out_dir is not None else None
    records, failures = [], []
    drawn = 0
    rng = np.random.default_rng(seed)
    while len(records) < n_records and drawn < max_draws:
        sub_seed = int(rng.integers(0, 2**31 - 1))
        size = min(batch, max_draws - drawn)
        samples = sample_demands(network, size, sub_seed, pd_range, qd_range, start_id=drawn)
        for outcome in run_samples(network, samples, config):
            drawn += 1
            if len(records) >= n_records:
                break
            if isinstance(outcome, FailureEntry):
                failures.append(outcome)
                if writer:
                    writer.failure(outcome)
                continue
            rec, ac, extra = outcome
            records.append(rec)
            if writer:
                writer.record(rec, ac, extra)
    # samples drawn but not needed after reaching the target are not counted
    drawn = len(records) + len(failures)
    ds = Dataset(network_hash(network), records, failures, network.n_bus, network.n_gen)
    if writer:
        ds.manifest = writer.close(drawn, len(records), len(failures))
        ds.path = writer.root
    if len(records) < n_records:
        log.warning("only %d of %d records after %d draws", len(records), n_records, drawn)
    return ds


def split_dataset(dataset: Dataset, train_fraction: float, seed: int):
    """Shuffle-split; the train part has ``floor(train_fraction * n)`` records."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    n = len(dataset.records)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(train_fraction * n))
    train = [dataset.records[i] for i in sorted(perm[:n_train])]
    test = [dataset.records[i] for i in sorted(perm[n_train:])]
    return dataset.subset(train), dataset.subset(test)


# -------------------------------------------------------------------------------
# persistence


def _columns(nb: int, ng: int) -> list[str]:
    cols = ["sample_id", "status", "method", "ac_cost", "upper_objective", "cr_ok", "ra_ok"]
    cols += [f"pd_{i}" for i in range(nb)] + [f"qd_{i}" for i in range(nb)]
    cols += [f"beta_{i}" for i in range(nb)] + [f"lmp_{i}" for i in range(nb)]
    cols += [f"dispatch_{k}" for k in range(ng)]
    return cols


def _row(rec: CalibrationRecord) -> list:
    beta = [""] * len(rec.pd) if rec.beta_star is None else [repr(float(v)) for v in rec.beta_star]
    return (
        [rec.sample_id, rec.status, rec.method, repr(rec.ac_cost), repr(rec.upper_objective),
         int(rec.cr_ok), int(rec.ra_ok)]
        + [repr(float(v)) for v in rec.pd] + [repr(float(v)) for v in rec.qd]
        + beta + [repr(float(v)) for v in rec.ac_lmp] + [repr(float(v)) for v in rec.ac_dispatch]
    )


def _parse_row(row: dict, nb: int, ng: int) -> CalibrationRecord:
    vec = lambda p, n: np.array([float(row[f"{p}_{i}"]) for i in range(n)])  # noqa: E731
    beta = None if row["beta_0"] == "" else vec("beta", nb)
    return CalibrationRecord(
        sample_id=int(row["sample_id"]),
        pd=vec("pd", nb), qd=vec("qd", nb),
        ac_dispatch=vec("dispatch", ng), ac_lmp=vec("lmp", nb),
        ac_cost=float(row["ac_cost"]), beta_star=beta,
        upper_objective=float(row["upper_objective"]),
        cr_ok=bool(int(row["cr_ok"])), ra_ok=bool(int(row["ra_ok"])),
        status=row["status"], method=row["method"],
    )


class _Writer:
    """Single writer: the manifest says ``complete: false`` until close()."""

    def __init__(self, root: Path, network: Network, config: PipelineConfig, seed):
        self.root = root
        self.base = {
            "schema": DATASET_SCHEMA,
            "version": 1,
            "network": network.name,
            "network_hash": network_hash(network),
            "n_bus": network.n_bus,
            "n_gen": network.n_gen,
            "seed": seed,
            "config": config.to_dict(),
        }
        try:
            root.mkdir(parents=True, exist_ok=True)
            self._write_manifest({**self.base, "complete": False})
            self._records = open(root / "records.csv", "w", newline="")
            self._failures = open(root / "failures.csv", "w", newline="")
        except OSError as exc:
            raise DatasetIOError(f"cannot create dataset at {root}: {exc}") from exc
        self._rw = csv.writer(self._records, lineterminator="\n")
        self._rw.writerow(_columns(network.n_bus, network.n_gen))
        self._fw = csv.writer(self._failures, lineterminator="\n")
        self._fw.writerow(["sample_id", "stage", "reason"])

    def _write_manifest(self, data):
        (self.root / "manifest.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")

    def _guard(self, fn, *args):
        try:
            fn(*args)
        except OSError as exc:
            self._abort()
            raise DatasetIOError(f"dataset write failed: {exc}") from exc

    def _abort(self):
        for fh in (self._records, self._failures):
            try:
                fh.close()
            except OSError:
                pass

    def record(self, rec: CalibrationRecord, ac: AcopfSolution, extra: dict):
        doc = {"sample_id": rec.sample_id, "acopf": ac.to_dict(), **extra}
        self._guard(self._rw.writerow, _row(rec))
        self._guard((self.root / f"sol_{rec.sample_id}.json").write_text, json.dumps(doc, sort_keys=True))

    def failure(self, entry: FailureEntry):
        self._guard(self._fw.writerow, [entry.sample_id, entry.stage, entry.reason])

    def close(self, n_samples, n_records, n_failures) -> dict:
        self._records.close()
        self._failures.close()
        manifest = {**self.base, "complete": True, "n_samples": n_samples,
                    "n_records": n_records, "n_failures": n_failures}
        try:
            self._write_manifest(manifest)
        except OSError as exc:
            raise DatasetIOError(f"cannot finalize manifest: {exc}") from exc
        return manifest


def load_dataset(path) -> Dataset:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise DatasetIOError(f"cannot read dataset manifest in {root}: {exc}") from exc
    if manifest.get("schema") != DATASET_SCHEMA:
        raise DatasetIOError(f"{root} is not a dataset directory")
    if not manifest.get("complete"):
        raise DatasetIOError(f"dataset in {root} is partial (an earlier run did not finish)")
    nb, ng = manifest["n_bus"], manifest["n_gen"]
    with open(root / "records.csv", newline="") as fh:
        records = [_parse_row(row, nb, ng) for row in csv.DictReader(fh)]
    with open(root / "failures.csv", newline="") as fh:
        failures = [FailureEntry(int(r["sample_id"]), r["stage"], r["reason"]) for r in csv.DictReader(fh)]
    return Dataset(manifest["network_hash"], records, failures, nb, ng, root, manifest)


def load_solution(dataset: Dataset, sample_id: int) -> tuple[AcopfSolution, dict]:
    doc = json.loads((Path(dataset.path) / f"sol_{sample_id}.json").read_text())
    return AcopfSolution.from_dict(doc["acopf"]), doc.get("calibration", {})
