"""Command-line entry point.

Exit codes: 0 success, 1 solver or numerical failure, 2 user or input error.
Errors are printed to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .acopf import AcopfSolution, OpfFailure, solve_acopf
from .calibrate import CalibrationConfig, calibrate_beta
from .case_io import CaseFormatError, case_text, enumerate_n_minus_1, load_case, network_hash, network_to_dict
from .dcopf import ScalingVector, solve_dcopf, solve_pdcopf
from .market import audit
from .mlp import MlpModel, TrainConfig, TrainingDiverged, default_hidden, predict_beta, train_on_dataset
from .model import DemandSample, Network, NetworkError
from .pipeline import (
    PD_RANGE,
    QD_RANGE,
    DatasetIOError,
    PipelineConfig,
    collect_records,
    load_dataset,
    sample_demands,
    split_dataset,
)

log = logging.getLogger("pdcopf")

# validation samples come from a disjoint seed stream and id range
VALIDATION_SEED_OFFSET = 1_000_003
VALIDATION_ID_OFFSET = 10_000_000


class UserError(Exception):
    """Bad input: exit code 2."""


class SolverError(Exception):
    """Solver or numerical failure: exit code 1."""


@dataclass
class RunConfig:
    case: str = "case30"
    seed: int = 0
    n_records: int = 1500
    train_fraction: float = 0.8
    pd_low: float = PD_RANGE[0]
    pd_high: float = PD_RANGE[1]
    qd_low: float = QD_RANGE[0]
    qd_high: float = QD_RANGE[1]
    gamma_p: float = 1.0
    gamma_lambda: float = 0.0
    gamma_beta: float = 1.0
    enforce_market: bool = True
    fix_dispatch: bool = True
    learning_rate: float = 1e-5
    weight_decay: float = 1e-4
    epochs: int = 500
    batch_size: int = 64
    rho: float = 1.0
    hidden: str = ""
    standardize: bool = False
    validation_samples: int = 100
    n1_samples: int = 100
    workers: int = 1
    out: str = "run"

    def calibration(self) -> CalibrationConfig:
        return CalibrationConfig(gamma_p=self.gamma_p, gamma_lambda=self.gamma_lambda,
                                 gamma_beta=self.gamma_beta, enforce_market=self.enforce_market,
                                 fix_dispatch=self.fix_dispatch)

    def training(self, n_bus: int) -> TrainConfig:
        hidden = tuple(int(h) for h in self.hidden.split(",") if h) if self.hidden else default_hidden(n_bus)
        return TrainConfig(learning_rate=self.learning_rate, weight_decay=self.weight_decay,
                           epochs=self.epochs, batch_size=self.batch_size, rho=self.rho,
                           seed=self.seed, hidden=hidden, standardize=self.standardize)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, text: str):
    if key not in _FIELDS:
        raise UserError(f"unknown configuration key {key!r}")
    kind = _FIELDS[key].type
    try:
        if kind == "bool":
            low = text.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(text)
            return low in ("1", "true", "yes", "on")
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        return text.strip().strip('"')
    except ValueError:
        raise UserError(f"configuration key {key!r}: cannot read {text!r} as {kind}") from None


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; section headers are ignored."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UserError(f"config file not readable: {exc}") from None
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise UserError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, value)
    return out


def build_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UserError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), value)
    for key in _FIELDS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return RunConfig(**values)


# ---------------------------------------------------------------------------------
# helpers


def _load_network(case) -> Network:
    try:
        return load_case(case)
    except FileNotFoundError:
        raise UserError(f"case not found: {case}") from None
    except (CaseFormatError, NetworkError) as exc:
        raise UserError(f"invalid case {case}: {exc}") from None


def _sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _read_json(path, what):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise UserError(f"{what} not readable: {exc}") from None
    except ValueError as exc:
        raise UserError(f"{what} is not valid JSON: {exc}") from None


def read_demand(path, network: Network) -> DemandSample:
    """``{"pd": [...], "qd": [...]}`` in p.u., or in MW/MVAr with ``"units": "MW"``."""
    doc = _read_json(path, "demand file")
    if not isinstance(doc, dict) or "pd" not in doc or "qd" not in doc:
        raise UserError("demand file must be an object with 'pd' and 'qd' arrays")
    try:
        pd = np.asarray(doc["pd"], dtype=float)
        qd = np.asarray(doc["qd"], dtype=float)
    except (TypeError, ValueError):
        raise UserError("demand arrays must contain numbers") from None
    if pd.shape != (network.n_bus,) or qd.shape != (network.n_bus,):
        raise UserError(f"demand arrays must have {network.n_bus} entries")
    if not (np.all(np.isfinite(pd)) and np.all(np.isfinite(qd))):
        raise UserError("demand values must be finite")
    if str(doc.get("units", "pu")).lower() == "mw":
        pd, qd = pd / network.base_mva, qd / network.base_mva
    return DemandSample(pd, qd, int(doc.get("sample_id", 0)))


def _demand(args, network):
    return read_demand(args.demand, network) if getattr(args, "demand", None) else DemandSample.nominal(network)


def _emit(doc, out):
    text = json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _json_default(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    raise TypeError(f"not serializable: {type(v)}")


def write_manifest(out_dir: Path, command: str, cfg: RunConfig | None, inputs: dict) -> dict:
    doc = {
        "command": command,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": None if cfg is None else cfg.to_dict(),
        "root_seed": None if cfg is None else cfg.seed,
        "inputs": inputs,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{command}_manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def _case_inputs(cfg: RunConfig, network: Network) -> dict:
    return {"case": cfg.case, "case_sha256": _sha256_text(case_text(cfg.case)),
            "network_hash": network_hash(network)}


def _load_model(path, network: Network) -> MlpModel:
    try:
        model = MlpModel.load(path)
    except OSError as exc:
        raise UserError(f"model not readable: {exc}") from None
    except (ValueError, KeyError) as exc:
        raise UserError(f"invalid model file: {exc}") from None
    if model.network_hash and model.network_hash != network_hash(network):
        raise UserError("model was trained on a different network (hash mismatch); refusing to run")
    return model


def validation_samples(network: Network, cfg: RunConfig, n: int):
    return sample_demands(network, n, cfg.seed + VALIDATION_SEED_OFFSET,
                          (cfg.pd_low, cfg.pd_high), (cfg.qd_low, cfg.qd_high),
                          start_id=VALIDATION_ID_OFFSET)


def _run_config(run_dir: Path, args) -> RunConfig:
    """Config of an earlier offline run, with this invocation's overrides on top."""
    manifest = run_dir / "offline_manifest.json"
    base = _read_json(manifest, "offline manifest")["config"] if manifest.exists() else {}
    cfg = dataclasses.replace(RunConfig(**base), **{k: v for k, v in dataclasses.asdict(build_config(args)).items()
                                                    if _explicit(args, k)})
    return cfg


def _explicit(args, key) -> bool:
    if getattr(args, key, None) is not None:
        return True
    sets = [s.split("=", 1)[0].strip() for s in (getattr(args, "set", None) or [])]
    cfg_keys = read_config_file(args.config).keys() if getattr(args, "config", None) else ()
    return key in sets or key in cfg_keys


# ---------------------------------------------------------------------------------
# commands


def cmd_parse(args) -> int:
    net = _load_network(args.case)
    doc = {
        "name": net.name, "n_bus": net.n_bus, "n_branch": net.n_branch, "n_gen": net.n_gen,
        "base_mva": net.base_mva, "network_hash": network_hash(net),
        "total_pd_pu": float(net.nominal_pd.sum()), "n_minus_1_variants": len(enumerate_n_minus_1(net)),
    }
    if args.full:
        doc["network"] = network_to_dict(net)
    _emit(doc, args.out)
    return 0


def _opf_failure(exc: OpfFailure):
    raise SolverError(str(exc)) from exc


def cmd_acopf(args) -> int:
    net = _load_network(args.case)
    try:
        sol = solve_acopf(net, _demand(args, net))
    except OpfFailure as exc:
        _opf_failure(exc)
    _emit(sol.to_dict(), args.out)
    return 0


def cmd_dcopf(args) -> int:
    net = _load_network(args.case)
    try:
        sol = solve_dcopf(net, _demand(args, net))
    except OpfFailure as exc:
        _opf_failure(exc)
    _emit(sol.to_dict(), args.out)
    return 0


def _read_beta(text, n) -> ScalingVector:
    try:
        if Path(text).exists():
            doc = json.loads(Path(text).read_text())
            vals = doc["beta"] if isinstance(doc, dict) else doc
        else:
            vals = [float(v) for v in text.split(",")]
        b = np.asarray(vals, dtype=float)
    except (ValueError, KeyError, TypeError) as exc:
        raise UserError(f"cannot read beta: {exc}") from None
    if b.size == 1:
        b = np.full(n, float(b.ravel()[0]))
    if b.shape != (n,):
        raise UserError(f"beta must have 1 or {n} entries")
    try:
        return ScalingVector(b)
    except ValueError as exc:
        raise UserError(str(exc)) from None


def cmd_pdcopf(args) -> int:
    net = _load_network(args.case)
    demand = _demand(args, net)
    try:
        sol = solve_pdcopf(net, demand, _read_beta(args.beta, net.n_bus))
    except OpfFailure as exc:
        _opf_failure(exc)
    doc = sol.to_dict()
    doc["market_audit"] = audit(net, demand, sol.p_gen, sol.lmp).to_dict()
    _emit(doc, args.out)
    return 0


def cmd_calibrate(args) -> int:
    cfg = build_config(args)
    net = _load_network(args.case or cfg.case)
    demand = _demand(args, net)
    if args.ac:
        try:
            ac = AcopfSolution.from_dict(_read_json(args.ac, "AC solution"))
        except (ValueError, KeyError) as exc:
            raise UserError(f"invalid AC solution file: {exc}") from None
    else:
        try:
            ac = solve_acopf(net, demand)
        except OpfFailure as exc:
            _opf_failure(exc)
    res = calibrate_beta(net, demand, ac, cfg.calibration())
    doc = {
        "status": res.status.value, "method": res.method, "message": res.message,
        "beta_star": None if res.beta_star is None else res.beta_star.beta,
        "lmp": res.lmp, "dispatch": res.dispatch, "upper_objective": res.upper_objective,
        "binding_lines": res.binding_lines,
        "market_audit": None if res.market_audit is None else res.market_audit.to_dict(),
    }
    _emit(doc, args.out)
    if not res.ok:
        raise SolverError(f"calibration {res.status.value}: {res.message}")
    return 0


def _plot_training(history, path):
    from .evaluate import _pyplot

    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.semilogy(np.arange(1, len(history.train_loss) + 1), history.train_loss, label="train")
    if history.test_loss:
        ax.semilogy(np.arange(1, len(history.test_loss) + 1), history.test_loss, label="test")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_offline(args) -> int:
    cfg = build_config(args)
    net = _load_network(cfg.case)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "offline", cfg, _case_inputs(cfg, net))
    pipe = PipelineConfig(cfg.calibration(), cfg.workers)
    try:
        ds = collect_records(net, cfg.n_records, cfg.seed, pipe, out / "dataset",
                             pd_range=(cfg.pd_low, cfg.pd_high), qd_range=(cfg.qd_low, cfg.qd_high))
    except DatasetIOError as exc:
        raise UserError(str(exc)) from None
    if len(ds) < 2:
        raise SolverError(f"only {len(ds)} calibrated records; cannot train")
    train_set, test_set = split_dataset(ds, cfg.train_fraction, cfg.seed)
    try:
        model, hist = train_on_dataset(train_set, cfg.training(net.n_bus), test_set)
    except TrainingDiverged as exc:
        raise SolverError(str(exc)) from None
    model.save(out / "model.json")
    (out / "training.json").write_text(json.dumps({
        **hist.to_dict(),
        "train_ids": [r.sample_id for r in train_set.records],
        "test_ids": [r.sample_id for r in test_set.records],
        "records": len(ds), "failures": len(ds.failures),
    }, indent=2) + "\n")
    _plot_training(hist, out / "training_curve.svg")
    print(json.dumps({"records": len(ds), "failures": len(ds.failures), "train": len(train_set),
                      "test": len(test_set), "final_train_loss": hist.train_loss[-1],
                      "final_test_loss": hist.test_loss[-1] if hist.test_loss else None,
                      "out": str(out)}))
    return 0


def cmd_online(args) -> int:
    net = _load_network(args.case)
    model = _load_model(args.model, net)
    demand = read_demand(args.demand, net)
    beta = ScalingVector.ones(net.n_bus) if args.beta_one else predict_beta(model, demand.pd, demand.qd)
    try:
        sol = solve_pdcopf(net, demand, beta)
    except OpfFailure as exc:
        _opf_failure(exc)
    doc = {
        "beta": beta.beta,
        "dispatch": sol.p_gen,
        "lmp": sol.lmp,
        "lmp_mwh": net.lmp_to_mwh(sol.lmp),
        "objective": sol.objective,
        "status": sol.status.value,
        "market_audit": audit(net, demand, sol.p_gen, sol.lmp).to_dict(),
    }
    _emit(doc, args.out)
    return 0


def _model_and_cfg(args):
    run = Path(args.run)
    cfg = _run_config(run, args)
    net = _load_network(cfg.case)
    model = _load_model(args.model or run / "model.json", net)
    return run, cfg, net, model


def cmd_evaluate(args) -> int:
    from .evaluate import evaluate_samples, write_report

    run, cfg, net, model = _model_and_cfg(args)
    out = Path(args.report_dir or run / "evaluate")
    n = args.samples or cfg.validation_samples
    write_manifest(out, "evaluate", cfg, {**_case_inputs(cfg, net), "model": str(args.model or run / "model.json")})
    metrics = evaluate_samples(net, validation_samples(net, cfg, n), model, distance=not args.no_distance)
    summary = write_report(metrics, net, out)
    print(json.dumps({"out": str(out), "n_samples": summary["n_samples"],
                      "cost_error_pdc": summary["metrics"]["cost_error_pdc"],
                      "cost_error_dc": summary["metrics"]["cost_error_dc"]}))
    return 0


def cmd_n1(args) -> int:
    from .evaluate import evaluate_samples, n1_study, write_n1_report

    run, cfg, net, model = _model_and_cfg(args)
    out = Path(args.report_dir or run / "n1")
    n = args.samples or cfg.n1_samples
    write_manifest(out, "n1", cfg, {**_case_inputs(cfg, net), "model": str(args.model or run / "model.json")})
    samples = validation_samples(net, cfg, n)
    acs = []
    for s in samples:
        try:
            acs.append(solve_acopf(net, s))
        except OpfFailure:
            acs.append(None)
    ok = [k for k, a in enumerate(acs) if a is not None]
    base = evaluate_samples(net, [samples[k] for k in ok], model, acs=[acs[k] for k in ok], distance=False)
    variants = enumerate_n_minus_1(net)
    if args.max_topologies:
        variants = variants[: args.max_topologies]
    res = n1_study(net, model, samples, acs, variants=variants)
    summary = write_n1_report(base, res, net, out)
    print(json.dumps({"out": str(out), "topologies": summary["topologies"],
                      "excluded_pairs": summary["excluded_pairs"],
                      "pooled_pdc_p98": summary["pooled_pdc_p98"], "base_pdc_p98": summary["base_pdc_p98"]}))
    return 0


def cmd_report(args) -> int:
    run = Path(args.run)
    lines = [f"# Run report: {run}", ""]
    found = False
    for name in ("evaluate", "n1"):
        path = run / name / "summary.json"
        if not path.exists():
            continue
        found = True
        s = json.loads(path.read_text())
        lines += [f"## {name}", "", "| metric | count | min | mean | max | p98 |", "|---|---|---|---|---|---|"]
        for key, st in s["metrics"].items():
            if st:
                lines.append(f"| {key} | {st['count']} | {st['min']:.6g} | {st['mean']:.6g} | "
                             f"{st['max']:.6g} | {st['p98']:.6g} |")
        lines += ["", "| fraction | value |", "|---|---|"]
        for key, v in s["fractions"].items():
            lines.append(f"| {key} | {'n/a' if v is None else f'{v:.4f}'} |")
        if name == "n1":
            lines += ["", f"topologies: {s['topologies']}, excluded (variant, sample) pairs: "
                      f"{s['excluded_pairs']}, pooled pDC p98: {s['pooled_pdc_p98']}, "
                      f"base pDC p98: {s['base_pdc_p98']}"]
        lines.append("")
    if not found:
        raise UserError(f"no evaluate or n1 summaries under {run}")
    text = "\n".join(lines)
    (run / "report.md").write_text(text)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------------
# argument parsing


def _config_flags(p):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", dest="out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pdcopf", description="Parametric DC-OPF calibrated against AC-OPF")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="read a case file and print a summary")
    p.add_argument("case")
    p.add_argument("--full", action="store_true", help="include the full network dump")
    p.add_argument("--out")
    p.set_defaults(func=cmd_parse)

    for name, fn, hlp in (("acopf", cmd_acopf, "solve the AC-OPF"), ("dcopf", cmd_dcopf, "solve the DC-OPF")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("case")
        p.add_argument("--demand", help="demand JSON (default: nominal)")
        p.add_argument("--out")
        p.set_defaults(func=fn)

    p = sub.add_parser("pdcopf", help="solve the demand-scaled DC-OPF")
    p.add_argument("case")
    p.add_argument("--beta", required=True, help="JSON file, one value, or comma-separated list")
    p.add_argument("--demand")
    p.add_argument("--out")
    p.set_defaults(func=cmd_pdcopf)

    p = sub.add_parser("calibrate", help="calibrate beta for one demand sample")
    p.add_argument("case", nargs="?")
    p.add_argument("--demand")
    p.add_argument("--ac", help="AC-OPF solution JSON (solved if omitted)")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("offline", help="sample, solve, calibrate and train")
    _config_flags(p)
    p.add_argument("--case")
    p.add_argument("--n-records", dest="n_records", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_offline)

    p = sub.add_parser("online", help="predict beta and solve the scaled DC-OPF")
    p.add_argument("--case", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--demand", required=True)
    p.add_argument("--beta-one", action="store_true", help="use beta = 1 (plain DC-OPF)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_online)

    for name, fn, hlp in (("evaluate", cmd_evaluate, "metrics on fresh validation samples"),
                          ("n1", cmd_n1, "single-branch outage study")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--run", required=True, help="offline output directory")
        p.add_argument("--model", help="model file (default: RUN/model.json)")
        p.add_argument("--samples", type=int)
        p.add_argument("--report-dir", dest="report_dir")
        p.add_argument("--config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE")
        if name == "evaluate":
            p.add_argument("--no-distance", action="store_true", help="skip AC projections")
        else:
            p.add_argument("--max-topologies", type=int, help="only the first K variants")
        p.set_defaults(func=fn)

    p = sub.add_parser("report", help="collect evaluate/n1 summaries into report.md")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UserError as exc:
        _error(str(exc), "input")
        return 2
    except SolverError as exc:
        _error(str(exc), "solver")
        return 1
    except OpfFailure as exc:
        _error(str(exc), "solver")
        return 1


def _error(message, kind):
    sys.stderr.write(json.dumps({"error": message, "kind": kind}) + "\n")


if __name__ == "__main__":
    sys.exit(main())
