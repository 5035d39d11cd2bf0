import json
import subprocess
import sys

import numpy as np
import pytest

from pdcopf.case_io import enumerate_n_minus_1, load_case
from pdcopf.cli import RunConfig, build_config, build_parser, main, read_config_file
from pdcopf.dcopf import solve_dcopf
from pdcopf.evaluate import EVALUATE_ARTIFACTS
from pdcopf.mlp import MlpModel
from pdcopf.model import DemandSample


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_missing_case_exits_2(capsys, tmp_path):
    code, _, err = run(["offline", "--case", tmp_path / "nope.m", "--out", tmp_path / "r"], capsys)
    assert code == 2
    doc = json.loads(err.strip().splitlines()[-1])
    assert doc["error"].startswith("case not found") and doc["kind"] == "input"


def test_parse_summary(capsys):
    code, out, _ = run(["parse", "case30"], capsys)
    doc = json.loads(out)
    assert code == 0
    assert (doc["n_bus"], doc["n_branch"], doc["n_gen"], doc["n_minus_1_variants"]) == (30, 41, 6, 38)


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("# comment\n[offline]\nepochs = 7\nseed = 3\nenforce_market = false\n")
    assert read_config_file(cfg_file)["epochs"] == 7
    args = build_parser().parse_args(["offline", "--config", str(cfg_file), "--set", "seed=4", "--epochs", "9"])
    cfg = build_config(args)
    assert (cfg.epochs, cfg.seed, cfg.enforce_market) == (9, 4, False)
    assert cfg.batch_size == RunConfig().batch_size


def test_unknown_config_key(capsys):
    code, _, err = run(["offline", "--set", "nonsense=1"], capsys)
    assert code == 2 and "nonsense" in err


def test_pdcopf_beta_one_is_dc(capsys):
    net = load_case("case30")
    code, out, _ = run(["pdcopf", "case30", "--beta", "1.0"], capsys)
    assert code == 0
    doc = json.loads(out)
    assert doc["objective"] == pytest.approx(solve_dcopf(net, DemandSample.nominal(net)).objective, abs=1e-8)


@pytest.fixture(scope="module")
def offline_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    argv = ["offline", "--case", "case30", "--n-records", "20", "--epochs", "5", "--seed", "5",
            "--set", "hidden=16,8", "--set", "validation_samples=6", "--set", "n1_samples=2"]
    codes = [main(argv + ["--out", str(root / name)]) for name in ("a", "b")]
    return root, codes


def test_offline_smoke(offline_run):
    root, codes = offline_run
    assert codes == [0, 0]
    run_dir = root / "a"
    for name in ("model.json", "training.json", "training_curve.svg", "offline_manifest.json",
                 "dataset/records.csv", "dataset/failures.csv", "dataset/manifest.json"):
        assert (run_dir / name).exists(), name
    manifest = json.loads((run_dir / "offline_manifest.json").read_text())
    assert manifest["config"]["seed"] == 5 and manifest["config"]["epochs"] == 5
    assert len((run_dir / "dataset/records.csv").read_text().splitlines()) == 21


def test_offline_rerun_is_byte_identical(offline_run):
    root, _ = offline_run
    for name in ("dataset/records.csv", "dataset/failures.csv", "model.json"):
        assert (root / "a" / name).read_bytes() == (root / "b" / name).read_bytes(), name


def _nominal_demand(path, net):
    path.write_text(json.dumps({"pd": net.nominal_pd.tolist(), "qd": net.nominal_qd.tolist()}))
    return path


def test_online_shape_and_beta_one(offline_run, tmp_path, capsys):
    root, _ = offline_run
    net = load_case("case30")
    demand = _nominal_demand(tmp_path / "d.json", net)
    code, out, _ = run(["online", "--case", "case30", "--model", root / "a/model.json", "--demand", demand], capsys)
    assert code == 0
    doc = json.loads(out)
    assert len(doc["dispatch"]) == net.n_gen and len(doc["lmp"]) == net.n_bus
    assert min(doc["beta"]) >= 0.0
    code, out, _ = run(["online", "--case", "case30", "--model", root / "a/model.json", "--demand", demand,
                        "--beta-one"], capsys)
    dc = solve_dcopf(net, DemandSample.nominal(net))
    doc = json.loads(out)
    np.testing.assert_allclose(doc["dispatch"], dc.p_gen, atol=1e-12)
    np.testing.assert_allclose(doc["lmp"], dc.lmp, atol=1e-9)


@pytest.mark.parametrize("text", ["{not json", json.dumps({"pd": [1.0, 2.0]}), json.dumps([1, 2, 3])])
def test_online_malformed_demand(offline_run, tmp_path, capsys, text):
    root, _ = offline_run
    bad = tmp_path / "bad.json"
    bad.write_text(text)
    code, _, err = run(["online", "--case", "case30", "--model", root / "a/model.json", "--demand", bad], capsys)
    assert code == 2
    assert json.loads(err.strip().splitlines()[-1])["kind"] == "input"


def test_online_refuses_foreign_model(offline_run, tmp_path, capsys):
    root, _ = offline_run
    model = MlpModel.load(root / "a/model.json")
    model.network_hash = "0" * 16
    model.save(tmp_path / "m.json")
    net = load_case("case30")
    code, _, err = run(["online", "--case", "case30", "--model", tmp_path / "m.json",
                        "--demand", _nominal_demand(tmp_path / "d.json", net)], capsys)
    assert code == 2 and "hash mismatch" in err


def test_evaluate_n1_and_report(offline_run, capsys):
    root, _ = offline_run
    run_dir = root / "a"
    code, _, _ = run(["evaluate", "--run", run_dir], capsys)
    assert code == 0
    for name in EVALUATE_ARTIFACTS:
        assert (run_dir / "evaluate" / name).stat().st_size > 0
    summary = json.loads((run_dir / "evaluate/summary.json").read_text())
    assert summary["n_samples"] == 6
    for st in summary["metrics"].values():
        if st:
            assert st["min"] <= st["mean"] <= st["max"]

    code, _, _ = run(["n1", "--run", run_dir, "--max-topologies", 3], capsys)
    assert code == 0
    n1 = json.loads((run_dir / "n1/summary.json").read_text())
    assert n1["topologies"] == 3 and len(n1["per_topology"]) == 3

    code, out, _ = run(["report", "--run", run_dir], capsys)
    assert code == 0 and (run_dir / "report.md").exists()
    assert "## evaluate" in out and "## n1" in out


def test_n1_topology_count_full(offline_run, capsys):
    root, _ = offline_run
    code, _, _ = run(["n1", "--run", root / "b", "--samples", 1, "--report-dir", root / "b/n1full"], capsys)
    assert code == 0
    n1 = json.loads((root / "b/n1full/summary.json").read_text())
    assert n1["topologies"] == len(enumerate_n_minus_1(load_case("case30")))


def test_console_script_help():
    out = subprocess.run([sys.executable, "-c", "import sys; from pdcopf.cli import main; sys.exit(main(['--help']))"],
                         capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("parse", "acopf", "dcopf", "pdcopf", "calibrate", "offline", "online", "evaluate", "n1", "report"):
        assert cmd in out.stdout
