import importlib
import subprocess
import sys

import numpy as np
import pytest

from pdcopf import _kernels
from pdcopf._kernels import flow_py

try:
    from pdcopf._kernels import flow_ext
except ImportError:  # pragma: no cover
    flow_ext = None


def _inputs(rng, m=40):
    gs, bs = rng.normal(size=m), rng.normal(size=m)
    gm, bm = rng.normal(size=m), rng.normal(size=m)
    va, vb = rng.uniform(0.9, 1.1, m), rng.uniform(0.9, 1.1, m)
    d = rng.uniform(-0.5, 0.5, m)
    return gs, bs, gm, bm, va, vb, d


def _local(args, k, z):
    """Kernel outputs of end k as a function of z = (theta_a, theta_b, v_a, v_b)."""
    gs, bs, gm, bm = (a[k:k + 1] for a in args[:4])
    p, q, dp, dq = flow_py.branch_flows(gs, bs, gm, bm, np.array([z[2]]), np.array([z[3]]),
                                        np.array([z[0] - z[1]]))
    return p[0], q[0], dp[0], dq[0]


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    args = _inputs(rng, 5)
    h = 1e-6
    for k in range(5):
        z = np.array([args[6][k], 0.0, args[4][k], args[5][k]])
        _, _, dp, dq = _local(args, k, z)
        for j in range(4):
            e = np.zeros(4)
            e[j] = h
            pp, qp, _, _ = _local(args, k, z + e)
            pm, qm, _, _ = _local(args, k, z - e)
            assert (pp - pm) / (2 * h) == pytest.approx(dp[j], rel=1e-6, abs=1e-8)
            assert (qp - qm) / (2 * h) == pytest.approx(dq[j], rel=1e-6, abs=1e-8)


def test_hessians_match_finite_differences():
    rng = np.random.default_rng(1)
    args = _inputs(rng, 4)
    iu, ju = np.triu_indices(4)
    h = 1e-6
    for k in range(4):
        z = np.array([args[6][k], 0.0, args[4][k], args[5][k]])
        wp, wq, wo = rng.normal(size=3)
        _, _, dp, dq = _local(args, k, z)
        sl = slice(k, k + 1)
        packed = flow_py.branch_hessians(*(a[sl] for a in args[:4]), np.array([z[2]]), np.array([z[3]]),
                                         np.array([z[0] - z[1]]), np.array([wp]), np.array([wq]),
                                         np.array([wo]), dp[None], dq[None])[0]
        fd = np.zeros((4, 4))
        for j in range(4):
            e = np.zeros(4)
            e[j] = h
            _, _, dpp, dqp = _local(args, k, z + e)
            _, _, dpm, dqm = _local(args, k, z - e)
            fd[:, j] = wp * (dpp - dpm) / (2 * h) + wq * (dqp - dqm) / (2 * h)
        fd += wo * (np.outer(dp, dp) + np.outer(dq, dq))
        np.testing.assert_allclose(packed, fd[iu, ju], rtol=1e-5, atol=1e-7)


@pytest.mark.skipif(flow_ext is None, reason="compiled kernels not built")
def test_backends_agree():
    rng = np.random.default_rng(2)
    args = _inputs(rng, 200)
    a = flow_py.branch_flows(*args)
    b = flow_ext.branch_flows(*args)
    for u, v in zip(a, b):
        np.testing.assert_allclose(np.asarray(v), u, rtol=1e-13, atol=1e-14)
    w = [rng.normal(size=200) for _ in range(3)]
    ha = flow_py.branch_hessians(*args, *w, a[2], a[3])
    hb = flow_ext.branch_hessians(*args, *w, np.ascontiguousarray(a[2]), np.ascontiguousarray(a[3]))
    np.testing.assert_allclose(np.asarray(hb), ha, rtol=1e-13, atol=1e-14)


def test_pure_python_switch():
    code = "import pdcopf._kernels as k; print(k.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True,
                         env={"PDCOPF_PURE_PYTHON": "1", "PATH": ""}, check=True)
    assert out.stdout.strip() == "python"
    assert _kernels.BACKEND in ("python", "cython")


def test_fallback_gives_same_acopf(monkeypatch):
    from pdcopf import acopf
    from pdcopf.case_io import load_case
    from pdcopf.model import DemandSample

    net = load_case("case30")
    d = DemandSample.nominal(net)
    ref = acopf.solve_acopf(net, d)
    monkeypatch.setenv("PDCOPF_PURE_PYTHON", "1")
    try:
        importlib.reload(_kernels)
        assert _kernels.BACKEND == "python"
        alt = acopf.solve_acopf(net, d)
    finally:
        monkeypatch.delenv("PDCOPF_PURE_PYTHON")
        importlib.reload(_kernels)
    assert alt.objective == pytest.approx(ref.objective, rel=1e-9)
    np.testing.assert_allclose(alt.p_gen, ref.p_gen, atol=1e-7)
