"""Branch-flow kernels: compiled extension when built, numpy otherwise."""

import os
import warnings

from . import flow_py

backend = flow_py
BACKEND = "python"

if os.environ.get("PDCOPF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import flow_ext

        backend = flow_ext
        BACKEND = "cython"
    except ImportError as exc:  # pragma: no cover - depends on build
        warnings.warn(f"pdcopf: compiled kernels unavailable ({exc}); using numpy fallback")

branch_flows = backend.branch_flows
branch_hessians = backend.branch_hessians

__all__ = ["BACKEND", "branch_flows", "branch_hessians", "flow_py"]
