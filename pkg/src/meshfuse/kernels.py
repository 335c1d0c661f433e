"""Backend selection for the hot kernels.

The compiled extension is used when importable; setting the environment
variable ``MESHFUSE_PURE_PYTHON=1`` forces the numpy fallback.
"""
from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

_ext = None
if not os.environ.get("MESHFUSE_PURE_PYTHON"):
    try:
        from . import _kernels as _ext  # type: ignore[no-redef]
    except ImportError:  # extension not built
        _ext = None

BACKEND = "cython" if _ext is not None else "python"
_impl = _ext if _ext is not None else _kernels_py


def imu_step(x, P, acc, gyro, dt, qdiag, gravity):
    return _impl.imu_step(
        np.ascontiguousarray(x, dtype=float),
        np.ascontiguousarray(P, dtype=float),
        np.ascontiguousarray(acc, dtype=float),
        np.ascontiguousarray(gyro, dtype=float),
        float(dt),
        np.ascontiguousarray(qdiag, dtype=float),
        float(gravity),
    )


def range_model(refs, groups, z, p, gamma, beta):
    return _impl.range_model(
        np.ascontiguousarray(refs, dtype=float),
        np.ascontiguousarray(groups, dtype=np.int64),
        np.ascontiguousarray(z, dtype=float),
        np.ascontiguousarray(p, dtype=float),
        np.ascontiguousarray(gamma, dtype=float),
        np.ascontiguousarray(beta, dtype=float),
    )


def range_residuals(refs, groups, z, p, gamma, beta):
    return _impl.range_residuals(
        np.ascontiguousarray(refs, dtype=float),
        np.ascontiguousarray(groups, dtype=np.int64),
        np.ascontiguousarray(z, dtype=float),
        np.ascontiguousarray(p, dtype=float),
        np.ascontiguousarray(gamma, dtype=float),
        np.ascontiguousarray(beta, dtype=float),
    )


def greedy_pairs(ii, jj, n):
    return _impl.greedy_pairs(
        np.ascontiguousarray(ii, dtype=np.int64),
        np.ascontiguousarray(jj, dtype=np.int64),
        int(n),
    )
