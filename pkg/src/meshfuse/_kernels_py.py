"""Pure numpy implementations of the hot kernels.

Signatures and results match the compiled ``_kernels`` module; this module is
used when the extension is not built or ``MESHFUSE_PURE_PYTHON`` is set.
"""
from __future__ import annotations

import math

import numpy as np


def _skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _quat_exp(phi):
    angle = math.sqrt(phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2])
    if angle < 1e-12:
        return np.array([1.0 - angle * angle / 8.0, 0.5 * phi[0], 0.5 * phi[1], 0.5 * phi[2]])
    s = math.sin(0.5 * angle) / angle
    return np.array([math.cos(0.5 * angle), s * phi[0], s * phi[1], s * phi[2]])


def _quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def _rotmat(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _right_jacobian(phi):
    angle = math.sqrt(phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2])
    K = _skew(phi)
    if angle < 1e-8:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    a2 = angle * angle
    return (
        np.eye(3)
        - (1.0 - math.cos(angle)) / a2 * K
        + (angle - math.sin(angle)) / (a2 * angle) * K @ K
    )


def imu_step(x, P, acc, gyro, dt, qdiag, gravity):
    """One strapdown step: returns the new mean, covariance and transition."""
    p = x[0:3]
    v = x[3:6]
    q = x[6:10]
    w = gyro - x[10:13]
    a = acc - x[13:16]
    R = _rotmat(q)
    Ra = R @ a
    acc_g = Ra.copy()
    acc_g[2] -= gravity

    out = np.empty(16)
    out[0:3] = p + v * dt + 0.5 * acc_g * dt * dt
    out[3:6] = v + acc_g * dt
    wdt = w * dt
    dq = _quat_exp(wdt)
    qn = _quat_mul(q, dq)
    out[6:10] = qn / math.sqrt(qn @ qn)
    out[10:16] = x[10:16]

    Phi = np.eye(15)
    RA = R @ _skew(a)
    Phi[0:3, 3:6] = np.eye(3) * dt
    Phi[0:3, 6:9] = -0.5 * dt * dt * RA
    Phi[0:3, 12:15] = -0.5 * dt * dt * R
    Phi[3:6, 6:9] = -dt * RA
    Phi[3:6, 12:15] = -dt * R
    Phi[6:9, 6:9] = _rotmat(dq).T
    Phi[6:9, 9:12] = -dt * _right_jacobian(wdt)

    Pn = Phi @ P @ Phi.T
    Pn[np.diag_indices(15)] += qdiag
    Pn = 0.5 * (Pn + Pn.T)
    return out, Pn, Phi


def range_model(refs, groups, z, p, gamma, beta):
    """Residuals ``z - (beta*d + gamma)`` and the model Jacobian over ``[p, gamma, beta]``."""
    n = refs.shape[0]
    G = gamma.shape[0]
    diff = p[None, :] - refs
    d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    b = beta[groups]
    r = z - (b * d + gamma[groups])
    J = np.zeros((n, 3 + 2 * G))
    rows = np.arange(n)
    with np.errstate(invalid="ignore", divide="ignore"):
        u = np.where(d[:, None] > 0.0, diff / d[:, None], 0.0)
    J[:, 0:3] = b[:, None] * u
    J[rows, 3 + groups] = 1.0
    J[rows, 3 + G + groups] = d
    return r, J


def range_residuals(refs, groups, z, p, gamma, beta):
    diff = p[None, :] - refs
    d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    return z - (beta[groups] * d + gamma[groups])


def greedy_pairs(ii, jj, n):
    """Walk candidate pairs in order and keep those whose samples are both unused."""
    used = np.zeros(n, dtype=bool)
    out = []
    remaining = n // 2
    for a, b in zip(ii.tolist(), jj.tolist()):
        if used[a] or used[b]:
            continue
        used[a] = used[b] = True
        out.append((a, b))
        remaining -= 1
        if remaining == 0:
            break
    return np.array(out, dtype=np.int64).reshape(-1, 2)
