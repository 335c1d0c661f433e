# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; see ``_kernels_py`` for the reference semantics."""
import numpy as np

from libc.math cimport cos, sin, sqrt


cdef inline void _rotmat(double w, double x, double y, double z, double[:, ::1] R) noexcept nogil:
    R[0, 0] = 1 - 2 * (y * y + z * z)
    R[0, 1] = 2 * (x * y - w * z)
    R[0, 2] = 2 * (x * z + w * y)
    R[1, 0] = 2 * (x * y + w * z)
    R[1, 1] = 1 - 2 * (x * x + z * z)
    R[1, 2] = 2 * (y * z - w * x)
    R[2, 0] = 2 * (x * z - w * y)
    R[2, 1] = 2 * (y * z + w * x)
    R[2, 2] = 1 - 2 * (x * x + y * y)


def imu_step(const double[::1] x, const double[:, ::1] P, const double[::1] acc,
             const double[::1] gyro, double dt, const double[::1] qdiag, double gravity):
    cdef double[::1] out = np.empty(16)
    cdef double[:, ::1] Phi = np.eye(15)
    cdef double[:, ::1] Pn = np.empty((15, 15))
    cdef double[:, ::1] tmp = np.empty((15, 15))
    cdef double[:, ::1] R = np.empty((3, 3))
    cdef double[:, ::1] dR = np.empty((3, 3))
    cdef double w[3]
    cdef double a[3]
    cdef double accg[3]
    cdef double wdt[3]
    cdef double RA[3][3]
    cdef double K[3][3]
    cdef double KK[3][3]
    cdef double dq[4]
    cdef double qn[4]
    cdef double angle, half, s, nrm, c1, c2, acc_ij
    cdef int i, j, k

    for i in range(3):
        w[i] = gyro[i] - x[10 + i]
        a[i] = acc[i] - x[13 + i]
        wdt[i] = w[i] * dt
    _rotmat(x[6], x[7], x[8], x[9], R)
    for i in range(3):
        accg[i] = R[i, 0] * a[0] + R[i, 1] * a[1] + R[i, 2] * a[2]
    accg[2] -= gravity
    for i in range(3):
        out[i] = x[i] + x[3 + i] * dt + 0.5 * accg[i] * dt * dt
        out[3 + i] = x[3 + i] + accg[i] * dt

    angle = sqrt(wdt[0] * wdt[0] + wdt[1] * wdt[1] + wdt[2] * wdt[2])
    if angle < 1e-12:
        dq[0] = 1.0 - angle * angle / 8.0
        dq[1] = 0.5 * wdt[0]
        dq[2] = 0.5 * wdt[1]
        dq[3] = 0.5 * wdt[2]
    else:
        half = 0.5 * angle
        s = sin(half) / angle
        dq[0] = cos(half)
        dq[1] = s * wdt[0]
        dq[2] = s * wdt[1]
        dq[3] = s * wdt[2]
    qn[0] = x[6] * dq[0] - x[7] * dq[1] - x[8] * dq[2] - x[9] * dq[3]
    qn[1] = x[6] * dq[1] + x[7] * dq[0] + x[8] * dq[3] - x[9] * dq[2]
    qn[2] = x[6] * dq[2] - x[7] * dq[3] + x[8] * dq[0] + x[9] * dq[1]
    qn[3] = x[6] * dq[3] + x[7] * dq[2] - x[8] * dq[1] + x[9] * dq[0]
    nrm = sqrt(qn[0] * qn[0] + qn[1] * qn[1] + qn[2] * qn[2] + qn[3] * qn[3])
    for i in range(4):
        out[6 + i] = qn[i] / nrm
    for i in range(6):
        out[10 + i] = x[10 + i]

    # R @ skew(a)
    for i in range(3):
        RA[i][0] = R[i, 1] * a[2] - R[i, 2] * a[1]
        RA[i][1] = -R[i, 0] * a[2] + R[i, 2] * a[0]
        RA[i][2] = R[i, 0] * a[1] - R[i, 1] * a[0]
    _rotmat(dq[0], dq[1], dq[2], dq[3], dR)

    # right Jacobian of Exp at wdt
    K[0][0] = 0.0
    K[0][1] = -wdt[2]
    K[0][2] = wdt[1]
    K[1][0] = wdt[2]
    K[1][1] = 0.0
    K[1][2] = -wdt[0]
    K[2][0] = -wdt[1]
    K[2][1] = wdt[0]
    K[2][2] = 0.0
    for i in range(3):
        for j in range(3):
            KK[i][j] = K[i][0] * K[0][j] + K[i][1] * K[1][j] + K[i][2] * K[2][j]
    if angle < 1e-8:
        c1 = 0.5
        c2 = 1.0 / 6.0
    else:
        c1 = (1.0 - cos(angle)) / (angle * angle)
        c2 = (angle - sin(angle)) / (angle * angle * angle)

    for i in range(3):
        Phi[i, 3 + i] = dt
        for j in range(3):
            Phi[i, 6 + j] = -0.5 * dt * dt * RA[i][j]
            Phi[i, 12 + j] = -0.5 * dt * dt * R[i, j]
            Phi[3 + i, 6 + j] = -dt * RA[i][j]
            Phi[3 + i, 12 + j] = -dt * R[i, j]
            Phi[6 + i, 6 + j] = dR[j, i]
            Phi[6 + i, 9 + j] = -dt * ((1.0 if i == j else 0.0) - c1 * K[i][j] + c2 * KK[i][j])

    # Phi P Phi^T + diag(q), symmetrized
    for i in range(15):
        for j in range(15):
            acc_ij = 0.0
            for k in range(15):
                acc_ij += Phi[i, k] * P[k, j]
            tmp[i, j] = acc_ij
    for i in range(15):
        for j in range(i, 15):
            acc_ij = 0.0
            for k in range(15):
                acc_ij += tmp[i, k] * Phi[j, k]
            Pn[i, j] = acc_ij
    for i in range(15):
        Pn[i, i] += qdiag[i]
        for j in range(i + 1, 15):
            Pn[j, i] = Pn[i, j]
    return np.asarray(out), np.asarray(Pn), np.asarray(Phi)


def range_model(const double[:, ::1] refs, const long[::1] groups, const double[::1] z,
                const double[::1] p, const double[::1] gamma, const double[::1] beta):
    cdef Py_ssize_t n = refs.shape[0]
    cdef Py_ssize_t G = gamma.shape[0]
    cdef double[::1] r = np.empty(n)
    cdef double[:, ::1] J = np.zeros((n, 3 + 2 * G))
    cdef Py_ssize_t i
    cdef long g
    cdef double dx, dy, dz, d, b
    for i in range(n):
        g = groups[i]
        dx = p[0] - refs[i, 0]
        dy = p[1] - refs[i, 1]
        dz = p[2] - refs[i, 2]
        d = sqrt(dx * dx + dy * dy + dz * dz)
        b = beta[g]
        r[i] = z[i] - (b * d + gamma[g])
        if d > 0.0:
            J[i, 0] = b * dx / d
            J[i, 1] = b * dy / d
            J[i, 2] = b * dz / d
        J[i, 3 + g] = 1.0
        J[i, 3 + G + g] = d
    return np.asarray(r), np.asarray(J)


def range_residuals(const double[:, ::1] refs, const long[::1] groups, const double[::1] z,
                    const double[::1] p, const double[::1] gamma, const double[::1] beta):
    cdef Py_ssize_t n = refs.shape[0]
    cdef double[::1] r = np.empty(n)
    cdef Py_ssize_t i
    cdef long g
    cdef double dx, dy, dz
    for i in range(n):
        g = groups[i]
        dx = p[0] - refs[i, 0]
        dy = p[1] - refs[i, 1]
        dz = p[2] - refs[i, 2]
        r[i] = z[i] - (beta[g] * sqrt(dx * dx + dy * dy + dz * dz) + gamma[g])
    return np.asarray(r)


def greedy_pairs(const long[::1] ii, const long[::1] jj, Py_ssize_t n):
    cdef unsigned char[::1] used = np.zeros(n, dtype=np.uint8)
    cdef long[:, ::1] out = np.empty((n // 2, 2), dtype=np.int64)
    cdef Py_ssize_t k, m = 0, total = ii.shape[0]
    cdef long a, b
    for k in range(total):
        if m == n // 2:
            break
        a = ii[k]
        b = jj[k]
        if used[a] or used[b]:
            continue
        used[a] = 1
        used[b] = 1
        out[m, 0] = a
        out[m, 1] = b
        m += 1
    return np.asarray(out[:m]).copy()
