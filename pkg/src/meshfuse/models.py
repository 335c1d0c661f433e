"""Propagation and measurement models.

Every observation model returns a :class:`LinearizedObservation` holding the
residual ``z - h(x_hat)``, the Jacobian of ``h`` with respect to the error
state of each involved instance, and the measurement noise covariance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import (
    IMU_ERR_DIM,
    IMU_MEAN_DIM,
    ContractError,
    quat_normalize,
    quat_to_rotmat,
    skew,
)

GRAVITY = 9.81
GRAVITY_VECTOR = np.array([0.0, 0.0, -GRAVITY])

# international barometric formula
BARO_LAPSE_RATE = 0.0065  # K/m
BARO_GAS_CONSTANT = 8.31446  # J/(mol K)
BARO_MOLAR_MASS = 0.0289644  # kg/mol
BARO_GRAVITY = 9.80665  # m/s^2
BARO_EXPONENT = BARO_GAS_CONSTANT * BARO_LAPSE_RATE / (BARO_GRAVITY * BARO_MOLAR_MASS)

RANGE_MIN_DISTANCE = 0.1


class RangeGeometryError(ContractError):
    """Estimated distance below the singularity gate."""


@dataclass
class ImuState:
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    b_w: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_a: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.v, quat_normalize(self.q), self.b_w, self.b_a]).astype(float)

    @classmethod
    def from_vector(cls, x: np.ndarray) -> ImuState:
        x = np.asarray(x, dtype=float)
        if x.shape != (IMU_MEAN_DIM,):
            raise ContractError("IMU state vector must have 16 entries")
        return cls(x[0:3].copy(), x[3:6].copy(), x[6:10].copy(), x[10:13].copy(), x[13:16].copy())

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.q)


@dataclass
class ImuReading:
    t: float
    acc: np.ndarray
    gyro: np.ndarray

    def __post_init__(self) -> None:
        self.acc = np.asarray(self.acc, dtype=float)
        self.gyro = np.asarray(self.gyro, dtype=float)
        if not (
            math.isfinite(self.t) and np.all(np.isfinite(self.acc)) and np.all(np.isfinite(self.gyro))
        ):
            raise ContractError("IMU reading must be finite")


@dataclass
class ImuNoise:
    """Continuous-time noise densities of the inertial sensor."""

    acc_noise: float = 0.05  # m/s^2/sqrt(Hz)
    gyro_noise: float = 0.005  # rad/s/sqrt(Hz)
    acc_bias_walk: float = 1e-3  # m/s^3/sqrt(Hz)
    gyro_bias_walk: float = 1e-4  # rad/s^2/sqrt(Hz)

    def qdiag(self, dt: float) -> np.ndarray:
        q = np.empty(IMU_ERR_DIM)
        q[0:3] = 0.0
        q[3:6] = self.acc_noise**2 * dt
        q[6:9] = self.gyro_noise**2 * dt
        q[9:12] = self.gyro_bias_walk**2 * dt
        q[12:15] = self.acc_bias_walk**2 * dt
        return q


@dataclass
class LinearizedObservation:
    residual: np.ndarray
    blocks: dict[int, np.ndarray]
    R: np.ndarray

    @property
    def dim(self) -> int:
        return self.residual.shape[0]

    @property
    def involved(self) -> list[int]:
        return list(self.blocks)


class RangeBiasTable:
    """Symmetric pairwise range biases ``(gamma, beta)``."""

    def __init__(self, entries: dict[tuple[int, int], tuple[float, float]] | None = None) -> None:
        self._d: dict[tuple[int, int], tuple[float, float]] = {}
        for (k, l), (g, b) in (entries or {}).items():
            self.set(k, l, g, b)

    @staticmethod
    def _key(k: int, l: int) -> tuple[int, int]:
        return (k, l) if k <= l else (l, k)

    def set(self, k: int, l: int, gamma: float, beta: float = 1.0) -> None:
        if beta <= 0.0:
            raise ContractError("range scale bias must be positive")
        self._d[self._key(k, l)] = (float(gamma), float(beta))

    def get(self, k: int, l: int, default: tuple[float, float] | None = None):
        return self._d.get(self._key(k, l), default)

    def __getitem__(self, kl: tuple[int, int]) -> tuple[float, float]:
        return self._d[self._key(*kl)]

    def __contains__(self, kl: tuple[int, int]) -> bool:
        return self._key(*kl) in self._d

    def __len__(self) -> int:
        return len(self._d)

    def items(self):
        return self._d.items()

    def update(self, other: RangeBiasTable) -> None:
        self._d.update(other._d)


@dataclass
class BaroParams:
    p_IP: np.ndarray = field(default_factory=lambda: np.zeros(3))
    reference_pressure: float = 101325.0  # Pa
    reference_temperature: float = 288.15  # K
    sigma_p: float = 1.0  # Pa
    height_offset: float = 0.0  # barometer height at the reference pressure

    def __post_init__(self) -> None:
        self.p_IP = np.asarray(self.p_IP, dtype=float)
        if self.reference_pressure <= 0.0:
            raise ContractError("reference pressure must be positive")


# ---------------------------------------------------------------------------
# IMU


def imu_propagate(
    state: ImuState | np.ndarray,
    cov: np.ndarray,
    reading: ImuReading,
    dt: float,
    noise: ImuNoise | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """First-order strapdown step with exact quaternion increment.

    Returns the new 16-dim mean, the propagated 15x15 covariance and the
    error-state transition matrix ``Phi``.
    """
    if not dt > 0.0:
        raise ContractError(f"dt must be positive, got {dt}")
    if dt > 0.1 + 1e-9:
        raise ContractError(f"dt must not exceed 0.1 s, got {dt}")
    x = state.to_vector() if isinstance(state, ImuState) else np.asarray(state, dtype=float)
    qdiag = noise.qdiag(dt) if noise is not None else np.zeros(IMU_ERR_DIM)
    return kernels.imu_step(x, cov, reading.acc, reading.gyro, dt, qdiag, GRAVITY)


def imu_mean_step(x: np.ndarray, reading: ImuReading, dt: float) -> np.ndarray:
    """Mean-only propagation (same integration scheme as :func:`imu_propagate`)."""
    return kernels.imu_step(x, np.zeros((15, 15)), reading.acc, reading.gyro, dt, np.zeros(15), GRAVITY)[0]


# ---------------------------------------------------------------------------
# barometer


def pressure_to_height(pressure, reference_pressure: float, reference_temperature: float):
    return (reference_temperature / BARO_LAPSE_RATE) * (
        1.0 - np.power(np.asarray(pressure, dtype=float) / reference_pressure, BARO_EXPONENT)
    )


def height_to_pressure(height, reference_pressure: float, reference_temperature: float):
    base = 1.0 - BARO_LAPSE_RATE * np.asarray(height, dtype=float) / reference_temperature
    return reference_pressure * np.power(base, 1.0 / BARO_EXPONENT)


def baro_height_observation(
    imu_mean: np.ndarray, params: BaroParams, z_pressure: float, imu_id: int = 1
) -> LinearizedObservation:
    if not z_pressure > 0.0:
        raise ContractError("pressure must be positive")
    P0 = params.reference_pressure
    T0 = params.reference_temperature
    h_meas = params.height_offset + float(pressure_to_height(z_pressure, P0, T0))
    R = quat_to_rotmat(imu_mean[6:10])
    h_est = imu_mean[2] + (R @ params.p_IP)[2]
    H = np.zeros((1, IMU_ERR_DIM))
    H[0, 2] = 1.0
    H[0, 6:9] = -(R[2, :] @ skew(params.p_IP))
    dh_dP = -(T0 / BARO_LAPSE_RATE) * BARO_EXPONENT * (z_pressure / P0) ** (BARO_EXPONENT - 1.0) / P0
    var_h = (dh_dP * params.sigma_p) ** 2
    return LinearizedObservation(np.array([h_meas - h_est]), {imu_id: H}, np.array([[var_h]]))


# ---------------------------------------------------------------------------
# UWB ranges


def tag_position(imu_mean: np.ndarray, p_IT: np.ndarray) -> np.ndarray:
    return imu_mean[0:3] + quat_to_rotmat(imu_mean[6:10]) @ p_IT


def range_observation_tag_anchor(
    imu_mean: np.ndarray,
    p_IT: np.ndarray,
    p_GA: np.ndarray,
    bias: tuple[float, float],
    z: float,
    sigma_d: float,
    imu_id: int = 1,
    anchor_id: int = 0,
    d_min: float = RANGE_MIN_DISTANCE,
) -> LinearizedObservation:
    """Range between a body-mounted tag and a stationary anchor."""
    gamma, beta = bias
    R = quat_to_rotmat(imu_mean[6:10])
    p_IT = np.asarray(p_IT, dtype=float)
    diff = np.asarray(p_GA, dtype=float) - (imu_mean[0:3] + R @ p_IT)
    d = math.sqrt(diff @ diff)
    if d < d_min:
        raise RangeGeometryError(f"estimated distance {d:.3g} m below {d_min} m")
    u = diff / d
    H_imu = np.zeros((1, IMU_ERR_DIM))
    H_imu[0, 0:3] = -beta * u
    H_imu[0, 6:9] = beta * (u @ R @ skew(p_IT))
    H_anchor = (beta * u)[None, :]
    return LinearizedObservation(
        np.array([z - (beta * d + gamma)]),
        {imu_id: H_imu, anchor_id: H_anchor},
        np.array([[sigma_d**2]]),
    )


def range_observation_anchor_anchor(
    p_GAi: np.ndarray,
    p_GAj: np.ndarray,
    bias: tuple[float, float],
    z: float,
    sigma_d: float,
    anchor_i: int = 0,
    anchor_j: int = 1,
    d_min: float = RANGE_MIN_DISTANCE,
) -> LinearizedObservation:
    gamma, beta = bias
    diff = np.asarray(p_GAj, dtype=float) - np.asarray(p_GAi, dtype=float)
    d = math.sqrt(diff @ diff)
    if d < d_min:
        raise RangeGeometryError(f"estimated distance {d:.3g} m below {d_min} m")
    u = diff / d
    return LinearizedObservation(
        np.array([z - (beta * d + gamma)]),
        {anchor_i: (-beta * u)[None, :], anchor_j: (beta * u)[None, :]},
        np.array([[sigma_d**2]]),
    )


# ---------------------------------------------------------------------------
# zero-velocity pseudo measurement


def zupt_observation(
    imu_mean: np.ndarray,
    reading: ImuReading,
    sigma_acc: float,
    sigma_gyro: float,
    imu_id: int = 1,
) -> LinearizedObservation:
    """Stand-still pseudo observation: zero true acceleration and angular rate.

    The accelerometer senses ``R^T (a - g)``, so at rest the predicted true
    acceleration is ``a_meas + R^T g - b_a``.
    """
    x = np.asarray(imu_mean, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ContractError("state must be finite")
    R = quat_to_rotmat(x[6:10])
    g_body = R.T @ GRAVITY_VECTOR
    h = np.empty(6)
    h[0:3] = reading.acc + g_body - x[13:16]
    h[3:6] = reading.gyro - x[10:13]
    H = np.zeros((6, IMU_ERR_DIM))
    # reaction vector -g: derivative of -R^T(-g) w.r.t. the right error
    H[0:3, 6:9] = -skew(R.T @ (-GRAVITY_VECTOR))
    H[0:3, 12:15] = -np.eye(3)
    H[3:6, 9:12] = -np.eye(3)
    Rn = np.diag([sigma_acc**2] * 3 + [sigma_gyro**2] * 3)
    return LinearizedObservation(-h, {imu_id: H}, Rn)
