"""Geometric and probabilistic primitives shared by the filter, models and simulator.

Conventions
-----------
* Quaternions are Hamilton ``[w, x, y, z]`` arrays; ``R(q)`` rotates body
  vectors into the global frame.
* Orientation errors are right-multiplicative: ``q = q_hat * Exp(dtheta)``.
* The IMU mean is a 16-vector ``[p, v, q, b_w, b_a]``; its error state has 15
  entries ``[dp, dv, dtheta, db_w, db_a]``. Every other stateful instance
  lives in a Euclidean space where the mean and error have the same size.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Any, Generic, Iterator, TypeVar

import numpy as np

IMU_MEAN_DIM = 16
IMU_ERR_DIM = 15

_EPS_ANGLE = 1e-12


class ContractError(ValueError):
    """An operation was called with arguments violating its preconditions."""


class NoBeliefError(LookupError):
    """A history was queried before its first entry."""


# ---------------------------------------------------------------------------
# SO(3) helpers on raw arrays (hot paths use these directly)


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix, ``skew(a) @ b == a x b``."""
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise ContractError("cannot normalize a zero or non-finite quaternion")
    q = q / n
    # canonical hemisphere keeps round trips deterministic
    return q if q[0] >= 0.0 else -q


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
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


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_exp(phi: np.ndarray) -> np.ndarray:
    """Unit quaternion of the rotation vector ``phi`` (radians)."""
    phi = np.asarray(phi, dtype=float)
    angle = math.sqrt(phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2])
    half = 0.5 * angle
    if angle < _EPS_ANGLE:
        # second-order Taylor; exact to double precision at this size
        return np.array([1.0 - angle * angle / 8.0, 0.5 * phi[0], 0.5 * phi[1], 0.5 * phi[2]])
    s = math.sin(half) / angle
    return np.array([math.cos(half), s * phi[0], s * phi[1], s * phi[2]])


def quat_log(q: np.ndarray) -> np.ndarray:
    """Rotation vector of a unit quaternion, angle in ``[0, pi]``."""
    q = np.asarray(q, dtype=float)
    if q[0] < 0.0:
        q = -q
    vn = math.sqrt(q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    if vn < _EPS_ANGLE:
        return 2.0 * q[1:] / q[0]
    angle = 2.0 * math.atan2(vn, q[0])
    return angle / vn * q[1:]


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns the ``w >= 0`` representative."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(np.array(q))


def so3_exp(phi: np.ndarray) -> np.ndarray:
    return quat_to_rotmat(quat_exp(phi))


def so3_right_jacobian(phi: np.ndarray) -> np.ndarray:
    """Right Jacobian of SO(3): ``Exp(phi + d) ~= Exp(phi) Exp(Jr(phi) d)``."""
    angle = float(np.linalg.norm(phi))
    K = skew(phi)
    if angle < 1e-8:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    a2 = angle * angle
    return (
        np.eye(3)
        - (1.0 - math.cos(angle)) / a2 * K
        + (angle - math.sin(angle)) / (a2 * angle) * K @ K
    )


def rotation_angle_deg(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix in degrees."""
    c = 0.5 * (np.trace(R) - 1.0)
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


@dataclass(frozen=True)
class UnitQuaternion:
    """Value-type wrapper around a normalized ``[w, x, y, z]`` array."""

    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self) -> None:
        q = np.array([self.w, self.x, self.y, self.z], dtype=float)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ContractError("quaternion must be finite and non-zero")
        if abs(n - 1.0) > 1e-9:
            q = q / n
            object.__setattr__(self, "w", float(q[0]))
            object.__setattr__(self, "x", float(q[1]))
            object.__setattr__(self, "y", float(q[2]))
            object.__setattr__(self, "z", float(q[3]))

    @classmethod
    def from_array(cls, q: np.ndarray) -> UnitQuaternion:
        return cls(*(float(c) for c in q))

    @classmethod
    def from_rotvec(cls, phi: np.ndarray) -> UnitQuaternion:
        return cls.from_array(quat_exp(phi))

    @classmethod
    def from_matrix(cls, R: np.ndarray) -> UnitQuaternion:
        return cls.from_array(rotmat_to_quat(R))

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def matrix(self) -> np.ndarray:
        return quat_to_rotmat(self.as_array())

    def log(self) -> np.ndarray:
        return quat_log(self.as_array())

    def inverse(self) -> UnitQuaternion:
        return UnitQuaternion(self.w, -self.x, -self.y, -self.z)

    def rotate(self, v: np.ndarray) -> np.ndarray:
        return self.matrix() @ np.asarray(v, dtype=float)

    def __mul__(self, other: UnitQuaternion) -> UnitQuaternion:
        q = quat_mul(self.as_array(), other.as_array())
        return UnitQuaternion.from_array(q / np.linalg.norm(q))


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    orientation: UnitQuaternion = field(default_factory=UnitQuaternion)

    def __post_init__(self) -> None:
        p = np.asarray(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(p)):
            raise ContractError("pose position must be finite")
        object.__setattr__(self, "position", p)

    def transform(self, point: np.ndarray) -> np.ndarray:
        """Map a body-frame point into the global frame."""
        return self.position + self.orientation.rotate(point)


# ---------------------------------------------------------------------------
# error-state algebra


def boxplus(mean: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Compose a state with an error-state increment.

    A 16-vector mean is treated as an IMU state; any other mean must have the
    same size as ``delta`` and is updated additively.
    """
    mean = np.asarray(mean, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if mean.shape == (IMU_MEAN_DIM,):
        if delta.shape != (IMU_ERR_DIM,):
            raise ContractError(f"IMU state needs a {IMU_ERR_DIM}-dim delta, got {delta.shape}")
        out = np.empty(IMU_MEAN_DIM)
        out[0:6] = mean[0:6] + delta[0:6]
        q = quat_mul(mean[6:10], quat_exp(delta[6:9]))
        out[6:10] = q / math.sqrt(q @ q)
        out[10:16] = mean[10:16] + delta[9:15]
        return out
    if mean.shape != delta.shape or mean.ndim != 1:
        raise ContractError(f"delta shape {delta.shape} does not match state {mean.shape}")
    return mean + delta


def boxminus(x: np.ndarray, x_ref: np.ndarray) -> np.ndarray:
    """Error state ``d`` such that ``boxplus(x_ref, d) == x``."""
    x = np.asarray(x, dtype=float)
    x_ref = np.asarray(x_ref, dtype=float)
    if x.shape != x_ref.shape:
        raise ContractError("boxminus operands differ in shape")
    if x.shape == (IMU_MEAN_DIM,):
        out = np.empty(IMU_ERR_DIM)
        out[0:6] = x[0:6] - x_ref[0:6]
        out[6:9] = quat_log(quat_mul(quat_conj(x_ref[6:10]), x[6:10]))
        out[9:15] = x[10:16] - x_ref[10:16]
        return out
    return x - x_ref


def error_dim(mean: np.ndarray) -> int:
    return IMU_ERR_DIM if len(mean) == IMU_MEAN_DIM else len(mean)


def symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def check_psd(P: np.ndarray, tol: float = 1e-10) -> None:
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ContractError("covariance must be square")
    if not np.all(np.isfinite(P)):
        raise ContractError("covariance must be finite")
    if np.max(np.abs(P - P.T), initial=0.0) > tol * max(1.0, np.max(np.abs(P), initial=0.0)):
        raise ContractError("covariance is not symmetric")
    if P.size and np.linalg.eigvalsh(symmetrize(P)).min() < -tol:
        raise ContractError("covariance is not positive semi-definite")


def reconstruct_cross(S_ij: np.ndarray, S_ji: np.ndarray) -> np.ndarray:
    """Cross-covariance from its two factors, ``S_ij @ S_ji.T``."""
    if S_ij.shape[1] != S_ji.shape[1]:
        raise ContractError(
            f"factor inner dimensions differ: {S_ij.shape} vs {S_ji.shape}"
        )
    return S_ij @ S_ji.T


@dataclass
class Belief:
    instance_id: int
    timestamp: float
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self) -> None:
        if self.instance_id <= 0:
            raise ContractError("instance ids must be positive")
        cov = np.asarray(self.covariance)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ContractError(f"covariance must be square, got shape {cov.shape}")

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]


@dataclass
class MeasurementRecord:
    """One update-type measurement.

    ``sensor_id`` is the reporting instance (the range initiator, the
    barometer, or the IMU for zero-velocity pseudo measurements) and
    ``other_id`` the second device of a range pair.
    """

    timestamp: float
    sensor_id: int
    z: np.ndarray
    R: np.ndarray
    other_id: int | None = None
    kind: str = "range"

    def __post_init__(self) -> None:
        self.z = np.atleast_1d(np.asarray(self.z, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if not math.isfinite(self.timestamp):
            raise ContractError("measurement timestamp must be finite")


# ---------------------------------------------------------------------------
# histories

T = TypeVar("T")


class SlidingHistory(Generic[T]):
    """Time-sorted buffer with floor queries and oldest-end eviction.

    ``capacity`` bounds the entry count. ``max_age`` bounds the time span, but
    the newest entry at or before the cut-off is kept so a floor query inside
    the window always succeeds.
    """

    def __init__(self, capacity: int | None = None, max_age: float | None = None) -> None:
        if capacity is not None and capacity < 1:
            raise ContractError("capacity must be positive")
        self.capacity = capacity
        self.max_age = max_age
        self._t: list[float] = []
        self._v: list[T] = []

    def __len__(self) -> int:
        return len(self._t)

    def __iter__(self) -> Iterator[tuple[float, T]]:
        return iter(zip(self._t, self._v))

    def __bool__(self) -> bool:
        return bool(self._t)

    @property
    def timestamps(self) -> list[float]:
        return list(self._t)

    def insert(self, t: float, payload: T) -> None:
        """Insert in time order; an equal timestamp replaces the old entry."""
        ts = self._t
        if not ts or t > ts[-1]:
            ts.append(t)
            self._v.append(payload)
        else:
            i = bisect.bisect_left(ts, t)
            if i < len(ts) and ts[i] == t:
                self._v[i] = payload
            else:
                ts.insert(i, t)
                self._v.insert(i, payload)
        self._evict()

    def _evict(self) -> None:
        ts = self._t
        if self.capacity is not None and len(ts) > self.capacity:
            cut = len(ts) - self.capacity
            del ts[:cut]
            del self._v[:cut]
        if self.max_age is not None and len(ts) > 1 and ts[1] <= ts[-1] - self.max_age:
            self.truncate(ts[-1] - self.max_age)

    def truncate(self, t_cut: float) -> None:
        """Drop entries older than ``t_cut`` except the floor entry of ``t_cut``."""
        i = bisect.bisect_right(self._t, t_cut) - 1
        if i > 0:
            del self._t[:i]
            del self._v[:i]

    def drop_after(self, t: float) -> None:
        i = bisect.bisect_right(self._t, t)
        del self._t[i:]
        del self._v[i:]

    def query(self, t: float) -> T:
        """Payload with the greatest timestamp ``<= t``."""
        i = bisect.bisect_right(self._t, t) - 1
        if i < 0:
            raise NoBeliefError(f"no belief at time {t}")
        return self._v[i]

    def query_entry(self, t: float) -> tuple[float, T]:
        i = bisect.bisect_right(self._t, t) - 1
        if i < 0:
            raise NoBeliefError(f"no belief at time {t}")
        return self._t[i], self._v[i]

    def latest(self) -> T:
        if not self._v:
            raise NoBeliefError("history is empty")
        return self._v[-1]

    @property
    def latest_time(self) -> float:
        if not self._t:
            raise NoBeliefError("history is empty")
        return self._t[-1]

    @property
    def oldest_time(self) -> float:
        if not self._t:
            raise NoBeliefError("history is empty")
        return self._t[0]


class FactorTable:
    """Factors ``S_{owner,j}`` of the cross-covariances ``Sigma_{owner,j}``."""

    def __init__(self, owner_id: int, max_age: float | None = None) -> None:
        self.owner_id = owner_id
        self.max_age = max_age
        self.entries: dict[int, SlidingHistory[np.ndarray]] = {}

    def __contains__(self, other_id: int) -> bool:
        return other_id in self.entries

    def set(self, other_id: int, t: float, S: np.ndarray) -> None:
        hist = self.entries.get(other_id)
        if hist is None:
            hist = self.entries[other_id] = SlidingHistory(max_age=self.max_age)
        hist.insert(t, S)

    def get(self, other_id: int, t: float | None = None) -> np.ndarray:
        hist = self.entries[other_id]
        return hist.latest() if t is None else hist.query(t)

    def remove(self, other_id: int) -> None:
        self.entries.pop(other_id, None)

    def others(self) -> list[int]:
        return list(self.entries)

    def drop_after(self, t: float) -> None:
        for hist in self.entries.values():
            hist.drop_after(t)

    def truncate(self, t_cut: float) -> None:
        for hist in self.entries.values():
            hist.truncate(t_cut)


def cross_covariance(
    tables: dict[int, FactorTable], i: int, j: int, t: float | None = None
) -> np.ndarray:
    """``Sigma_ij`` reconstructed from the factor tables of ``i`` and ``j``."""
    return reconstruct_cross(tables[i].get(j, t), tables[j].get(i, t))


def as_float_array(x: Any, shape: tuple[int, ...] | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if shape is not None and arr.shape != shape:
        raise ContractError(f"expected shape {shape}, got {arr.shape}")
    return arr
