"""Synthetic flights and evaluation tools.

The reference flight rests on the ground, takes off vertically, climbs along
an elliptical helix, descends back to the takeoff point and rests again. Every
phase is time-warped with a quintic smoothstep, so position, velocity and
acceleration are continuous and vanish at phase boundaries.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from .core import ContractError, quat_conj, quat_mul, rotmat_to_quat
from .mesh import RangeSample
from .models import GRAVITY_VECTOR, BaroParams, ImuNoise, ImuReading, height_to_pressure

log = logging.getLogger(__name__)

NEES_BOUND_3DOF = float(chi2.ppf(0.997, 3))


# ---------------------------------------------------------------------------
# trajectory


def _smoothstep(tau: np.ndarray):
    """Quintic blend on [0, 1] with its first two derivatives."""
    tau = np.clip(tau, 0.0, 1.0)
    s = tau**3 * (10.0 - 15.0 * tau + 6.0 * tau**2)
    ds = 30.0 * tau**2 * (1.0 - tau) ** 2
    dds = 60.0 * tau * (1.0 - tau) * (1.0 - 2.0 * tau)
    return s, ds, dds


@dataclass
class TrajectorySpec:
    takeoff_height: float = 2.0
    top_height: float = 8.0
    turns: float = 3.0
    radius_x: float = 4.0
    radius_y: float = 5.0
    rest_start: float = 5.0
    takeoff_duration: float = 10.0
    spiral_duration: float = 100.0
    descent_duration: float = 15.0
    rest_end: float = 10.0
    roll_amplitude: float = 0.05  # rad
    pitch_amplitude: float = 0.05  # rad
    rate: float = 100.0  # ground-truth sampling, Hz
    bounds: tuple[tuple[float, float], ...] = ((-10.0, 10.0), (-10.0, 10.0), (0.0, 12.0))

    def __post_init__(self) -> None:
        durations = (self.takeoff_duration, self.spiral_duration, self.descent_duration)
        if min(durations) <= 0.0 or self.rest_start < 0.0 or self.rest_end < 0.0:
            raise ContractError("phase durations must be positive")
        if not 0.0 < self.takeoff_height <= self.top_height:
            raise ContractError("need 0 < takeoff height <= top height")
        if self.turns < 0 or self.radius_x <= 0.0 or self.radius_y <= 0.0:
            raise ContractError("spiral radii must be positive")
        if self.rate < 60.0:
            raise ContractError("ground truth rate must be at least 60 Hz")
        (x0, x1), (y0, y1), (z0, z1) = self.bounds
        if not (z0 <= 0.0 and self.top_height <= z1):
            raise ContractError("heights outside the area bounds")
        if not (x0 <= -self.radius_x and self.radius_x <= x1 and y0 <= -self.radius_y and self.radius_y <= y1):
            raise ContractError("spiral outside the area bounds")

    @property
    def duration(self) -> float:
        return (self.rest_start + self.takeoff_duration + self.spiral_duration
                + self.descent_duration + self.rest_end)

    @property
    def phase_times(self) -> np.ndarray:
        """Start of takeoff, spiral, descent, final rest, and the end."""
        return np.cumsum([self.rest_start, self.takeoff_duration, self.spiral_duration,
                          self.descent_duration, self.rest_end])


@dataclass
class KinematicState:
    """Analytic state at an array of times; rotations map body to world."""

    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    R: np.ndarray  # (n, 3, 3)
    omega: np.ndarray  # body-frame angular rate


class Trajectory:
    """Closed-form evaluation of the flight described by a :class:`TrajectorySpec`."""

    def __init__(self, spec: TrajectorySpec) -> None:
        self.spec = spec
        self.t1, self.t2, self.t3, self.t4, self.t_end = spec.phase_times
        self.origin = np.array([spec.radius_x, 0.0, 0.0])

    def _phase(self, t, t0, T):
        return _smoothstep((t - t0) / T)

    def evaluate(self, t) -> KinematicState:
        sp = self.spec
        t = np.atleast_1d(np.asarray(t, dtype=float))
        n = t.size
        p = np.tile(self.origin, (n, 1))
        v = np.zeros((n, 3))
        a = np.zeros((n, 3))

        # vertical profile: takeoff, then spiral climb, then descent
        s1, ds1, dds1 = self._phase(t, self.t1, sp.takeoff_duration)
        s2, ds2, dds2 = self._phase(t, self.t2, sp.spiral_duration)
        s3, ds3, dds3 = self._phase(t, self.t3, sp.descent_duration)
        T1, T2, T3 = sp.takeoff_duration, sp.spiral_duration, sp.descent_duration
        h0, h1 = sp.takeoff_height, sp.top_height
        p[:, 2] = h0 * s1 + (h1 - h0) * s2 - h1 * s3
        v[:, 2] = h0 * ds1 / T1 + (h1 - h0) * ds2 / T2 - h1 * ds3 / T3
        a[:, 2] = h0 * dds1 / T1**2 + (h1 - h0) * dds2 / T2**2 - h1 * dds3 / T3**2

        # horizontal ellipse driven by the spiral phase
        big = 2.0 * math.pi * sp.turns
        th = big * s2
        dth = big * ds2 / T2
        ddth = big * dds2 / T2**2
        c, s = np.cos(th), np.sin(th)
        p[:, 0] = sp.radius_x * c
        p[:, 1] = sp.radius_y * s
        v[:, 0] = -sp.radius_x * s * dth
        v[:, 1] = sp.radius_y * c * dth
        a[:, 0] = -sp.radius_x * (c * dth**2 + s * ddth)
        a[:, 1] = sp.radius_y * (-s * dth**2 + c * ddth)

        # attitude: yaw follows the spiral phase, small roll and pitch wobble
        yaw, dyaw = th, dth
        roll = sp.roll_amplitude * np.sin(th)
        droll = sp.roll_amplitude * np.cos(th) * dth
        pitch = sp.pitch_amplitude * np.sin(2.0 * th)
        dpitch = 2.0 * sp.pitch_amplitude * np.cos(2.0 * th) * dth
        cr, sr = np.cos(roll), np.sin(roll)
        cp, spi = np.cos(pitch), np.sin(pitch)
        cy, sy = np.cos(yaw), np.sin(yaw)
        R = np.empty((n, 3, 3))
        R[:, 0, 0] = cy * cp
        R[:, 0, 1] = cy * spi * sr - sy * cr
        R[:, 0, 2] = cy * spi * cr + sy * sr
        R[:, 1, 0] = sy * cp
        R[:, 1, 1] = sy * spi * sr + cy * cr
        R[:, 1, 2] = sy * spi * cr - cy * sr
        R[:, 2, 0] = -spi
        R[:, 2, 1] = cp * sr
        R[:, 2, 2] = cp * cr
        omega = np.empty((n, 3))
        omega[:, 0] = droll - dyaw * spi
        omega[:, 1] = dpitch * cr + dyaw * sr * cp
        omega[:, 2] = -dpitch * sr + dyaw * cr * cp
        return KinematicState(t, p, v, a, R, omega)


@dataclass
class GroundTruth:
    """Poses sampled at a fixed rate from an analytic trajectory."""

    t: np.ndarray
    p: np.ndarray
    q: np.ndarray  # (w, x, y, z), body to world
    v: np.ndarray
    a: np.ndarray
    omega: np.ndarray
    trajectory: Trajectory | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.t.size

    def bracket(self, t: float) -> tuple[int, float] | None:
        """Index ``k`` and weight ``w`` with ``t = (1-w) t[k] + w t[k+1]``."""
        if t < self.t[0] or t > self.t[-1]:
            return None
        k = int(np.searchsorted(self.t, t, side="right")) - 1
        k = min(max(k, 0), self.t.size - 2)
        w = (t - self.t[k]) / (self.t[k + 1] - self.t[k])
        return k, w

    def point_at(self, t: float, lever: np.ndarray | None = None) -> np.ndarray | None:
        """Linearly interpolated position of a body-fixed point."""
        br = self.bracket(t)
        if br is None:
            return None
        k, w = br
        pts = self.p[k:k + 2]
        if lever is not None:
            pts = pts + np.einsum("nij,j->ni", self.rotations(slice(k, k + 2)), lever)
        return (1.0 - w) * pts[0] + w * pts[1]

    def rotations(self, idx=slice(None)) -> np.ndarray:
        q = np.atleast_2d(self.q[idx])
        w, x, y, z = q.T
        R = np.empty((q.shape[0], 3, 3))
        R[:, 0, 0] = 1 - 2 * (y * y + z * z)
        R[:, 0, 1] = 2 * (x * y - w * z)
        R[:, 0, 2] = 2 * (x * z + w * y)
        R[:, 1, 0] = 2 * (x * y + w * z)
        R[:, 1, 1] = 1 - 2 * (x * x + z * z)
        R[:, 1, 2] = 2 * (y * z - w * x)
        R[:, 2, 0] = 2 * (x * z - w * y)
        R[:, 2, 1] = 2 * (y * z + w * x)
        R[:, 2, 2] = 1 - 2 * (x * x + y * y)
        return R


def generate_trajectory(spec: TrajectorySpec | None = None) -> GroundTruth:
    spec = spec or TrajectorySpec()
    traj = Trajectory(spec)
    n = int(round(spec.duration * spec.rate)) + 1
    t = np.arange(n) / spec.rate
    ks = traj.evaluate(t)
    q = np.array([rotmat_to_quat(R) for R in ks.R])
    return GroundTruth(t, ks.p, q, ks.v, ks.a, ks.omega, traj)


# ---------------------------------------------------------------------------
# sensor synthesis


def synthesize_imu(
    trajectory: Trajectory,
    rate: float = 100.0,
    noise: ImuNoise | None = None,
    rng: np.random.Generator | None = None,
    initial_gyro_bias: np.ndarray | None = None,
    initial_acc_bias: np.ndarray | None = None,
    t_end: float | None = None,
) -> tuple[list[ImuReading], np.ndarray, np.ndarray]:
    """Readings ``a = R^T (a_true - g) + b_a + n``, ``w = w_true + b_w + n``.

    ``noise=None`` gives noiseless readings with constant biases. Returns the
    readings and the true gyro and accelerometer bias series.
    """
    if rate < 100.0:
        raise ContractError("IMU rate must be at least 100 Hz")
    t_end = trajectory.t_end if t_end is None else t_end
    n = int(math.floor(t_end * rate + 1e-9)) + 1
    t = np.arange(n) / rate
    ks = trajectory.evaluate(t)
    acc = np.einsum("nji,nj->ni", ks.R, ks.a - GRAVITY_VECTOR)
    gyro = ks.omega.copy()
    b_w = np.tile(np.zeros(3) if initial_gyro_bias is None else initial_gyro_bias, (n, 1)).astype(float)
    b_a = np.tile(np.zeros(3) if initial_acc_bias is None else initial_acc_bias, (n, 1)).astype(float)
    if noise is not None:
        rng = rng if rng is not None else np.random.default_rng()
        dt = 1.0 / rate
        steps_w = noise.gyro_bias_walk * math.sqrt(dt) * rng.standard_normal((n, 3))
        steps_a = noise.acc_bias_walk * math.sqrt(dt) * rng.standard_normal((n, 3))
        steps_w[0] = steps_a[0] = 0.0
        b_w += np.cumsum(steps_w, axis=0)
        b_a += np.cumsum(steps_a, axis=0)
        acc += noise.acc_noise / math.sqrt(dt) * rng.standard_normal((n, 3))
        gyro += noise.gyro_noise / math.sqrt(dt) * rng.standard_normal((n, 3))
    acc += b_a
    gyro += b_w
    readings = [ImuReading(float(t[k]), acc[k], gyro[k]) for k in range(n)]
    return readings, b_w, b_a


def synthesize_baro(
    trajectory: Trajectory,
    params: BaroParams,
    rate: float = 10.0,
    sigma_p: float | None = None,
    rng: np.random.Generator | None = None,
    ground_pressure: float = 101325.0,
) -> np.ndarray:
    """``(n, 2)`` array of ``(t, pressure)``; height is measured above the world origin."""
    sigma_p = params.sigma_p if sigma_p is None else sigma_p
    n = int(math.floor(trajectory.t_end * rate + 1e-9)) + 1
    t = np.arange(n) / rate
    ks = trajectory.evaluate(t)
    h = ks.p[:, 2] + np.einsum("nij,j->ni", ks.R, params.p_IP)[:, 2]
    pressure = height_to_pressure(h, ground_pressure, params.reference_temperature)
    if sigma_p > 0.0:
        rng = rng if rng is not None else np.random.default_rng()
        pressure = pressure + sigma_p * rng.standard_normal(n)
    return np.column_stack([t, pressure])


# ---------------------------------------------------------------------------
# range evaluation


@dataclass
class PairStatistics:
    initiator_id: int
    responder_id: int
    gamma: float  # mean error of the retained samples
    sigma: float
    n: int  # retained samples
    n_total: int
    n_gated: int  # beyond the absolute gate
    n_rejected: int  # beyond the robust threshold
    histogram: tuple[np.ndarray, np.ndarray]  # (counts, bin edges) of retained errors

    @property
    def n_outliers(self) -> int:
        return self.n_gated + self.n_rejected


@dataclass
class RangeEvaluation:
    pairs: dict[tuple[int, int], PairStatistics]
    skipped: int  # samples without a ground-truth bracket or with an unknown device


def range_errors(
    samples: list[RangeSample],
    gt: GroundTruth,
    anchors: dict[int, np.ndarray],
    tags: dict[int, np.ndarray],
) -> tuple[dict[tuple[int, int], list[float]], int]:
    """Measured minus true distance per ordered device pair."""

    def where(dev: int, t: float) -> np.ndarray | None:
        if dev in anchors:
            return np.asarray(anchors[dev], dtype=float)
        if dev in tags:
            return gt.point_at(t, np.asarray(tags[dev], dtype=float))
        return None

    errors: dict[tuple[int, int], list[float]] = {}
    skipped = 0
    for s in samples:
        pa, pb = where(s.initiator_id, s.t), where(s.responder_id, s.t)
        if pa is None or pb is None:
            skipped += 1
            continue
        errors.setdefault((s.initiator_id, s.responder_id), []).append(s.range - float(np.linalg.norm(pa - pb)))
    return errors, skipped


def fit_error_distribution(
    errors: np.ndarray,
    gate: float = 5.0,
    robust_sigma: float | None = 3.0,
    bin_width: float = 0.01,
    min_threshold: float = 1e-9,
) -> dict:
    """Gaussian fit of range errors after outlier removal.

    Errors beyond ``gate`` are dropped first. With ``robust_sigma`` set,
    errors further than that many robust standard deviations (scaled median
    absolute deviation) from the median are dropped as well.
    """
    e = np.sort(np.asarray(errors, dtype=float))  # sorting makes the fit order-invariant
    n_total = e.size
    e_gated = e[np.abs(e) <= gate]
    n_gated = n_total - e_gated.size
    kept = e_gated
    if robust_sigma is not None and e_gated.size:
        med = np.median(e_gated)
        mad = 1.4826 * np.median(np.abs(e_gated - med))
        kept = e_gated[np.abs(e_gated - med) <= max(robust_sigma * mad, min_threshold)]
    n_rejected = e_gated.size - kept.size
    if kept.size:
        mean = float(np.mean(kept))
        std = float(np.std(kept, ddof=1)) if kept.size > 1 else 0.0
        lo = math.floor(kept[0] / bin_width) * bin_width
        hi = max(math.ceil(kept[-1] / bin_width) * bin_width, lo + bin_width)
        edges = lo + bin_width * np.arange(int(round((hi - lo) / bin_width)) + 1)
        counts, edges = np.histogram(kept, bins=edges)
    else:
        mean, std = math.nan, math.nan
        counts, edges = np.zeros(0, dtype=int), np.zeros(1)
    return {
        "gamma": mean, "sigma": std, "n": int(kept.size), "n_total": int(n_total),
        "n_gated": int(n_gated), "n_rejected": int(n_rejected), "histogram": (counts, edges),
    }


def evaluate_ranges(
    samples: list[RangeSample],
    gt: GroundTruth,
    anchors: dict[int, np.ndarray],
    tags: dict[int, np.ndarray],
    gate: float = 5.0,
    robust_sigma: float | None = 3.0,
    bin_width: float = 0.01,
) -> RangeEvaluation:
    """Per ordered pair: constant bias, noise level, histogram and outlier counts."""
    if bin_width <= 0.0:
        raise ContractError("bin width must be positive")
    errors, skipped = range_errors(samples, gt, anchors, tags)
    if skipped:
        log.info("%d range samples without ground truth skipped", skipped)
    pairs = {}
    for key in sorted(errors):
        fit = fit_error_distribution(np.array(errors[key]), gate, robust_sigma, bin_width)
        pairs[key] = PairStatistics(key[0], key[1], **fit)
    return RangeEvaluation(pairs, skipped)


# ---------------------------------------------------------------------------
# consistency and accuracy metrics


def compute_nees(error: np.ndarray, covariance: np.ndarray) -> float:
    e = np.asarray(error, dtype=float).ravel()
    P = np.asarray(covariance, dtype=float)
    if P.shape != (e.size, e.size):
        raise ContractError("covariance shape does not match the error")
    try:
        c = np.linalg.cholesky(0.5 * (P + P.T))
    except np.linalg.LinAlgError:
        raise ContractError("covariance is singular or indefinite") from None
    y = np.linalg.solve(c, e)
    return float(y @ y)


def average_nees_interval(dof: int, runs: int, confidence: float = 0.95) -> tuple[float, float]:
    """Two-sided interval for the mean NEES of ``runs`` consistent samples."""
    a = 0.5 * (1.0 - confidence)
    lo, hi = chi2.ppf([a, 1.0 - a], dof * runs)
    return float(lo / runs), float(hi / runs)


def position_rmse(estimated: np.ndarray, truth: np.ndarray) -> float:
    d = np.asarray(estimated, dtype=float) - np.asarray(truth, dtype=float)
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1)))) if d.size else math.nan


def orientation_rmse_deg(estimated_q: np.ndarray, truth_q: np.ndarray) -> float:
    """RMS of the geodesic angle between estimated and true attitude."""
    est = np.atleast_2d(estimated_q)
    tru = np.atleast_2d(truth_q)
    dq = np.array([quat_mul(quat_conj(a), b) for a, b in zip(est, tru)])
    ang = 2.0 * np.degrees(np.arctan2(np.linalg.norm(dq[:, 1:], axis=1), np.abs(dq[:, 0])))
    return float(np.sqrt(np.mean(ang**2))) if ang.size else math.nan


def trajectory_errors(times: np.ndarray, means: np.ndarray, gt: GroundTruth) -> tuple[float, float]:
    """Position and orientation RMSE of IMU means against the nearest ground-truth sample."""
    times = np.asarray(times, dtype=float)
    k = np.clip(np.rint((times - gt.t[0]) * (len(gt) - 1) / (gt.t[-1] - gt.t[0])).astype(int), 0, len(gt) - 1)
    means = np.atleast_2d(means)
    return position_rmse(means[:, 0:3], gt.p[k]), orientation_rmse_deg(means[:, 6:10], gt.q[k])


__all__ = [
    "NEES_BOUND_3DOF", "TrajectorySpec", "Trajectory", "KinematicState", "GroundTruth",
    "generate_trajectory", "synthesize_imu", "synthesize_baro", "PairStatistics",
    "RangeEvaluation", "range_errors", "fit_error_distribution", "evaluate_ranges",
    "compute_nees", "average_nees_interval", "position_rmse", "orientation_rmse_deg",
    "trajectory_errors",
]
