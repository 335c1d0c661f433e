"""Instance handler: runtime-modular error-state filtering with factorized cross-covariances.

Each stateful instance keeps a sliding history of its belief and of the
factors ``S_ij`` of its cross-covariances, with ``Sigma_ij = S_ij S_ji^T``.
For a pair ``a < b`` the canonical exact factorization stores the full block
on the lower id (``S_ab = Sigma_ab``) and the identity on the higher id
(``S_ba = I``).

Two update strategies are supported:

``DP``
    decoupled propagation, full-state updates. Equivalent to a single stacked
    EKF.
``DAH``
    updates restricted to the directly involved instances. Cross-covariance
    factors towards uninvolved instances are corrected on the involved side
    only; uninvolved beliefs are left untouched.
"""
from __future__ import annotations

import bisect
import enum
import itertools
import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.stats import chi2

from .core import (
    Belief,
    ContractError,
    FactorTable,
    MeasurementRecord,
    NoBeliefError,
    SlidingHistory,
    boxplus,
    check_psd,
    symmetrize,
)
from .models import (
    BaroParams,
    ImuNoise,
    ImuReading,
    LinearizedObservation,
    RangeBiasTable,
    RangeGeometryError,
    baro_height_observation,
    imu_propagate,
    range_observation_anchor_anchor,
    range_observation_tag_anchor,
    zupt_observation,
)

log = logging.getLogger(__name__)

MAX_PROPAGATION_STEP = 0.1


class SensorType(str, enum.Enum):
    IMU = "imu"
    BAROMETER = "barometer"
    UWB_TAG = "uwb_tag"
    UWB_ANCHOR = "uwb_anchor"


class Strategy(str, enum.Enum):
    DP = "dp"
    DAH = "dah"


STATEFUL = (SensorType.IMU, SensorType.UWB_ANCHOR)


class UnknownInstanceError(KeyError):
    pass


class DuplicateInstanceError(ContractError):
    pass


@dataclass
class SensorInstance:
    id: int
    sensor_type: SensorType
    constants: dict[str, Any] = field(default_factory=dict)
    belief_history: SlidingHistory[Belief] | None = None
    factor_table: FactorTable | None = None
    registered_at: float = 0.0

    @property
    def stateful(self) -> bool:
        return self.belief_history is not None

    @property
    def belief(self) -> Belief:
        if self.belief_history is None:
            raise ContractError(f"instance {self.id} carries no state")
        return self.belief_history.latest()

    @property
    def dim(self) -> int:
        return self.belief.dim if self.stateful else 0


@dataclass
class TimingSample:
    t: float
    kind: str
    seconds: float
    n_instances: int
    state_dim: int


class _EventLog:
    """Processed inputs ordered by ``(t, order, seq)``; IMU readings sort first."""

    def __init__(self) -> None:
        self.keys: list[tuple[float, int, int]] = []
        self.items: list[Any] = []
        self._seq = itertools.count()

    def add(self, t: float, order: int, item: Any) -> tuple[float, int, int]:
        key = (t, order, next(self._seq))
        i = bisect.bisect_right(self.keys, key)
        self.keys.insert(i, key)
        self.items.insert(i, item)
        return key

    def after(self, t: float) -> list[tuple[tuple[float, int, int], Any]]:
        i = bisect.bisect_right(self.keys, (t, math.inf, math.inf))
        return list(zip(self.keys[i:], self.items[i:]))

    def last_time_before(self, t: float) -> float | None:
        i = bisect.bisect_left(self.keys, (t, -1, -1)) - 1
        return self.keys[i][0] if i >= 0 else None

    def truncate(self, t_cut: float) -> None:
        i = bisect.bisect_left(self.keys, (t_cut, -1, -1))
        del self.keys[:i]
        del self.items[:i]


class InstanceHandler:
    """Registry and fusion engine for a time-varying set of sensor instances."""

    def __init__(
        self,
        strategy: Strategy | str = Strategy.DAH,
        imu_noise: ImuNoise | None = None,
        history_window: float = 5.0,
        gate_probability: float | None = None,
        biases: RangeBiasTable | None = None,
        default_bias: tuple[float, float] | None = (0.0, 1.0),
        record_timing: bool = True,
    ) -> None:
        self.strategy = Strategy(strategy)
        self.imu_noise = imu_noise or ImuNoise()
        self.history_window = history_window
        self.gate_probability = gate_probability
        self.biases = biases if biases is not None else RangeBiasTable()
        self.default_bias = default_bias
        self.record_timing = record_timing

        self.instances: dict[int, SensorInstance] = {}
        self.imu_id: int | None = None
        self.t_now: float | None = None
        self.diagnostics: Counter[str] = Counter()
        self.timings: list[TimingSample] = []

        self._events = _EventLog()
        self._readings: SlidingHistory[ImuReading] = SlidingHistory()
        self._t_cut = -math.inf
        self._barrier = -math.inf
        self._identity: dict[int, np.ndarray] = {}
        self._gate_bounds: dict[int, float] = {}

    # ------------------------------------------------------------------
    # registry

    def _eye(self, n: int) -> np.ndarray:
        eye = self._identity.get(n)
        if eye is None:
            eye = self._identity[n] = np.eye(n)
            eye.flags.writeable = False
        return eye

    def stateful_ids(self) -> list[int]:
        return sorted(i for i, inst in self.instances.items() if inst.stateful)

    def register_instance(
        self,
        id: int,
        sensor_type: SensorType | str,
        initial_belief: Belief | None = None,
        constants: dict[str, Any] | None = None,
    ) -> SensorInstance:
        sensor_type = SensorType(sensor_type)
        if id <= 0:
            raise ContractError("instance ids must be positive")
        if id in self.instances:
            raise DuplicateInstanceError(f"instance {id} already registered")
        constants = dict(constants or {})
        if sensor_type in STATEFUL:
            if initial_belief is None:
                raise ContractError(f"{sensor_type.value} instance needs an initial belief")
            check_psd(initial_belief.covariance)
            if sensor_type is SensorType.IMU:
                if self.imu_id is not None:
                    raise ContractError("exactly one IMU instance acts as propagation sensor")
                if initial_belief.mean.shape != (16,):
                    raise ContractError("IMU belief mean must have 16 entries")
            elif initial_belief.mean.shape != (3,):
                raise ContractError("anchor belief mean must be a 3-vector")

        if self.t_now is not None:
            t_reg = self.t_now
        elif initial_belief is not None:
            t_reg = initial_belief.timestamp
        else:
            t_reg = 0.0

        inst = SensorInstance(id, sensor_type, constants, registered_at=t_reg)
        if sensor_type in STATEFUL:
            belief = Belief(id, t_reg, initial_belief.mean.astype(float).copy(),
                            symmetrize(np.asarray(initial_belief.covariance, dtype=float)))
            inst.belief_history = SlidingHistory()
            inst.belief_history.insert(t_reg, belief)
            inst.factor_table = FactorTable(id)
            for j in self.stateful_ids():
                other = self.instances[j]
                lo, hi = (inst, other) if id < j else (other, inst)
                lo.factor_table.set(hi.id, t_reg, np.zeros((lo.dim, hi.dim)))
                hi.factor_table.set(lo.id, t_reg, self._eye(hi.dim))
        if "biases" in constants:
            for other_id, (gamma, beta) in constants["biases"].items():
                self.biases.set(id, other_id, gamma, beta)
        self.instances[id] = inst
        if sensor_type is SensorType.IMU:
            self.imu_id = id
            if self.t_now is None:
                self.t_now = t_reg
        self._barrier = max(self._barrier, t_reg)
        return inst

    def remove_instance(self, id: int) -> None:
        inst = self.instances.get(id)
        if inst is None:
            raise UnknownInstanceError(id)
        if id == self.imu_id:
            raise ContractError("the propagation sensor cannot be removed")
        del self.instances[id]
        for other in self.instances.values():
            if other.factor_table is not None:
                other.factor_table.remove(id)
        if self.t_now is not None:
            self._barrier = max(self._barrier, self.t_now)

    def instance(self, id: int) -> SensorInstance:
        try:
            return self.instances[id]
        except KeyError:
            raise UnknownInstanceError(id) from None

    def belief(self, id: int, t: float | None = None) -> Belief:
        inst = self.instance(id)
        if inst.belief_history is None:
            raise ContractError(f"instance {id} carries no state")
        return inst.belief_history.latest() if t is None else inst.belief_history.query(t)

    def cross_covariance(self, i: int, j: int) -> np.ndarray:
        a, b = self.instance(i), self.instance(j)
        return a.factor_table.get(j) @ b.factor_table.get(i).T

    def joint(self, ids: list[int] | None = None) -> tuple[list[int], np.ndarray, np.ndarray]:
        """Stacked means and covariance over ``ids`` (default: all stateful)."""
        ids = self.stateful_ids() if ids is None else list(ids)
        beliefs = [self.instances[i].belief for i in ids]
        sizes = [b.dim for b in beliefs]
        offs = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        P = np.zeros((offs[-1], offs[-1]))
        for a, (i, bi) in enumerate(zip(ids, beliefs)):
            P[offs[a]:offs[a + 1], offs[a]:offs[a + 1]] = bi.covariance
            ti = self.instances[i].factor_table
            for b in range(a + 1, len(ids)):
                j = ids[b]
                C = ti.get(j) @ self.instances[j].factor_table.get(i).T
                P[offs[a]:offs[a + 1], offs[b]:offs[b + 1]] = C
                P[offs[b]:offs[b + 1], offs[a]:offs[a + 1]] = C.T
        means = np.concatenate([b.mean for b in beliefs]) if beliefs else np.zeros(0)
        return ids, means, P

    # ------------------------------------------------------------------
    # input processing

    def feed(self, item: ImuReading | MeasurementRecord) -> None:
        if isinstance(item, ImuReading):
            self.propagate(item)
        else:
            self.update(item)

    def propagate(self, reading: ImuReading) -> None:
        if self.imu_id is None:
            raise ContractError("no IMU instance registered")
        if self.t_now is not None and reading.t < self.t_now:
            self.diagnostics["imu_out_of_sequence"] += 1
            raise ContractError(
                f"IMU reading at {reading.t} older than filter time {self.t_now}"
            )
        self._events.add(reading.t, 0, reading)
        self._process_reading(reading)
        self._maybe_truncate()

    def update(self, meas: MeasurementRecord) -> bool:
        """Fuse one update-type measurement; returns whether it was applied."""
        if self.t_now is None:
            raise ContractError("no IMU instance registered")
        if meas.timestamp < self.t_now:
            return self.process_out_of_sequence(meas)
        self._events.add(meas.timestamp, 1, meas)
        ok = self._process_measurement(meas)
        self._maybe_truncate()
        return ok

    def process_out_of_sequence(self, meas: MeasurementRecord) -> bool:
        t = meas.timestamp
        t_s = self._events.last_time_before(t)
        if t_s is None or t_s < self._t_cut or t_s < self._barrier or t < self.t_now - self.history_window:
            self.diagnostics["dropped_stale"] += 1
            log.debug("dropping stale measurement at %.3f (filter time %.3f)", t, self.t_now)
            return False
        self._events.add(t, 1, meas)
        self._rewind(t_s)
        applied = True
        for key, item in self._events.after(t_s):
            if isinstance(item, ImuReading):
                self._process_reading(item)
            else:
                ok = self._process_measurement(item)
                if item is meas:
                    applied = ok
        self.diagnostics["replayed"] += 1
        return applied

    def _rewind(self, t_s: float) -> None:
        for inst in self.instances.values():
            if inst.belief_history is not None:
                inst.belief_history.drop_after(t_s)
                inst.factor_table.drop_after(t_s)
        self._readings.drop_after(t_s)
        self.t_now = t_s

    def _maybe_truncate(self) -> None:
        cut = self.t_now - self.history_window
        if cut - self._t_cut < 0.5:
            return
        for inst in self.instances.values():
            if inst.belief_history is not None:
                inst.belief_history.truncate(cut)
                inst.factor_table.truncate(cut)
        self._readings.truncate(cut)
        self._events.truncate(cut)
        self._t_cut = cut

    def _process_reading(self, reading: ImuReading) -> None:
        if not self._readings:
            # first reading is held back to the filter start
            self._readings.insert(min(self.t_now, reading.t), reading)
        self._propagate_to(reading.t)
        self._readings.insert(reading.t, reading)
        self.t_now = max(self.t_now, reading.t)

    def _process_measurement(self, meas: MeasurementRecord) -> bool:
        t = meas.timestamp
        if self._readings:
            self._propagate_to(t)
        else:
            self.t_now = max(self.t_now, t)
        t0 = time.perf_counter()
        try:
            obs = self.linearize(meas)
        except RangeGeometryError:
            self.diagnostics["rejected_geometry"] += 1
            return False
        except NoBeliefError:
            self.diagnostics["dropped_missing_belief"] += 1
            return False
        if obs is None:
            return False
        if self.strategy is Strategy.DP:
            ok = self.update_dp(obs, t)
        else:
            ok = self.update_dah(obs, t)
        if self.record_timing:
            self.timings.append(
                TimingSample(t, meas.kind, time.perf_counter() - t0, len(self.instances),
                             sum(self.instances[i].dim for i in self.stateful_ids()))
            )
        return ok

    # ------------------------------------------------------------------
    # propagation

    def _propagate_to(self, t: float) -> None:
        dt_total = t - self.t_now
        if dt_total <= 0.0:
            return
        imu = self.instances[self.imu_id]
        reading = self._readings.query(self.t_now)
        t_start = time.perf_counter()
        belief = imu.belief
        x, P = belief.mean, belief.covariance
        n_steps = max(1, math.ceil(dt_total / MAX_PROPAGATION_STEP - 1e-9))
        dt = dt_total / n_steps
        Phi_total = None
        for _ in range(n_steps):
            x, P, Phi = imu_propagate(x, P, reading, dt, self.imu_noise)
            Phi_total = Phi if Phi_total is None else Phi @ Phi_total
        imu.belief_history.insert(t, Belief(self.imu_id, t, x, P))
        table = imu.factor_table
        for j, hist in table.entries.items():
            hist.insert(t, Phi_total @ hist.latest())
        self.t_now = t
        if self.record_timing:
            self.timings.append(
                TimingSample(t, "propagate", time.perf_counter() - t_start, len(self.instances), 0)
            )

    # ------------------------------------------------------------------
    # observation assembly

    def _bias(self, k: int, l: int) -> tuple[float, float] | None:
        b = self.biases.get(k, l, self.default_bias)
        if b is None:
            self.diagnostics["missing_bias"] += 1
        return b

    def linearize(self, meas: MeasurementRecord) -> LinearizedObservation | None:
        kind = meas.kind
        if kind == "range":
            a = self.instance(meas.sensor_id)
            b = self.instance(meas.other_id)
            types = {a.sensor_type, b.sensor_type}
            bias = self._bias(a.id, b.id)
            if bias is None:
                return None
            sigma = math.sqrt(meas.R[0, 0])
            z = float(meas.z[0])
            if types == {SensorType.UWB_TAG, SensorType.UWB_ANCHOR}:
                tag, anchor = (a, b) if a.sensor_type is SensorType.UWB_TAG else (b, a)
                imu = self.instances[self.imu_id].belief
                return range_observation_tag_anchor(
                    imu.mean, tag.constants["p_IT"], anchor.belief.mean, bias, z, sigma,
                    imu_id=self.imu_id, anchor_id=anchor.id,
                )
            if types == {SensorType.UWB_ANCHOR}:
                return range_observation_anchor_anchor(
                    a.belief.mean, b.belief.mean, bias, z, sigma, anchor_i=a.id, anchor_j=b.id
                )
            self.diagnostics["uninformative_range"] += 1
            return None
        if kind == "baro":
            baro = self.instance(meas.sensor_id)
            params: BaroParams = baro.constants["params"]
            obs = baro_height_observation(
                self.instances[self.imu_id].belief.mean, params, float(meas.z[0]), imu_id=self.imu_id
            )
            return obs
        if kind == "zupt":
            imu = self.instances[self.imu_id].belief
            reading = self._readings.query(self.t_now)
            obs = zupt_observation(imu.mean, reading, 1.0, 1.0, imu_id=self.imu_id)
            obs.R = meas.R
            return obs
        raise ContractError(f"unknown measurement kind {kind!r}")

    # ------------------------------------------------------------------
    # updates

    def _gate(self, r: np.ndarray, S: np.ndarray) -> bool:
        if self.gate_probability is None:
            return True
        n = r.shape[0]
        bound = self._gate_bounds.get(n)
        if bound is None:
            bound = self._gate_bounds[n] = float(chi2.ppf(self.gate_probability, n))
        d2 = float(r @ np.linalg.solve(S, r))
        if d2 > bound:
            self.diagnostics["gated"] += 1
            return False
        return True

    @staticmethod
    def _kalman(P: np.ndarray, H: np.ndarray, r: np.ndarray, R: np.ndarray):
        PHt = P @ H.T
        S = H @ PHt + R
        K = np.linalg.solve(S.T, PHt.T).T
        IKH = -K @ H
        IKH.flat[:: IKH.shape[0] + 1] += 1.0
        P_new = IKH @ P @ IKH.T + K @ R @ K.T
        return K @ r, symmetrize(P_new), K, S

    def _assemble(self, ids: list[int], obs: LinearizedObservation):
        beliefs = [self.instances[i].belief for i in ids]
        sizes = [b.dim for b in beliefs]
        offs = [0]
        for s in sizes:
            offs.append(offs[-1] + s)
        n = offs[-1]
        P = np.empty((n, n))
        for a, (i, bi) in enumerate(zip(ids, beliefs)):
            sa = slice(offs[a], offs[a + 1])
            P[sa, sa] = bi.covariance
            ti = self.instances[i].factor_table.entries
            for b in range(a + 1, len(ids)):
                j = ids[b]
                C = ti[j].latest() @ self.instances[j].factor_table.entries[i].latest().T
                sb = slice(offs[b], offs[b + 1])
                P[sa, sb] = C
                P[sb, sa] = C.T
        H = np.zeros((obs.dim, n))
        for a, i in enumerate(ids):
            blk = obs.blocks.get(i)
            if blk is not None:
                H[:, offs[a]:offs[a + 1]] = blk
        return beliefs, offs, P, H

    def _write_back(self, ids, beliefs, offs, delta, P_new, t) -> None:
        for a, (i, bi) in enumerate(zip(ids, beliefs)):
            sa = slice(offs[a], offs[a + 1])
            mean = boxplus(bi.mean, delta[sa])
            self.instances[i].belief_history.insert(t, Belief(i, t, mean, P_new[sa, sa].copy()))
        for a, i in enumerate(ids):
            sa = slice(offs[a], offs[a + 1])
            ti = self.instances[i].factor_table
            for b in range(a + 1, len(ids)):
                j = ids[b]
                sb = slice(offs[b], offs[b + 1])
                ti.set(j, t, P_new[sa, sb].copy())
                self.instances[j].factor_table.set(i, t, self._eye(offs[b + 1] - offs[b]))

    def update_dp(self, obs: LinearizedObservation, t: float | None = None) -> bool:
        """Full-state update over every stateful instance."""
        t = self.t_now if t is None else t
        for i in obs.blocks:
            self.instance(i)
        ids = self.stateful_ids()
        beliefs, offs, P, H = self._assemble(ids, obs)
        PHt = P @ H.T
        if not self._gate(obs.residual, H @ PHt + obs.R):
            return False
        delta, P_new, _, _ = self._kalman(P, H, obs.residual, obs.R)
        self._write_back(ids, beliefs, offs, delta, P_new, t)
        return True

    def update_dah(self, obs: LinearizedObservation, t: float | None = None) -> bool:
        """Update restricted to the involved instances with factor correction."""
        t = self.t_now if t is None else t
        for i in obs.blocks:
            self.instance(i)
        ids = sorted(obs.blocks)
        beliefs, offs, P, H = self._assemble(ids, obs)
        PHt = P @ H.T
        if not self._gate(obs.residual, H @ PHt + obs.R):
            return False
        delta, P_new, K, _ = self._kalman(P, H, obs.residual, obs.R)
        self._write_back(ids, beliefs, offs, delta, P_new, t)
        involved = set(ids)
        for a, i in enumerate(ids):
            sa = slice(offs[a], offs[a + 1])
            M = -K[sa] @ H[:, sa]
            M.flat[:: M.shape[0] + 1] += 1.0
            for k, hist in self.instances[i].factor_table.entries.items():
                if k not in involved:
                    hist.insert(t, M @ hist.latest())
        return True
