"""Synthetic end-to-end scenario: fusion with known anchors, fly-by calibration
of unknown anchors at trigger times, registration and continued fusion."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .calibration import (
    CalibrationError,
    CalibrationProblem,
    CalibrationResult,
    CalibrationSample,
    calibrate,
    ransac_calibrate,
)
from .core import (
    Belief,
    ContractError,
    MeasurementRecord,
    quat_exp,
    quat_mul,
    quat_normalize,
    quat_to_rotmat,
)
from .filter import InstanceHandler, SensorType, Strategy
from .mesh import MeshConfig, OutlierModel, RangeSample, simulate_mesh
from .models import BaroParams, ImuNoise, ImuReading, RangeBiasTable, tag_position
from .sim import (
    GroundTruth,
    TrajectorySpec,
    compute_nees,
    generate_trajectory,
    synthesize_baro,
    synthesize_imu,
    trajectory_errors,
)

log = logging.getLogger(__name__)

IMU_ID = 1
BARO_ID = 2
TAGS = {100: (0.15, 0.0, 0.05), 105: (-0.15, 0.0, 0.05)}
KNOWN_ANCHORS = {
    101: (-6.0, -6.0, 0.5),
    102: (6.0, -6.0, 2.5),
    103: (6.0, 7.0, 0.5),
    104: (-6.0, 7.0, 3.0),
}
UNKNOWN_ANCHORS = {
    106: (-7.0, 0.5, 1.0),
    107: (0.5, -7.5, 4.0),
    108: (7.5, 0.0, 6.0),
    109: (0.0, 8.0, 2.0),
    110: (-5.0, 5.0, 7.0),
}
TRIGGERS = ((80.0, (106, 107)), (100.0, (108, 109, 110)))
COVARIANCE_FLOOR = 0.1**2  # m^2, on the registered anchor position


@dataclass
class Setup:
    """Device layout and true biases of a dataset."""

    anchors: dict[int, np.ndarray]
    known_ids: list[int]
    unknown_ids: list[int]
    tags: dict[int, np.ndarray]
    biases: RangeBiasTable
    imu_id: int = IMU_ID
    baro_id: int = BARO_ID
    p_IP: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.1]))
    ground_pressure: float = 101325.0

    @property
    def node_ids(self) -> list[int]:
        return sorted(list(self.tags) + list(self.anchors))


@dataclass
class ScenarioConfig:
    seed: int = 0
    strategy: str = "dah"
    sigma_d: float = 0.1
    outlier_rate: float = 0.1
    sigma_pressure: float = 1.0  # Pa
    imu_rate: float = 100.0
    baro_rate: float = 10.0
    zupt_rate: float = 10.0
    slot_duration: float = 0.010
    drop_probability: float = 0.0
    imu_noise: ImuNoise = field(default_factory=ImuNoise)
    gamma_range: tuple[float, float] = (0.0, 0.2)
    beta_spread: float = 0.0
    triggers: tuple[tuple[float, tuple[int, ...]], ...] = TRIGGERS
    use_ransac: bool = True
    ransac_eps: float = 0.1
    ransac_p: float = 0.99
    calibration_source: str = "estimate"  # or "truth"
    gate_probability: float | None = 0.999
    known_anchor_sigma: float = 0.01
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    sample_rate: float = 10.0  # trajectory/NEES logging, Hz

    def __post_init__(self) -> None:
        try:
            Strategy(self.strategy)
        except ValueError:
            raise ContractError(f"unknown strategy {self.strategy!r}, expected 'dp' or 'dah'") from None
        if self.sigma_d <= 0.0 or self.sigma_pressure <= 0.0:
            raise ContractError("noise levels must be positive")
        if self.calibration_source not in ("estimate", "truth"):
            raise ContractError("calibration_source must be 'estimate' or 'truth'")


@dataclass
class Dataset:
    gt: GroundTruth
    imu: list[ImuReading]
    baro: np.ndarray  # (n, 2): t, pressure
    ranges: list[RangeSample]
    setup: Setup


def default_setup(seed: int, gamma_range=(0.0, 0.2), beta_spread: float = 0.0) -> Setup:
    rng = np.random.default_rng([seed, 7])
    anchors = {k: np.array(v) for k, v in {**KNOWN_ANCHORS, **UNKNOWN_ANCHORS}.items()}
    tags = {k: np.array(v) for k, v in TAGS.items()}
    biases = RangeBiasTable()
    ids = sorted(list(anchors) + list(tags))
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            if a in tags and b in tags:
                continue
            gamma = float(rng.uniform(*gamma_range))
            beta = float(1.0 + beta_spread * rng.uniform(-1.0, 1.0))
            biases.set(a, b, gamma, beta)
    return Setup(anchors, sorted(KNOWN_ANCHORS), sorted(UNKNOWN_ANCHORS), tags, biases)


def generate_dataset(config: ScenarioConfig, setup: Setup | None = None) -> Dataset:
    """Deterministic synthetic dataset for ``config.seed``."""
    setup = setup or default_setup(config.seed, config.gamma_range, config.beta_spread)
    ss = np.random.SeedSequence(config.seed)
    rng_imu, rng_baro, rng_mesh, rng_bias = (np.random.default_rng(s) for s in ss.spawn(4))
    gt = generate_trajectory(config.trajectory)
    traj = gt.trajectory
    b_w0 = rng_bias.normal(0.0, 2e-3, 3)
    b_a0 = rng_bias.normal(0.0, 2e-2, 3)
    imu, _, _ = synthesize_imu(traj, config.imu_rate, config.imu_noise, rng_imu, b_w0, b_a0)
    if config.baro_rate > 0:
        baro = synthesize_baro(
            traj, BaroParams(p_IP=setup.p_IP), config.baro_rate, config.sigma_pressure, rng_baro,
            ground_pressure=setup.ground_pressure,
        )
    else:
        baro = np.zeros((0, 2))

    def position_of(node: int, t: float):
        if node in setup.anchors:
            return setup.anchors[node]
        return gt.point_at(t, setup.tags[node])

    mesh = MeshConfig(setup.node_ids, config.slot_duration, config.drop_probability)
    ranges = list(simulate_mesh(
        mesh, position_of, 0.0, traj.t_end, setup.biases, config.sigma_d,
        OutlierModel(config.outlier_rate), rng_mesh,
    ))
    return Dataset(gt, imu, baro, ranges, setup)


# ---------------------------------------------------------------------------
# report


@dataclass
class AnchorOutcome:
    anchor_id: int
    registered_at: float | None = None
    initial_error: float | None = None  # at registration
    final_error: float | None = None
    final_nees: float | None = None
    error_plain: float | None = None  # calibration without RANSAC
    error_ransac: float | None = None
    inlier_count: int | None = None
    n_samples: int = 0
    failure: str | None = None
    result: CalibrationResult | None = field(default=None, repr=False)
    problem: CalibrationProblem | None = field(default=None, repr=False)


@dataclass
class ErrorReport:
    strategy: str
    seed: int
    position_rmse: float
    orientation_rmse_deg: float
    anchors: dict[int, AnchorOutcome]
    times: np.ndarray  # logged estimate times
    positions: np.ndarray
    quaternions: np.ndarray
    nees: np.ndarray  # IMU position NEES at the logged times
    timings: list  # TimingSample list of the handler
    diagnostics: dict[str, int]
    runtime: float

    def mean_final_anchor_error(self) -> float:
        e = [a.final_error for a in self.anchors.values() if a.final_error is not None]
        return float(np.mean(e)) if e else math.nan

    def mean_initial_anchor_error(self) -> float:
        e = [a.initial_error for a in self.anchors.values() if a.initial_error is not None]
        return float(np.mean(e)) if e else math.nan

    def update_times(self, min_instances: int = 0, kinds: tuple[str, ...] = ("range",)) -> np.ndarray:
        return np.array([s.seconds for s in self.timings
                         if s.kind in kinds and s.n_instances >= min_instances])

    def to_dict(self) -> dict[str, Any]:
        anchors = {}
        for aid, a in sorted(self.anchors.items()):
            anchors[str(aid)] = {
                "registered_at": a.registered_at,
                "initial_error": a.initial_error,
                "final_error": a.final_error,
                "final_nees": a.final_nees,
                "calibration_error_plain": a.error_plain,
                "calibration_error_ransac": a.error_ransac,
                "inlier_count": a.inlier_count,
                "n_samples": a.n_samples,
                "failure": a.failure,
            }
        upd = self.update_times()
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "position_rmse": self.position_rmse,
            "orientation_rmse_deg": self.orientation_rmse_deg,
            "mean_initial_anchor_error": self.mean_initial_anchor_error(),
            "mean_final_anchor_error": self.mean_final_anchor_error(),
            "mean_position_nees": float(np.mean(self.nees)) if self.nees.size else None,
            "mean_update_seconds": float(np.mean(upd)) if upd.size else None,
            "anchors": anchors,
            "diagnostics": dict(sorted(self.diagnostics.items())),
            "runtime": self.runtime,
        }


# ---------------------------------------------------------------------------
# runner


def _initial_imu_belief(gt: GroundTruth, rng: np.random.Generator) -> Belief:
    sig = np.concatenate([
        [0.05] * 3, [0.05] * 3, [0.02, 0.02, 0.05], [3e-3] * 3, [5e-2] * 3,
    ])
    P = np.diag(sig**2)
    e = sig * rng.standard_normal(15)
    e[9:15] = 0.0  # bias priors are centred at zero, truth is drawn separately
    q = quat_normalize(quat_mul(gt.q[0], quat_exp(e[6:9])))
    mean = np.concatenate([gt.p[0] + e[0:3], gt.v[0] + e[3:6], q, np.zeros(6)])
    return Belief(IMU_ID, float(gt.t[0]), mean, P)


def _nearest_index(times: np.ndarray, t: float) -> int:
    k = int(np.searchsorted(times, t))
    if k >= times.size:
        return times.size - 1
    if k > 0 and t - times[k - 1] < times[k] - t:
        return k - 1
    return k


def _floor_covariance(P: np.ndarray, floor: float) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (P + P.T))
    return (V * np.maximum(w, floor)) @ V.T


def _merge_events(dataset: Dataset, config: ScenarioConfig, zupt_times: np.ndarray):
    """Time-ordered event stream; IMU readings sort before updates at equal time."""
    ev = [(r.t, 0, k, "imu", r) for k, r in enumerate(dataset.imu)]
    ev += [(float(t), 1, k, "baro", p) for k, (t, p) in enumerate(dataset.baro)]
    ev += [(s.t, 1, k, "range", s) for k, s in enumerate(dataset.ranges)]
    ev += [(float(t), 1, k, "zupt", None) for k, t in enumerate(zupt_times)]
    ev.sort(key=lambda e: (e[0], e[1], e[3], e[2]))
    return ev


def run_scenario(config: ScenarioConfig, dataset: Dataset | None = None) -> ErrorReport:
    """Fuse a dataset, calibrating and registering unknown anchors at the triggers."""
    t_start = time.perf_counter()
    dataset = dataset or generate_dataset(config)
    setup, gt = dataset.setup, dataset.gt
    rng = np.random.default_rng([config.seed, 11])

    known = set(setup.known_ids)
    triggers = sorted((float(t), tuple(ids)) for t, ids in config.triggers)
    pending = {aid for _, ids in triggers for aid in ids}
    unknown_ids = set(setup.unknown_ids)
    if not pending <= unknown_ids:
        raise ContractError(f"trigger ids {sorted(pending - unknown_ids)} are not unknown anchors")
    if set(setup.tags) & set(setup.anchors):
        raise ContractError("tag and anchor ids overlap")

    filt_biases = RangeBiasTable()
    for (a, b), gb in setup.biases.items():
        if (a in known or a in setup.tags) and (b in known or b in setup.tags):
            filt_biases.set(a, b, *gb)
    handler = InstanceHandler(
        config.strategy, config.imu_noise, gate_probability=config.gate_probability, biases=filt_biases,
    )
    imu0 = _initial_imu_belief(gt, rng)
    handler.register_instance(IMU_ID, SensorType.IMU, imu0)
    # reference pressure from the first sample at rest, tied to the initial height estimate
    if len(dataset.baro):
        p_ref = float(dataset.baro[0, 1])
        h_ref = float(imu0.mean[2] + (quat_to_rotmat(imu0.mean[6:10]) @ setup.p_IP)[2])
    else:
        p_ref, h_ref = setup.ground_pressure, 0.0
    baro_params = BaroParams(
        p_IP=setup.p_IP, reference_pressure=p_ref, sigma_p=config.sigma_pressure, height_offset=h_ref,
    )
    handler.register_instance(BARO_ID, SensorType.BAROMETER, constants={"params": baro_params})
    for tid, lever in setup.tags.items():
        handler.register_instance(tid, SensorType.UWB_TAG, constants={"p_IT": np.asarray(lever, float)})
    for aid in sorted(known):
        cov = config.known_anchor_sigma**2 * np.eye(3)
        handler.register_instance(aid, SensorType.UWB_ANCHOR, Belief(aid, 0.0, setup.anchors[aid].copy(), cov))

    traj = gt.trajectory
    if traj is not None and config.zupt_rate > 0:
        zupt_times = np.concatenate([
            np.arange(0.5, traj.spec.rest_start - 0.5, 1.0 / config.zupt_rate),
            np.arange(traj.t4 + 0.5, traj.t_end, 1.0 / config.zupt_rate),
        ])
    else:
        zupt_times = np.zeros(0)
    sig_acc = config.imu_noise.acc_noise * math.sqrt(config.imu_rate)
    sig_gyr = config.imu_noise.gyro_noise * math.sqrt(config.imu_rate)
    R_zupt = np.diag([sig_acc**2] * 3 + [sig_gyr**2] * 3)
    R_range = np.array([[config.sigma_d**2]])

    samples: dict[int, list[CalibrationSample]] = {aid: [] for aid in pending}
    outcomes = {aid: AnchorOutcome(aid) for aid in sorted(pending)}
    registered = set(known)
    trig_idx = 0
    next_log = 0.0
    log_t, log_p, log_q, log_nees = [], [], [], []

    def tag_pos(tid: int, t: float) -> np.ndarray:
        if config.calibration_source == "truth":
            return gt.point_at(t, setup.tags[tid])
        return tag_position(handler.belief(IMU_ID).mean, setup.tags[tid])

    def fire(ids: tuple[int, ...]) -> None:
        for aid in ids:
            out = outcomes[aid]
            out.n_samples = len(samples[aid])
            truth = setup.anchors[aid]
            prob = CalibrationProblem(aid, samples[aid])
            out.problem = prob
            try:
                plain = calibrate(prob)
                out.error_plain = float(np.linalg.norm(plain.position - truth))
            except CalibrationError as exc:
                plain = None
                log.info("plain calibration of %d failed: %s", aid, exc)
            try:
                robust = ransac_calibrate(
                    prob, config.ransac_eps, config.ransac_p, config.sigma_d, config.sigma_d,
                    rng=np.random.default_rng([config.seed, aid]),
                )
                out.error_ransac = float(np.linalg.norm(robust.position - truth))
            except CalibrationError as exc:
                robust = None
                log.info("RANSAC calibration of %d failed: %s", aid, exc)
            chosen = robust if config.use_ransac else plain
            if chosen is None:
                out.failure = "calibration failed"
                continue
            out.result = chosen
            out.inlier_count = chosen.inlier_count
            cov = _floor_covariance(chosen.position_covariance, COVARIANCE_FLOOR)
            t_reg = handler.t_now
            handler.register_instance(
                aid, SensorType.UWB_ANCHOR, Belief(aid, t_reg, chosen.position.copy(), cov),
                constants={"biases": chosen.biases()},
            )
            registered.add(aid)
            out.registered_at = t_reg
            out.initial_error = float(np.linalg.norm(chosen.position - truth))

    for t, _, k, kind, item in _merge_events(dataset, config, zupt_times):
        while trig_idx < len(triggers) and t >= triggers[trig_idx][0]:
            fire(triggers[trig_idx][1])
            trig_idx += 1
        if kind == "imu":
            handler.propagate(item)
            if t >= next_log - 1e-9:
                b = handler.belief(IMU_ID)
                log_t.append(t)
                log_p.append(b.mean[0:3].copy())
                log_q.append(b.mean[6:10].copy())
                kk = _nearest_index(gt.t, t)
                log_nees.append(compute_nees(b.mean[0:3] - gt.p[kk], b.covariance[0:3, 0:3]))
                next_log += 1.0 / config.sample_rate
        elif kind == "baro":
            handler.update(MeasurementRecord(t, BARO_ID, [item], [[1.0]], kind="baro"))
        elif kind == "zupt":
            handler.update(MeasurementRecord(t, IMU_ID, np.zeros(6), R_zupt, kind="zupt"))
        else:
            s: RangeSample = item
            a, b = s.initiator_id, s.responder_id
            if a in setup.tags and b in setup.tags:
                continue
            a_ok = a in registered or a in setup.tags
            b_ok = b in registered or b in setup.tags
            if a_ok and b_ok:
                handler.update(MeasurementRecord(t, a, [s.range], R_range, other_id=b))
                continue
            # collection for anchors awaiting calibration
            for target, ref in ((a, b), (b, a)):
                if target in samples and outcomes[target].registered_at is None:
                    if ref in setup.tags:
                        pos = tag_pos(ref, t)
                    elif ref in registered:
                        pos = handler.belief(ref).mean.copy()
                    else:
                        continue
                    if pos is not None and s.range > 0.0:
                        samples[target].append(
                            CalibrationSample(t, ref, pos, s.range, sigma_d=config.sigma_d)
                        )
    while trig_idx < len(triggers):
        fire(triggers[trig_idx][1])
        trig_idx += 1

    for aid, out in outcomes.items():
        if out.registered_at is not None:
            b = handler.belief(aid)
            e = b.mean - setup.anchors[aid]
            out.final_error = float(np.linalg.norm(e))
            out.final_nees = compute_nees(e, b.covariance)

    times = np.array(log_t)
    pos = np.array(log_p).reshape(-1, 3)
    quats = np.array(log_q).reshape(-1, 4)
    means = np.zeros((times.size, 16))
    means[:, 0:3], means[:, 6:10] = pos, quats
    p_rmse, q_rmse = trajectory_errors(times, means, gt)
    return ErrorReport(
        strategy=Strategy(config.strategy).value,
        seed=config.seed,
        position_rmse=p_rmse,
        orientation_rmse_deg=q_rmse,
        anchors=outcomes,
        times=times,
        positions=pos,
        quaternions=quats,
        nees=np.array(log_nees),
        timings=handler.timings,
        diagnostics=dict(handler.diagnostics),
        runtime=time.perf_counter() - t_start,
    )


# ---------------------------------------------------------------------------
# calibration-only runs


def collect_samples(
    dataset: Dataset,
    tag_position,
    sigma_d: float = 0.1,
    t_end: float | None = None,
) -> dict[int, list[CalibrationSample]]:
    """Calibration samples of every unknown anchor against tags and known anchors.

    ``tag_position(tag_id, t)`` returns the reference position of a tag or
    ``None`` when unavailable.
    """
    setup = dataset.setup
    known = set(setup.known_ids)
    out: dict[int, list[CalibrationSample]] = {aid: [] for aid in setup.unknown_ids}
    for s in dataset.ranges:
        if t_end is not None and s.t > t_end:
            break
        for target, ref in ((s.initiator_id, s.responder_id), (s.responder_id, s.initiator_id)):
            if target not in out or s.range <= 0.0:
                continue
            if ref in setup.tags:
                pos = tag_position(ref, s.t)
            elif ref in known:
                pos = setup.anchors[ref]
            else:
                continue
            if pos is not None:
                out[target].append(CalibrationSample(s.t, ref, pos, s.range, sigma_d=sigma_d))
    return out


def estimated_tag_track(dataset: Dataset, config: ScenarioConfig):
    """Tag-position function from a fusion run with the known anchors only."""
    cfg = dataclasses.replace(config, triggers=(), sample_rate=config.imu_rate)
    report = run_scenario(cfg, dataset)
    times, pos, quats = report.times, report.positions, report.quaternions

    def tag_position_fn(tid: int, t: float):
        k = _nearest_index(times, t)
        return pos[k] + quat_to_rotmat(quats[k]) @ dataset.setup.tags[tid]

    return tag_position_fn, report


def calibrate_dataset(
    dataset: Dataset, config: ScenarioConfig, source: str = "truth", ransac: bool = True,
) -> dict[int, dict[str, Any]]:
    """Calibrate every unknown anchor from the whole flight (no registration)."""
    if source == "truth":
        if dataset.gt is None:
            raise ContractError("truth tag positions need a ground-truth poses file")
        gt = dataset.gt
        fn = lambda tid, t: gt.point_at(t, dataset.setup.tags[tid])  # noqa: E731
    elif source == "estimate":
        fn, _ = estimated_tag_track(dataset, config)
    else:
        raise ContractError(f"unknown tag-position source {source!r}")
    samples = collect_samples(dataset, fn, config.sigma_d)
    out: dict[int, dict[str, Any]] = {}
    for aid in sorted(samples):
        prob = CalibrationProblem(aid, samples[aid])
        entry: dict[str, Any] = {"problem": prob, "result": None, "failure": None}
        try:
            if ransac:
                entry["result"] = ransac_calibrate(
                    prob, config.ransac_eps, config.ransac_p, config.sigma_d, config.sigma_d,
                    rng=np.random.default_rng([config.seed, aid]),
                )
            else:
                entry["result"] = calibrate(prob)
        except CalibrationError as exc:
            entry["failure"] = str(exc)
        out[aid] = entry
    return out
