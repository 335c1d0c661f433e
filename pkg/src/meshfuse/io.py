"""File formats: dataset CSVs, setup and calibration JSON, flat key=value configs.

Floats are written with ``repr`` so a read/write cycle reproduces files byte
for byte.
"""
from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .calibration import CalibrationResult
from .core import ContractError
from .mesh import RangeSample
from .models import ImuNoise, ImuReading, RangeBiasTable
from .scenario import Dataset, ScenarioConfig, Setup
from .sim import GroundTruth, Trajectory, TrajectorySpec

POSES_HEADER = ["t", "px", "py", "pz", "qw", "qx", "qy", "qz"]
IMU_HEADER = ["t", "ax", "ay", "az", "wx", "wy", "wz"]
BARO_HEADER = ["t", "pressure"]
RANGES_HEADER = ["t", "id_initiator", "id_responder", "range"]

FILES = {"poses": "poses.csv", "imu": "imu.csv", "baro": "baro.csv", "ranges": "ranges.csv",
         "setup": "setup.json"}


class DataFormatError(ContractError):
    pass


def fmt_value(x: Any) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_csv(path: Path, header: list[str], rows: Iterable[Iterable[Any]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt_value(v) for v in row])


def read_csv(path: Path, header: list[str]) -> list[list[str]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != header:
        raise DataFormatError(f"{path.name}: expected header {','.join(header)}")
    body = rows[1:]
    for k, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataFormatError(f"{path.name}:{k}: expected {len(header)} columns, got {len(row)}")
    return body


def _floats(path: Path, header: list[str]) -> np.ndarray:
    rows = read_csv(path, header)
    try:
        return np.array(rows, dtype=float).reshape(-1, len(header))
    except ValueError as exc:
        raise DataFormatError(f"{Path(path).name}: {exc}") from None


# ---------------------------------------------------------------------------
# dataset


def write_poses(path: Path, t: np.ndarray, p: np.ndarray, q: np.ndarray) -> None:
    write_csv(path, POSES_HEADER, (
        (t[k], *p[k], *q[k]) for k in range(len(t))
    ))


def read_poses(path: Path, spec: TrajectorySpec | None = None) -> GroundTruth:
    a = _floats(path, POSES_HEADER)
    if a.shape[0] < 2:
        raise DataFormatError("poses file needs at least two rows")
    t, p, q = a[:, 0], a[:, 1:4], a[:, 4:8]
    if np.any(np.diff(t) <= 0.0):
        raise DataFormatError("pose timestamps must increase")
    v = np.gradient(p, t, axis=0)
    acc = np.gradient(v, t, axis=0)
    traj = Trajectory(spec) if spec is not None else None
    return GroundTruth(t, p, q, v, acc, np.zeros_like(p), traj)


def setup_to_dict(setup: Setup, spec: TrajectorySpec, config: ScenarioConfig | None = None) -> dict:
    d = {
        "imu_id": setup.imu_id,
        "baro_id": setup.baro_id,
        "p_IP": [float(x) for x in setup.p_IP],
        "ground_pressure": setup.ground_pressure,
        "tags": {str(k): [float(x) for x in v] for k, v in sorted(setup.tags.items())},
        "anchors": {str(k): [float(x) for x in v] for k, v in sorted(setup.anchors.items())},
        "known_ids": list(setup.known_ids),
        "unknown_ids": list(setup.unknown_ids),
        "biases": [{"a": a, "b": b, "gamma": g, "beta": be} for (a, b), (g, be) in setup.biases.items()],
        "trajectory": dataclasses.asdict(spec),
    }
    if config is not None:
        d["generator"] = config_to_mapping(config)
    return d


def setup_from_dict(d: dict) -> tuple[Setup, TrajectorySpec | None]:
    try:
        biases = RangeBiasTable()
        for e in d.get("biases", []):
            biases.set(int(e["a"]), int(e["b"]), float(e["gamma"]), float(e["beta"]))
        setup = Setup(
            anchors={int(k): np.array(v, dtype=float) for k, v in d["anchors"].items()},
            known_ids=[int(i) for i in d["known_ids"]],
            unknown_ids=[int(i) for i in d["unknown_ids"]],
            tags={int(k): np.array(v, dtype=float) for k, v in d["tags"].items()},
            biases=biases,
            imu_id=int(d.get("imu_id", 1)),
            baro_id=int(d.get("baro_id", 2)),
            p_IP=np.array(d.get("p_IP", [0.0, 0.0, 0.0]), dtype=float),
            ground_pressure=float(d.get("ground_pressure", 101325.0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"setup: {exc}") from None
    spec = None
    if "trajectory" in d:
        tj = dict(d["trajectory"])
        tj["bounds"] = tuple(tuple(b) for b in tj.get("bounds", TrajectorySpec().bounds))
        spec = TrajectorySpec(**tj)
    return setup, spec


def write_dataset(directory: Path, dataset: Dataset, config: ScenarioConfig | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    gt = dataset.gt
    write_poses(directory / FILES["poses"], gt.t, gt.p, gt.q)
    write_csv(directory / FILES["imu"], IMU_HEADER, ((r.t, *r.acc, *r.gyro) for r in dataset.imu))
    write_csv(directory / FILES["baro"], BARO_HEADER, ((t, p) for t, p in dataset.baro))
    write_csv(directory / FILES["ranges"], RANGES_HEADER, (
        (s.t, s.initiator_id, s.responder_id, s.range) for s in dataset.ranges
    ))
    spec = gt.trajectory.spec if gt.trajectory is not None else TrajectorySpec()
    with open(directory / FILES["setup"], "w", encoding="utf-8") as fh:
        json.dump(setup_to_dict(dataset.setup, spec, config), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_setup(directory: Path) -> tuple[Setup, TrajectorySpec | None, dict]:
    path = Path(directory) / FILES["setup"]
    if not path.exists():
        raise FileNotFoundError(f"missing file {path}")
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    setup, spec = setup_from_dict(d)
    return setup, spec, d


def read_ranges(path: Path) -> list[RangeSample]:
    rows = read_csv(path, RANGES_HEADER)
    try:
        return [RangeSample(float(t), int(a), int(b), float(z)) for t, a, b, z in rows]
    except ValueError as exc:
        raise DataFormatError(f"ranges: {exc}") from None


def read_dataset(directory: Path) -> Dataset:
    directory = Path(directory)
    setup, spec, _ = read_setup(directory)
    gt = read_poses(directory / FILES["poses"], spec)
    imu_a = _floats(directory / FILES["imu"], IMU_HEADER)
    imu = [ImuReading(float(r[0]), r[1:4].copy(), r[4:7].copy()) for r in imu_a]
    baro = _floats(directory / FILES["baro"], BARO_HEADER)
    ranges = read_ranges(directory / FILES["ranges"])
    return Dataset(gt, imu, baro, ranges, setup)


# ---------------------------------------------------------------------------
# calibration handover


def calibration_record(result: CalibrationResult) -> dict:
    return {
        "anchor_id": int(result.anchor_id),
        "position": [float(x) for x in result.position],
        "position_cov": [float(x) for x in result.position_covariance.ravel()],
        "biases": [
            {"other_id": int(k), "gamma": float(result.gamma[k]), "beta": float(result.beta[k])}
            for k in sorted(result.gamma)
        ],
        "inlier_count": result.inlier_count,
    }


def validate_calibration_record(rec: dict) -> None:
    try:
        if len(rec["position"]) != 3 or len(rec["position_cov"]) != 9:
            raise DataFormatError("position needs 3 and position_cov 9 entries")
        int(rec["anchor_id"])
        int(rec["inlier_count"])
        for b in rec["biases"]:
            int(b["other_id"])
            if not float(b["beta"]) > 0.0:
                raise DataFormatError("beta must be positive")
            float(b["gamma"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"calibration record: {exc}") from None


# ---------------------------------------------------------------------------
# flat configuration files

_FLOAT_KEYS = {
    "sigma_d", "outlier_rate", "sigma_pressure", "imu_rate", "baro_rate", "zupt_rate",
    "slot_duration", "drop_probability", "beta_spread", "ransac_eps", "ransac_p",
    "known_anchor_sigma", "sample_rate",
}
_NOISE_KEYS = {"acc_noise", "gyro_noise", "acc_bias_walk", "gyro_bias_walk"}
CONFIG_KEYS = sorted(
    _FLOAT_KEYS | _NOISE_KEYS
    | {"seed", "strategy", "gamma_min", "gamma_max", "triggers", "ransac",
       "calibration_source", "gate_probability"}
)


def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    out: dict[str, str] = {}
    for k, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataFormatError(f"config line {k}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise DataFormatError(f"config line {k}: unknown key {key!r}")
        if key in out:
            raise DataFormatError(f"config line {k}: duplicate key {key!r}")
        out[key] = value
    return out


def _bool(v: str) -> bool:
    lv = v.lower()
    if lv in ("1", "true", "yes", "on"):
        return True
    if lv in ("0", "false", "no", "off"):
        return False
    raise DataFormatError(f"not a boolean: {v!r}")


def parse_triggers(v: str) -> tuple[tuple[float, tuple[int, ...]], ...]:
    """``80:106,107;100:108,109,110``; an empty string means no triggers."""
    out = []
    for part in filter(None, (p.strip() for p in v.split(";"))):
        t, _, ids = part.partition(":")
        out.append((float(t), tuple(int(i) for i in ids.split(",") if i.strip())))
    return tuple(out)


def format_triggers(triggers) -> str:
    return ";".join(f"{float(t)!r}:{','.join(str(i) for i in ids)}" for t, ids in triggers)


def config_from_mapping(m: dict[str, str], base: ScenarioConfig | None = None) -> ScenarioConfig:
    base = base or ScenarioConfig()
    kw: dict[str, Any] = {}
    noise = dataclasses.asdict(base.imu_noise)
    try:
        for key, v in m.items():
            if key in _FLOAT_KEYS:
                kw[key] = float(v)
            elif key in _NOISE_KEYS:
                noise[key] = float(v)
            elif key == "seed":
                kw["seed"] = int(v)
            elif key == "strategy":
                kw["strategy"] = v
            elif key in ("gamma_min", "gamma_max"):
                pass
            elif key == "triggers":
                kw["triggers"] = parse_triggers(v)
            elif key == "ransac":
                kw["use_ransac"] = _bool(v)
            elif key == "calibration_source":
                kw["calibration_source"] = v
            elif key == "gate_probability":
                kw["gate_probability"] = None if v.lower() == "none" else float(v)
        lo = float(m.get("gamma_min", base.gamma_range[0]))
        hi = float(m.get("gamma_max", base.gamma_range[1]))
        kw["gamma_range"] = (lo, hi)
        if min(noise.values()) <= 0.0:
            raise DataFormatError("IMU noise densities must be positive")
        kw["imu_noise"] = ImuNoise(**noise)
        cfg = dataclasses.replace(base, **kw)
    except ContractError:
        raise
    except (ValueError, TypeError) as exc:
        raise DataFormatError(f"config: {exc}") from None
    if lo > hi:
        raise DataFormatError("gamma_min exceeds gamma_max")
    return cfg


def config_to_mapping(cfg: ScenarioConfig) -> dict[str, str]:
    m = {k: repr(float(getattr(cfg, k))) for k in sorted(_FLOAT_KEYS)}
    m.update({k: repr(float(v)) for k, v in dataclasses.asdict(cfg.imu_noise).items()})
    m["seed"] = str(cfg.seed)
    m["strategy"] = str(cfg.strategy)
    m["gamma_min"], m["gamma_max"] = repr(float(cfg.gamma_range[0])), repr(float(cfg.gamma_range[1]))
    m["triggers"] = format_triggers(cfg.triggers)
    m["ransac"] = "true" if cfg.use_ransac else "false"
    m["calibration_source"] = cfg.calibration_source
    m["gate_probability"] = "none" if cfg.gate_probability is None else repr(cfg.gate_probability)
    return m


def read_config(path: Path | None) -> ScenarioConfig:
    if path is None:
        return ScenarioConfig()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing config {path}")
    return config_from_mapping(parse_config_text(path.read_text(encoding="utf-8")))
