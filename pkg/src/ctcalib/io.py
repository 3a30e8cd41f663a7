"""File formats: per-sensor CSV measurement streams, JSON parameter
snapshots, and the run configuration file.

CSV layouts
-----------
* IMU: header ``t,wx,wy,wz,ax,ay,az`` (s, rad/s, m/s^2), one row per sample.
* Radar: header ``t,scan_id,range,azimuth,elevation,doppler``
  (s, -, m, rad, rad, m/s), one row per detected target.

Floats are written with 17 significant digits so a write/read round trip is
bit-exact.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from ctcalib import lie
from ctcalib.models import (
    CalibrationState,
    GravityVector,
    ImuIntrinsics,
    ImuParameters,
    ImuStream,
    RadarParameters,
    RadarStream,
    SensorExtrinsics,
    TimeOffset,
)

SCHEMA_VERSION = 1

IMU_HEADER = ["t", "wx", "wy", "wz", "ax", "ay", "az"]
RADAR_HEADER = ["t", "scan_id", "range", "azimuth", "elevation", "doppler"]


class DataError(Exception):
    """Malformed or inconsistent measurement / report files."""


class ConfigError(Exception):
    """Invalid run configuration."""


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# measurement CSV


def write_imu_csv(path, stream: ImuStream) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(IMU_HEADER)
        for t, wv, av in zip(stream.t, stream.angular_rate, stream.specific_force):
            w.writerow([_fmt(t)] + [_fmt(x) for x in wv] + [_fmt(x) for x in av])


def read_imu_csv(path) -> ImuStream:
    try:
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read IMU CSV {path}: {e}") from e
    with open(path) as f:
        header = f.readline().strip().split(",")
    if header != IMU_HEADER:
        raise DataError(f"{path}: expected IMU header {','.join(IMU_HEADER)}")
    if rows.size == 0 or rows.shape[1] != 7:
        raise DataError(f"{path}: expected 7 columns of IMU data")
    try:
        return ImuStream(rows[:, 0], rows[:, 1:4], rows[:, 4:7])
    except ValueError as e:
        raise DataError(f"{path}: {e}") from e


def write_radar_csv(path, stream: RadarStream) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RADAR_HEADER)
        for i in range(len(stream)):
            w.writerow(
                [
                    _fmt(stream.t[i]),
                    int(stream.scan_id[i]),
                    _fmt(stream.range_m[i]),
                    _fmt(stream.azimuth[i]),
                    _fmt(stream.elevation[i]),
                    _fmt(stream.doppler[i]),
                ]
            )


def read_radar_csv(path) -> RadarStream:
    try:
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read radar CSV {path}: {e}") from e
    with open(path) as f:
        header = f.readline().strip().split(",")
    if header != RADAR_HEADER:
        raise DataError(f"{path}: expected radar header {','.join(RADAR_HEADER)}")
    if rows.size == 0:
        return RadarStream(
            np.empty(0), np.empty(0, dtype=np.int64), np.empty(0), np.empty(0),
            np.empty(0), np.empty(0),
        )
    if rows.shape[1] != 6:
        raise DataError(f"{path}: expected 6 columns of radar data")
    try:
        return RadarStream(
            rows[:, 0], rows[:, 1].astype(np.int64), rows[:, 2], rows[:, 3],
            rows[:, 4], rows[:, 5],
        )
    except ValueError as e:
        raise DataError(f"{path}: {e}") from e


# ---------------------------------------------------------------------------
# parameter JSON (shared by reports, stage snapshots, and truth files)


def state_to_dict(state: CalibrationState) -> dict:
    """JSON-serializable parameter snapshot (no spline control points)."""
    def ext(e: SensorExtrinsics) -> dict:
        return {
            "quaternion_wxyz": [float(x) for x in lie.matrix_to_quat(e.rotation)],
            "translation_xyz": [float(x) for x in e.translation],
        }

    out = {
        "schema_version": SCHEMA_VERSION,
        "gravity": {
            "direction": [float(x) for x in state.gravity.direction],
            "magnitude": float(state.gravity.magnitude),
        },
        "imus": {},
        "radars": {},
    }
    for sid, p in state.imus.items():
        out["imus"][sid] = {
            "extrinsics": ext(p.extrinsics),
            "time_offset": float(p.time_offset.offset),
            "gyro_bias": [float(x) for x in p.intrinsics.gyro_bias],
            "accel_bias": [float(x) for x in p.intrinsics.accel_bias],
            "gyro_misalignment_rotvec": [
                float(x) for x in lie.log_so3(p.intrinsics.gyro_misalignment)
            ],
        }
    for sid, p in state.radars.items():
        out["radars"][sid] = {
            "extrinsics": ext(p.extrinsics),
            "time_offset": float(p.time_offset.offset),
        }
    return out


def parameters_from_dict(d: dict, offset_bound: float = 0.1):
    """Inverse of :func:`state_to_dict` for the parameter part.

    Returns ``(imus, radars, gravity)`` dicts/vector usable for evaluation;
    splines are not part of the snapshot.
    """
    try:
        def ext(e):
            return SensorExtrinsics(
                lie.quat_to_matrix(np.asarray(e["quaternion_wxyz"], dtype=float)),
                np.asarray(e["translation_xyz"], dtype=float),
            )

        imus = {
            sid: ImuParameters(
                ext(p["extrinsics"]),
                TimeOffset(p["time_offset"], max(offset_bound, abs(p["time_offset"]))),
                ImuIntrinsics(
                    p["gyro_bias"],
                    p["accel_bias"],
                    lie.exp_so3(np.asarray(p["gyro_misalignment_rotvec"], dtype=float)),
                ),
            )
            for sid, p in d.get("imus", {}).items()
        }
        radars = {
            sid: RadarParameters(
                ext(p["extrinsics"]),
                TimeOffset(p["time_offset"], max(offset_bound, abs(p["time_offset"]))),
            )
            for sid, p in d.get("radars", {}).items()
        }
        gravity = GravityVector(
            np.asarray(d["gravity"]["direction"], dtype=float),
            float(d["gravity"]["magnitude"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"malformed parameter snapshot: {e}") from e
    return imus, radars, gravity


def write_json(path, payload: dict) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read JSON {path}: {e}") from e


# ---------------------------------------------------------------------------
# full-state archive (parameters plus spline control points)


def save_state_npz(path, state: CalibrationState) -> None:
    grid = state.rotation_spline.grid
    np.savez(
        path,
        grid=np.array([grid.start_time, grid.dt, float(grid.count)]),
        rot_cps=state.rotation_spline.control_points,
        vel_cps=state.velocity_spline.control_points,
        params=json.dumps(state_to_dict(state)),
    )


def load_state_npz(path) -> CalibrationState:
    from ctcalib.splines import KnotGrid, R3Spline, So3Spline

    try:
        with np.load(path, allow_pickle=False) as z:
            start, dt, count = z["grid"]
            grid = KnotGrid(float(start), float(dt), int(count))
            rot = So3Spline(grid, z["rot_cps"])
            vel = R3Spline(grid, z["vel_cps"])
            imus, radars, gravity = parameters_from_dict(json.loads(str(z["params"])))
    except (OSError, KeyError, ValueError) as e:
        raise DataError(f"cannot read state archive {path}: {e}") from e
    return CalibrationState(imus, radars, rot, vel, gravity)


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class SensorEntry:
    sensor_id: str
    kind: str  # "imu" | "radar"
    path: str = ""  # measurement CSV, relative to the config file
    rate: float = 0.0  # Hz, used by `simulate`
    gyro_sigma: float = 2e-3
    accel_sigma: float = 2e-2
    doppler_sigma: float = 0.05


@dataclass
class RunConfig:
    seed: int = 0
    duration: float = 50.0  # s, simulate mode
    knot_spacing: float = 0.08  # s
    time_offset_bound: float = 0.1  # s
    stages: tuple = ("BO1", "BO2", "BO3")
    max_iterations: int = 50
    outlier_fraction: float = 0.0
    cauchy_scale: float = 1.0
    sensors: list = field(default_factory=list)
    base_dir: Path = field(default_factory=Path)

    def imu_entries(self):
        return [s for s in self.sensors if s.kind == "imu"]

    def radar_entries(self):
        return [s for s in self.sensors if s.kind == "radar"]


_TOP_KEYS = {
    "seed", "duration", "knot_spacing", "time_offset_bound", "stages",
    "max_iterations", "outlier_fraction", "cauchy_scale", "sensors",
}
_SENSOR_KEYS = {
    "id", "kind", "path", "rate", "gyro_sigma", "accel_sigma", "doppler_sigma",
}


def load_config(path) -> RunConfig:
    """Parse and validate the run configuration file (YAML, flat keys)."""
    try:
        with open(path) as f:
            raw = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    cfg = RunConfig(base_dir=Path(path).resolve().parent)
    for key in ("seed", "max_iterations"):
        if key in raw:
            setattr(cfg, key, int(raw[key]))
    for key in ("duration", "knot_spacing", "time_offset_bound",
                "outlier_fraction", "cauchy_scale"):
        if key in raw:
            setattr(cfg, key, float(raw[key]))
    if "stages" in raw:
        stages = raw["stages"]
        if not isinstance(stages, list) or not all(isinstance(s, str) for s in stages):
            raise ConfigError(f"{path}: stages must be a list of stage names")
        cfg.stages = tuple(stages)
    for entry in raw.get("sensors", []):
        if not isinstance(entry, dict):
            raise ConfigError(f"{path}: each sensor must be a mapping")
        unknown = set(entry) - _SENSOR_KEYS
        if unknown:
            raise ConfigError(f"{path}: unknown sensor keys {sorted(unknown)}")
        if "id" not in entry or "kind" not in entry:
            raise ConfigError(f"{path}: sensors need 'id' and 'kind'")
        if entry["kind"] not in ("imu", "radar"):
            raise ConfigError(f"{path}: sensor kind must be 'imu' or 'radar'")
        s = SensorEntry(entry["id"], entry["kind"])
        for key in ("path",):
            if key in entry:
                s.path = str(entry[key])
        for key in ("rate", "gyro_sigma", "accel_sigma", "doppler_sigma"):
            if key in entry:
                setattr(s, key, float(entry[key]))
        cfg.sensors.append(s)
    ids = [s.sensor_id for s in cfg.sensors]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"{path}: duplicate sensor ids")
    if cfg.knot_spacing <= 0:
        raise ConfigError(f"{path}: knot_spacing must be positive")
    if cfg.duration <= 0:
        raise ConfigError(f"{path}: duration must be positive")
    return cfg


def load_streams(cfg: RunConfig):
    """Read the measurement CSVs referenced by the configuration."""
    imu_streams, radar_streams = {}, {}
    for s in cfg.sensors:
        if not s.path:
            raise DataError(f"sensor {s.sensor_id}: no data path configured")
        p = cfg.base_dir / s.path
        if not p.exists():
            raise DataError(f"sensor {s.sensor_id}: missing data file {p}")
        if s.kind == "imu":
            imu_streams[s.sensor_id] = read_imu_csv(p)
        else:
            radar_streams[s.sensor_id] = read_radar_csv(p)
    return imu_streams, radar_streams
