"""Sensor measurement containers, IMU/radar measurement models, and the full
calibration state.

Conventions
-----------
* Extrinsics map a sensor frame into the central body frame: a vector ``x``
  in sensor coordinates appears as ``R @ x + p`` in body coordinates.
* Time offsets map sensor clocks onto the central clock:
  ``t_central = t_sensor + offset``.
* Doppler is positive for a receding target (range rate ``p^T pdot / d``);
  the simulator and the estimator share this convention through
  :func:`radar_doppler_predict`.
* Accelerometers measure specific force; gravity enters predictions once, as
  the subtraction inside the acceleration residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ctcalib import lie
from ctcalib.splines import R3Spline, So3Spline

GRAVITY_MAGNITUDE = 9.81  # m/s^2, fixed; only the direction is estimated


# ---------------------------------------------------------------------------
# measurement streams


@dataclass
class ImuStream:
    """Timestamped gyroscope / accelerometer samples of one IMU (sensor clock)."""

    t: np.ndarray  # (N,) seconds
    angular_rate: np.ndarray  # (N, 3) rad/s
    specific_force: np.ndarray  # (N, 3) m/s^2

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.angular_rate = np.asarray(self.angular_rate, dtype=float)
        self.specific_force = np.asarray(self.specific_force, dtype=float)
        if not (len(self.t) == len(self.angular_rate) == len(self.specific_force)):
            raise ValueError("imu stream arrays must share length")
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("imu timestamps must be strictly increasing")
        for a in (self.t, self.angular_rate, self.specific_force):
            if not np.all(np.isfinite(a)):
                raise ValueError("imu stream contains non-finite values")

    def __len__(self):
        return len(self.t)


@dataclass
class RadarStream:
    """Per-target radar detections of one radar, flattened across scans.

    Targets sharing a ``scan_id`` share a timestamp.
    """

    t: np.ndarray  # (N,) seconds, sensor clock
    scan_id: np.ndarray  # (N,) int
    range_m: np.ndarray  # (N,) m, > 0
    azimuth: np.ndarray  # (N,) rad
    elevation: np.ndarray  # (N,) rad, |phi| < pi/2
    doppler: np.ndarray  # (N,) m/s

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.scan_id = np.asarray(self.scan_id, dtype=np.int64)
        for name in ("range_m", "azimuth", "elevation", "doppler"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        n = len(self.t)
        for name in ("scan_id", "range_m", "azimuth", "elevation", "doppler"):
            if len(getattr(self, name)) != n:
                raise ValueError("radar stream arrays must share length")
        if np.any(self.range_m <= 0):
            raise ValueError("radar ranges must be positive")
        if np.any(np.abs(self.elevation) >= np.pi / 2):
            raise ValueError("radar elevation must satisfy |phi| < pi/2")
        for sid in np.unique(self.scan_id):
            ts = self.t[self.scan_id == sid]
            if ts.size and not np.all(ts == ts[0]):
                raise ValueError(f"targets of scan {sid} have differing timestamps")

    def __len__(self):
        return len(self.t)

    def scan_ids(self) -> np.ndarray:
        return np.unique(self.scan_id)

    def scan(self, sid: int) -> "RadarStream":
        m = self.scan_id == sid
        return RadarStream(
            self.t[m], self.scan_id[m], self.range_m[m], self.azimuth[m],
            self.elevation[m], self.doppler[m],
        )


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ImuIntrinsics:
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))  # rad/s
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))  # m/s^2
    gyro_misalignment: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        self.gyro_bias = np.asarray(self.gyro_bias, dtype=float)
        self.accel_bias = np.asarray(self.accel_bias, dtype=float)
        self.gyro_misalignment = np.asarray(self.gyro_misalignment, dtype=float)

    def copy(self) -> "ImuIntrinsics":
        return ImuIntrinsics(
            self.gyro_bias.copy(), self.accel_bias.copy(), self.gyro_misalignment.copy()
        )


@dataclass
class SensorExtrinsics:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))  # sensor -> body
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))  # m, in body

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float)

    def copy(self) -> "SensorExtrinsics":
        return SensorExtrinsics(self.rotation.copy(), self.translation.copy())


@dataclass
class TimeOffset:
    offset: float = 0.0  # s, t_central = t_sensor + offset
    bound: float = 0.1  # s, symmetric box |offset| <= bound

    def __post_init__(self):
        if abs(self.offset) > self.bound:
            raise ValueError("time offset exceeds its bound")

    def copy(self) -> "TimeOffset":
        return TimeOffset(self.offset, self.bound)


class GravityVector:
    """Gravity with fixed magnitude and a 2-DOF direction on the unit sphere."""

    def __init__(self, direction, magnitude: float = GRAVITY_MAGNITUDE):
        d = np.asarray(direction, dtype=float)
        self._dir = d / np.linalg.norm(d)
        self.magnitude = float(magnitude)

    @property
    def direction(self) -> np.ndarray:
        return self._dir

    @property
    def vector(self) -> np.ndarray:
        return self.magnitude * self._dir

    def tangent_basis(self) -> np.ndarray:
        """Orthonormal (3, 2) basis of the tangent plane at the direction."""
        d = self._dir
        ref = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        b1 = np.cross(d, ref)
        b1 /= np.linalg.norm(b1)
        b2 = np.cross(d, b1)
        return np.stack([b1, b2], axis=1)

    def retract(self, delta: np.ndarray) -> "GravityVector":
        """Rotate the direction by the tangent update; magnitude stays exact."""
        phi = self.tangent_basis() @ np.asarray(delta, dtype=float)
        new_dir = lie.exp_so3(np.cross(self._dir, phi)) @ self._dir
        return GravityVector(new_dir, self.magnitude)

    def copy(self) -> "GravityVector":
        return GravityVector(self._dir.copy(), self.magnitude)


@dataclass
class ImuParameters:
    extrinsics: SensorExtrinsics
    time_offset: TimeOffset
    intrinsics: ImuIntrinsics

    def copy(self) -> "ImuParameters":
        return ImuParameters(
            self.extrinsics.copy(), self.time_offset.copy(), self.intrinsics.copy()
        )


@dataclass
class RadarParameters:
    extrinsics: SensorExtrinsics
    time_offset: TimeOffset

    def copy(self) -> "RadarParameters":
        return RadarParameters(self.extrinsics.copy(), self.time_offset.copy())


@dataclass
class CalibrationState:
    """The complete estimated parameter set."""

    imus: dict[str, ImuParameters]
    radars: dict[str, RadarParameters]
    rotation_spline: So3Spline
    velocity_spline: R3Spline
    gravity: GravityVector

    def __post_init__(self):
        rg, vg = self.rotation_spline.grid, self.velocity_spline.grid
        if rg.start_time > vg.end_time or vg.start_time > rg.end_time:
            raise ValueError("rotation and velocity splines must share an interval")

    def copy(self) -> "CalibrationState":
        return CalibrationState(
            {k: v.copy() for k, v in self.imus.items()},
            {k: v.copy() for k, v in self.radars.items()},
            So3Spline(self.rotation_spline.grid, self.rotation_spline.control_points.copy()),
            R3Spline(self.velocity_spline.grid, self.velocity_spline.control_points.copy()),
            self.gravity.copy(),
        )


# ---------------------------------------------------------------------------
# measurement models


def radar_target_position(range_m, azimuth, elevation) -> np.ndarray:
    """Target position in the radar frame from spherical observables."""
    d = np.asarray(range_m, dtype=float)
    th = np.asarray(azimuth, dtype=float)
    ph = np.asarray(elevation, dtype=float)
    return np.stack(
        [d * np.cos(th) * np.cos(ph), d * np.sin(th) * np.cos(ph), d * np.sin(ph)],
        axis=-1,
    )


def spherical_from_position(p: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`radar_target_position`: (range, azimuth, elevation)."""
    p = np.asarray(p, dtype=float)
    d = np.linalg.norm(p, axis=-1)
    azimuth = np.arctan2(p[..., 1], p[..., 0])
    elevation = np.arcsin(np.clip(p[..., 2] / d, -1.0, 1.0))
    return d, azimuth, elevation


def imu_predict(omega_body, accel_body, intrinsics: ImuIntrinsics):
    """Noise-free measurement prediction from ideal body-frame quantities."""
    omega_body = np.asarray(omega_body, dtype=float)
    accel_body = np.asarray(accel_body, dtype=float)
    w = omega_body @ intrinsics.gyro_misalignment.T + intrinsics.gyro_bias
    a = accel_body + intrinsics.accel_bias
    return w, a


def imu_predict_inverse(omega_meas, accel_meas, intrinsics: ImuIntrinsics):
    """Exact inverse of :func:`imu_predict` for known intrinsics."""
    omega_meas = np.asarray(omega_meas, dtype=float)
    accel_meas = np.asarray(accel_meas, dtype=float)
    w = (omega_meas - intrinsics.gyro_bias) @ intrinsics.gyro_misalignment
    a = accel_meas - intrinsics.accel_bias
    return w, a


def radar_doppler_predict(p_target, v_radar_in_radar, range_m) -> np.ndarray:
    """Doppler of a static world target given the radar's own velocity."""
    p = np.asarray(p_target, dtype=float)
    v = np.asarray(v_radar_in_radar, dtype=float)
    return -np.sum(p * v, axis=-1) / np.asarray(range_m, dtype=float)
