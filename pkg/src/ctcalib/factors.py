"""Factor groups connecting the autodiff kernels to the sparse solver.

The calibration state is exploded into named parameter blocks (one block per
spline control point, one per sensor parameter, one for gravity); each factor
group gathers the active blocks per measurement, evaluates the corresponding
kernel, and exposes slot Jacobians in the solver's layout.

Both splines must share one knot grid so a measurement's rotation and
velocity control-point windows line up into a single diagonal band of the
normal equations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ctcalib import kernels
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
    radar_target_position,
)
from ctcalib.solver import FactorGroup, ParameterBlock, Problem
from ctcalib.splines import DEGREE, KnotGrid, R3Spline, So3Spline

CENTER_SIGMA = 1e-6  # near-hard gauge constraints

KERNEL_CHUNK = 4096  # fixed kernel batch size: one jit shape, bounded memory


def _run_chunked(fn, dim, data, m):
    """Evaluate a vmapped kernel in fixed-size padded chunks.

    Padding repeats the first row of the chunk (valid data) and is trimmed
    from the output, so every call shares one compiled shape.
    """
    if m == 0:
        raise ValueError("kernel group has no measurements")
    outs = []
    zeros = np.zeros((KERNEL_CHUNK, dim))
    for s in range(0, m, KERNEL_CHUNK):
        e = min(s + KERNEL_CHUNK, m)
        chunk = {k: v[s:e] for k, v in data.items()}
        if e - s < KERNEL_CHUNK:
            pad = KERNEL_CHUNK - (e - s)
            chunk = {
                k: np.concatenate([v, np.repeat(v[:1], pad, axis=0)]) for k, v in chunk.items()
            }
        outs.append(np.asarray(fn(zeros, chunk))[: e - s])
    return np.concatenate(outs)


@dataclass
class BlockIndex:
    """Block ids of one calibration problem."""

    grid: KnotGrid
    rot_cps: np.ndarray  # (count,) int
    vel_cps: np.ndarray  # (count,) int
    gravity: int
    imus: dict  # sensor_id -> {rot, trans, offset, gyro_bias, accel_bias, misalign}
    radars: dict  # sensor_id -> {rot, trans, offset}


def register_state_blocks(problem: Problem, state: CalibrationState) -> BlockIndex:
    """Explode a CalibrationState into solver parameter blocks."""
    rg = state.rotation_spline.grid
    vg = state.velocity_spline.grid
    if (rg.start_time, rg.dt, rg.count) != (vg.start_time, vg.dt, vg.count):
        raise ValueError("rotation and velocity splines must share one knot grid")
    rot_ids = np.array(
        [
            problem.add_block(
                ParameterBlock(f"rot_cp_{k}", "so3", state.rotation_spline.control_points[k])
            )
            for k in range(rg.count)
        ]
    )
    vel_ids = np.array(
        [
            problem.add_block(
                ParameterBlock(
                    f"vel_cp_{k}", "euclidean", state.velocity_spline.control_points[k]
                )
            )
            for k in range(vg.count)
        ]
    )
    gravity_id = problem.add_block(ParameterBlock("gravity", "s2", state.gravity))
    imus = {}
    for sid, par in state.imus.items():
        b = par.time_offset.bound
        imus[sid] = {
            "rot": problem.add_block(
                ParameterBlock(f"{sid}/rot", "so3", par.extrinsics.rotation)
            ),
            "trans": problem.add_block(
                ParameterBlock(f"{sid}/trans", "euclidean", par.extrinsics.translation)
            ),
            "offset": problem.add_block(
                ParameterBlock(
                    f"{sid}/offset", "euclidean", [par.time_offset.offset],
                    lower=[-b], upper=[b],
                )
            ),
            "gyro_bias": problem.add_block(
                ParameterBlock(f"{sid}/gyro_bias", "euclidean", par.intrinsics.gyro_bias)
            ),
            "accel_bias": problem.add_block(
                ParameterBlock(f"{sid}/accel_bias", "euclidean", par.intrinsics.accel_bias)
            ),
            "misalign": problem.add_block(
                ParameterBlock(f"{sid}/misalign", "so3", par.intrinsics.gyro_misalignment)
            ),
        }
    radars = {}
    for sid, par in state.radars.items():
        b = par.time_offset.bound
        radars[sid] = {
            "rot": problem.add_block(
                ParameterBlock(f"{sid}/rot", "so3", par.extrinsics.rotation)
            ),
            "trans": problem.add_block(
                ParameterBlock(f"{sid}/trans", "euclidean", par.extrinsics.translation)
            ),
            "offset": problem.add_block(
                ParameterBlock(
                    f"{sid}/offset", "euclidean", [par.time_offset.offset],
                    lower=[-b], upper=[b],
                )
            ),
        }
    return BlockIndex(rg, rot_ids, vel_ids, gravity_id, imus, radars)


def state_from_problem(problem: Problem, index: BlockIndex, template: CalibrationState):
    """Rebuild a CalibrationState from the problem's current block values."""
    values = problem.values()
    rot = np.stack([values[i] for i in index.rot_cps])
    vel = np.stack([values[i] for i in index.vel_cps])
    imus = {}
    for sid, ids in index.imus.items():
        bound = template.imus[sid].time_offset.bound
        imus[sid] = ImuParameters(
            SensorExtrinsics(values[ids["rot"]], values[ids["trans"]]),
            TimeOffset(float(values[ids["offset"]][0]), bound),
            ImuIntrinsics(
                values[ids["gyro_bias"]], values[ids["accel_bias"]], values[ids["misalign"]]
            ),
        )
    radars = {}
    for sid, ids in index.radars.items():
        bound = template.radars[sid].time_offset.bound
        radars[sid] = RadarParameters(
            SensorExtrinsics(values[ids["rot"]], values[ids["trans"]]),
            TimeOffset(float(values[ids["offset"]][0]), bound),
        )
    gravity = values[index.gravity]
    return CalibrationState(
        imus, radars, So3Spline(index.grid, rot), R3Spline(index.grid, vel), gravity.copy()
    )


def _windows(grid: KnotGrid, t: np.ndarray):
    """Segment index, local coordinate, validity mask (no exception on
    out-of-support times; those rows are masked out and counted)."""
    nseg = grid.count - DEGREE
    x = (t - grid.start_time) / grid.dt
    valid = (t >= grid.start_time) & (t < grid.end_time)
    idx = np.clip(np.floor(x).astype(np.int64), 0, nseg - 1)
    u = np.where(valid, x - idx, 0.0)
    return idx, u, valid


class _KernelGroup(FactorGroup):
    """Shared plumbing: window resolution, data bundling, slot scattering."""

    loss = ("cauchy", 1.0)

    def __init__(self, index: BlockIndex, tau, sigma):
        self.index = index
        self.tau = np.asarray(tau, dtype=float)
        self.sigma = float(sigma)
        self.dropped = 0

    # subclasses define: kernel res/jac handles, slot spec, _data(values)

    def _times(self, values, offset_id):
        t = self.tau + float(values[offset_id][0])
        idx, u, valid = _windows(self.index.grid, t)
        self.dropped = int(np.sum(~valid))
        self._valid = valid
        return idx, u, valid

    def _common(self, idx, u, valid):
        grid = self.index.grid
        m = len(self.tau)
        return {
            "tau": self.tau,
            "t0w": grid.start_time + idx * grid.dt,
            "dt": np.full(m, grid.dt),
            "mask": valid.astype(float),
            "sigma": np.full(m, self.sigma),
        }

    def _gather_cps(self, values, ids, idx, shape_tail):
        full = np.stack([values[i] for i in ids])
        return full[idx[:, None] + np.arange(DEGREE + 1)]

    def residuals(self, values):
        data, _ = self._data(values)
        return _run_chunked(self._res, self._dim, data, len(self.tau))

    def residuals_and_jacobians(self, values, blocks):
        data, slot_ids = self._data(values)
        m = len(self.tau)
        res = _run_chunked(self._res, self._dim, data, m)
        jac = _run_chunked(self._jac, self._dim, data, m)
        offs = kernels.slot_offsets(self._slots)
        slots = [
            (slot_ids[k], jac[:, :, offs[k] : offs[k + 1]])
            for k in range(len(self._slots))
        ]
        return res, slots

    def slot_blocks(self, values):
        _, slot_ids = self._data(values)
        return slot_ids


class GyroFactors(_KernelGroup):
    name = "gyro"
    _slots = kernels.GYRO_SLOTS
    _dim = kernels.GYRO_DIM
    _res = staticmethod(kernels.gyro_res)
    _jac = staticmethod(kernels.gyro_jac)

    def __init__(self, index, imu_id, stream: ImuStream, sigma):
        super().__init__(index, stream.t, sigma)
        self.name = f"gyro/{imu_id}"
        self.imu_id = imu_id
        self.meas = np.asarray(stream.angular_rate, dtype=float)

    def _data(self, values):
        ids = self.index.imus[self.imu_id]
        idx, u, valid = self._times(values, ids["offset"])
        m = len(self.tau)
        data = self._common(idx, u, valid)
        data.update(
            rot_cps=self._gather_cps(values, self.index.rot_cps, idx, (3, 3)),
            imu_rot=np.broadcast_to(values[ids["rot"]], (m, 3, 3)),
            gyro_bias=np.broadcast_to(values[ids["gyro_bias"]], (m, 3)),
            misalign=np.broadcast_to(values[ids["misalign"]], (m, 3, 3)),
            offset=np.full(m, float(values[ids["offset"]][0])),
            meas=self.meas,
        )
        slot_ids = [self.index.rot_cps[idx + j] for j in range(4)] + [
            np.full(m, ids["rot"]),
            np.full(m, ids["gyro_bias"]),
            np.full(m, ids["misalign"]),
            np.full(m, ids["offset"]),
        ]
        return data, slot_ids


class AccelFactors(_KernelGroup):
    name = "accel"
    _slots = kernels.ACCEL_SLOTS
    _dim = kernels.ACCEL_DIM
    _res = staticmethod(kernels.accel_res)
    _jac = staticmethod(kernels.accel_jac)

    def __init__(self, index, imu_id, stream: ImuStream, sigma):
        super().__init__(index, stream.t, sigma)
        self.name = f"accel/{imu_id}"
        self.imu_id = imu_id
        self.meas = np.asarray(stream.specific_force, dtype=float)

    def _data(self, values):
        ids = self.index.imus[self.imu_id]
        idx, u, valid = self._times(values, ids["offset"])
        m = len(self.tau)
        g: GravityVector = values[self.index.gravity]
        data = self._common(idx, u, valid)
        data.update(
            rot_cps=self._gather_cps(values, self.index.rot_cps, idx, (3, 3)),
            vel_cps=self._gather_cps(values, self.index.vel_cps, idx, (3,)),
            imu_rot=np.broadcast_to(values[ids["rot"]], (m, 3, 3)),
            imu_trans=np.broadcast_to(values[ids["trans"]], (m, 3)),
            accel_bias=np.broadcast_to(values[ids["accel_bias"]], (m, 3)),
            g_dir=np.broadcast_to(g.direction, (m, 3)),
            g_basis=np.broadcast_to(g.tangent_basis(), (m, 3, 2)),
            g_mag=np.full(m, g.magnitude),
            offset=np.full(m, float(values[ids["offset"]][0])),
            meas=self.meas,
        )
        slot_ids = (
            [self.index.rot_cps[idx + j] for j in range(4)]
            + [self.index.vel_cps[idx + j] for j in range(4)]
            + [
                np.full(m, ids["rot"]),
                np.full(m, ids["trans"]),
                np.full(m, ids["accel_bias"]),
                np.full(m, self.index.gravity),
                np.full(m, ids["offset"]),
            ]
        )
        return data, slot_ids


class RadarFactors(_KernelGroup):
    """Per-target Doppler residuals; the kernel runs once per scan (all
    targets of a scan share the radar ego velocity and its Jacobian).

    Whitening propagates the bearing noise: the residual uses the *measured*
    target direction, so a bearing error ``delta_u`` contributes
    ``delta_u . v`` of extra Doppler noise — proportional to the ego-velocity
    component perpendicular to the line of sight.  The per-target sigma is
    ``sqrt(doppler_sigma^2 + angle_sigma^2 * |v_perp|^2)`` with the
    perpendicular speed taken from a per-scan closed-form ego-velocity fit
    (constant weights, computed once from the data)."""

    name = "radar"
    _slots = kernels.RADAR_SLOTS
    _dim = kernels.RADAR_DIM

    def __init__(self, index, radar_id, stream: RadarStream, sigma,
                 angle_sigma: float = 0.0):
        if len(stream) == 0:
            raise ValueError(f"radar {radar_id}: empty stream")
        scan_tau, scan_idx = np.unique(stream.t, return_inverse=True)
        super().__init__(index, scan_tau, sigma)
        self.name = f"radar/{radar_id}"
        self.radar_id = radar_id
        self.scan_idx = scan_idx  # per target -> scan row
        self.range_m = np.asarray(stream.range_m, dtype=float)
        self.doppler = np.asarray(stream.doppler, dtype=float)
        self.target = radar_target_position(stream.range_m, stream.azimuth, stream.elevation)
        self.sigma_t = np.full(len(self.doppler), self.sigma)
        if angle_sigma > 0.0:
            u = self.target / self.range_m[:, None]
            for s in range(len(scan_tau)):
                rows = np.flatnonzero(scan_idx == s)
                if len(rows) < 3:
                    continue
                us = u[rows]
                if np.linalg.cond(us) > 1e4:
                    continue
                v, *_ = np.linalg.lstsq(us, -self.doppler[rows], rcond=None)
                perp2 = np.maximum(v @ v - (us @ v) ** 2, 0.0)
                self.sigma_t[rows] = np.sqrt(
                    sigma * sigma + angle_sigma * angle_sigma * perp2
                )

    def _data(self, values):
        ids = self.index.radars[self.radar_id]
        idx, u, valid = self._times(values, ids["offset"])
        m = len(self.tau)
        data = self._common(idx, u, valid)
        del data["sigma"]
        data.update(
            rot_cps=self._gather_cps(values, self.index.rot_cps, idx, (3, 3)),
            vel_cps=self._gather_cps(values, self.index.vel_cps, idx, (3,)),
            radar_rot=np.broadcast_to(values[ids["rot"]], (m, 3, 3)),
            radar_trans=np.broadcast_to(values[ids["trans"]], (m, 3)),
            offset=np.full(m, float(values[ids["offset"]][0])),
        )
        slot_ids = (
            [self.index.rot_cps[idx + j][self.scan_idx] for j in range(4)]
            + [self.index.vel_cps[idx + j][self.scan_idx] for j in range(4)]
            + [
                np.full(len(self.scan_idx), ids["rot"]),
                np.full(len(self.scan_idx), ids["trans"]),
                np.full(len(self.scan_idx), ids["offset"]),
            ]
        )
        return data, slot_ids

    def _expand(self, v_scan):
        """Per-target residual from per-scan radar-frame velocities."""
        v = v_scan[self.scan_idx]
        res = self.doppler * self.range_m + np.einsum("mi,mi->m", self.target, v)
        res = res * self._valid[self.scan_idx]
        return (res / (self.range_m * self.sigma_t))[:, None]

    def residuals(self, values):
        data, _ = self._data(values)
        v_scan = _run_chunked(kernels.radar_vel, self._dim, data, len(self.tau))
        return self._expand(v_scan)

    def residuals_and_jacobians(self, values, blocks):
        data, slot_ids = self._data(values)
        m = len(self.tau)
        v_scan = _run_chunked(kernels.radar_vel, self._dim, data, m)
        jv = _run_chunked(kernels.radar_vel_jac, self._dim, data, m)  # (scans,3,D)
        res = self._expand(v_scan)
        jac = np.einsum("mi,mid->md", self.target, jv[self.scan_idx])
        jac = (jac / (self.range_m * self.sigma_t)[:, None])[:, None, :]
        offs = kernels.slot_offsets(self._slots)
        slots = [
            (slot_ids[k], jac[:, :, offs[k] : offs[k + 1]])
            for k in range(len(self._slots))
        ]
        return res, slots


class _CenterGroup(FactorGroup):
    """Gauge-fixing sums over the per-IMU parameters (plain quadratic loss)."""

    loss = None

    def __init__(self, index: BlockIndex, key: str, sigma=CENTER_SIGMA):
        self.index = index
        self.key = key  # "rot" | "trans" | "offset"
        self.sigma = float(sigma)
        self.ids = np.array([ids[key] for ids in index.imus.values()])
        self.name = f"center/{key}"

    def _data(self, values):
        if self.key == "rot":
            return {"rots": np.stack([values[i] for i in self.ids]),
                    "sigma": self.sigma}
        if self.key == "trans":
            return {"trans": np.stack([values[i] for i in self.ids]),
                    "sigma": self.sigma}
        return {"offsets": np.concatenate([values[i] for i in self.ids]),
                "sigma": self.sigma}

    def _fns(self):
        return {
            "rot": (kernels.center_rotation_res, kernels.center_rotation_jac, 3),
            "trans": (kernels.center_translation_res, kernels.center_translation_jac, 3),
            "offset": (kernels.center_temporal_res, kernels.center_temporal_jac, 1),
        }[self.key]

    def residuals(self, values):
        res_fn, _, width = self._fns()
        delta = np.zeros(len(self.ids) * width)
        return np.asarray(res_fn(delta, self._data(values)))[None, :]

    def residuals_and_jacobians(self, values, blocks):
        res_fn, jac_fn, width = self._fns()
        data = self._data(values)
        delta = np.zeros(len(self.ids) * width)
        res = np.asarray(res_fn(delta, data))[None, :]
        jac = np.asarray(jac_fn(delta, data))
        slots = [
            (np.array([bid]), jac[None, :, k * width : (k + 1) * width])
            for k, bid in enumerate(self.ids)
        ]
        return res, slots

    def slot_blocks(self, values):
        return [np.array([bid]) for bid in self.ids]


def center_groups(index: BlockIndex):
    return [
        _CenterGroup(index, "rot"),
        _CenterGroup(index, "trans"),
        _CenterGroup(index, "offset"),
    ]
