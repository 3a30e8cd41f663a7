"""Three-stage bootstrap producing a complete initial calibration state
from raw measurements and no prior knowledge.

Stage 1 fits the rotation spline and the IMU extrinsic rotations to the gyro
streams (time offsets held at zero, intrinsics at identity).  Stage 2 solves
per-scan radar ego velocities analytically, pre-integrates the accelerometers
between consecutive scans, and recovers gravity (as a free 3-vector), the
radar extrinsics and the IMU translations from the velocity-level constraint

    v(t1) - v(t0) = g * (t1 - t0) - V' p_imu + V''

where ``V' = integral (hat(wdot_w) + hat(w_w)^2) R dt`` and
``V'' = integral R R_imu a_meas dt``.  Stage 3 replaces the ego-velocity
endpoints by a velocity spline interpolant, adds the per-target Doppler
residuals, projects gravity back onto the fixed-magnitude sphere and refines
everything translational, yielding a complete CalibrationState.

The per-IMU gauge freedom is pinned the same way as in the batch problem:
the sums of the IMU extrinsic rotations and translations are driven to zero
by center residuals, and the world frame is re-anchored to the central body
frame at time zero after stage 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.integrate

from ctcalib import lie
from ctcalib.factors import (
    CENTER_SIGMA,
    GyroFactors,
    RadarFactors,
    _CenterGroup,
    register_state_blocks,
    state_from_problem,
)
from ctcalib.models import (
    CalibrationState,
    GravityVector,
    ImuIntrinsics,
    ImuParameters,
    RadarParameters,
    SensorExtrinsics,
    TimeOffset,
    radar_target_position,
)
from ctcalib.solver import (
    FactorGroup,
    ParameterBlock,
    Problem,
    RankDeficiencyError,
    SolveOptions,
    solve,
)
from ctcalib.splines import KnotGrid, R3Spline, So3Spline, cumulative_blending_matrix

_NTIL = np.asarray(cumulative_blending_matrix(3))


class InitializationError(RuntimeError):
    """Raised when the bootstrap cannot produce a usable state."""


@dataclass
class InitConfig:
    knot_spacing: float = 0.08  # s
    gyro_sigma: float = 2e-3  # rad/s
    accel_sigma: float = 2e-2  # m/s^2
    doppler_sigma: float = 0.05  # m/s
    outlier_fraction: float = 0.0  # expected Doppler outliers; > 0 enables RANSAC
    ransac_iterations: int = 50
    ransac_threshold: float | None = None  # default 3 * doppler_sigma
    max_condition: float = 1e4  # bearing-matrix condition limit per scan
    gap_factor: float = 3.0  # skip scan pairs further apart than this many periods
    max_iterations: int = 30  # per stage
    seed: int = 0


def data_grid(imu_streams: dict, radar_streams: dict, dt: float) -> KnotGrid:
    """Uniform knot grid spanning exactly the measured interval.

    The grid starts at the earliest sample so every control point supports
    data (no dangling spline tails that would make the normal equations
    singular); samples pushed outside the support by later time-offset
    updates are masked by the factor layer.
    """
    times = [s.t for s in imu_streams.values()] + [
        s.t for s in radar_streams.values() if len(s)
    ]
    if not times:
        raise InitializationError("no measurements to span a knot grid")
    t_min = min(float(t[0]) for t in times)
    t_max = max(float(t[-1]) for t in times)
    # ceil keeps every interior sample inside the support while guaranteeing
    # the last segment contains data (samples landing exactly on the final
    # knot are masked by the factor layer rather than left to dangle on an
    # unsupported trailing control point)
    count = int(np.ceil((t_max - t_min) / dt - 1e-9)) + 3
    return KnotGrid(t_min, dt, max(count, 4))


# ---------------------------------------------------------------------------
# radar ego velocity (per scan, closed form)


@dataclass
class EgoVelocityEstimate:
    """Radar-frame ego velocity of one scan solved from its Doppler set."""

    scan_id: int
    tau: float  # sensor clock
    velocity: np.ndarray  # (3,) m/s, radar frame
    inlier_count: int
    residual_rms: float
    condition: float
    sigma: float  # isotropized 1-sigma of the velocity estimate
    valid: bool


def solve_radar_ego_velocity(
    targets,
    doppler,
    *,
    doppler_sigma: float = 0.05,
    max_condition: float = 1e4,
    outlier_fraction: float = 0.0,
    ransac_threshold: float | None = None,
    ransac_iterations: int = 50,
    rng: np.random.Generator | None = None,
    scan_id: int = 0,
    tau: float = 0.0,
) -> EgoVelocityEstimate:
    """Least-squares ego velocity from one scan's Doppler measurements.

    Each static target at radar-frame position ``p`` with unit bearing
    ``u = p / |p|`` constrains ``doppler = -u^T v_ego``; stacking ``u`` rows
    gives a linear system solved in closed form.  With
    ``outlier_fraction > 0`` a minimal-sample RANSAC loop rejects corrupted
    Dopplers before the final fit.
    """
    p = np.atleast_2d(np.asarray(targets, dtype=float))
    v = np.atleast_1d(np.asarray(doppler, dtype=float))
    bad = EgoVelocityEstimate(
        scan_id, tau, np.zeros(3), 0, np.inf, np.inf, np.inf, False
    )
    if len(p) < 3:
        return bad
    u = p / np.linalg.norm(p, axis=1, keepdims=True)
    keep = np.arange(len(u))
    if outlier_fraction > 0.0:
        thresh = ransac_threshold or 3.0 * doppler_sigma
        rng = rng or np.random.default_rng(0)
        best = None
        for _ in range(ransac_iterations):
            idx = rng.choice(len(u), size=3, replace=False)
            try:
                cand = np.linalg.solve(u[idx], -v[idx])
            except np.linalg.LinAlgError:
                continue
            inl = np.abs(u @ cand + v) < thresh
            if best is None or inl.sum() > best.sum():
                best = inl
        if best is None or best.sum() < 3:
            return bad
        keep = np.flatnonzero(best)
    uu = u[keep]
    cond = np.linalg.cond(uu)
    if not np.isfinite(cond) or cond > max_condition:
        return bad
    sol, *_ = np.linalg.lstsq(uu, -v[keep], rcond=None)
    res = uu @ sol + v[keep]
    info = np.linalg.inv(uu.T @ uu)
    sigma = doppler_sigma * float(np.sqrt(np.trace(info) / 3.0))
    return EgoVelocityEstimate(
        scan_id,
        tau,
        sol,
        len(keep),
        float(np.sqrt(np.mean(res**2))),
        float(cond),
        sigma,
        True,
    )


def ego_velocity_series(stream, cfg: InitConfig, rng=None) -> list[EgoVelocityEstimate]:
    """Per-scan ego velocities of one radar stream (invalid scans flagged)."""
    rng = rng or np.random.default_rng(cfg.seed)
    pos = radar_target_position(stream.range_m, stream.azimuth, stream.elevation)
    out = []
    for sid in stream.scan_ids():
        m = stream.scan_id == sid
        out.append(
            solve_radar_ego_velocity(
                pos[m],
                stream.doppler[m],
                doppler_sigma=cfg.doppler_sigma,
                max_condition=cfg.max_condition,
                outlier_fraction=cfg.outlier_fraction,
                ransac_threshold=cfg.ransac_threshold,
                ransac_iterations=cfg.ransac_iterations,
                rng=rng,
                scan_id=int(sid),
                tau=float(stream.t[m][0]),
            )
        )
    return out


# ---------------------------------------------------------------------------
# stage 1: rotation spline + IMU extrinsic rotations from the gyros


def _dead_reckon_rotations(grid: KnotGrid, stream) -> np.ndarray:
    """Trapezoid gyro integration sampled at the knot times (identity at the
    first knot); rough control-point seeds for the stage-1 NLLS."""
    t, w = stream.t, stream.angular_rate
    rots = np.empty((len(t), 3, 3))
    rots[0] = np.eye(3)
    steps = lie.exp_so3(0.5 * (w[:-1] + w[1:]) * np.diff(t)[:, None])
    for j in range(len(t) - 1):
        rots[j + 1] = rots[j] @ steps[j]
    idx = np.clip(np.searchsorted(t, grid.knot_times()), 0, len(t) - 1)
    return rots[idx]


def _check_coverage(grid: KnotGrid, streams: dict, kind: str):
    # samples within one knot interval of the support edges are merely
    # masked; anything further out means the grid does not cover the data
    for sid, s in streams.items():
        if len(s) and (
            s.t[0] < grid.start_time - grid.dt or s.t[-1] >= grid.end_time + grid.dt
        ):
            raise InitializationError(
                f"{kind} stream {sid} is not covered by the knot grid "
                f"[{grid.start_time}, {grid.end_time})"
            )


def _freeze(problem: Problem, names):
    for n in names:
        problem.block(n).constant = True


def init_rotation_spline(imu_streams: dict, grid: KnotGrid, cfg: InitConfig):
    """Stage 1: rotation spline + per-IMU extrinsic rotations (offsets zero,
    intrinsics identity).  Returns ``(So3Spline, {imu_id: rotation}, result)``.

    The world orientation gauge is pinned by freezing the first control
    point; the per-IMU gauge by the rotational center residual.  The spline
    is re-anchored to identity at time zero afterwards.
    """
    if not imu_streams:
        raise InitializationError("rotation initialization needs an IMU stream")
    _check_coverage(grid, imu_streams, "imu")
    signal = max(
        float(np.sqrt(np.mean(s.angular_rate**2))) for s in imu_streams.values()
    )
    if signal < 1e-9:
        raise InitializationError(
            "rotation initialization is degenerate: gyro streams carry no "
            "rotation signal (rotation unobservable)"
        )
    seed_stream = max(imu_streams.values(), key=lambda s: len(s))
    cps = _dead_reckon_rotations(grid, seed_stream)
    imus = {
        sid: ImuParameters(SensorExtrinsics(), TimeOffset(0.0), ImuIntrinsics())
        for sid in imu_streams
    }
    state = CalibrationState(
        imus,
        {},
        So3Spline(grid, cps),
        R3Spline(grid, np.zeros((grid.count, 3))),
        GravityVector([0.0, 0.0, -1.0]),
    )
    problem = Problem()
    index = register_state_blocks(problem, state)
    _freeze(problem, [f"vel_cp_{k}" for k in range(grid.count)] + ["gravity", "rot_cp_0"])
    for sid in imu_streams:
        _freeze(
            problem,
            [f"{sid}/trans", f"{sid}/offset", f"{sid}/gyro_bias",
             f"{sid}/accel_bias", f"{sid}/misalign"],
        )
    for sid, stream in imu_streams.items():
        problem.add_group(GyroFactors(index, sid, stream, cfg.gyro_sigma))
    problem.add_group(_CenterGroup(index, "rot"))
    # a trailing pad control point can carry zero basis weight when the last
    # samples fall exactly on a knot; freeze whatever the rank check names,
    # as long as it is only spline control points
    for _ in range(2):
        try:
            result = solve(problem, SolveOptions(max_iterations=cfg.max_iterations))
            break
        except RankDeficiencyError as e:
            if not all(n.startswith("rot_cp_") for n in e.block_names):
                raise InitializationError(
                    "rotation initialization is degenerate (insufficient gyro "
                    f"excitation); unconstrained blocks: {', '.join(e.block_names)}"
                ) from e
            _freeze(problem, list(e.block_names))
    else:
        raise InitializationError(
            "rotation initialization is degenerate after freezing "
            "unconstrained control points"
        )
    fitted = state_from_problem(problem, index, state)
    spline = fitted.rotation_spline
    anchor = 0.0 if grid.start_time <= 0.0 < grid.end_time else grid.start_time
    q0 = spline.eval(anchor)
    spline = So3Spline(grid, np.einsum("ij,njk->nik", q0.T, spline.control_points))
    rotations = {sid: fitted.imus[sid].extrinsics.rotation for sid in imu_streams}
    return spline, rotations, result


# ---------------------------------------------------------------------------
# stage 2/3 shared: velocity-level pre-integration over IMU samples


@dataclass
class PreintegrationTriple:
    """Velocity-level pre-integration of one IMU over one radar scan pair."""

    radar_id: str
    imu_id: str
    t0: float
    t1: float
    v_mat: np.ndarray  # (3, 3), integral of (hat(wdot_w) + hat(w_w)^2) R
    v_vec: np.ndarray  # (3,), integral of R R_imu a_meas
    r0: np.ndarray  # central-body rotation at t0 / t1
    r1: np.ndarray
    w0: np.ndarray  # world angular velocity at t0 / t1
    w1: np.ndarray
    ego0: np.ndarray  # radar-frame ego velocity at t0 / t1
    ego1: np.ndarray
    sigma: float  # scalar whitening of the 3-vector residual

    def __post_init__(self):
        if not self.t1 > self.t0:
            raise ValueError("pre-integration interval must have t1 > t0")
        for a in (self.v_mat, self.v_vec, self.r0, self.r1):
            if not np.all(np.isfinite(a)):
                raise ValueError("pre-integration terms must be finite")


class _ImuIntegrals:
    """Cumulative trapezoid integrals of the pre-integration integrands at
    one IMU's sample times; interval integrals come from interpolating the
    cumulative curves (equivalent to trapezoid with split end panels)."""

    def __init__(self, rot_spline: So3Spline, imu_rotation, stream):
        grid = rot_spline.grid
        inside = (stream.t >= grid.start_time) & (stream.t < grid.end_time)
        self.t = stream.t[inside]
        if len(self.t) < 2:
            raise InitializationError("IMU stream barely overlaps the spline support")
        r = rot_spline.eval(self.t)
        w = rot_spline.world_angular_velocity(self.t)
        dw = rot_spline.world_angular_acceleration(self.t)
        g_int = (_hat_rows(dw) + _hat_rows(w) @ _hat_rows(w)) @ r  # (n, 3, 3)
        a_int = np.einsum("nij,nj->ni", r, stream.specific_force[inside] @ imu_rotation.T)
        self._cum_mat = scipy.integrate.cumulative_trapezoid(
            g_int.reshape(len(self.t), 9), self.t, axis=0, initial=0.0
        )
        self._cum_vec = scipy.integrate.cumulative_trapezoid(
            a_int, self.t, axis=0, initial=0.0
        )
        self.mean_dt = float(np.mean(np.diff(self.t)))

    def covers(self, t0, t1):
        return self.t[0] <= t0 and t1 <= self.t[-1]

    def _interp(self, cum, t):
        return np.array([np.interp(t, self.t, cum[:, k]) for k in range(cum.shape[1])])

    def interval(self, t0, t1):
        v_mat = (self._interp(self._cum_mat, t1) - self._interp(self._cum_mat, t0))
        v_vec = self._interp(self._cum_vec, t1) - self._interp(self._cum_vec, t0)
        return v_mat.reshape(3, 3), v_vec


def _hat_rows(v):
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1], out[..., 0, 2] = -z, y
    out[..., 1, 0], out[..., 1, 2] = z, -x
    out[..., 2, 0], out[..., 2, 1] = -y, x
    return out


def preintegration_triples(
    rot_spline: So3Spline,
    imu_rotations: dict,
    imu_streams: dict,
    ego_by_radar: dict,
    cfg: InitConfig,
):
    """All (radar scan pair, IMU) pre-integration triples.

    Scan pairs spanning data gaps longer than ``cfg.gap_factor`` median scan
    periods are skipped, as are intervals without IMU coverage; both are
    counted in the returned diagnostics dict.
    """
    integrals = {
        sid: _ImuIntegrals(rot_spline, imu_rotations[sid], stream)
        for sid, stream in imu_streams.items()
    }
    grid = rot_spline.grid
    triples: list[PreintegrationTriple] = []
    skipped = {"gap": 0, "no_imu_coverage": 0, "invalid_scan": 0}
    for rid, egos in ego_by_radar.items():
        valid = [
            e for e in egos
            if e.valid and grid.start_time <= e.tau < grid.end_time
        ]
        skipped["invalid_scan"] += len(egos) - len(valid)
        if len(valid) < 2:
            continue
        taus = np.array([e.tau for e in valid])
        period = float(np.median(np.diff(taus))) if len(taus) > 1 else np.inf
        rots = rot_spline.eval(taus)
        ws = rot_spline.world_angular_velocity(taus)
        for k in range(len(valid) - 1):
            e0, e1 = valid[k], valid[k + 1]
            if e1.tau - e0.tau > cfg.gap_factor * period:
                skipped["gap"] += 1
                continue
            for iid, integ in integrals.items():
                if not integ.covers(e0.tau, e1.tau):
                    skipped["no_imu_coverage"] += 1
                    continue
                v_mat, v_vec = integ.interval(e0.tau, e1.tau)
                sigma = float(
                    np.sqrt(
                        e0.sigma**2
                        + e1.sigma**2
                        + cfg.accel_sigma**2 * (e1.tau - e0.tau) * integ.mean_dt
                    )
                )
                triples.append(
                    PreintegrationTriple(
                        rid, iid, e0.tau, e1.tau, v_mat, v_vec,
                        rots[k], rots[k + 1], ws[k], ws[k + 1],
                        e0.velocity, e1.velocity, max(sigma, 1e-4),
                    )
                )
    return triples, skipped


class PreintExtrinsicsGroup(FactorGroup):
    """Stage-2 residuals of one radar: ego-velocity difference between two
    scans against gravity, pre-integrated acceleration, the radar extrinsics
    and the IMU lever arm.  All Jacobians analytic.  Plain quadratic loss:
    outliers were already rejected scan-wise by the ego-velocity RANSAC, and
    a robust loss would stall convergence from the identity start."""

    loss = None

    def __init__(self, radar_id, triples, gravity_id, rot_id, trans_id, imu_trans_ids):
        self.name = f"preint/{radar_id}"
        self.gravity_id = gravity_id
        self.rot_id = rot_id
        self.trans_id = trans_id
        self.imu_ids = np.array([imu_trans_ids[t.imu_id] for t in triples])
        self.r0 = np.stack([t.r0 for t in triples])
        self.r1 = np.stack([t.r1 for t in triples])
        self.w0 = np.stack([t.w0 for t in triples])
        self.w1 = np.stack([t.w1 for t in triples])
        self.ego0 = np.stack([t.ego0 for t in triples])
        self.ego1 = np.stack([t.ego1 for t in triples])
        self.v_mat = np.stack([t.v_mat for t in triples])
        self.v_vec = np.stack([t.v_vec for t in triples])
        self.dtau = np.array([t.t1 - t.t0 for t in triples])
        self.sigma = np.array([t.sigma for t in triples])

    def _endpoint_velocity(self, r, w, ego, r_ext, p_ext):
        v = np.einsum("nij,nj->ni", r @ r_ext, ego)
        return v - np.cross(w, np.einsum("nij,j->ni", r, p_ext))

    def residuals(self, values):
        r_ext, p_ext = values[self.rot_id], values[self.trans_id]
        g = values[self.gravity_id]
        p_imu = np.stack([values[i] for i in self.imu_ids])
        v0 = self._endpoint_velocity(self.r0, self.w0, self.ego0, r_ext, p_ext)
        v1 = self._endpoint_velocity(self.r1, self.w1, self.ego1, r_ext, p_ext)
        res = (
            v1 - v0 - g * self.dtau[:, None]
            + np.einsum("nij,nj->ni", self.v_mat, p_imu) - self.v_vec
        )
        return res / self.sigma[:, None]

    def residuals_and_jacobians(self, values, blocks):
        res = self.residuals(values)
        r_ext = values[self.rot_id]
        n = len(self.dtau)
        inv_s = 1.0 / self.sigma[:, None, None]
        eye = np.broadcast_to(np.eye(3), (n, 3, 3))
        j_g = -self.dtau[:, None, None] * eye * inv_s
        j_rot = (
            self.r0 @ r_ext @ _hat_rows(self.ego0)
            - self.r1 @ r_ext @ _hat_rows(self.ego1)
        ) * inv_s
        j_trans = (_hat_rows(self.w0) @ self.r0 - _hat_rows(self.w1) @ self.r1) * inv_s
        j_imu = self.v_mat * inv_s
        ones = np.full(n, 1, dtype=np.int64)
        return res, [
            (ones * self.gravity_id, j_g),
            (ones * self.rot_id, j_rot),
            (ones * self.trans_id, j_trans),
            (self.imu_ids, j_imu),
        ]

    def slot_blocks(self, values):
        ones = np.full(len(self.dtau), 1, dtype=np.int64)
        return [ones * self.gravity_id, ones * self.rot_id,
                ones * self.trans_id, self.imu_ids]


class _SumVectorGroup(FactorGroup):
    """Near-hard constraint driving the sum of euclidean blocks to zero."""

    loss = None

    def __init__(self, name, block_ids, sigma=CENTER_SIGMA):
        self.name = name
        self.ids = np.asarray(block_ids, dtype=np.int64)
        self.sigma = float(sigma)

    def residuals(self, values):
        return np.sum([values[i] for i in self.ids], axis=0)[None, :] / self.sigma

    def residuals_and_jacobians(self, values, blocks):
        res = self.residuals(values)
        dim = res.shape[1]
        jac = np.eye(dim)[None] / self.sigma
        return res, [(np.array([i]), jac) for i in self.ids]

    def slot_blocks(self, values):
        return [np.array([i]) for i in self.ids]


@dataclass
class Stage2Result:
    gravity: np.ndarray  # free 3-vector, world frame
    radar_extrinsics: dict  # radar_id -> SensorExtrinsics
    imu_translations: dict  # imu_id -> (3,)
    triples: list
    skipped: dict
    solve_result: object


def _gravity_seed(rot_spline, imu_rotations, imu_streams) -> np.ndarray:
    """Free-vector gravity seed: minus the mean world-frame specific force
    (the body acceleration averages out over an excited trajectory)."""
    acc = []
    grid = rot_spline.grid
    for sid, stream in imu_streams.items():
        inside = (stream.t >= grid.start_time) & (stream.t < grid.end_time)
        r = rot_spline.eval(stream.t[inside])
        acc.append(
            np.einsum(
                "nij,nj->ni", r, stream.specific_force[inside] @ imu_rotations[sid].T
            )
        )
    return -np.mean(np.concatenate(acc), axis=0)


def init_extrinsics_gravity(
    rot_spline: So3Spline,
    imu_rotations: dict,
    imu_streams: dict,
    ego_by_radar: dict,
    cfg: InitConfig,
) -> Stage2Result:
    """Stage 2: gravity (free 3-vector), radar extrinsics and IMU lever arms
    from pre-integrated velocity constraints between consecutive scans."""
    triples, skipped = preintegration_triples(
        rot_spline, imu_rotations, imu_streams, ego_by_radar, cfg
    )
    if not triples:
        raise InitializationError(
            "no usable radar scan pairs for pre-integration "
            f"(skipped: {skipped})"
        )
    problem = Problem()
    g_id = problem.add_block(
        ParameterBlock(
            "gravity_free", "euclidean",
            _gravity_seed(rot_spline, imu_rotations, imu_streams),
        )
    )
    imu_ids = {
        sid: problem.add_block(ParameterBlock(f"{sid}/trans", "euclidean", np.zeros(3)))
        for sid in imu_streams
    }
    radar_ids = {}
    for rid in ego_by_radar:
        radar_ids[rid] = (
            problem.add_block(ParameterBlock(f"{rid}/rot", "so3", np.eye(3))),
            problem.add_block(ParameterBlock(f"{rid}/trans", "euclidean", np.zeros(3))),
        )
    for rid in ego_by_radar:
        sub = [t for t in triples if t.radar_id == rid]
        if not sub:
            problem.block(f"{rid}/rot").constant = True
            problem.block(f"{rid}/trans").constant = True
            continue
        problem.add_group(
            PreintExtrinsicsGroup(rid, sub, g_id, *radar_ids[rid], imu_ids)
        )
    problem.add_group(_SumVectorGroup("center/trans", list(imu_ids.values())))
    try:
        result = solve(problem, SolveOptions(max_iterations=cfg.max_iterations))
    except RankDeficiencyError as e:
        raise InitializationError(
            "extrinsics/gravity initialization is degenerate (insufficient "
            f"excitation); unconstrained blocks: {', '.join(e.block_names)}"
        ) from e
    values = problem.values()
    return Stage2Result(
        gravity=values[g_id].copy(),
        radar_extrinsics={
            rid: SensorExtrinsics(values[ids[0]].copy(), values[ids[1]].copy())
            for rid, ids in radar_ids.items()
        },
        imu_translations={sid: values[i].copy() for sid, i in imu_ids.items()},
        triples=triples,
        skipped=skipped,
        solve_result=result,
    )


# ---------------------------------------------------------------------------
# stage 3: velocity spline + joint translational refinement


def _cp_weights(u):
    """Per-control-point value weights of the cumulative cubic basis."""
    lam = np.stack([np.ones_like(u), u, u * u, u**3], axis=-1) @ _NTIL  # (n, 4)
    w = np.empty_like(lam)
    w[:, :3] = lam[:, :3] - lam[:, 1:]
    w[:, 3] = lam[:, 3]
    return w


class PreintSplineGroup(FactorGroup):
    """Stage-3 pre-integration residuals with spline-interpolated endpoint
    velocities; couples the velocity control points, the spherical gravity
    and the IMU lever arms (the radar parameters now enter only through the
    per-target Doppler residuals)."""

    loss = None
    name = "preint/spline"

    def __init__(self, index, triples):
        self.index = index
        grid = index.grid
        inside = [
            t for t in triples
            if grid.start_time <= t.t0 and t.t1 < grid.end_time
        ]
        self.dropped = len(triples) - len(inside)
        if not inside:
            raise InitializationError("no pre-integration interval inside the grid")
        self.imu_ids = np.array([index.imus[t.imu_id]["trans"] for t in inside])
        self.v_mat = np.stack([t.v_mat for t in inside])
        self.v_vec = np.stack([t.v_vec for t in inside])
        self.dtau = np.array([t.t1 - t.t0 for t in inside])
        self.sigma = np.array([t.sigma for t in inside])
        idx0, u0 = grid.segment(np.array([t.t0 for t in inside]))
        idx1, u1 = grid.segment(np.array([t.t1 for t in inside]))
        self.idx0, self.idx1 = idx0, idx1
        self.w0 = _cp_weights(u0)
        self.w1 = _cp_weights(u1)

    def _velocity(self, cps, idx, w):
        win = cps[idx[:, None] + np.arange(4)]  # (n, 4, 3)
        return np.einsum("nj,nji->ni", w, win)

    def residuals(self, values):
        cps = np.stack([values[i] for i in self.index.vel_cps])
        g = values[self.index.gravity].vector
        p_imu = np.stack([values[i] for i in self.imu_ids])
        res = (
            self._velocity(cps, self.idx1, self.w1)
            - self._velocity(cps, self.idx0, self.w0)
            - g * self.dtau[:, None]
            + np.einsum("nij,nj->ni", self.v_mat, p_imu)
            - self.v_vec
        )
        return res / self.sigma[:, None]

    def residuals_and_jacobians(self, values, blocks):
        res = self.residuals(values)
        n = len(self.dtau)
        grav = values[self.index.gravity]
        inv_s = 1.0 / self.sigma[:, None, None]
        eye = np.broadcast_to(np.eye(3), (n, 3, 3))
        slots = []
        for j in range(4):
            slots.append(
                (self.index.vel_cps[self.idx1 + j],
                 self.w1[:, j, None, None] * eye * inv_s)
            )
        for j in range(4):
            slots.append(
                (self.index.vel_cps[self.idx0 + j],
                 -self.w0[:, j, None, None] * eye * inv_s)
            )
        j_g = -self.dtau[:, None, None] * (
            grav.magnitude * grav.tangent_basis()
        )[None] * inv_s
        slots.append((np.full(n, self.index.gravity, dtype=np.int64), j_g))
        slots.append((self.imu_ids, self.v_mat * inv_s))
        return res, slots


def _velocity_cp_seed(grid, rot_spline, stage2: Stage2Result, ego_by_radar):
    """Velocity control-point seed: central-body velocity samples recovered
    from the per-scan ego velocities, interpolated at the knot times."""
    ts, vs = [], []
    sgrid = rot_spline.grid
    for rid, egos in ego_by_radar.items():
        ext = stage2.radar_extrinsics[rid]
        valid = [
            e for e in egos
            if e.valid and sgrid.start_time <= e.tau < sgrid.end_time
        ]
        if not valid:
            continue
        tau = np.array([e.tau for e in valid])
        r = rot_spline.eval(tau)
        w = rot_spline.world_angular_velocity(tau)
        ego = np.stack([e.velocity for e in valid])
        v = np.einsum("nij,nj->ni", r @ ext.rotation, ego) - np.cross(
            w, np.einsum("nij,j->ni", r, ext.translation)
        )
        ts.append(tau)
        vs.append(v)
    t = np.concatenate(ts)
    v = np.concatenate(vs)
    order = np.argsort(t)
    t, v = t[order], v[order]
    knots = grid.knot_times()
    return np.stack([np.interp(knots, t, v[:, k]) for k in range(3)], axis=1)


def init_velocity_spline(
    grid: KnotGrid,
    rot_spline: So3Spline,
    imu_rotations: dict,
    stage2: Stage2Result,
    imu_streams: dict,
    radar_streams: dict,
    ego_by_radar: dict,
    cfg: InitConfig,
):
    """Stage 3: fit the velocity spline and jointly refine gravity (back on
    the fixed-magnitude sphere), sensor translations and the lever arms.
    Rotations and time offsets stay at their earlier estimates.  Returns
    ``(CalibrationState, result)`` with time offsets zero and IMU intrinsics
    identity."""
    if not any(e.valid for egos in ego_by_radar.values() for e in egos):
        raise InitializationError(
            "velocity scale is unobservable without radar Doppler measurements"
        )
    imus = {
        sid: ImuParameters(
            SensorExtrinsics(imu_rotations[sid].copy(), stage2.imu_translations[sid]),
            TimeOffset(0.0),
            ImuIntrinsics(),
        )
        for sid in imu_streams
    }
    radars = {
        rid: RadarParameters(stage2.radar_extrinsics[rid].copy(), TimeOffset(0.0))
        for rid in radar_streams
    }
    state = CalibrationState(
        imus,
        radars,
        So3Spline(grid, rot_spline.control_points.copy()),
        R3Spline(grid, _velocity_cp_seed(grid, rot_spline, stage2, ego_by_radar)),
        GravityVector(stage2.gravity),
    )
    problem = Problem()
    index = register_state_blocks(problem, state)
    _freeze(problem, [f"rot_cp_{k}" for k in range(grid.count)])
    for sid in imu_streams:
        _freeze(
            problem,
            [f"{sid}/rot", f"{sid}/offset", f"{sid}/gyro_bias",
             f"{sid}/accel_bias", f"{sid}/misalign"],
        )
    # radar extrinsics stay at their pre-integration estimates: the rotation
    # spline is frozen (still carrying its bootstrap bias) and time offsets
    # are still zero here, so re-fitting them against Doppler alone drags
    # them away rather than improving them
    for rid in radar_streams:
        _freeze(problem, [f"{rid}/rot", f"{rid}/trans", f"{rid}/offset"])
    for rid, stream in radar_streams.items():
        if len(stream):
            problem.add_group(RadarFactors(index, rid, stream, cfg.doppler_sigma))
    preint = PreintSplineGroup(index, stage2.triples)
    problem.add_group(preint)
    # stage 3 constrains the velocity spline only at radar scan times; hold
    # control points outside every measured segment at their seed values
    times = np.concatenate(
        [s.t for s in radar_streams.values() if len(s)]
        + [np.array([t.t0 for t in stage2.triples]), np.array([t.t1 for t in stage2.triples])]
    )
    times = times[(times >= grid.start_time) & (times < grid.end_time)]
    seg, _ = grid.segment(times)
    touched = np.unique(seg[:, None] + np.arange(4))
    _freeze(problem, [f"vel_cp_{k}" for k in range(grid.count) if k not in set(touched)])
    problem.add_group(_CenterGroup(index, "trans"))
    # the segment-window heuristic above can miss control points whose basis
    # weight vanishes at every measurement (e.g. scans landing exactly on
    # knots, where the window's last weight is zero): freeze whatever the
    # rank check still names, as long as it is only velocity control points
    for _ in range(2):
        try:
            result = solve(problem, SolveOptions(max_iterations=cfg.max_iterations))
            break
        except RankDeficiencyError as e:
            if not all(n.startswith("vel_cp_") for n in e.block_names):
                raise InitializationError(
                    "velocity initialization is degenerate; unconstrained blocks: "
                    + ", ".join(e.block_names)
                ) from e
            _freeze(problem, list(e.block_names))
    else:
        raise InitializationError(
            "velocity initialization is degenerate after freezing unconstrained "
            "control points"
        )
    return state_from_problem(problem, index, state), result


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class InitResult:
    state: CalibrationState
    grid: KnotGrid
    ego_velocities: dict
    stages: list = field(default_factory=list)  # JSON-able per-stage snapshots


def snapshot_state(stage: str, state: CalibrationState, result=None) -> dict:
    """JSON-able parameter snapshot for convergence reporting."""
    snap = {
        "stage": stage,
        "gravity": state.gravity.vector.tolist(),
        "imus": {
            sid: {
                "rotation_vector": lie.log_so3(p.extrinsics.rotation).tolist(),
                "translation": p.extrinsics.translation.tolist(),
                "time_offset": p.time_offset.offset,
                "gyro_bias": p.intrinsics.gyro_bias.tolist(),
                "accel_bias": p.intrinsics.accel_bias.tolist(),
            }
            for sid, p in state.imus.items()
        },
        "radars": {
            rid: {
                "rotation_vector": lie.log_so3(p.extrinsics.rotation).tolist(),
                "translation": p.extrinsics.translation.tolist(),
                "time_offset": p.time_offset.offset,
            }
            for rid, p in state.radars.items()
        },
    }
    if result is not None:
        snap["converged"] = bool(result.converged)
        snap["iterations"] = len(result.iterations)
        snap["cost"] = float(result.cost)
    return snap


def initialize(imu_streams: dict, radar_streams: dict, cfg: InitConfig | None = None):
    """Run all three bootstrap stages; returns an :class:`InitResult` whose
    state has time offsets zero and IMU intrinsics identity."""
    cfg = cfg or InitConfig()
    if not radar_streams or all(len(s) == 0 for s in radar_streams.values()):
        raise InitializationError(
            "velocity scale is unobservable without radar Doppler measurements"
        )
    grid = data_grid(imu_streams, radar_streams, cfg.knot_spacing)
    rot_spline, imu_rotations, r1 = init_rotation_spline(imu_streams, grid, cfg)
    rng = np.random.default_rng(cfg.seed)
    ego = {
        rid: ego_velocity_series(stream, cfg, rng)
        for rid, stream in radar_streams.items()
        if len(stream)
    }
    stage2 = init_extrinsics_gravity(rot_spline, imu_rotations, imu_streams, ego, cfg)
    state, r3 = init_velocity_spline(
        grid, rot_spline, imu_rotations, stage2, imu_streams, radar_streams, ego, cfg
    )
    state1 = _partial_state(state, imu_rotations=imu_rotations)
    state2 = _partial_state(
        state,
        imu_rotations=imu_rotations,
        imu_translations=stage2.imu_translations,
        radar_extrinsics=stage2.radar_extrinsics,
        gravity=GravityVector(stage2.gravity),
    )
    stages = [
        snapshot_state("init-rotation", state1, r1),
        snapshot_state("init-gravity-extrinsics", state2, stage2.solve_result),
        snapshot_state("init-velocity", state, r3),
    ]
    return InitResult(state, grid, ego, stages)


def _partial_state(
    final: CalibrationState,
    imu_rotations=None,
    imu_translations=None,
    radar_extrinsics=None,
    gravity=None,
) -> CalibrationState:
    """State as known after an intermediate stage (unknowns at defaults)."""
    s = final.copy()
    for sid, p in s.imus.items():
        p.extrinsics.rotation = (
            imu_rotations[sid].copy() if imu_rotations else np.eye(3)
        )
        p.extrinsics.translation = (
            imu_translations[sid].copy() if imu_translations else np.zeros(3)
        )
    for rid, p in s.radars.items():
        ext = radar_extrinsics[rid].copy() if radar_extrinsics else SensorExtrinsics()
        p.extrinsics = ext
    s.gravity = gravity.copy() if gravity else GravityVector([0.0, 0.0, -1.0])
    return s
