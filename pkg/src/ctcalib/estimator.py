"""Staged batch calibration over the full parameter set.

The batch problem stacks gyroscope, accelerometer and per-target Doppler
residuals (Cauchy loss) plus the center residuals (plain quadratic) over one
shared spline grid, and solves it in a configurable schedule of stages that
progressively free parameter families:

* stage 1: spatial extrinsics, gravity and all spline control points,
* stage 2: plus the per-sensor time offsets,
* stage 3: plus the IMU intrinsics (biases and gyro misalignment) — the
  final stage is a global optimization of everything.

The world orientation gauge is pinned by holding the first rotation control
point constant during each solve (a global rotation of the spline, gravity
and velocity is otherwise a null direction), and the returned states are then
re-anchored so the spline is exactly identity at the reference time — the
world frame is the central body frame at time zero.  The per-IMU gauge is
pinned by the center residuals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ctcalib.factors import (
    AccelFactors,
    GyroFactors,
    RadarFactors,
    _KernelGroup,
    center_groups,
    register_state_blocks,
    state_from_problem,
)
from ctcalib.initialization import InitConfig, initialize, snapshot_state
from ctcalib.models import CalibrationState, GravityVector
from ctcalib.solver import (
    Problem,
    RankDeficiencyError,
    SolveOptions,
    SolveResult,
    solve,
)

FAMILIES = ("control_points", "gravity", "spatial", "temporal", "intrinsic")


@dataclass(frozen=True)
class Stage:
    """One batch stage: the parameter families optimized (others constant)."""

    name: str
    families: tuple

    def __post_init__(self):
        unknown = set(self.families) - set(FAMILIES)
        if unknown:
            raise ValueError(f"unknown parameter families {sorted(unknown)}")


DEFAULT_SCHEDULE = (
    Stage("BO1", ("control_points", "gravity", "spatial")),
    Stage("BO2", ("control_points", "gravity", "spatial", "temporal")),
    Stage("BO3", ("control_points", "gravity", "spatial", "temporal", "intrinsic")),
)


STAGE_PRESETS = {s.name: s for s in DEFAULT_SCHEDULE}


def schedule_from_names(names):
    """Resolve stage names (``BO1``/``BO2``/``BO3``) into a schedule."""
    unknown = [n for n in names if n not in STAGE_PRESETS]
    if unknown:
        raise ValueError(
            f"unknown stages {unknown}; available: {sorted(STAGE_PRESETS)}"
        )
    if not names:
        raise ValueError("schedule must contain at least one stage")
    return tuple(STAGE_PRESETS[n] for n in names)


def validate_schedule(schedule):
    if not schedule:
        raise ValueError("schedule must contain at least one stage")
    if set(schedule[-1].families) != set(FAMILIES):
        raise ValueError("the final stage must free every parameter family")


@dataclass
class EstimatorConfig:
    gyro_sigma: float = 2e-3  # rad/s
    accel_sigma: float = 2e-2  # m/s^2
    doppler_sigma: float = 0.05  # m/s
    # 1-sigma bearing noise of the radar targets; propagated into per-target
    # Doppler whitening (a bearing error delta_u adds delta_u . v of Doppler
    # error, dominant whenever the perpendicular speed exceeds ~5 m/s)
    radar_angle_sigma: float = np.radians(0.5)
    cauchy_scale: float = 1.0  # in standardized-residual units
    max_iterations: int = 50  # final stage
    cost_tolerance: float = 1e-8  # final stage
    # earlier stages only warm-start the final one; with some families still
    # frozen at wrong values their cost plateaus without converging, so they
    # get a hard iteration cap and a looser tolerance
    intermediate_max_iterations: int = 12
    intermediate_cost_tolerance: float = 1e-6
    gradient_tolerance: float = 1e-10


@dataclass
class StageLog:
    name: str
    result: SolveResult
    snapshot: dict  # parameter snapshot after the stage
    dropped: dict  # group name -> measurements outside spline support


@dataclass
class BatchResult:
    state: CalibrationState
    stages: list
    residual_stats: dict  # group name -> {mean, std, count} (standardized)
    bound_hits: list
    converged: bool


def _family_blocks(index, family):
    names = []
    if family == "control_points":
        names += [f"rot_cp_{k}" for k in range(len(index.rot_cps))]
        names += [f"vel_cp_{k}" for k in range(len(index.vel_cps))]
    elif family == "gravity":
        names.append("gravity")
    elif family == "spatial":
        for sid in list(index.imus) + list(index.radars):
            names += [f"{sid}/rot", f"{sid}/trans"]
    elif family == "temporal":
        for sid in list(index.imus) + list(index.radars):
            names.append(f"{sid}/offset")
    elif family == "intrinsic":
        for sid in index.imus:
            names += [f"{sid}/gyro_bias", f"{sid}/accel_bias", f"{sid}/misalign"]
    return names


def _apply_stage(problem: Problem, index, stage: Stage):
    for block in problem.blocks:
        block.constant = True
    for family in stage.families:
        for name in _family_blocks(index, family):
            problem.block(name).constant = False
    # world orientation anchor: the first rotation control point stays at its
    # identity-anchored value (otherwise a global rotation of the spline,
    # gravity and velocity is a gauge null direction)
    problem.block("rot_cp_0").constant = True


def build_batch_problem(state: CalibrationState, imu_streams, radar_streams,
                        cfg: EstimatorConfig):
    """Full batch problem (all sensor factor groups plus center residuals)
    at the given state; block constants are managed per stage."""
    problem = Problem()
    index = register_state_blocks(problem, state.copy())
    loss = ("cauchy", cfg.cauchy_scale)
    for sid, stream in imu_streams.items():
        g = GyroFactors(index, sid, stream, cfg.gyro_sigma)
        a = AccelFactors(index, sid, stream, cfg.accel_sigma)
        g.loss = a.loss = loss
        problem.add_group(g)
        problem.add_group(a)
    for rid, stream in radar_streams.items():
        if len(stream):
            r = RadarFactors(index, rid, stream, cfg.doppler_sigma,
                             angle_sigma=cfg.radar_angle_sigma)
            r.loss = loss
            problem.add_group(r)
    for g in center_groups(index):
        problem.add_group(g)
    return problem, index


def reanchor_world(state: CalibrationState) -> CalibrationState:
    """Rotate the state's world frame so the rotation spline is exactly the
    identity at the reference time (time zero if covered, else grid start).

    A constant world rotation applied to the rotation spline, the velocity
    spline and gravity leaves every measurement residual unchanged, so this
    only fixes the reporting convention: the world frame is the central body
    frame at the reference time.
    """
    grid = state.rotation_spline.grid
    t0 = 0.0 if grid.start_time <= 0.0 < grid.end_time else grid.start_time
    q = state.rotation_spline.eval(t0)
    state.rotation_spline.control_points[:] = q.T @ state.rotation_spline.control_points
    state.velocity_spline.control_points[:] = state.velocity_spline.control_points @ q
    state.gravity = GravityVector(q.T @ state.gravity.direction, state.gravity.magnitude)
    return state


def _valid_residuals(group, values):
    """Standardized residual rows actually inside the spline support."""
    res = group.residuals(values)
    if isinstance(group, RadarFactors):
        return res[group._valid[group.scan_idx]]
    if isinstance(group, _KernelGroup):
        return res[group._valid]
    return res


def residual_statistics(problem: Problem) -> dict:
    values = problem.values()
    stats = {}
    for group in problem.groups:
        res = _valid_residuals(group, values).ravel()
        stats[group.name] = {
            "mean": float(np.mean(res)) if len(res) else 0.0,
            "std": float(np.std(res)) if len(res) else 0.0,
            "count": int(len(res)),
        }
    return stats


def run_batch(
    state: CalibrationState,
    imu_streams,
    radar_streams,
    schedule=DEFAULT_SCHEDULE,
    cfg: EstimatorConfig | None = None,
) -> BatchResult:
    """Execute the staged batch optimization from an initialized state.

    Non-convergence of a stage is recorded in its log, never raised; the
    returned state is the best one found.
    """
    cfg = cfg or EstimatorConfig()
    problem, index = build_batch_problem(state, imu_streams, radar_streams, cfg)
    stages = []
    bound_hits = []
    # spline control points with no measurement support (trailing pad points
    # on coarse grids) are detected by the solver's rank check and held at
    # their initialized values for every stage
    dead_cps: set = set()
    for k, stage in enumerate(schedule):
        final_stage = k == len(schedule) - 1
        options = SolveOptions(
            max_iterations=(
                cfg.max_iterations if final_stage else
                min(cfg.max_iterations, cfg.intermediate_max_iterations)
            ),
            cost_tolerance=(
                cfg.cost_tolerance if final_stage else
                max(cfg.cost_tolerance, cfg.intermediate_cost_tolerance)
            ),
            gradient_tolerance=cfg.gradient_tolerance,
        )
        _apply_stage(problem, index, stage)
        for name in dead_cps:
            problem.block(name).constant = True
        for _ in range(2):
            try:
                result = solve(problem, options)
                break
            except RankDeficiencyError as e:
                if not all(
                    n.startswith(("rot_cp_", "vel_cp_")) for n in e.block_names
                ):
                    raise
                dead_cps.update(e.block_names)
                for name in e.block_names:
                    problem.block(name).constant = True
        else:
            raise RankDeficiencyError(sorted(dead_cps))
        current = reanchor_world(state_from_problem(problem, index, state))
        dropped = {
            g.name: int(getattr(g, "dropped", 0)) for g in problem.groups
            if getattr(g, "dropped", 0)
        }
        stages.append(
            StageLog(stage.name, result, snapshot_state(stage.name, current, result),
                     dropped)
        )
        bound_hits += [h for h in result.bound_hits if h not in bound_hits]
    final = reanchor_world(state_from_problem(problem, index, state))
    return BatchResult(
        state=final,
        stages=stages,
        residual_stats=residual_statistics(problem),
        bound_hits=bound_hits,
        # the intermediate stages are warm starts and may stop at their
        # iteration cap; convergence of the full optimization is the final
        # stage's convergence
        converged=stages[-1].result.converged,
    )


# ---------------------------------------------------------------------------
# end-to-end pipeline


@dataclass
class CalibrationResult:
    state: CalibrationState
    init_result: object  # InitResult
    batch: BatchResult
    stage_snapshots: list = field(default_factory=list)  # init + batch stages

    @property
    def converged(self) -> bool:
        return self.batch.converged


def calibrate(
    imu_streams,
    radar_streams,
    init_cfg: InitConfig | None = None,
    estimator_cfg: EstimatorConfig | None = None,
    schedule=DEFAULT_SCHEDULE,
) -> CalibrationResult:
    """Full pipeline: three-stage bootstrap followed by the staged batch."""
    init_cfg = init_cfg or InitConfig()
    estimator_cfg = estimator_cfg or EstimatorConfig()
    init_result = initialize(imu_streams, radar_streams, init_cfg)
    batch = run_batch(
        init_result.state, imu_streams, radar_streams, schedule, estimator_cfg
    )
    snapshots = list(init_result.stages) + [s.snapshot for s in batch.stages]
    return CalibrationResult(batch.state, init_result, batch, snapshots)
