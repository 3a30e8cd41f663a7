"""Calibration reports: solved parameters, per-stage logs, residual
statistics, and (when ground truth is available) error tables with rotation
errors decomposed per axis in degrees, translation errors per axis in
centimeters, and time-offset errors in milliseconds.
"""

from __future__ import annotations

import numpy as np

from ctcalib import lie
from ctcalib.io import SCHEMA_VERSION, parameters_from_dict, state_to_dict
from ctcalib.models import CalibrationState, GravityVector


# ---------------------------------------------------------------------------
# error tables


def _axis_angle_deg(r_est: np.ndarray, r_true: np.ndarray) -> list:
    """Per-axis decomposition (degrees) of the rotation taking truth to estimate."""
    return np.degrees(lie.log_so3(r_true.T @ r_est)).tolist()


def gravity_angle_deg(g_est: GravityVector, g_true: GravityVector) -> float:
    c = float(np.clip(g_est.direction @ g_true.direction, -1.0, 1.0))
    return float(np.degrees(np.arccos(c)))


def error_table(est: dict, truth: dict) -> dict:
    """Per-sensor calibration errors between two parameter snapshots.

    ``est`` and ``truth`` are parameter dicts in the report schema (see
    :func:`ctcalib.io.state_to_dict`).  Sensor rosters must match.
    """
    e_imus, e_radars, e_g = parameters_from_dict(est)
    t_imus, t_radars, t_g = parameters_from_dict(truth)
    if set(e_imus) != set(t_imus) or set(e_radars) != set(t_radars):
        raise ValueError("sensor rosters of estimate and truth differ")
    table = {"sensors": {}, "gravity_angle_deg": gravity_angle_deg(e_g, t_g)}
    for sid in sorted(e_imus) + sorted(e_radars):
        e = e_imus.get(sid) or e_radars[sid]
        t = t_imus.get(sid) or t_radars[sid]
        row = {
            "rotation_error_deg_xyz": _axis_angle_deg(
                e.extrinsics.rotation, t.extrinsics.rotation
            ),
            "translation_error_cm_xyz": (
                100.0 * (e.extrinsics.translation - t.extrinsics.translation)
            ).tolist(),
            "time_offset_error_ms": 1e3 * (e.time_offset.offset - t.time_offset.offset),
        }
        if sid in e_imus:
            row["gyro_bias_error"] = (
                e.intrinsics.gyro_bias - t.intrinsics.gyro_bias
            ).tolist()
            row["accel_bias_error"] = (
                e.intrinsics.accel_bias - t.intrinsics.accel_bias
            ).tolist()
            row["misalignment_error_deg_xyz"] = np.degrees(
                lie.log_so3(
                    t.intrinsics.gyro_misalignment.T @ e.intrinsics.gyro_misalignment
                )
            ).tolist()
        table["sensors"][sid] = row
    return table


def aggregate_error_tables(tables: list) -> dict:
    """Monte-Carlo aggregation: mean and standard deviation of the absolute
    errors across runs, in the same layout as a single error table."""
    if not tables:
        raise ValueError("need at least one error table")
    out = {"runs": len(tables), "sensors": {}}
    g = np.array([t["gravity_angle_deg"] for t in tables])
    out["gravity_angle_deg"] = {"mean": float(g.mean()), "std": float(g.std())}
    for sid in tables[0]["sensors"]:
        rows = [t["sensors"][sid] for t in tables]
        agg = {}
        for key in rows[0]:
            v = np.abs(np.array([r[key] for r in rows], dtype=float))
            agg[key] = {
                "mean": np.mean(v, axis=0).tolist(),
                "std": np.std(v, axis=0).tolist(),
            }
        out["sensors"][sid] = agg
    return out


# ---------------------------------------------------------------------------
# per-stage RMSE series (stage-convergence reporting)


def _snapshot_errors(snapshot: dict, truth: CalibrationState) -> dict:
    """Per-family RMSE of one stage snapshot against a truth state."""
    rot, trans, off = [], [], []
    for sid, p in truth.imus.items():
        s = snapshot["imus"][sid]
        r_est = lie.exp_so3(np.asarray(s["rotation_vector"]))
        rot.append(np.linalg.norm(lie.log_so3(p.extrinsics.rotation.T @ r_est)))
        trans.append(
            np.linalg.norm(np.asarray(s["translation"]) - p.extrinsics.translation)
        )
        off.append(s["time_offset"] - p.time_offset.offset)
    for sid, p in truth.radars.items():
        s = snapshot["radars"][sid]
        r_est = lie.exp_so3(np.asarray(s["rotation_vector"]))
        rot.append(np.linalg.norm(lie.log_so3(p.extrinsics.rotation.T @ r_est)))
        trans.append(
            np.linalg.norm(np.asarray(s["translation"]) - p.extrinsics.translation)
        )
        off.append(s["time_offset"] - p.time_offset.offset)
    g_est = np.asarray(snapshot["gravity"], dtype=float)
    g_est = g_est / np.linalg.norm(g_est)
    cosg = float(np.clip(g_est @ truth.gravity.direction, -1.0, 1.0))
    return {
        "rotation_deg": float(np.degrees(np.sqrt(np.mean(np.square(rot))))),
        "translation_cm": float(100.0 * np.sqrt(np.mean(np.square(trans)))),
        "time_offset_ms": float(1e3 * np.sqrt(np.mean(np.square(off)))),
        "gravity_deg": float(np.degrees(np.arccos(cosg))),
    }


def stage_rmse_series(snapshots: list, truth: CalibrationState) -> dict:
    """RMSE per parameter family after each pipeline stage.

    Returns ``{"stages": [names...], family: [rmse...], ...}``.
    """
    names = [s["stage"] for s in snapshots]
    rows = [_snapshot_errors(s, truth) for s in snapshots]
    out = {"stages": names}
    for key in rows[0]:
        out[key] = [r[key] for r in rows]
    return out


# ---------------------------------------------------------------------------
# full report


def _stage_log_dict(log) -> dict:
    return {
        "name": log.name,
        "converged": bool(log.result.converged),
        "message": log.result.message,
        "cost": float(log.result.cost),
        "iterations": [dict(it) for it in log.result.iterations],
        "dropped_measurements": dict(log.dropped),
        "snapshot": log.snapshot,
    }


def build_report(result, truth: CalibrationState | None = None,
                 schedule=None) -> dict:
    """Assemble the full calibration report from a pipeline result.

    ``result`` is :class:`ctcalib.estimator.CalibrationResult`.  When a truth
    state is supplied, the report gains an error table and a per-stage RMSE
    series.  When the stage ``schedule`` is supplied, parameter families it
    never frees are flagged as not estimated.
    """
    report = {
        "schema_version": SCHEMA_VERSION,
        "converged": bool(result.converged),
        "parameters": state_to_dict(result.state),
        "residual_statistics": result.batch.residual_stats,
        "bound_hits": list(result.batch.bound_hits),
        "init_stages": list(result.init_result.stages),
        "batch_stages": [_stage_log_dict(s) for s in result.batch.stages],
        "ego_velocity": {
            rid: {
                "scans": len(series),
                "valid": int(sum(e.valid for e in series)),
            }
            for rid, series in result.init_result.ego_velocities.items()
        },
    }
    if schedule is not None:
        from ctcalib.estimator import FAMILIES

        estimated = set()
        for stage in schedule:
            estimated |= set(stage.families)
        report["estimated_families"] = sorted(estimated)
        report["not_estimated_families"] = sorted(set(FAMILIES) - estimated)
    if truth is not None:
        report["error_table"] = error_table(
            report["parameters"], state_to_dict(truth)
        )
        report["stage_rmse"] = stage_rmse_series(result.stage_snapshots, truth)
    return report
