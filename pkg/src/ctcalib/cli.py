"""Command-line orchestration: dataset simulation, calibration, evaluation
against ground truth, plot emission, and the knot-spacing sweep.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 convergence
failure.  Failures also leave a machine-readable ``error.json`` in the output
directory.
"""

from __future__ import annotations

import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from ctcalib import io as cio
from ctcalib import plots, report as crep, sim
from ctcalib.estimator import EstimatorConfig, calibrate, schedule_from_names
from ctcalib.initialization import InitConfig, InitializationError
from ctcalib.solver import RankDeficiencyError

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CONVERGENCE = 4


def _fail(output, code: int, kind: str, message: str):
    payload = {"error": message, "kind": kind}
    if output is not None:
        out = Path(output)
        out.mkdir(parents=True, exist_ok=True)
        cio.write_json(out / "error.json", payload)
    click.echo(f"error ({kind}): {message}", err=True)
    sys.exit(code)


def _load_config(path, output):
    if path is None:
        return cio.RunConfig()
    try:
        return cio.load_config(path)
    except cio.ConfigError as e:
        _fail(output, EXIT_CONFIG, "config", str(e))


def _sim_config(cfg: cio.RunConfig, seed=None, duration=None) -> sim.SimConfig:
    """Simulation setup from the run config; defaults to the bundled
    three-IMU / three-radar suite when the config lists no sensors."""
    sc = sim.default_sim_config(
        seed=cfg.seed if seed is None else seed,
        duration=duration if duration is not None else cfg.duration,
    )
    sc = replace(sc, knot_spacing=cfg.knot_spacing)
    if cfg.sensors:
        default_by_kind = {"imu": sc.imus, "radar": sc.radars}
        imus, radars = [], []
        for k, s in enumerate(cfg.imu_entries()):
            base = default_by_kind["imu"][k % len(default_by_kind["imu"])]
            imus.append(
                replace(
                    base,
                    sensor_id=s.sensor_id,
                    rate=s.rate or base.rate,
                    gyro_noise=s.gyro_sigma,
                    accel_noise=s.accel_sigma,
                )
            )
        for k, s in enumerate(cfg.radar_entries()):
            base = default_by_kind["radar"][k % len(default_by_kind["radar"])]
            radars.append(
                replace(
                    base,
                    sensor_id=s.sensor_id,
                    rate=s.rate or base.rate,
                    doppler_noise=s.doppler_sigma,
                )
            )
        sc = replace(sc, imus=imus, radars=radars)
    return sc


@click.group()
def main():
    """Continuous-time multi-radar / multi-IMU spatiotemporal calibration."""


@main.command()
@click.option("--config", type=click.Path(exists=True), default=None,
              help="Run configuration (YAML). Defaults to the bundled suite.")
@click.option("--output", required=True, type=click.Path(), help="Output directory.")
@click.option("--seed", type=int, default=None, help="Override the RNG seed.")
@click.option("--duration", type=float, default=None, help="Override duration [s].")
@click.option("--threads", type=int, default=1, help="Worker threads (reserved).")
def simulate(config, output, seed, duration, threads):
    """Generate a synthetic dataset: per-sensor CSVs plus ground-truth JSON."""
    cfg = _load_config(config, output)
    try:
        sc = _sim_config(cfg, seed=seed, duration=duration)
        ds = sim.simulate(sc)
    except ValueError as e:
        _fail(output, EXIT_CONFIG, "config", str(e))
    out = Path(output)
    out.mkdir(parents=True, exist_ok=True)
    for sid, stream in ds.imu_streams.items():
        cio.write_imu_csv(out / f"{sid}.csv", stream)
    for sid, stream in ds.radar_streams.items():
        cio.write_radar_csv(out / f"{sid}.csv", stream)
    cio.write_json(out / "truth.json", cio.state_to_dict(ds.truth))
    cio.save_state_npz(out / "truth_state.npz", ds.truth)
    roster = {
        "seed": int(sc.seed),
        "duration": float(sc.duration),
        "knot_spacing": float(sc.knot_spacing),
        "sensors": [
            {"id": s.sensor_id, "kind": "imu", "path": f"{s.sensor_id}.csv"}
            for s in sc.imus
        ] + [
            {"id": s.sensor_id, "kind": "radar", "path": f"{s.sensor_id}.csv"}
            for s in sc.radars
        ],
    }
    cio.write_json(out / "dataset.json", roster)
    click.echo(f"wrote {len(ds.imu_streams)} IMU and {len(ds.radar_streams)} "
               f"radar CSVs to {out}")


def _run_calibration(cfg: cio.RunConfig, imu_streams, radar_streams, output):
    try:
        schedule = schedule_from_names(cfg.stages)
    except ValueError as e:
        _fail(output, EXIT_CONFIG, "config", str(e))
    init_cfg = InitConfig(
        knot_spacing=cfg.knot_spacing,
        outlier_fraction=cfg.outlier_fraction,
        seed=cfg.seed,
    )
    est_cfg = EstimatorConfig(
        cauchy_scale=cfg.cauchy_scale, max_iterations=cfg.max_iterations
    )
    try:
        result = calibrate(imu_streams, radar_streams, init_cfg, est_cfg, schedule)
    except (InitializationError, RankDeficiencyError) as e:
        _fail(output, EXIT_CONVERGENCE, "convergence", str(e))
    return result, schedule


@main.command(name="calibrate")
@click.option("--config", required=True, type=click.Path(exists=True),
              help="Run configuration (YAML) listing sensor CSV paths.")
@click.option("--output", required=True, type=click.Path(), help="Output directory.")
@click.option("--seed", type=int, default=None, help="Override the RNG seed.")
@click.option("--truth", type=click.Path(exists=True), default=None,
              help="Ground-truth JSON for an error table in the report.")
@click.option("--threads", type=int, default=1, help="Worker threads (reserved).")
def calibrate_cmd(config, output, seed, truth, threads):
    """Run the full calibration pipeline on a dataset."""
    cfg = _load_config(config, output)
    if seed is not None:
        cfg.seed = seed
    if not cfg.imu_entries() or not cfg.radar_entries():
        _fail(output, EXIT_CONFIG, "config",
              "calibration needs at least one IMU and one radar sensor entry")
    try:
        imu_streams, radar_streams = cio.load_streams(cfg)
    except cio.DataError as e:
        _fail(output, EXIT_DATA, "data", str(e))
    truth_state = None  # full state (.npz) enables the per-stage RMSE series
    truth_params = None  # parameter-only JSON still yields an error table
    if truth is not None:
        try:
            if Path(truth).suffix == ".npz":
                truth_state = cio.load_state_npz(truth)
            else:
                truth_params = cio.read_json(truth)
                cio.parameters_from_dict(truth_params)  # validate early
        except cio.DataError as e:
            _fail(output, EXIT_DATA, "data", str(e))
    t0 = time.time()
    result, schedule = _run_calibration(cfg, imu_streams, radar_streams, output)
    wall = time.time() - t0
    out = Path(output)
    out.mkdir(parents=True, exist_ok=True)
    rep = crep.build_report(result, truth_state, schedule)
    if truth_params is not None:
        rep["error_table"] = crep.error_table(rep["parameters"], truth_params)
    rep["wall_time_s"] = wall
    cio.write_json(out / "report.json", rep)
    cio.save_state_npz(out / "state.npz", result.state)
    res = plots.residual_arrays(result.state, imu_streams, radar_streams)
    np.savez(out / "residuals.npz", **res)
    if not result.converged:
        _fail(output, EXIT_CONVERGENCE, "convergence",
              "batch optimization did not converge (see report.json)")
    click.echo(f"calibration converged in {wall:.1f}s; report at {out/'report.json'}")


@main.command()
@click.option("--report", "reports", multiple=True, required=True,
              type=click.Path(exists=True), help="Calibration report JSON(s).")
@click.option("--truth", required=True, type=click.Path(exists=True),
              help="Ground-truth parameter JSON.")
@click.option("--output", type=click.Path(), default=None,
              help="Directory for evaluation.json (default: print only).")
def evaluate(reports, truth, output):
    """Error table per report; with several reports, mean/std aggregation."""
    try:
        truth_d = cio.read_json(truth)
        tables = []
        for rp in reports:
            rep = cio.read_json(rp)
            params = rep.get("parameters", rep)
            tables.append(crep.error_table(params, truth_d))
    except (cio.DataError, ValueError) as e:
        _fail(output, EXIT_DATA, "data", str(e))
    payload = {"tables": tables}
    if len(tables) > 1:
        payload["aggregate"] = crep.aggregate_error_tables(tables)
    if output is not None:
        out = Path(output)
        out.mkdir(parents=True, exist_ok=True)
        cio.write_json(out / "evaluation.json", payload)
        click.echo(f"wrote {out/'evaluation.json'}")
    click.echo(json.dumps(payload, indent=2, sort_keys=True))


@main.command(name="plot")
@click.option("--run", required=True, type=click.Path(exists=True),
              help="Output directory of a `calibrate` run.")
@click.option("--output", type=click.Path(), default=None,
              help="Where to put figures (default: the run directory).")
@click.option("--sample-rate", type=float, default=100.0,
              help="Spline sampling rate [Hz] for curve exports.")
def plot_cmd(run, output, sample_rate):
    """Render figures and CSV plot data from a calibration run directory."""
    run = Path(run)
    out = Path(output) if output else run
    out.mkdir(parents=True, exist_ok=True)
    try:
        rep = cio.read_json(run / "report.json")
        state = cio.load_state_npz(run / "state.npz")
    except cio.DataError as e:
        _fail(output, EXIT_DATA, "data", str(e))
    written = []
    written += list(plots.export_spline_csv(state, out, sample_rate).values())
    written.append(plots.save_spline_plot(state, out / "splines.png", sample_rate))
    written.append(plots.save_cost_plot(rep["batch_stages"], out / "cost.png"))
    if "stage_rmse" in rep:
        written.append(
            plots.save_stage_rmse_plot(rep["stage_rmse"], out / "stage_rmse.png")
        )
    res_path = run / "residuals.npz"
    if res_path.exists():
        with np.load(res_path) as z:
            residuals = {k: z[k] for k in z.files}
        written.append(
            plots.save_residual_histograms(residuals, out / "residuals.png")
        )
    for p in written:
        click.echo(f"wrote {p}")


@main.command(name="sweep-knots")
@click.option("--output", required=True, type=click.Path(), help="Output directory.")
@click.option("--seed", type=int, default=0)
@click.option("--duration", type=float, default=20.0, help="Dataset length [s].")
@click.option("--spacings", default="0.02,0.04,0.08,0.10,0.14,0.18",
              help="Comma-separated knot spacings [s].")
def sweep_knots(output, seed, duration, spacings):
    """Calibration error versus estimator knot spacing on one dataset."""
    try:
        values = [float(x) for x in spacings.split(",") if x.strip()]
        if not values or any(v <= 0 for v in values):
            raise ValueError("spacings must be positive numbers")
    except ValueError as e:
        _fail(output, EXIT_CONFIG, "config", str(e))
    out = Path(output)
    out.mkdir(parents=True, exist_ok=True)
    # add high-frequency angular excitation (with a matching fine truth
    # grid) so the coarse end of the sweep actually hits the spline's
    # representability limit instead of the noise floor
    ds = sim.simulate(replace(
        sim.default_sim_config(seed=seed, duration=duration),
        flutter_amplitude=0.15,
        flutter_hz=2.5,
        knot_spacing=0.02,
    ))
    truth_d = cio.state_to_dict(ds.truth)
    rows = []
    for dt in values:
        t0 = time.time()
        try:
            result = calibrate(
                ds.imu_streams, ds.radar_streams, InitConfig(knot_spacing=dt)
            )
            table = crep.error_table(cio.state_to_dict(result.state), truth_d)
            rot = np.sqrt(np.mean(np.square([
                r["rotation_error_deg_xyz"] for r in table["sensors"].values()
            ])))
            trans = np.sqrt(np.mean(np.square([
                r["translation_error_cm_xyz"] for r in table["sensors"].values()
            ])))
            off = np.sqrt(np.mean(np.square([
                r["time_offset_error_ms"] for r in table["sensors"].values()
            ])))
            rows.append({
                "knot_spacing_s": dt,
                "rotation_rmse_deg": float(rot),
                "translation_rmse_cm": float(trans),
                "time_offset_rmse_ms": float(off),
                "converged": bool(result.converged),
                "wall_time_s": time.time() - t0,
            })
        except (InitializationError, RankDeficiencyError) as e:
            rows.append({"knot_spacing_s": dt, "error": str(e)})
        click.echo(f"knot spacing {dt*1e3:.0f} ms: {rows[-1]}")
    cio.write_json(out / "knot_sweep.json", rows)
    with open(out / "knot_sweep.csv", "w") as f:
        keys = ["knot_spacing_s", "rotation_rmse_deg", "translation_rmse_cm",
                "time_offset_rmse_ms"]
        f.write(",".join(keys) + "\n")
        for r in rows:
            f.write(",".join(format(r.get(k, float("nan")), ".17g") for k in keys) + "\n")
    click.echo(f"wrote {out/'knot_sweep.csv'}")


if __name__ == "__main__":
    main()
