import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from ctcalib import io as cio
from ctcalib import plots, report as crep, sim
from ctcalib.cli import EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_DATA, main


@pytest.fixture(scope="module")
def small_dataset():
    return sim.simulate(sim.default_sim_config(seed=7, duration=3.0))


runner = CliRunner()


class TestCsvRoundTrip:
    def test_imu_bit_exact(self, small_dataset, tmp_path):
        stream = small_dataset.imu_streams["imu0"]
        p = tmp_path / "imu.csv"
        cio.write_imu_csv(p, stream)
        back = cio.read_imu_csv(p)
        assert np.array_equal(back.t, stream.t)
        assert np.array_equal(back.angular_rate, stream.angular_rate)
        assert np.array_equal(back.specific_force, stream.specific_force)

    def test_radar_bit_exact(self, small_dataset, tmp_path):
        stream = small_dataset.radar_streams["radar1"]
        p = tmp_path / "radar.csv"
        cio.write_radar_csv(p, stream)
        back = cio.read_radar_csv(p)
        for name in ("t", "scan_id", "range_m", "azimuth", "elevation", "doppler"):
            assert np.array_equal(getattr(back, name), getattr(stream, name))

    def test_wrong_header_rejected(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(cio.DataError, match="header"):
            cio.read_imu_csv(p)

    def test_state_npz_round_trip(self, small_dataset, tmp_path):
        p = tmp_path / "state.npz"
        cio.save_state_npz(p, small_dataset.truth)
        back = cio.load_state_npz(p)
        assert np.array_equal(
            back.rotation_spline.control_points,
            small_dataset.truth.rotation_spline.control_points,
        )
        assert np.allclose(
            back.imus["imu1"].extrinsics.rotation,
            small_dataset.truth.imus["imu1"].extrinsics.rotation,
            atol=1e-15,
        )
        assert back.radars["radar2"].time_offset.offset == pytest.approx(
            small_dataset.truth.radars["radar2"].time_offset.offset
        )


class TestConfig:
    def write(self, tmp_path, text):
        p = tmp_path / "run.yaml"
        p.write_text(text)
        return p

    def test_unknown_top_key(self, tmp_path):
        p = self.write(tmp_path, "seed: 1\nwhatever: 2\n")
        with pytest.raises(cio.ConfigError, match="unknown config keys"):
            cio.load_config(p)

    def test_unknown_sensor_key(self, tmp_path):
        p = self.write(
            tmp_path, "sensors:\n  - {id: a, kind: imu, bogus: 1}\n"
        )
        with pytest.raises(cio.ConfigError, match="unknown sensor keys"):
            cio.load_config(p)

    def test_bad_kind(self, tmp_path):
        p = self.write(tmp_path, "sensors:\n  - {id: a, kind: lidar}\n")
        with pytest.raises(cio.ConfigError, match="kind"):
            cio.load_config(p)

    def test_duplicate_ids(self, tmp_path):
        p = self.write(
            tmp_path,
            "sensors:\n  - {id: a, kind: imu}\n  - {id: a, kind: radar}\n",
        )
        with pytest.raises(cio.ConfigError, match="duplicate"):
            cio.load_config(p)

    def test_valid_config(self, tmp_path):
        p = self.write(
            tmp_path,
            "seed: 3\nknot_spacing: 0.1\nstages: [BO1, BO2, BO3]\n"
            "sensors:\n  - {id: a, kind: imu, path: a.csv, gyro_sigma: 1e-3}\n",
        )
        cfg = cio.load_config(p)
        assert cfg.seed == 3
        assert cfg.knot_spacing == 0.1
        assert cfg.stages == ("BO1", "BO2", "BO3")
        assert cfg.sensors[0].gyro_sigma == 1e-3


class TestSimulateCommand:
    def test_writes_roster_and_is_deterministic(self, tmp_path):
        args = ["simulate", "--duration", "2", "--seed", "5"]
        r1 = runner.invoke(main, args + ["--output", str(tmp_path / "a")])
        r2 = runner.invoke(main, args + ["--output", str(tmp_path / "b")])
        assert r1.exit_code == 0 and r2.exit_code == 0
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert names == sorted(
            [f"imu{i}.csv" for i in range(3)]
            + [f"radar{i}.csv" for i in range(3)]
            + ["truth.json", "truth_state.npz", "dataset.json"]
        )
        for name in names:
            assert (tmp_path / "a" / name).read_bytes() == (
                tmp_path / "b" / name
            ).read_bytes()

    def test_zero_duration_is_config_error(self, tmp_path):
        r = runner.invoke(
            main,
            ["simulate", "--duration", "0", "--output", str(tmp_path / "o")],
        )
        assert r.exit_code == EXIT_CONFIG
        assert json.loads((tmp_path / "o" / "error.json").read_text())["kind"] == "config"


class TestCalibrateExitCodes:
    def test_missing_data_file(self, tmp_path):
        cfg = tmp_path / "run.yaml"
        cfg.write_text(
            "sensors:\n"
            "  - {id: imu0, kind: imu, path: nope.csv}\n"
            "  - {id: radar0, kind: radar, path: nope2.csv}\n"
        )
        r = runner.invoke(
            main, ["calibrate", "--config", str(cfg), "--output", str(tmp_path / "o")]
        )
        assert r.exit_code == EXIT_DATA

    def test_roster_without_radar_is_config_error(self, tmp_path):
        cfg = tmp_path / "run.yaml"
        cfg.write_text("sensors:\n  - {id: imu0, kind: imu, path: a.csv}\n")
        r = runner.invoke(
            main, ["calibrate", "--config", str(cfg), "--output", str(tmp_path / "o")]
        )
        assert r.exit_code == EXIT_CONFIG

    def test_empty_radar_stream_is_convergence_error(self, small_dataset, tmp_path):
        cio.write_imu_csv(tmp_path / "imu0.csv", small_dataset.imu_streams["imu0"])
        (tmp_path / "radar0.csv").write_text(
            "t,scan_id,range,azimuth,elevation,doppler\n"
        )
        cfg = tmp_path / "run.yaml"
        cfg.write_text(
            "sensors:\n"
            "  - {id: imu0, kind: imu, path: imu0.csv}\n"
            "  - {id: radar0, kind: radar, path: radar0.csv}\n"
        )
        r = runner.invoke(
            main, ["calibrate", "--config", str(cfg), "--output", str(tmp_path / "o")]
        )
        assert r.exit_code == EXIT_CONVERGENCE
        err = json.loads((tmp_path / "o" / "error.json").read_text())
        assert "unobservable" in err["error"]


class TestEvaluate:
    def test_truth_vs_truth_is_zero(self, small_dataset):
        d = cio.state_to_dict(small_dataset.truth)
        table = crep.error_table(d, d)
        assert table["gravity_angle_deg"] == pytest.approx(0.0, abs=1e-9)
        for row in table["sensors"].values():
            assert np.allclose(row["rotation_error_deg_xyz"], 0.0, atol=1e-9)
            assert np.allclose(row["translation_error_cm_xyz"], 0.0, atol=1e-12)
            assert row["time_offset_error_ms"] == pytest.approx(0.0, abs=1e-12)

    def test_injected_x_offset_reported_in_cm(self, small_dataset):
        d = cio.state_to_dict(small_dataset.truth)
        est = json.loads(json.dumps(d))
        est["radars"]["radar0"]["extrinsics"]["translation_xyz"][0] += 0.01
        table = crep.error_table(est, d)
        assert table["sensors"]["radar0"]["translation_error_cm_xyz"][0] == (
            pytest.approx(1.0, abs=1e-9)
        )

    def test_cli_aggregation(self, small_dataset, tmp_path):
        d = cio.state_to_dict(small_dataset.truth)
        cio.write_json(tmp_path / "truth.json", d)
        for k, dx in enumerate([0.01, 0.03]):
            est = json.loads(json.dumps(d))
            est["imus"]["imu0"]["extrinsics"]["translation_xyz"][0] += dx
            cio.write_json(tmp_path / f"rep{k}.json", {"parameters": est})
        r = runner.invoke(
            main,
            [
                "evaluate",
                "--report", str(tmp_path / "rep0.json"),
                "--report", str(tmp_path / "rep1.json"),
                "--truth", str(tmp_path / "truth.json"),
                "--output", str(tmp_path / "out"),
            ],
        )
        assert r.exit_code == 0
        agg = json.loads((tmp_path / "out" / "evaluation.json").read_text())["aggregate"]
        x = agg["sensors"]["imu0"]["translation_error_cm_xyz"]
        assert x["mean"][0] == pytest.approx(2.0, abs=1e-9)
        assert x["std"][0] == pytest.approx(1.0, abs=1e-9)

    def test_roster_mismatch_rejected(self, small_dataset):
        d = cio.state_to_dict(small_dataset.truth)
        est = json.loads(json.dumps(d))
        del est["imus"]["imu0"]
        with pytest.raises(ValueError, match="roster"):
            crep.error_table(est, d)


class TestPlotArtifacts:
    def test_spline_sample_count_and_csv(self, small_dataset, tmp_path):
        state = small_dataset.truth
        rate = 50.0
        t, quats, vels = plots.spline_samples(state, rate)
        grid = state.rotation_spline.grid
        assert len(t) == int(round((grid.end_time - grid.start_time) * rate)) + 1
        assert np.allclose(np.linalg.norm(quats, axis=1), 1.0, atol=1e-12)
        paths = plots.export_spline_csv(state, tmp_path, rate)
        rot = np.loadtxt(paths["rotation_spline.csv"], delimiter=",", skiprows=1)
        assert rot.shape == (len(t), 5)
        cps = np.loadtxt(
            paths["velocity_control_points.csv"], delimiter=",", skiprows=1
        )
        assert np.array_equal(cps[:, 1:], state.velocity_spline.control_points)

    def test_plot_command_from_run_dir(self, small_dataset, tmp_path):
        run = tmp_path / "run"
        run.mkdir()
        cio.save_state_npz(run / "state.npz", small_dataset.truth)
        cio.write_json(
            run / "report.json",
            {
                "batch_stages": [
                    {
                        "name": "BO1",
                        "iterations": [
                            {"iteration": 0, "cost": 10.0},
                            {"iteration": 1, "cost": 1.0},
                        ],
                    }
                ]
            },
        )
        np.savez(run / "residuals.npz", gyro_imu0=np.random.default_rng(0).normal(size=100))
        r = runner.invoke(main, ["plot", "--run", str(run)])
        assert r.exit_code == 0
        for name in ("splines.png", "cost.png", "residuals.png",
                     "rotation_spline.csv", "velocity_spline.csv"):
            assert (run / name).exists()

    def test_noiseless_residual_histogram_single_bin(self, tmp_path):
        # all-zero residuals collapse into one occupied histogram bin
        p = plots.save_residual_histograms({"gyro": np.zeros(500)}, tmp_path / "h.png")
        assert p.exists()


class TestSparsityExport:
    def test_block_magnitude_overlap_band(self, small_dataset, tmp_path):
        # a cubic-spline factor touching 4 consecutive control points produces
        # the banded 4-block overlap structure among the control points
        from ctcalib.estimator import EstimatorConfig, build_batch_problem

        ds = small_dataset
        problem, _ = build_batch_problem(
            ds.truth, ds.imu_streams, ds.radar_streams, EstimatorConfig()
        )
        labels, mags = plots.block_magnitudes(problem)
        assert len(labels) == len(problem.blocks)
        rot_rows = [k for k, n in enumerate(labels) if n.startswith("rot_cp_")]
        n_rot = len(rot_rows)
        # interior knots only: the truth grid pads 0.4 s (5 knots) of support
        # beyond the measurement interval on both sides
        for a in range(8, n_rot - 12):
            for b in range(n_rot):
                m = mags[rot_rows[a], rot_rows[b]]
                if abs(a - b) <= 3:
                    assert m > 0.0
                else:
                    assert m == 0.0
        p = plots.export_sparsity_csv(labels, mags, tmp_path / "sparsity.csv")
        assert p.exists()
        assert plots.save_sparsity_plot(labels, mags, tmp_path / "sparsity.png").exists()


class TestScheduleFlags:
    def test_partial_schedule_flagged(self):
        from ctcalib.estimator import schedule_from_names

        schedule = schedule_from_names(["BO1"])

        class _Init:
            stages = []
            ego_velocities = {}

        class _Batch:
            residual_stats = {}
            bound_hits = []
            stages = []

        class _Result:
            init_result = _Init()
            batch = _Batch()
            converged = True
            stage_snapshots = []

        d = sim.simulate(sim.default_sim_config(seed=0, duration=2.0))
        _Result.state = d.truth
        rep = crep.build_report(_Result(), schedule=schedule)
        assert rep["not_estimated_families"] == ["intrinsic", "temporal"]
        assert "control_points" in rep["estimated_families"]

    def test_unknown_stage_name(self):
        from ctcalib.estimator import schedule_from_names

        with pytest.raises(ValueError, match="unknown stages"):
            schedule_from_names(["BO9"])
