import numpy as np
import pytest
from dataclasses import replace

from ctcalib import lie, sim
from ctcalib.models import SensorExtrinsics
from ctcalib.splines import KnotGrid, R3Spline, So3Spline, constant_r3_spline
from ctcalib.sim import (
    ImuSimSpec,
    SimConfig,
    TruthTrajectory,
    default_sim_config,
    gen_targets,
    gen_trajectory,
    lemniscate_pose,
    simulate,
    synth_imu,
    zero_noise,
)


def static_config(**kw):
    return SimConfig(
        duration=5.0,
        half_width=0.0,
        height_amplitude=0.0,
        yaw_cycles=0.0,
        yaw_wobble=0.0,
        roll_amplitude=0.0,
        pitch_amplitude=0.0,
        imus=[ImuSimSpec("imu0", rate=100.0, gyro_noise=0.0, accel_noise=0.0)],
        radars=[],
        **kw,
    )


class TestTrajectory:
    def test_static_case(self):
        traj = gen_trajectory(static_config())
        t = np.linspace(0.0, 5.0, 20)
        assert np.allclose(traj.position(t), 0.0, atol=1e-12)
        assert np.allclose(traj.body_angular_velocity(t), 0.0, atol=1e-12)
        assert np.allclose(traj.gravity, [0, 0, -9.81])

    def test_closed_curve_periodicity(self):
        cfg = default_sim_config()
        p0, v0, _ = lemniscate_pose(cfg, 0.0)
        p1, v1, _ = lemniscate_pose(cfg, cfg.period)
        assert np.allclose(p0, p1, atol=1e-12)
        assert np.allclose(v0, v1, atol=1e-12)

    def test_angular_velocity_finite_difference(self):
        traj = gen_trajectory(default_sim_config(duration=10.0))
        h = 1e-6
        rng = np.random.default_rng(0)
        for t in rng.uniform(0.5, 9.5, size=30):
            fd = lie.log_so3(traj.orientation(t).T @ traj.orientation(t + h)) / h
            an = traj.body_angular_velocity(t + h / 2)
            assert np.linalg.norm(fd - an) < 1e-6 * max(1.0, np.linalg.norm(an))

    def test_velocity_is_position_derivative(self):
        traj = gen_trajectory(default_sim_config(duration=10.0))
        h = 1e-6
        for t in [1.0, 3.7, 8.2]:
            fd = (traj.position(t + h) - traj.position(t - h)) / (2 * h)
            assert np.allclose(fd, traj.linear_velocity(t), atol=1e-6)

    def test_world_anchored_at_zero(self):
        traj = gen_trajectory(default_sim_config(duration=10.0))
        assert np.allclose(traj.orientation(0.0), np.eye(3), atol=1e-12)
        assert np.allclose(traj.position(0.0), 0.0, atol=1e-12)

    def test_zero_period_rejected(self):
        with pytest.raises(ValueError):
            gen_trajectory(replace(default_sim_config(), period=0.0))


class TestTargets:
    def test_count_zero_empty(self):
        assert gen_targets(0, (1, 1, 1), np.random.default_rng(0)).shape == (0, 3)

    def test_determinism(self):
        a = gen_targets(50, (60, 60, 20), np.random.default_rng(7))
        b = gen_targets(50, (60, 60, 20), np.random.default_rng(7))
        assert np.array_equal(a, b)

    def test_law_of_large_numbers(self):
        box = np.array([60.0, 60.0, 20.0])
        pts = gen_targets(10_000, box, np.random.default_rng(1))
        sigma = box / np.sqrt(12.0) / np.sqrt(10_000)
        assert np.all(np.abs(pts.mean(axis=0)) < 3 * sigma)
        assert np.all(pts.min(axis=0) >= -box / 2) and np.all(pts.max(axis=0) <= box / 2)


class TestSynthImu:
    def test_static_measurements(self):
        ds = simulate(static_config())
        s = ds.imu_streams["imu0"]
        assert np.allclose(s.angular_rate, 0.0, atol=1e-12)
        assert np.allclose(s.specific_force, [0, 0, 9.81], atol=1e-10)

    def test_lever_arm_centripetal(self):
        # constant-rate rotation about z, zero linear velocity
        grid = KnotGrid(-0.5, 0.1, 60)
        rate = 0.8
        cps = np.array([lie.exp_so3([0, 0, rate * 0.1 * k]) for k in range(60)])
        traj = TruthTrajectory(
            So3Spline(grid, cps),
            constant_r3_spline(grid, [0.0, 0.0, 0.0]),
            np.array([0.0, 0.0, -9.81]),
        )
        arm = np.array([0.3, -0.2, 0.1])
        rng = np.random.default_rng(0)
        base = synth_imu(traj, ImuSimSpec("a", 50.0, 0.0, 0.0), 2.0, rng)
        offset = synth_imu(
            traj,
            ImuSimSpec("b", 50.0, 0.0, 0.0, extrinsics=SensorExtrinsics(np.eye(3), arm)),
            2.0,
            rng,
        )
        w = np.array([0.0, 0.0, rate])
        expected = lie.hat(w) @ lie.hat(w) @ arm
        diff = offset.specific_force - base.specific_force
        assert np.allclose(diff, expected, atol=1e-9)

    def test_out_of_support_rejected(self):
        traj = gen_trajectory(static_config())
        with pytest.raises(ValueError):
            synth_imu(traj, ImuSimSpec("x", 10.0), 100.0, np.random.default_rng(0))


class TestSynthRadar:
    def test_static_doppler_zero(self):
        cfg = static_config()
        cfg = replace(
            cfg,
            radars=[
                sim.RadarSimSpec(
                    "radar0", doppler_noise=0.0, range_noise=0.0, angle_noise=0.0
                )
            ],
        )
        ds = simulate(cfg)
        assert len(ds.radar_streams["radar0"]) > 0
        assert np.allclose(ds.radar_streams["radar0"].doppler, 0.0, atol=1e-12)

    def test_geometry_round_trip(self):
        # noiseless ranges must equal distance from radar to target
        ds = simulate(zero_noise(default_sim_config(duration=4.0)))
        traj, cfg = ds.trajectory, ds.config
        spec = cfg.radars[0]
        stream = ds.radar_streams[spec.sensor_id]
        t = stream.t[:50] + spec.time_offset
        rot = traj.orientation(t)
        pos = traj.position(t) + np.einsum("nij,j->ni", rot, spec.extrinsics.translation)
        from ctcalib.models import radar_target_position

        p_local = radar_target_position(stream.range_m[:50], stream.azimuth[:50],
                                        stream.elevation[:50])
        p_world = np.einsum("nij,nj->ni", rot @ spec.extrinsics.rotation, p_local) + pos
        d = np.linalg.norm(ds.targets[:, None, :] - p_world[None, :, :], axis=-1).min(axis=0)
        assert np.max(d) < 1e-9


class TestDataset:
    def test_determinism_bitwise(self):
        a = simulate(default_sim_config(duration=3.0))
        b = simulate(default_sim_config(duration=3.0))
        for sid in a.imu_streams:
            assert np.array_equal(a.imu_streams[sid].angular_rate,
                                  b.imu_streams[sid].angular_rate)
            assert np.array_equal(a.imu_streams[sid].specific_force,
                                  b.imu_streams[sid].specific_force)
        for sid in a.radar_streams:
            assert np.array_equal(a.radar_streams[sid].doppler, b.radar_streams[sid].doppler)
            assert np.array_equal(a.radar_streams[sid].range_m, b.radar_streams[sid].range_m)

    def test_excitation_floors(self):
        ds = simulate(default_sim_config(duration=10.0))
        for rms in sim.excitation_summary(ds).values():
            assert np.all(rms[0] > 0.05)  # gyro rad/s
            assert np.all(rms[1] > 0.1)  # accel m/s^2

    def test_truth_state_center_balanced(self):
        ds = simulate(default_sim_config(duration=3.0))
        logs = sum(lie.log_so3(p.extrinsics.rotation) for p in ds.truth.imus.values())
        trans = sum(p.extrinsics.translation for p in ds.truth.imus.values())
        offs = sum(p.time_offset.offset for p in ds.truth.imus.values())
        assert np.linalg.norm(logs) < 1e-12
        assert np.linalg.norm(trans) < 1e-12
        assert abs(offs) < 1e-12
