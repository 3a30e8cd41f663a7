import numpy as np
import pytest
from dataclasses import replace

from ctcalib import lie, sim
from ctcalib.factors import register_state_blocks
from ctcalib.initialization import (
    EgoVelocityEstimate,
    InitConfig,
    InitializationError,
    PreintExtrinsicsGroup,
    PreintSplineGroup,
    data_grid,
    ego_velocity_series,
    init_extrinsics_gravity,
    init_rotation_spline,
    initialize,
    preintegration_triples,
)
from ctcalib.models import ImuIntrinsics, ImuStream, SensorExtrinsics
from ctcalib.solver import (
    ParameterBlock,
    Problem,
    _assemble,
    _retract_all,
    finite_difference_slots,
    problem_cost,
)
from ctcalib.splines import KnotGrid, So3Spline


def oracle_config(duration=6.0, seed=3):
    """Noiseless dataset matching the bootstrap's model assumptions: zero
    time offsets, identity IMU intrinsics.  Radar rates interleave so the
    velocity spline is densely constrained between scans."""
    cfg = sim.zero_noise(sim.default_sim_config(seed=seed, duration=duration))
    return replace(
        cfg,
        imus=[
            replace(s, time_offset=0.0, intrinsics=ImuIntrinsics()) for s in cfg.imus
        ],
        radars=[
            replace(s, time_offset=0.0, rate=r)
            for s, r in zip(cfg.radars, [9.7, 10.0, 10.3])
        ],
    )


@pytest.fixture(scope="module")
def oracle():
    ds = sim.simulate(oracle_config())
    result = initialize(ds.imu_streams, ds.radar_streams, InitConfig())
    return ds, result


def rot_angle_deg(r_a, r_b):
    return np.degrees(np.linalg.norm(lie.log_so3(r_a.T @ r_b)))


class TestFullPipelineOracle:
    def test_gravity_direction(self, oracle):
        ds, res = oracle
        cosang = res.state.gravity.direction @ ds.truth.gravity.direction
        assert np.degrees(np.arccos(np.clip(cosang, -1, 1))) < 0.1

    def test_extrinsics(self, oracle):
        ds, res = oracle
        for sid, truth in ds.truth.imus.items():
            est = res.state.imus[sid]
            assert rot_angle_deg(est.extrinsics.rotation, truth.extrinsics.rotation) < 0.05
            assert (
                np.linalg.norm(est.extrinsics.translation - truth.extrinsics.translation)
                < 0.01
            )
        for rid, truth in ds.truth.radars.items():
            est = res.state.radars[rid]
            assert rot_angle_deg(est.extrinsics.rotation, truth.extrinsics.rotation) < 0.2
            assert (
                np.linalg.norm(est.extrinsics.translation - truth.extrinsics.translation)
                < 0.01
            )

    def test_velocity_spline_rms(self, oracle):
        ds, res = oracle
        t = np.linspace(0.1, 5.8, 400)
        err = res.state.velocity_spline.eval(t) - ds.truth.velocity_spline.eval(t)
        assert np.sqrt(np.mean(err**2)) < 1e-3

    def test_rotation_spline_rates(self, oracle):
        ds, res = oracle
        t = np.linspace(0.1, 5.8, 400)
        err = res.state.rotation_spline.body_angular_velocity(
            t
        ) - ds.truth.rotation_spline.body_angular_velocity(t)
        assert np.max(np.abs(err)) < 1e-4

    def test_center_invariants(self, oracle):
        _, res = oracle
        sum_log = sum(lie.log_so3(p.extrinsics.rotation) for p in res.state.imus.values())
        sum_p = sum(p.extrinsics.translation for p in res.state.imus.values())
        assert np.max(np.abs(sum_log)) < 1e-8
        assert np.max(np.abs(sum_p)) < 1e-8

    def test_stage_snapshots_are_jsonable(self, oracle):
        import json

        _, res = oracle
        assert [s["stage"] for s in res.stages] == [
            "init-rotation", "init-gravity-extrinsics", "init-velocity",
        ]
        for snap in res.stages:
            json.dumps(snap)
            assert snap["converged"]

    def test_offsets_zero_intrinsics_identity(self, oracle):
        _, res = oracle
        for p in res.state.imus.values():
            assert p.time_offset.offset == 0.0
            assert np.allclose(p.intrinsics.gyro_bias, 0.0)
            assert np.allclose(p.intrinsics.gyro_misalignment, np.eye(3))
        for p in res.state.radars.values():
            assert p.time_offset.offset == 0.0


class TestRotationStage:
    def test_single_imu_identity(self):
        cfg = sim.zero_noise(
            replace(
                sim.SimConfig(duration=4.0, seed=1),
                imus=[sim.ImuSimSpec("imu0", rate=200.0)],
                radars=[],
            )
        )
        ds = sim.simulate(cfg)
        grid = data_grid(ds.imu_streams, {}, 0.08)
        spline, rots, result = init_rotation_spline(ds.imu_streams, grid, InitConfig())
        assert result.converged
        assert rot_angle_deg(rots["imu0"], np.eye(3)) < 1e-4
        t = np.linspace(0.1, 3.8, 200)
        err = spline.body_angular_velocity(t) - ds.trajectory.body_angular_velocity(t)
        assert np.max(np.abs(err)) < 1e-4

    def test_two_imu_relative_rotation(self):
        a = np.array([0.12, -0.07, 0.2])
        cfg = sim.zero_noise(
            replace(
                sim.SimConfig(duration=4.0, seed=2),
                imus=[
                    sim.ImuSimSpec(
                        "imu0", rate=200.0, extrinsics=SensorExtrinsics(lie.exp_so3(a))
                    ),
                    sim.ImuSimSpec(
                        "imu1", rate=200.0, extrinsics=SensorExtrinsics(lie.exp_so3(-a))
                    ),
                ],
                radars=[],
            )
        )
        ds = sim.simulate(cfg)
        grid = data_grid(ds.imu_streams, {}, 0.08)
        _, rots, _ = init_rotation_spline(ds.imu_streams, grid, InitConfig())
        q_true = lie.exp_so3(a).T @ lie.exp_so3(-a)
        assert rot_angle_deg(rots["imu0"].T @ rots["imu1"], q_true) < 0.05
        sum_log = lie.log_so3(rots["imu0"]) + lie.log_so3(rots["imu1"])
        assert np.max(np.abs(sum_log)) < 1e-8

    def test_zero_gyro_reports_degeneracy(self):
        t = np.arange(0.0, 3.0, 0.005)
        stream = ImuStream(t, np.zeros((len(t), 3)), np.zeros((len(t), 3)))
        grid = data_grid({"imu0": stream}, {}, 0.1)
        with pytest.raises(InitializationError, match="unobservable"):
            init_rotation_spline({"imu0": stream}, grid, InitConfig())

    def test_grid_not_covering_data_rejected(self):
        t = np.arange(0.0, 3.0, 0.005)
        stream = ImuStream(t, np.ones((len(t), 3)), np.zeros((len(t), 3)))
        with pytest.raises(InitializationError, match="not covered"):
            init_rotation_spline({"imu0": stream}, KnotGrid(2.0, 0.1, 10), InitConfig())


def _oracle_triples(ds, cfg=None):
    cfg = cfg or InitConfig()
    imu_rots = {sid: p.extrinsics.rotation for sid, p in ds.truth.imus.items()}
    ego = {
        rid: ego_velocity_series(s, cfg) for rid, s in ds.radar_streams.items()
    }
    triples, skipped = preintegration_triples(
        ds.truth.rotation_spline, imu_rots, ds.imu_streams, ego, cfg
    )
    return triples, skipped, ego


class TestPreintegration:
    def test_stage2_jacobians_match_finite_differences(self, oracle):
        ds, _ = oracle
        triples, _, _ = _oracle_triples(ds)
        rng = np.random.default_rng(0)
        sub = [t for t in triples if t.radar_id == "radar0"][:40]
        problem = Problem()
        g_id = problem.add_block(
            ParameterBlock("gravity_free", "euclidean", rng.normal(size=3))
        )
        rot_id = problem.add_block(
            ParameterBlock("r/rot", "so3", lie.random_rotation(rng, 0.5))
        )
        trans_id = problem.add_block(
            ParameterBlock("r/trans", "euclidean", rng.normal(size=3) * 0.2)
        )
        imu_ids = {
            sid: problem.add_block(
                ParameterBlock(f"{sid}/trans", "euclidean", rng.normal(size=3) * 0.1)
            )
            for sid in ds.imu_streams
        }
        group = PreintExtrinsicsGroup("radar0", sub, g_id, rot_id, trans_id, imu_ids)
        values = problem.values()
        res, analytic = group.residuals_and_jacobians(values, problem.blocks)
        fd = finite_difference_slots(group, values, problem.blocks, step=1e-6)
        assert np.all(np.isfinite(res))
        for (_, ja), (_, jb) in zip(analytic, fd):
            scale = max(np.max(np.abs(ja)), 1.0)
            assert np.max(np.abs(ja - jb)) / scale < 1e-5

    def test_stage3_gradient_matches_directional_differences(self, oracle):
        ds, _ = oracle
        triples, _, _ = _oracle_triples(ds)
        rng = np.random.default_rng(1)
        state = ds.truth.copy()
        state.velocity_spline.control_points += rng.normal(
            size=state.velocity_spline.control_points.shape
        ) * 0.1
        problem = Problem()
        index = register_state_blocks(problem, state)
        for i, block in enumerate(problem.blocks):
            block.constant = True
        for i in index.vel_cps:
            problem.blocks[i].constant = False
        problem.blocks[index.gravity].constant = False
        for ids in index.imus.values():
            problem.blocks[ids["trans"]].constant = False
        problem.add_group(PreintSplineGroup(index, triples[:200]))
        offsets, total = problem.tangent_layout()
        values = problem.values()
        _, grad, _ = _assemble(problem, values, offsets, total)
        for _ in range(5):
            d = rng.normal(size=total)
            d /= np.linalg.norm(d)
            eps = 1e-6
            cp, _ = _retract_all(problem, values, offsets, eps * d)
            cm, _ = _retract_all(problem, values, offsets, -eps * d)
            num = (problem_cost(problem, cp) - problem_cost(problem, cm)) / (2 * eps)
            assert abs(num - grad @ d) / max(abs(num), 1.0) < 1e-5

    def test_gap_pairs_skipped(self):
        grid = KnotGrid(0.0, 0.5, 12)
        rot = So3Spline(grid, np.broadcast_to(np.eye(3), (12, 3, 3)).copy())
        t = np.arange(0.0, 4.0, 0.005)
        stream = ImuStream(
            t, np.zeros((len(t), 3)), np.tile([0.0, 0.0, 9.81], (len(t), 1))
        )
        taus = [0.0, 0.1, 0.2, 1.5, 1.6]
        egos = {
            "radar0": [
                EgoVelocityEstimate(k, tau, np.zeros(3), 5, 0.0, 1.5, 0.01, True)
                for k, tau in enumerate(taus)
            ]
        }
        triples, skipped = preintegration_triples(
            rot, {"imu0": np.eye(3)}, {"imu0": stream}, egos, InitConfig()
        )
        assert skipped["gap"] == 1
        assert len(triples) == 3

    def test_planar_constant_velocity_degenerate(self):
        grid = KnotGrid(0.0, 0.5, 12)
        rot = So3Spline(grid, np.broadcast_to(np.eye(3), (12, 3, 3)).copy())
        t = np.arange(0.0, 4.0, 0.005)
        stream = ImuStream(
            t, np.zeros((len(t), 3)), np.tile([0.0, 0.0, 9.81], (len(t), 1))
        )
        egos = {
            "radar0": [
                EgoVelocityEstimate(
                    k, 0.1 * k, np.array([1.0, 0.0, 0.0]), 5, 0.0, 1.5, 0.01, True
                )
                for k in range(40)
            ]
        }
        with pytest.raises(InitializationError, match="degenerate"):
            init_extrinsics_gravity(
                rot, {"imu0": np.eye(3)}, {"imu0": stream}, egos, InitConfig()
            )

    def test_no_radar_data_rejected(self, oracle):
        ds, _ = oracle
        with pytest.raises(InitializationError, match="unobservable"):
            initialize(ds.imu_streams, {}, InitConfig())
