import numpy as np
import pytest

from ctcalib.initialization import (
    InitConfig,
    ego_velocity_series,
    solve_radar_ego_velocity,
)
from ctcalib.models import RadarStream


def make_scan(rng, v_ego, n=25, sigma=0.0):
    p = rng.uniform(-1.0, 1.0, size=(n, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    p *= rng.uniform(5.0, 50.0, size=(n, 1))
    u = p / np.linalg.norm(p, axis=1, keepdims=True)
    dop = -u @ v_ego + rng.normal(scale=sigma, size=n)
    return p, dop


class TestExactSolutions:
    def test_three_target_closed_form(self):
        targets = np.array([[10.0, 0, 0], [0, 5.0, 0], [0, 0, 4.0]])
        doppler = np.array([-2.0, 0.0, 1.0])
        est = solve_radar_ego_velocity(targets, doppler)
        assert est.valid
        assert np.allclose(est.velocity, [2.0, 0.0, -1.0], atol=1e-9)
        assert est.residual_rms < 1e-12

    def test_stationary_radar(self):
        rng = np.random.default_rng(0)
        p, dop = make_scan(rng, np.zeros(3))
        est = solve_radar_ego_velocity(p, dop)
        assert est.valid
        assert np.allclose(est.velocity, 0.0, atol=1e-9)

    def test_noiseless_recovery_exact(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            v = rng.normal(size=3) * 4.0
            p, dop = make_scan(rng, v)
            est = solve_radar_ego_velocity(p, dop)
            assert np.max(np.abs(est.velocity - v)) < 1e-9

    def test_matches_brute_force_normal_equations(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            v = rng.normal(size=3) * 3.0
            p, dop = make_scan(rng, v, sigma=0.05)
            est = solve_radar_ego_velocity(p, dop)
            u = p / np.linalg.norm(p, axis=1, keepdims=True)
            brute = np.linalg.solve(u.T @ u, -u.T @ dop)
            assert np.max(np.abs(est.velocity - brute)) < 1e-12


class TestDegeneracy:
    def test_too_few_targets(self):
        est = solve_radar_ego_velocity(
            np.array([[1.0, 0, 0], [0, 1.0, 0]]), np.array([0.5, 0.1])
        )
        assert not est.valid
        assert est.inlier_count == 0

    def test_coplanar_bearings_flagged(self):
        rng = np.random.default_rng(3)
        # all bearings in the x-y plane: no constraint on v_z
        p = rng.uniform(-1.0, 1.0, size=(20, 3))
        p[:, 2] = 0.0
        p *= 10.0
        dop = -(p / np.linalg.norm(p, axis=1, keepdims=True)) @ np.array([1.0, -2.0, 0.5])
        est = solve_radar_ego_velocity(p, dop)
        assert not est.valid


class TestRansac:
    def test_outlier_rejection_within_noise_bound(self):
        rng = np.random.default_rng(4)
        sigma = 0.05
        v = np.array([3.0, -1.5, 0.8])
        p, dop = make_scan(rng, v, n=25, sigma=sigma)
        dop[:5] += rng.choice([-1.0, 1.0], size=5) * rng.uniform(2.0, 6.0, size=5)
        est = solve_radar_ego_velocity(
            p, dop, doppler_sigma=sigma, outlier_fraction=0.2, rng=rng
        )
        assert est.valid
        assert est.inlier_count >= 20
        # 3-sigma bound propagated through the inlier least squares
        assert np.linalg.norm(est.velocity - v) < 3.0 * est.sigma * np.sqrt(3)

    def test_ransac_noiseless_is_exact(self):
        rng = np.random.default_rng(5)
        v = np.array([-2.0, 0.4, 1.1])
        p, dop = make_scan(rng, v)
        dop[:4] += 5.0
        est = solve_radar_ego_velocity(p, dop, outlier_fraction=0.2, rng=rng)
        assert est.inlier_count == 21
        assert np.max(np.abs(est.velocity - v)) < 1e-9


class TestSeries:
    def test_per_scan_estimates(self):
        rng = np.random.default_rng(6)
        rows = {k: [] for k in ("t", "sid", "d", "az", "el", "dop")}
        vels = []
        for k in range(5):
            v = rng.normal(size=3)
            vels.append(v)
            p, dop = make_scan(rng, v, n=8)
            d = np.linalg.norm(p, axis=1)
            rows["t"].append(np.full(8, 0.1 * k))
            rows["sid"].append(np.full(8, k, dtype=np.int64))
            rows["d"].append(d)
            rows["az"].append(np.arctan2(p[:, 1], p[:, 0]))
            rows["el"].append(np.arcsin(p[:, 2] / d))
            rows["dop"].append(dop)
        stream = RadarStream(*(np.concatenate(rows[k]) for k in rows))
        series = ego_velocity_series(stream, InitConfig())
        assert len(series) == 5
        for est, v in zip(series, vels):
            assert est.valid
            assert np.max(np.abs(est.velocity - v)) < 1e-9
