import numpy as np
import pytest

from ctcalib import lie, models
from ctcalib.models import (
    GravityVector,
    ImuIntrinsics,
    ImuStream,
    RadarStream,
    imu_predict,
    imu_predict_inverse,
    radar_doppler_predict,
    radar_target_position,
    spherical_from_position,
)


class TestRadarTargetPosition:
    def test_boresight(self):
        assert np.allclose(radar_target_position(10.0, 0.0, 0.0), [10, 0, 0])

    def test_left(self):
        assert np.allclose(radar_target_position(5.0, np.pi / 2, 0.0), [0, 5, 0], atol=1e-12)

    def test_up(self):
        assert np.allclose(radar_target_position(4.0, 0.0, np.pi / 2), [0, 0, 4], atol=1e-12)

    def test_norm_equals_range(self):
        rng = np.random.default_rng(0)
        d = rng.uniform(0.1, 50, size=200)
        th = rng.uniform(-np.pi, np.pi, size=200)
        ph = rng.uniform(-np.pi / 2 + 0.01, np.pi / 2 - 0.01, size=200)
        p = radar_target_position(d, th, ph)
        assert np.allclose(np.linalg.norm(p, axis=-1), d, rtol=1e-12)

    def test_round_trip(self):
        rng = np.random.default_rng(1)
        d = rng.uniform(0.1, 50, size=200)
        th = rng.uniform(-np.pi, np.pi, size=200)
        ph = rng.uniform(-np.pi / 2 + 0.01, np.pi / 2 - 0.01, size=200)
        d2, th2, ph2 = spherical_from_position(radar_target_position(d, th, ph))
        assert np.allclose(d2, d, atol=1e-10)
        assert np.allclose(th2, th, atol=1e-10)
        assert np.allclose(ph2, ph, atol=1e-10)


class TestImuPredict:
    def test_static_level(self):
        w, a = imu_predict([0, 0, 0], [0, 0, 9.81], ImuIntrinsics())
        assert np.allclose(w, 0.0)
        assert np.allclose(a, [0, 0, 9.81])

    def test_additive_bias(self):
        intr = ImuIntrinsics(gyro_bias=[0.01, 0, 0])
        w, _ = imu_predict([0.1, 0, 0], [0, 0, 0], intr)
        assert np.allclose(w, [0.11, 0, 0])

    def test_misalignment_rotation(self):
        intr = ImuIntrinsics(gyro_misalignment=lie.exp_so3([0, 0, np.pi / 2]))
        w, _ = imu_predict([1, 0, 0], [0, 0, 0], intr)
        assert np.allclose(w, [0, 1, 0], atol=1e-12)

    def test_exact_inverse(self):
        rng = np.random.default_rng(2)
        intr = ImuIntrinsics(
            gyro_bias=rng.normal(size=3) * 0.01,
            accel_bias=rng.normal(size=3) * 0.1,
            gyro_misalignment=lie.random_rotation(rng, 0.05),
        )
        w0 = rng.normal(size=(20, 3))
        a0 = rng.normal(size=(20, 3))
        wm, am = imu_predict(w0, a0, intr)
        wb, ab = imu_predict_inverse(wm, am, intr)
        assert np.allclose(wb, w0, atol=1e-13)
        assert np.allclose(ab, a0, atol=1e-13)


class TestDoppler:
    def test_head_on(self):
        assert np.isclose(radar_doppler_predict([10, 0, 0], [2, 0, -1], 10.0), -2.0)

    def test_orthogonal(self):
        assert np.isclose(radar_doppler_predict([0, 5, 0], [2, 0, -1], 5.0), 0.0)

    def test_stationary(self):
        assert np.isclose(radar_doppler_predict([3, 4, 5], [0, 0, 0], np.sqrt(50)), 0.0)


class TestGravity:
    def test_magnitude_fixed(self):
        g = GravityVector([0, 0, -1])
        assert np.isclose(np.linalg.norm(g.vector), 9.81)

    def test_retraction_keeps_magnitude(self):
        rng = np.random.default_rng(3)
        g = GravityVector(rng.normal(size=3))
        for _ in range(50):
            g = g.retract(rng.normal(size=2) * 0.3)
            assert abs(np.linalg.norm(g.vector) - 9.81) < 1e-12

    def test_retraction_first_order(self):
        g = GravityVector([0, 0, -1])
        b = g.tangent_basis()
        eps = 1e-7
        for k in range(2):
            delta = np.zeros(2)
            delta[k] = eps
            diff = (g.retract(delta).vector - g.vector) / eps
            assert np.allclose(diff, 9.81 * b[:, k], atol=1e-6)


class TestStreams:
    def test_imu_monotonic_required(self):
        with pytest.raises(ValueError):
            ImuStream([0.0, 0.0], np.zeros((2, 3)), np.zeros((2, 3)))

    def test_radar_scan_shared_timestamp(self):
        with pytest.raises(ValueError, match="differing timestamps"):
            RadarStream(
                [0.0, 0.1], [1, 1], [5.0, 5.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]
            )

    def test_radar_positive_range(self):
        with pytest.raises(ValueError):
            RadarStream([0.0], [0], [0.0], [0.0], [0.0], [0.0])

    def test_scan_accessor(self):
        s = RadarStream(
            [0.0, 0.0, 0.1], [0, 0, 1], [5.0, 6.0, 7.0], [0.0] * 3, [0.0] * 3, [1.0, 2.0, 3.0]
        )
        scan = s.scan(0)
        assert len(scan) == 2
        assert np.allclose(scan.doppler, [1.0, 2.0])
