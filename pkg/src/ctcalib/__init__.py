"""Continuous-time spatiotemporal calibration for multi-radar / multi-IMU suites.

The package estimates rigid extrinsics, clock offsets, and IMU intrinsics of a
sensor suite containing any number of 3D Doppler radars and IMUs by fitting
uniform cubic B-splines (rotation on SO(3), linear velocity on R^3) of a
virtual central IMU to all raw measurements in one sparse nonlinear
least-squares problem.
"""

from ctcalib.lie import exp_so3, hat, log_so3, vee
from ctcalib.splines import KnotGrid, R3Spline, So3Spline

__all__ = [
    "exp_so3",
    "log_so3",
    "hat",
    "vee",
    "KnotGrid",
    "R3Spline",
    "So3Spline",
]

__version__ = "0.1.0"
