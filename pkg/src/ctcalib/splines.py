"""Uniform B-splines on R^3 and SO(3) with analytic time derivatives.

Both spline types use the cumulative basis form: a segment value is the first
active control point composed with blended consecutive control-point
differences.  The blending matrix is generated programmatically for any
degree >= 1 and verified against the Cox-de Boor recursion in the tests; the
calibration pipeline fixes degree 3.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np

from ctcalib import lie

DEGREE = 3  # cubic splines everywhere in the calibration pipeline


def _cardinal_bspline_pieces(degree: int) -> list[list[Fraction]]:
    """Polynomial pieces of the cardinal B-spline of given degree.

    Piece ``m`` is valid on ``x in [m, m+1)``; coefficients are ascending
    powers of ``x``, computed exactly with rationals.
    """
    pieces = [[Fraction(1)]]  # degree 0: constant 1 on [0, 1)
    for k in range(1, degree + 1):
        new: list[list[Fraction]] = []
        for m in range(k + 1):
            coeffs = [Fraction(0)] * (k + 1)
            # (x / k) * B_{k-1}(x) on piece m
            if m < len(pieces):
                for p, c in enumerate(pieces[m]):
                    coeffs[p + 1] += c / k
            # ((k + 1 - x) / k) * B_{k-1}(x - 1) on piece m
            if 0 <= m - 1 < len(pieces):
                shifted = _shift_poly(pieces[m - 1], Fraction(-1))
                for p, c in enumerate(shifted):
                    coeffs[p] += c * Fraction(k + 1, k)
                    coeffs[p + 1] -= c / k
            new.append(coeffs)
        pieces = new
    return pieces


def _shift_poly(coeffs: list[Fraction], delta: Fraction) -> list[Fraction]:
    """Coefficients of ``p(x + delta)`` given ascending coefficients of p."""
    n = len(coeffs)
    out = [Fraction(0)] * n
    for p, c in enumerate(coeffs):
        # c * (x + delta)^p
        binom = Fraction(1)
        for j in range(p + 1):
            if j > 0:
                binom = binom * (p - j + 1) / j
            out[j] += c * binom * delta ** (p - j)
    return out


@lru_cache(maxsize=None)
def blending_matrix(degree: int) -> np.ndarray:
    """Standard uniform B-spline basis matrix N of shape (d+1, d+1).

    ``N[p, j]`` is the coefficient of ``u**p`` in the weight of control point
    ``i + j`` on segment ``i``; evaluation is ``u_vec @ N @ cps``.
    """
    if degree < 1:
        raise ValueError("spline degree must be >= 1")
    pieces = _cardinal_bspline_pieces(degree)
    n = np.zeros((degree + 1, degree + 1))
    for j in range(degree + 1):
        # weight of cp i+j on u in [0,1): cardinal spline piece degree - j
        poly = _shift_poly(pieces[degree - j], Fraction(degree - j))
        for p, c in enumerate(poly):
            n[p, j] = float(c)
    return n


@lru_cache(maxsize=None)
def cumulative_blending_matrix(degree: int) -> np.ndarray:
    """Cumulative basis matrix (column-wise suffix sums of ``blending_matrix``)."""
    n = blending_matrix(degree)
    return np.flip(np.cumsum(np.flip(n, axis=1), axis=1), axis=1)


class SplineRangeError(ValueError):
    """Raised when an evaluation time falls outside the valid interval."""


@dataclass(frozen=True)
class KnotGrid:
    """Uniform knot grid for a degree-3 spline.

    The valid (half-open) evaluation interval is
    ``[start_time, start_time + (count - 3) * dt)``.
    """

    start_time: float
    dt: float
    count: int

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("knot spacing must be positive")
        if self.count < DEGREE + 1:
            raise ValueError(f"need at least {DEGREE + 1} control points")

    @property
    def end_time(self) -> float:
        return self.start_time + (self.count - DEGREE) * self.dt

    def knot_times(self) -> np.ndarray:
        return self.start_time + self.dt * np.arange(self.count)

    def segment(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Active segment index and normalized coordinate u for times ``t``."""
        t = np.asarray(t, dtype=float)
        if np.any(t < self.start_time) or np.any(t >= self.end_time):
            raise SplineRangeError(
                f"time outside valid interval [{self.start_time}, {self.end_time})"
            )
        x = (t - self.start_time) / self.dt
        idx = np.minimum(np.floor(x).astype(np.int64), self.count - DEGREE - 1)
        return idx, x - idx

    def active_control_points(self, t: float) -> tuple[int, int]:
        """Inclusive index range [i, i+3] of control points influencing ``t``."""
        idx, _ = self.segment(t)
        i = int(idx)
        return i, i + DEGREE


def _u_powers(u: np.ndarray, order: int, dt: float) -> np.ndarray:
    """Row vector d^order/dtau^order of (1, u, u^2, u^3), shape (..., 4)."""
    u = np.asarray(u, dtype=float)
    out = np.zeros(u.shape + (DEGREE + 1,))
    for p in range(order, DEGREE + 1):
        fac = 1.0
        for q in range(order):
            fac *= p - q
        out[..., p] = fac * u ** (p - order)
    return out / dt**order


@dataclass
class R3Spline:
    """Uniform cubic B-spline in R^3 (velocity curve in the pipeline)."""

    grid: KnotGrid
    control_points: np.ndarray  # (count, 3)
    _integral_prefix: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.control_points = np.asarray(self.control_points, dtype=float)
        if self.control_points.shape != (self.grid.count, 3):
            raise ValueError("control point array shape mismatch with grid")
        if not np.all(np.isfinite(self.control_points)):
            raise ValueError("control points must be finite")

    def eval(self, t: np.ndarray, order: int = 0) -> np.ndarray:
        """Value (order 0) or analytic time derivative (order 1 or 2) at ``t``."""
        if order not in (0, 1, 2):
            raise ValueError("derivative order must be 0, 1 or 2")
        idx, u = self.grid.segment(t)
        idx = np.atleast_1d(idx)
        uv = _u_powers(np.atleast_1d(u), order, self.grid.dt)  # (N, 4)
        ntil = cumulative_blending_matrix(DEGREE)
        lam = uv @ ntil  # (N, 4); column 0 multiplies the base point
        cps = self.control_points[idx[:, None] + np.arange(DEGREE + 1)]  # (N, 4, 3)
        base = cps[:, 0] * lam[:, :1]
        diffs = cps[:, 1:] - cps[:, :-1]  # (N, 3, 3)
        out = base + np.einsum("nj,njk->nk", lam[:, 1:], diffs)
        return out[0] if np.isscalar(t) or np.ndim(t) == 0 else out

    def integrate(self, t: np.ndarray, t0: float | None = None) -> np.ndarray:
        """Exact integral of the spline from ``t0`` (default: grid start) to ``t``."""
        if t0 is None:
            t0 = self.grid.start_time
        if self._integral_prefix is None:
            self._build_integral_prefix()
        return self._segment_integral(t) - self._segment_integral(t0)

    def _build_integral_prefix(self):
        nseg = self.grid.count - DEGREE
        full = np.zeros((nseg + 1, 3))
        for i in range(nseg):
            full[i + 1] = full[i] + self._partial_integral(i, 1.0)
        self._integral_prefix = full

    def _partial_integral(self, idx: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Integral over local coordinate [0, u] of segment ``idx`` (in time units)."""
        ntil = cumulative_blending_matrix(DEGREE)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        powers = np.stack([u ** (p + 1) / (p + 1) for p in range(DEGREE + 1)], axis=-1)
        lam = powers @ ntil * self.grid.dt  # (N, 4)
        cps = self.control_points[idx[:, None] + np.arange(DEGREE + 1)]
        diffs = cps[:, 1:] - cps[:, :-1]
        return cps[:, 0] * lam[:, :1] + np.einsum("nj,njk->nk", lam[:, 1:], diffs)

    def _segment_integral(self, t: np.ndarray) -> np.ndarray:
        scalar = np.ndim(t) == 0
        idx, u = self.grid.segment(np.atleast_1d(t))
        out = self._integral_prefix[idx] + self._partial_integral(idx, u)
        return out[0] if scalar else out


@dataclass
class So3Spline:
    """Uniform cubic B-spline on SO(3) in cumulative product-of-exponentials form."""

    grid: KnotGrid
    control_points: np.ndarray  # (count, 3, 3) rotation matrices

    def __post_init__(self):
        self.control_points = np.asarray(self.control_points, dtype=float)
        if self.control_points.shape != (self.grid.count, 3, 3):
            raise ValueError("control point array shape mismatch with grid")

    def _segment_data(self, t):
        idx, u = self.grid.segment(np.atleast_1d(t))
        cps = self.control_points[idx[:, None] + np.arange(DEGREE + 1)]  # (N,4,3,3)
        d = lie.log_so3(np.swapaxes(cps[:, :-1], -1, -2) @ cps[:, 1:])  # (N,3,3v)
        ntil = cumulative_blending_matrix(DEGREE)
        lam = [(_u_powers(u, o, self.grid.dt) @ ntil)[:, 1:] for o in range(3)]
        return cps, d, lam

    def eval(self, t: np.ndarray) -> np.ndarray:
        """Rotation matrix R(t), shape (..., 3, 3)."""
        scalar = np.ndim(t) == 0
        cps, d, lam = self._segment_data(t)
        r = cps[:, 0]
        for j in range(DEGREE):
            r = r @ lie.exp_so3(lam[0][:, j, None] * d[:, j])
        return r[0] if scalar else r

    def _omega_recursions(self, t):
        """Body angular velocity and acceleration via the cumulative recursion."""
        cps, d, lam = self._segment_data(t)
        r = cps[:, 0]
        w = np.zeros((d.shape[0], 3))
        dw = np.zeros_like(w)
        for j in range(DEGREE):
            a = lie.exp_so3(lam[0][:, j, None] * d[:, j])
            at = np.swapaxes(a, -1, -2)
            w_rot = np.einsum("nij,nj->ni", at, w)
            dw = (
                np.einsum("nij,nj->ni", at, dw)
                + np.cross(w_rot, lam[1][:, j, None] * d[:, j])
                + lam[2][:, j, None] * d[:, j]
            )
            w = w_rot + lam[1][:, j, None] * d[:, j]
            r = r @ a
        return r, w, dw

    def body_angular_velocity(self, t: np.ndarray) -> np.ndarray:
        """vee(R(t)^T dR/dt), the angular rate seen by a gyroscope on the body."""
        scalar = np.ndim(t) == 0
        _, w, _ = self._omega_recursions(t)
        return w[0] if scalar else w

    def body_angular_acceleration(self, t: np.ndarray) -> np.ndarray:
        scalar = np.ndim(t) == 0
        _, _, dw = self._omega_recursions(t)
        return dw[0] if scalar else dw

    def world_angular_velocity(self, t: np.ndarray) -> np.ndarray:
        """Angular velocity parameterized in the spline's reference frame."""
        scalar = np.ndim(t) == 0
        r, w, _ = self._omega_recursions(t)
        out = np.einsum("nij,nj->ni", r, w)
        return out[0] if scalar else out

    def world_angular_acceleration(self, t: np.ndarray) -> np.ndarray:
        scalar = np.ndim(t) == 0
        r, _, dw = self._omega_recursions(t)
        out = np.einsum("nij,nj->ni", r, dw)
        return out[0] if scalar else out

    def rotation_rate_matrix(self, t: np.ndarray) -> np.ndarray:
        """Raw first time derivative dR/dt as a matrix: hat(omega_world) R."""
        scalar = np.ndim(t) == 0
        r, w, _ = self._omega_recursions(t)
        ww = np.einsum("nij,nj->ni", r, w)
        out = lie.hat(ww) @ r
        return out[0] if scalar else out

    def rotation_accel_matrix(self, t: np.ndarray) -> np.ndarray:
        """Raw second time derivative d^2R/dt^2 as a matrix."""
        scalar = np.ndim(t) == 0
        r, w, dw = self._omega_recursions(t)
        ww = np.einsum("nij,nj->ni", r, w)
        dww = np.einsum("nij,nj->ni", r, dw)
        h = lie.hat(ww)
        out = (lie.hat(dww) + h @ h) @ r
        return out[0] if scalar else out


def constant_r3_spline(grid: KnotGrid, value) -> R3Spline:
    return R3Spline(grid, np.tile(np.asarray(value, dtype=float), (grid.count, 1)))


def constant_so3_spline(grid: KnotGrid, rotation=None) -> So3Spline:
    r = np.eye(3) if rotation is None else np.asarray(rotation, dtype=float)
    return So3Spline(grid, np.tile(r, (grid.count, 1, 1)))
