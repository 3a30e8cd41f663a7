"""Autodiff residual kernels for the batch estimator.

Each kernel is a pure function ``f(delta, data) -> residual`` of a tangent
perturbation ``delta`` applied to the relevant parameter blocks at the
current linearization point carried in ``data``.  Jacobians are evaluated
at ``delta = 0`` by reverse-mode autodiff (the residuals are 3-vectors of a
much wider tangent), vmapped over measurements and jitted; the slot layout
of each tangent vector is exported so the factor layer can scatter the
columns into the solver's block-sparse system.

All math here mirrors the plain-numpy spline/measurement models; the spline
window (four active control points plus the local coordinate ``u``) is fixed
at the current time offset during linearization, which is exact everywhere
except at knot crossings (measure zero, re-resolved each outer iteration).

Residuals are whitened inside the kernels (division by the per-measurement
sigma) and multiplied by a 0/1 validity mask so dropped measurements keep
the arrays at a fixed shape for jit.
"""

from __future__ import annotations

import numpy as _np

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402

from ctcalib.splines import cumulative_blending_matrix  # noqa: E402

_NTIL = _np.asarray(cumulative_blending_matrix(3))
_SMALL = 1e-12  # on squared angles


# ---------------------------------------------------------------------------
# AD-safe SO(3) maps


def _hat(v):
    x, y, z = v
    return jnp.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def exp_so3(phi):
    """Rodrigues map, differentiable at phi = 0 (where-safe branches)."""
    t2 = jnp.dot(phi, phi)
    small = t2 < _SMALL
    t2s = jnp.where(small, 1.0, t2)
    ts = jnp.sqrt(t2s)
    a = jnp.where(small, 1.0 - t2 / 6.0, jnp.sin(ts) / ts)
    b = jnp.where(small, 0.5 - t2 / 24.0, (1.0 - jnp.cos(ts)) / t2s)
    k = _hat(phi)
    return jnp.eye(3) + a * k + b * (k @ k)


def log_so3(r):
    """Principal log for angles well below pi, differentiable at identity."""
    skew = 0.5 * jnp.array(
        [r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]
    )
    c = 0.5 * (jnp.trace(r) - 1.0)
    s2 = jnp.dot(skew, skew)
    small = s2 < _SMALL
    s2s = jnp.where(small, 1.0, s2)
    ss = jnp.sqrt(s2s)
    theta = jnp.arctan2(ss, c)
    # log = skew * theta / sin(theta); sin(theta) = |skew|
    scale = jnp.where(small, 1.0 + s2 / 6.0, theta / ss)
    return scale * skew


# ---------------------------------------------------------------------------
# cubic spline windows (4 active control points, local coordinate u)


def _lam(u, dt, order):
    """Cumulative basis weights (4,) for derivative ``order`` at ``u``."""
    if order == 0:
        up = jnp.array([1.0, u, u * u, u**3])
    elif order == 1:
        up = jnp.array([0.0, 1.0, 2.0 * u, 3.0 * u * u]) / dt
    else:
        up = jnp.array([0.0, 0.0, 2.0, 6.0 * u]) / dt**2
    return up @ _NTIL


def r3_window(cps, u, dt, order):
    """R^3 spline value/derivative from its 4 active control points (4, 3)."""
    lam = _lam(u, dt, order)
    diffs = cps[1:] - cps[:-1]
    return lam[0] * cps[0] + lam[1:] @ diffs


def so3_window(cps, u, dt):
    """Rotation, body angular velocity, body angular acceleration from the
    4 active rotation control points (4, 3, 3)."""
    l0 = _lam(u, dt, 0)[1:]
    l1 = _lam(u, dt, 1)[1:]
    l2 = _lam(u, dt, 2)[1:]
    r = cps[0]
    w = jnp.zeros(3)
    dw = jnp.zeros(3)
    for j in range(3):
        d = log_so3(cps[j].T @ cps[j + 1])
        a = exp_so3(l0[j] * d)
        w_rot = a.T @ w
        dw = a.T @ dw + jnp.cross(w_rot, l1[j] * d) + l2[j] * d
        w = w_rot + l1[j] * d
        r = r @ a
    return r, w, dw


def _perturb_rot_cps(cps, delta12):
    d = delta12.reshape(4, 3)
    return jnp.stack([cps[j] @ exp_so3(d[j]) for j in range(4)])


def _gravity(data, delta2):
    phi = data["g_basis"] @ delta2
    return data["g_mag"] * (exp_so3(jnp.cross(data["g_dir"], phi)) @ data["g_dir"])


# ---------------------------------------------------------------------------
# residual kernels
#
# Tangent layouts (slot name, width); the factor layer relies on the order.

GYRO_SLOTS = [("rot_cp", 3)] * 4 + [
    ("imu_rot", 3),
    ("gyro_bias", 3),
    ("misalign", 3),
    ("offset", 1),
]
ACCEL_SLOTS = [("rot_cp", 3)] * 4 + [("vel_cp", 3)] * 4 + [
    ("imu_rot", 3),
    ("imu_trans", 3),
    ("accel_bias", 3),
    ("gravity", 2),
    ("offset", 1),
]
RADAR_SLOTS = [("rot_cp", 3)] * 4 + [("vel_cp", 3)] * 4 + [
    ("radar_rot", 3),
    ("radar_trans", 3),
    ("offset", 1),
]


def slot_offsets(slots):
    offs = [0]
    for _, w in slots:
        offs.append(offs[-1] + w)
    return offs


GYRO_DIM = slot_offsets(GYRO_SLOTS)[-1]
ACCEL_DIM = slot_offsets(ACCEL_SLOTS)[-1]
RADAR_DIM = slot_offsets(RADAR_SLOTS)[-1]


def _gyro_residual(delta, data):
    cps = _perturb_rot_cps(data["rot_cps"], delta[0:12])
    r_ext = data["imu_rot"] @ exp_so3(delta[12:15])
    bias = data["gyro_bias"] + delta[15:18]
    r_mis = data["misalign"] @ exp_so3(delta[18:21])
    t = data["tau"] + data["offset"] + delta[21]
    u = (t - data["t0w"]) / data["dt"]
    _, w, _ = so3_window(cps, u, data["dt"])
    pred = r_mis @ (r_ext.T @ w) + bias
    return data["mask"] * (pred - data["meas"]) / data["sigma"]


def _accel_residual(delta, data):
    dt = data["dt"]
    rot_cps = _perturb_rot_cps(data["rot_cps"], delta[0:12])
    vel_cps = data["vel_cps"] + delta[12:24].reshape(4, 3)
    r_ext = data["imu_rot"] @ exp_so3(delta[24:27])
    p_ext = data["imu_trans"] + delta[27:30]
    bias = data["accel_bias"] + delta[30:33]
    g = _gravity(data, delta[33:35])
    t = data["tau"] + data["offset"] + delta[35]
    u = (t - data["t0w"]) / dt
    r, w, dw = so3_window(rot_cps, u, dt)
    a_c = r3_window(vel_cps, u, dt, order=1)
    ww = r @ w
    dww = r @ dw
    arm = r @ p_ext
    a_imu = a_c + jnp.cross(dww, arm) + jnp.cross(ww, jnp.cross(ww, arm))
    pred = (r @ r_ext).T @ (a_imu - g) + bias
    return data["mask"] * (pred - data["meas"]) / data["sigma"]


def _radar_scan_velocity(delta, data):
    """Radar-frame ego velocity of one scan; all targets of the scan share
    it, so the per-target Doppler residual r = (v d + p^T v_rr) / (d sigma)
    and its Jacobian p^T dv_rr are expanded outside the kernel."""
    dt = data["dt"]
    rot_cps = _perturb_rot_cps(data["rot_cps"], delta[0:12])
    vel_cps = data["vel_cps"] + delta[12:24].reshape(4, 3)
    r_ext = data["radar_rot"] @ exp_so3(delta[24:27])
    p_ext = data["radar_trans"] + delta[27:30]
    t = data["tau"] + data["offset"] + delta[30]
    u = (t - data["t0w"]) / dt
    r, w, _ = so3_window(rot_cps, u, dt)
    v_c = r3_window(vel_cps, u, dt, order=0)
    v_world = v_c + jnp.cross(r @ w, r @ p_ext)
    return data["mask"] * ((r @ r_ext).T @ v_world)


def _center_rotation_residual(delta, data):
    rots = data["rots"]  # (n, 3, 3)
    n = rots.shape[0]
    total = jnp.zeros(3)
    for i in range(n):
        total = total + log_so3(rots[i] @ exp_so3(delta[3 * i : 3 * i + 3]))
    return total / data["sigma"]


def _center_translation_residual(delta, data):
    return (jnp.sum(data["trans"] + delta.reshape(-1, 3), axis=0)) / data["sigma"]


def _center_temporal_residual(delta, data):
    return jnp.atleast_1d(jnp.sum(data["offsets"] + delta)) / data["sigma"]


def _bundle(fn):
    """vmapped residual and at-zero Jacobian evaluators for a kernel.

    Reverse mode: every kernel maps a wide tangent (22-36 dims) to a 3-vector,
    so jacrev needs 3 passes where jacfwd would need one per input dim.
    """
    res = jax.jit(jax.vmap(fn, in_axes=(0, 0)))
    jac = jax.jit(jax.vmap(jax.jacrev(fn), in_axes=(0, 0)))
    return res, jac


gyro_res, gyro_jac = _bundle(_gyro_residual)
accel_res, accel_jac = _bundle(_accel_residual)
radar_vel, radar_vel_jac = _bundle(_radar_scan_velocity)

center_rotation_res = jax.jit(_center_rotation_residual)
center_rotation_jac = jax.jit(jax.jacfwd(_center_rotation_residual))
center_translation_res = jax.jit(_center_translation_residual)
center_translation_jac = jax.jit(jax.jacfwd(_center_translation_residual))
center_temporal_res = jax.jit(_center_temporal_residual)
center_temporal_jac = jax.jit(jax.jacfwd(_center_temporal_residual))
