"""Minimal SO(3)/so(3) algebra on 3x3 rotation matrices.

Rotations are plain ``(..., 3, 3)`` numpy arrays; all operations broadcast
over leading batch dimensions and are pure.
"""

from __future__ import annotations

import numpy as np

# Below this rotation angle [rad] the Rodrigues coefficients are evaluated by
# their second-order Taylor expansion to avoid catastrophic cancellation.
SMALL_ANGLE = 1e-8


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of ``v`` so that ``hat(v) @ w == cross(v, w)``."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def vee(m: np.ndarray) -> np.ndarray:
    """Inverse of :func:`hat` (uses the skew part of ``m``)."""
    m = np.asarray(m, dtype=float)
    return 0.5 * np.stack(
        [
            m[..., 2, 1] - m[..., 1, 2],
            m[..., 0, 2] - m[..., 2, 0],
            m[..., 1, 0] - m[..., 0, 1],
        ],
        axis=-1,
    )


def exp_so3(phi: np.ndarray) -> np.ndarray:
    """Rodrigues map from a rotation vector [rad] to a rotation matrix."""
    phi = np.asarray(phi, dtype=float)
    theta2 = np.sum(phi * phi, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < SMALL_ANGLE
    # sin(t)/t and (1-cos(t))/t^2 with Taylor fallback near zero.
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / np.where(small, 1.0, theta))
        b = np.where(
            small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, theta2)
        )
    k = hat(phi)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def log_so3(r: np.ndarray) -> np.ndarray:
    """Principal rotation vector of ``r`` with ``|result| <= pi``.

    At angle exactly pi the axis sign is fixed by requiring the component
    with the largest-magnitude diagonal element of ``r`` to be non-negative
    (ties resolved toward the lower axis index).
    """
    r = np.asarray(r, dtype=float)
    tr = np.clip((np.trace(r, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(tr)
    skew = vee(r)

    small = theta < SMALL_ANGLE
    near_pi = theta > np.pi - 1e-6
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(
            small,
            1.0 + theta**2 / 6.0,
            theta / np.where(small | near_pi, 1.0, np.sin(theta)),
        )
    out = scale[..., None] * skew

    if np.any(near_pi):
        # axis from the symmetric part: R ~ 2*n*n^T - I at theta = pi
        flat = out.reshape(-1, 3)
        rr = r.reshape(-1, 3, 3)
        th = np.atleast_1d(theta).reshape(-1)
        sk = skew.reshape(-1, 3)
        for idx in np.nonzero(np.atleast_1d(near_pi).reshape(-1))[0]:
            m = 0.5 * (rr[idx] + np.eye(3)) + 0.5 * (1.0 - tr.reshape(-1)[idx]) * np.eye(3)
            # m = n n^T * (1 - cos) + cos*I ... extract axis robustly
            nn = 0.5 * (rr[idx] + rr[idx].T) - np.cos(th[idx]) * np.eye(3)
            denom = 1.0 - np.cos(th[idx])
            nn = nn / denom
            d = np.diag(nn)
            j = int(np.argmax(d))
            axis = nn[:, j] / np.sqrt(max(d[j], 1e-16))
            axis /= np.linalg.norm(axis)
            # choose sign: prefer agreement with the skew part, else the
            # deterministic largest-diagonal rule
            s = sk[idx] @ axis
            if abs(s) > 1e-12:
                if s < 0:
                    axis = -axis
            elif axis[j] < 0:
                axis = -axis
            flat[idx] = th[idx] * axis
        out = flat.reshape(out.shape)
    return out


def project_to_so3(m: np.ndarray) -> np.ndarray:
    """Closest rotation matrix to ``m`` in the Frobenius sense (via SVD)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=float))
    d = np.linalg.det(u @ vt)
    fix = np.ones(m.shape[:-2] + (3,))
    fix[..., 2] = np.sign(d)
    return (u * fix[..., None, :]) @ vt


def matrix_to_quat(r: np.ndarray) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` of rotation matrix ``r`` (w >= 0)."""
    r = np.asarray(r, dtype=float)
    single = r.ndim == 2
    rr = r.reshape(-1, 3, 3)
    q = np.empty((rr.shape[0], 4))
    for i, m in enumerate(rr):
        t = np.trace(m)
        if t > 0:
            s = np.sqrt(t + 1.0) * 2.0
            q[i] = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s,
                    (m[1, 0] - m[0, 1]) / s]
        else:
            j = int(np.argmax(np.diag(m)))
            k, l = (j + 1) % 3, (j + 2) % 3
            s = np.sqrt(max(1.0 + m[j, j] - m[k, k] - m[l, l], 0.0)) * 2.0
            vec = np.empty(3)
            vec[j] = 0.25 * s
            vec[k] = (m[k, j] + m[j, k]) / s
            vec[l] = (m[l, j] + m[j, l]) / s
            q[i] = [(m[l, k] - m[k, l]) / s, *vec]
        if q[i, 0] < 0:
            q[i] = -q[i]
        q[i] /= np.linalg.norm(q[i])
    return q[0] if single else q.reshape(r.shape[:-2] + (4,))


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of unit quaternion ``(w, x, y, z)``."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def random_rotation(rng: np.random.Generator, max_angle: float = np.pi) -> np.ndarray:
    """Uniform random axis, uniform angle in ``[0, max_angle)``."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return exp_so3(axis * rng.uniform(0.0, max_angle))
