"""Quaternion (w, x, y, z) and SO(3) helpers.  All functions broadcast over
leading batch dimensions."""

import numpy as np

_SMALL = 1e-8


def skew(w):
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def quat_multiply(a, b):
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        # paired terms first so conj(q) * q has an exactly zero vector part
        (aw * bx + ax * bw) + (ay * bz - az * by),
        (aw * by + ay * bw) + (az * bx - ax * bz),
        (aw * bz + az * bw) + (ax * by - ay * bx),
    ], axis=-1)


def quat_conjugate(q):
    q = np.array(q, dtype=float)
    q[..., 1:] *= -1.0
    return q


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_matrix(q):
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    out = np.empty(np.shape(w) + (3, 3))
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


def quat_exp(phi):
    """Unit quaternion of the rotation vector ``phi`` (exact exponential map)."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi, axis=-1)
    half = 0.5 * angle
    small = angle < _SMALL
    safe = np.where(small, 1.0, angle)
    # sin(a/2)/a, with its Taylor series near zero
    k = np.where(small, 0.5 - angle ** 2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half)[..., None], k[..., None] * phi], axis=-1)


def quat_log(q):
    """Rotation vector of a unit quaternion, angle in [0, pi]."""
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0, -q, q)
    w = np.clip(q[..., 0], -1.0, 1.0)
    vec = q[..., 1:]
    s = np.linalg.norm(vec, axis=-1)
    angle = 2.0 * np.arctan2(s, w)
    small = s < _SMALL
    # w >= 0 after the sign flip, and w ~= 1 whenever s is small
    k = np.where(small, 2.0 / np.maximum(w, 0.5) * (1 - s ** 2 / 3.0),
                 angle / np.where(small, 1.0, s))
    return k[..., None] * vec


def quat_rotate(q, v):
    return np.einsum("...ij,...j->...i", quat_to_matrix(q), v)


def axis_angle_matrix(axis, angle):
    """Rotation matrices about a fixed unit ``axis`` for an array of angles."""
    angle = np.asarray(angle, dtype=float)
    K = skew(np.asarray(axis, dtype=float))
    s = np.sin(angle)[..., None, None]
    c = np.cos(angle)[..., None, None]
    return np.eye(3) + s * K + (1 - c) * (K @ K)


def so3_exp(phi):
    return quat_to_matrix(quat_exp(phi))


def right_jacobian(phi):
    """J_r(phi) with Exp(phi + d) ~= Exp(phi) Exp(J_r(phi) d)."""
    phi = np.asarray(phi, dtype=float)
    a = np.linalg.norm(phi, axis=-1)[..., None, None]
    K = skew(phi)
    small = a < 1e-5
    sa = np.where(small, 1.0, a)
    c1 = np.where(small, 0.5 - a ** 2 / 24.0, (1 - np.cos(sa)) / sa ** 2)
    c2 = np.where(small, 1.0 / 6.0 - a ** 2 / 120.0, (sa - np.sin(sa)) / sa ** 3)
    return np.eye(3) - c1 * K + c2 * (K @ K)


def right_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    a = np.linalg.norm(phi, axis=-1)[..., None, None]
    K = skew(phi)
    small = a < 1e-5
    sa = np.where(small, 1.0, a)
    c2 = np.where(small, 1.0 / 12.0 + a ** 2 / 720.0,
                  1.0 / sa ** 2 - (1 + np.cos(sa)) / (2 * sa * np.sin(sa)))
    return np.eye(3) + 0.5 * K + c2 * (K @ K)


def left_jacobian_inv(phi):
    return right_jacobian_inv(-np.asarray(phi, dtype=float))
