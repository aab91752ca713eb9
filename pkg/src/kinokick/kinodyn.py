"""Rigid-body kinematics and dynamics kernels.

Every kernel accepts a single configuration ``q`` of shape ``(nq,)`` or a
batch of shape ``(..., nq)`` and broadcasts over the leading dimensions.
Velocities follow the model convention: base linear velocity in the world
frame, base angular velocity in the body frame, then joint rates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import RobotModel
from .rotations import (
    axis_angle_matrix,
    quat_conjugate,
    quat_exp,
    quat_log,
    quat_multiply,
    quat_normalize,
    quat_to_matrix,
    skew,
)

GRAVITY = np.array([0.0, 0.0, -9.81])


@dataclass
class LinkPoses:
    """World rotation ``R[..., link, 3, 3]`` and origin ``p[..., link, 3]`` of every link."""

    R: np.ndarray
    p: np.ndarray


def forward_kinematics(model: RobotModel, q) -> LinkPoses:
    q = np.asarray(q, dtype=float)
    batch = q.shape[:-1]
    L = model.n_links
    R = np.empty(batch + (L, 3, 3))
    p = np.empty(batch + (L, 3))
    R[..., 0, :, :] = quat_to_matrix(q[..., 3:7])
    p[..., 0, :] = q[..., :3]
    origins, axes, parents = model.origins, model.axes, model.parents
    for j in model.order[1:]:
        par = parents[j]
        Rp = R[..., par, :, :]
        p[..., j, :] = p[..., par, :] + Rp @ origins[j]
        R[..., j, :, :] = Rp @ axis_angle_matrix(axes[j], q[..., 6 + j])
    return LinkPoses(R, p)


def _poses(model, q, poses):
    return forward_kinematics(model, q) if poses is None else poses


def marker_positions(model: RobotModel, markers, q=None, poses: LinkPoses | None = None):
    """World positions ``(..., len(markers), 3)`` of contact points or keypoints."""
    poses = _poses(model, q, poses)
    links = np.array([m.link for m in markers], dtype=int)
    offsets = np.array([m.offset for m in markers]).reshape(-1, 3)
    return poses.p[..., links, :] + np.einsum("...kij,kj->...ki", poses.R[..., links, :, :], offsets)


def point_position(model: RobotModel, q, link: int, offset=(0.0, 0.0, 0.0)):
    poses = forward_kinematics(model, q)
    return poses.p[..., link, :] + poses.R[..., link, :, :] @ np.asarray(offset, dtype=float)


def link_com_positions(model: RobotModel, q=None, poses: LinkPoses | None = None):
    poses = _poses(model, q, poses)
    return poses.p + np.einsum("...lij,lj->...li", poses.R, model.com_offsets)


def _support_mask(model: RobotModel) -> np.ndarray:
    """mask[l, j] is True when revolute joint j (0-based) moves link l."""
    mask = getattr(model, "_support_mask_cache", None)
    if mask is None:
        mask = np.zeros((model.n_links, model.n_joints), dtype=bool)
        for link, chain in enumerate(model.ancestors):
            for j in chain:
                mask[link, j - 1] = True
        object.__setattr__(model, "_support_mask_cache", mask)
    return mask


def _joint_axes_world(model, poses):
    return np.einsum("...lij,lj->...li", poses.R, model.axes)


def points_jacobian(model: RobotModel, poses: LinkPoses, links, points):
    """Linear-velocity Jacobians ``(..., P, 3, nv)`` of world points rigidly
    attached to ``links`` (one link index per point)."""
    links = np.asarray(links, dtype=int)
    points = np.asarray(points, dtype=float)
    batch = points.shape[:-2]
    P = len(links)
    J = np.zeros(batch + (P, 3, model.nv))
    J[..., :, :, 0:3] = np.eye(3)
    base_p = poses.p[..., None, 0, :]
    base_R = poses.R[..., None, 0, :, :]
    J[..., :, :, 3:6] = -skew(points - base_p) @ base_R
    if model.n_joints:
        a = _joint_axes_world(model, poses)[..., 1:, :]       # (..., n, 3)
        o = poses.p[..., 1:, :]
        lever = points[..., :, None, :] - o[..., None, :, :]  # (..., P, n, 3)
        cols = np.cross(a[..., None, :, :], lever)             # (..., P, n, 3)
        cols = cols * _support_mask(model)[links][..., None]
        J[..., :, :, 6:] = np.swapaxes(cols, -1, -2)
    return J


def angular_jacobians(model: RobotModel, poses: LinkPoses, links=None):
    """World angular-velocity Jacobians ``(..., len(links), 3, nv)``."""
    links = np.arange(model.n_links) if links is None else np.asarray(links, dtype=int)
    batch = poses.p.shape[:-2]
    J = np.zeros(batch + (len(links), 3, model.nv))
    J[..., :, :, 3:6] = poses.R[..., None, 0, :, :]
    if model.n_joints:
        a = _joint_axes_world(model, poses)[..., 1:, :]
        cols = a[..., None, :, :] * _support_mask(model)[links][..., None]
        J[..., :, :, 6:] = np.swapaxes(cols, -1, -2)
    return J


def point_jacobian(model: RobotModel, q, link: int, local_offset=(0.0, 0.0, 0.0)):
    """3 x nv Jacobian mapping ``v`` to the world velocity of a point on ``link``."""
    poses = forward_kinematics(model, q)
    point = poses.p[..., link, :] + poses.R[..., link, :, :] @ np.asarray(local_offset, float)
    return points_jacobian(model, poses, [link], point[..., None, :])[..., 0, :, :]


def marker_jacobians(model: RobotModel, markers, q=None, poses: LinkPoses | None = None):
    poses = _poses(model, q, poses)
    pts = marker_positions(model, markers, poses=poses)
    return points_jacobian(model, poses, [m.link for m in markers], pts)


def center_of_mass(model: RobotModel, q=None, poses: LinkPoses | None = None):
    coms = link_com_positions(model, q, poses)
    return np.einsum("...li,l->...i", coms, model.masses) / model.total_mass


def com_jacobian(model: RobotModel, q=None, poses: LinkPoses | None = None):
    poses = _poses(model, q, poses)
    coms = link_com_positions(model, poses=poses)
    J = points_jacobian(model, poses, np.arange(model.n_links), coms)
    return np.einsum("...lij,l->...ij", J, model.masses) / model.total_mass


def world_inertias(model: RobotModel, poses: LinkPoses):
    return poses.R @ model.inertias @ np.swapaxes(poses.R, -1, -2)


def centroidal_momentum_matrix(model: RobotModel, q=None, poses: LinkPoses | None = None):
    """6 x nv matrix ``A`` with ``A v = [m rdot; h]``: linear momentum rows first,
    then the angular momentum about the CoM in world axes (the CAM rows)."""
    poses = _poses(model, q, poses)
    coms = link_com_positions(model, poses=poses)
    m = model.masses
    com = np.einsum("...li,l->...i", coms, m) / model.total_mass
    Jv = points_jacobian(model, poses, np.arange(model.n_links), coms)
    Jw = angular_jacobians(model, poses)
    A = np.empty(com.shape[:-1] + (6, model.nv))
    A[..., :3, :] = np.einsum("...lij,l->...ij", Jv, m)
    lever = skew(coms - com[..., None, :]) * m[:, None, None]
    A[..., 3:, :] = np.sum(lever @ Jv + world_inertias(model, poses) @ Jw, axis=-3)
    return A


def cam_matrix(model: RobotModel, q=None, poses: LinkPoses | None = None):
    """Centroidal angular momentum matrix (3 x nv)."""
    return centroidal_momentum_matrix(model, q, poses)[..., 3:, :]


def inverse_dynamics(model: RobotModel, q, v, a, contact_forces=None, gravity=GRAVITY):
    """Generalized forces realizing acceleration ``a`` under gravity and the
    given world-frame contact forces ``(..., n_contacts, 3)``.

    Returns a vector of length nv.  Entries ``[0:3]`` are the residual force on
    the floating base (world frame), ``[3:6]`` the residual moment (base frame),
    and ``[6:]`` the joint torques.
    """
    q, v, a = (np.asarray(x, dtype=float) for x in (q, v, a))
    gravity = np.asarray(gravity, dtype=float)
    poses = forward_kinematics(model, q)
    R, P = poses.R, poses.p
    L = model.n_links
    batch = q.shape[:-1]
    w = np.empty(batch + (L, 3))
    dw = np.empty(batch + (L, 3))
    vel = np.empty(batch + (L, 3))   # origin velocity
    acc = np.empty(batch + (L, 3))   # origin acceleration
    w[..., 0, :] = np.einsum("...ij,...j->...i", R[..., 0, :, :], v[..., 3:6])
    dw[..., 0, :] = np.einsum("...ij,...j->...i", R[..., 0, :, :], a[..., 3:6])
    vel[..., 0, :] = v[..., 0:3]
    acc[..., 0, :] = a[..., 0:3]
    axes_w = _joint_axes_world(model, poses)
    parents = model.parents
    for j in model.order[1:]:
        par = parents[j]
        d = P[..., j, :] - P[..., par, :]
        aj = axes_w[..., j, :]
        qd = v[..., 6 + j - 1, None]
        qdd = a[..., 6 + j - 1, None]
        wp = w[..., par, :]
        w[..., j, :] = wp + aj * qd
        dw[..., j, :] = dw[..., par, :] + aj * qdd + np.cross(wp, aj) * qd
        vel[..., j, :] = vel[..., par, :] + np.cross(wp, d)
        acc[..., j, :] = acc[..., par, :] + np.cross(dw[..., par, :], d) + np.cross(wp, np.cross(wp, d))

    e = np.einsum("...lij,lj->...li", R, model.com_offsets)
    acc_c = acc + np.cross(dw, e) + np.cross(w, np.cross(w, e))
    Iw = world_inertias(model, poses)
    m = model.masses[:, None]
    F = m * (acc_c - gravity)
    Iw_w = np.einsum("...ij,...j->...i", Iw, w)
    N = np.einsum("...ij,...j->...i", Iw, dw) + np.cross(w, Iw_w)
    # wrench of each link about the world origin
    Fs = F.copy()
    Ns = N + np.cross(P + e, F)
    if contact_forces is not None and model.n_contacts:
        f = np.asarray(contact_forces, dtype=float)
        pts = marker_positions(model, model.contact_points, poses=poses)
        for i, cp in enumerate(model.contact_points):
            Fs[..., cp.link, :] -= f[..., i, :]
            Ns[..., cp.link, :] -= np.cross(pts[..., i, :], f[..., i, :])
    # accumulate subtree wrenches, children before parents
    for j in reversed(model.order[1:]):
        par = parents[j]
        Fs[..., par, :] += Fs[..., j, :]
        Ns[..., par, :] += Ns[..., j, :]
    tau = np.empty(batch + (model.nv,))
    tau[..., 0:3] = Fs[..., 0, :]
    moment_base = Ns[..., 0, :] - np.cross(P[..., 0, :], Fs[..., 0, :])
    tau[..., 3:6] = np.einsum("...ji,...j->...i", R[..., 0, :, :], moment_base)
    if model.n_joints:
        moment_j = Ns[..., 1:, :] - np.cross(P[..., 1:, :], Fs[..., 1:, :])
        tau[..., 6:] = np.sum(axes_w[..., 1:, :] * moment_j, axis=-1)
    return tau


# ---------------------------------------------------------------------------
# configuration-space integration
# ---------------------------------------------------------------------------

def integrate_configuration(q, v, dt=1.0):
    """``q (+) v dt``: base position moves along the world linear velocity, the
    base quaternion by the exponential map of the body angular velocity, and
    the joint angles additively."""
    q = np.asarray(q, dtype=float)
    dx = np.asarray(v, dtype=float) * dt
    out = np.empty(np.broadcast_shapes(q.shape[:-1], dx.shape[:-1]) + q.shape[-1:])
    out[..., 0:3] = q[..., 0:3] + dx[..., 0:3]
    out[..., 3:7] = quat_normalize(quat_multiply(q[..., 3:7], quat_exp(dx[..., 3:6])))
    out[..., 7:] = q[..., 7:] + dx[..., 6:]
    return out


def difference_configuration(q0, q1):
    """Tangent vector ``d`` with ``integrate_configuration(q0, d) == q1``; the
    quaternion block uses the logarithm map."""
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    shape = np.broadcast_shapes(q0.shape[:-1], q1.shape[:-1])
    d = np.empty(shape + (q0.shape[-1] - 1,))
    d[..., 0:3] = q1[..., 0:3] - q0[..., 0:3]
    d[..., 3:6] = quat_log(quat_multiply(quat_conjugate(q0[..., 3:7]), q1[..., 3:7]))
    d[..., 6:] = q1[..., 7:] - q0[..., 7:]
    return d


# ---------------------------------------------------------------------------
# capsules
# ---------------------------------------------------------------------------

def segment_closest_parameters(p0, p1, q0, q1):
    """Parameters ``(s, t)`` in [0, 1] of the closest points between segments
    ``p0 + s (p1 - p0)`` and ``q0 + t (q1 - q0)``."""
    p0, p1, q0, q1 = (np.asarray(x, dtype=float) for x in (p0, p1, q0, q1))
    d1 = p1 - p0
    d2 = q1 - q0
    r = p0 - q0
    a = np.sum(d1 * d1, axis=-1)
    e = np.sum(d2 * d2, axis=-1)
    f = np.sum(d2 * r, axis=-1)
    c = np.sum(d1 * r, axis=-1)
    b = np.sum(d1 * d2, axis=-1)
    eps = 1e-14
    denom = a * e - b * b
    safe_a = np.where(a > eps, a, 1.0)
    safe_e = np.where(e > eps, e, 1.0)
    s = np.where(denom > eps * np.maximum(a * e, eps),
                 np.clip((b * f - c * e) / np.where(denom > 0, denom, 1.0), 0.0, 1.0), 0.0)
    t = (b * s + f) / safe_e
    # re-clamp t and recompute s where t left [0, 1]
    s = np.where(t < 0.0, np.clip(-c / safe_a, 0.0, 1.0), s)
    s = np.where(t > 1.0, np.clip((b - c) / safe_a, 0.0, 1.0), s)
    t = np.clip(t, 0.0, 1.0)
    # degenerate segments
    s = np.where(a <= eps, 0.0, s)
    t = np.where((a <= eps) & (e > eps), np.clip(f / safe_e, 0.0, 1.0), t)
    s = np.where((e <= eps) & (a > eps), np.clip(-c / safe_a, 0.0, 1.0), s)
    t = np.where(e <= eps, 0.0, t)
    return s, t


def capsule_distance(capsule_a, capsule_b):
    """Minimum distance between the axis segments of two world capsules,
    each given as ``(endpoint_a, endpoint_b[, radius])``."""
    p0, p1 = capsule_a[0], capsule_a[1]
    q0, q1 = capsule_b[0], capsule_b[1]
    s, t = segment_closest_parameters(p0, p1, q0, q1)
    ca = np.asarray(p0) + s[..., None] * (np.asarray(p1) - np.asarray(p0))
    cb = np.asarray(q0) + t[..., None] * (np.asarray(q1) - np.asarray(q0))
    return np.linalg.norm(ca - cb, axis=-1)


def capsule_world(model: RobotModel, link: int, q=None, poses: LinkPoses | None = None):
    """World endpoints and radius of the capsule attached to ``link``."""
    poses = _poses(model, q, poses)
    cap = model.links[link].capsule
    R, p = poses.R[..., link, :, :], poses.p[..., link, :]
    return p + R @ cap.a, p + R @ cap.b, cap.radius
