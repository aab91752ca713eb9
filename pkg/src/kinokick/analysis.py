"""Post-hoc measurements on optimized kicks.

Link speeds along the kick direction, their peak times, the ankle rate
over the lock window and the approach angle of the initial stance.
"""

from __future__ import annotations

import numpy as np

from .kinodyn import forward_kinematics, link_com_positions, points_jacobian
from .model import RobotModel
from .transcription import KinodynamicTrajectory, ProblemSpec, approach_angle

CHAIN_ORDER = ("pelvis", "thigh", "shank", "foot")


def link_com_velocities(model: RobotModel, q, v, links) -> np.ndarray:
    """World velocity of each link's centre of mass, shape (N, len(links), 3)."""
    q = np.atleast_2d(np.asarray(q, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    links = list(links)
    poses = forward_kinematics(model, q)
    coms = link_com_positions(model, poses=poses)[:, links]
    J = points_jacobian(model, poses, links, coms)       # (N, L, 3, nv)
    return np.einsum("nlij,nj->nli", J, v)


def forward_velocities(model: RobotModel, trajectory: KinodynamicTrajectory, direction=(1.0, 0.0, 0.0),
                       chain: dict | None = None) -> dict:
    """Speed of each kick-chain link along ``direction`` per knot.

    ``chain`` maps segment names to link indices; by default the model's
    ``kick_chain`` tag restricted to pelvis, thigh, shank and foot.
    """
    if chain is None:
        tag = model.tags.get("kick_chain", {})
        chain = {name: tag[name] for name in CHAIN_ORDER if name in tag}
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    vel = link_com_velocities(model, trajectory.q, trajectory.v, chain.values())
    return {name: vel[:, i] @ d for i, name in enumerate(chain)}


def peak_knots(speeds: dict) -> dict:
    return {name: int(np.argmax(s)) for name, s in speeds.items()}


def proximal_to_distal(peaks: dict, order=CHAIN_ORDER, slack: int = 1) -> bool:
    """True when the peak knots increase along ``order``: strictly for all
    but the last pair, which may tie.  Each comparison gets ``slack`` knots."""
    names = [n for n in order if n in peaks]
    for i, (a, b) in enumerate(zip(names, names[1:])):
        last = i == len(names) - 2
        if last:
            if peaks[a] > peaks[b] + slack:
                return False
        elif peaks[a] >= peaks[b] + slack:
            return False
    return True


def lock_window_rate(spec: ProblemSpec, trajectory: KinodynamicTrajectory) -> float:
    """Largest |rate| of the locked ankle joints over the lock window (0 if
    the window or the joint set is empty)."""
    knots = np.flatnonzero(spec.schedule.lock_mask())
    dofs = [6 + spec.model.joint_index(j) for j in spec.lock_joints]
    if not len(knots) or not dofs:
        return 0.0
    return float(np.max(np.abs(trajectory.v[np.ix_(knots, dofs)])))


def initial_approach_angle(spec: ProblemSpec, trajectory: KinodynamicTrajectory) -> float:
    """Approach angle (rad) of the base position at the first knot."""
    return approach_angle(trajectory.q[0, :2], spec.ball_xy)
