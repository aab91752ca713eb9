"""Builders for the bundled robot descriptions.

``prestoe`` approximates the 25-DoF PresToe humanoid (29.5 kg, 1.3 m).  Link
masses, inertias and capsule sizes are not published; the values here are
plausible placeholders that respect the published total mass, height and
joint torque/speed limits.  ``kick_leg`` is a reduced 3D model for desk-scale
kick optimization: a 7-DoF kicking leg, a 3-DoF support leg and the floating
pelvis, with the torso and arms lumped into the pelvis.

The JSON files in ``kinokick/data`` are generated from these builders
(``python -m kinokick.robots``).
"""

import json
from pathlib import Path

X, Y, Z = [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]

# max torque (N m) and speed (rad/s) per joint group
LIMITS = {
    "hip": (48.0, 20.0),
    "knee": (200.0, 10.0),
    "ankle": (100.0, 10.0),
    "toe": (10.0, 20.0),
    "arm": (18.0, 40.0),
    "torso": (18.0, 40.0),
}

PRESTOE_MASS = 29.5
PRESTOE_HEIGHT = 1.3


def box_inertia(mass, sx, sy, sz):
    return [mass * (sy ** 2 + sz ** 2) / 12, 0.0, 0.0,
            mass * (sx ** 2 + sz ** 2) / 12, 0.0,
            mass * (sx ** 2 + sy ** 2) / 12]


def rod_inertia(mass, length, radius):
    """Solid cylinder along z."""
    ixx = mass * (3 * radius ** 2 + length ** 2) / 12
    return [ixx, 0.0, 0.0, ixx, 0.0, mass * radius ** 2 / 2]


class _Builder:
    def __init__(self, name):
        self.name = name
        self.links, self.joints = [], []
        self.contacts, self.keypoints, self.pairs = [], [], []

    def base(self, name, mass, com, inertia, capsule=None):
        self.links.append(dict(name=name, mass=mass, com_offset=com, inertia=inertia,
                               capsule=capsule))
        self.joints.append(dict(name="root", kind="floating-base", parent=-1, origin=[0, 0, 0]))
        return 0

    def revolute(self, name, parent, origin, axis, group, q_range, link):
        tau, speed = LIMITS[group]
        self.joints.append(dict(name=name, kind="revolute", parent=parent, origin=list(origin),
                                axis=list(axis), q_min=q_range[0], q_max=q_range[1],
                                v_min=-speed, v_max=speed, tau_min=-tau, tau_max=tau))
        self.links.append(dict(name=link["name"], mass=link["mass"],
                               com_offset=list(link.get("com", [0, 0, 0])),
                               inertia=link.get("inertia", [0.0] * 6),
                               capsule=link.get("capsule")))
        return len(self.joints) - 1

    def contact(self, name, link, offset):
        self.contacts.append(dict(name=name, link=link, offset=list(offset)))
        return len(self.contacts) - 1

    def keypoint(self, name, link, offset=(0, 0, 0)):
        self.keypoints.append(dict(name=name, link=link, offset=list(offset)))

    def document(self, tags):
        links = []
        for link in self.links:
            item = {k: v for k, v in link.items() if k != "capsule" or v is not None}
            links.append(item)
        return {
            "name": self.name,
            "links": links,
            "joints": self.joints,
            "contact_points": self.contacts,
            "keypoints": self.keypoints,
            "collision_pairs": self.pairs,
            "tags": tags,
        }


def _capsule(a, b, r):
    return {"a": list(a), "b": list(b), "radius": r}


THIGH = 0.33
SHANK = 0.33
ANKLE_TO_SOLE = 0.05
HIP_DROP = 0.05
TOE_JOINT = (0.10, 0.0, -0.04)


def _leg(b, side, parent, hip_y):
    """Seven-joint leg: hip yaw/roll/pitch, knee, ankle pitch/roll, toe."""
    s = side[0]
    hip = (0.0, hip_y, -HIP_DROP)
    yaw = b.revolute(f"{s}_hip_yaw", parent, hip, Z, "hip", (-0.8, 0.8),
                     dict(name=f"{s}_hip_yaw_link", mass=0.5, com=[0, 0, 0.02],
                          inertia=box_inertia(0.5, 0.08, 0.08, 0.06)))
    roll = b.revolute(f"{s}_hip_roll", yaw, (0, 0, 0), X, "hip", (-0.6, 0.6),
                      dict(name=f"{s}_hip_roll_link", mass=0.6, com=[0, 0, 0],
                           inertia=box_inertia(0.6, 0.08, 0.08, 0.08)))
    thigh = b.revolute(f"{s}_hip_pitch", roll, (0, 0, 0), Y, "hip", (-2.0, 1.0),
                       dict(name=f"{s}_thigh", mass=2.0, com=[0, 0, -0.14],
                            inertia=rod_inertia(2.0, THIGH, 0.05),
                            capsule=_capsule((0, 0, -0.06), (0, 0, -THIGH + 0.04), 0.05)))
    shank = b.revolute(f"{s}_knee", thigh, (0, 0, -THIGH), Y, "knee", (0.0, 2.4),
                       dict(name=f"{s}_shank", mass=1.0, com=[0, 0, -0.13],
                            inertia=rod_inertia(1.0, SHANK, 0.035),
                            capsule=_capsule((0, 0, -0.04), (0, 0, -SHANK + 0.04), 0.04)))
    ank = b.revolute(f"{s}_ankle_pitch", shank, (0, 0, -SHANK), Y, "ankle", (-1.0, 1.0),
                     dict(name=f"{s}_ankle_link", mass=0.1, com=[0, 0, 0],
                          inertia=box_inertia(0.1, 0.03, 0.03, 0.03)))
    foot = b.revolute(f"{s}_ankle_roll", ank, (0, 0, 0), X, "ankle", (-0.5, 0.5),
                      dict(name=f"{s}_foot", mass=0.45, com=[0.02, 0, -0.03],
                           inertia=box_inertia(0.45, 0.16, 0.08, 0.04),
                           capsule=_capsule((-0.04, 0, -0.025), (0.08, 0, -0.025), 0.03)))
    toe = b.revolute(f"{s}_toe", foot, TOE_JOINT, Y, "toe", (-1.0, 1.0),
                     dict(name=f"{s}_toe", mass=0.1, com=[0.03, 0, -0.005],
                          inertia=box_inertia(0.1, 0.06, 0.08, 0.02)))
    sole = -ANKLE_TO_SOLE
    contacts = [
        b.contact(f"{s}_toe_front_left", toe, (0.06, 0.04, sole - TOE_JOINT[2])),
        b.contact(f"{s}_toe_front_right", toe, (0.06, -0.04, sole - TOE_JOINT[2])),
        b.contact(f"{s}_ball_left", foot, (0.08, 0.04, sole)),
        b.contact(f"{s}_ball_right", foot, (0.08, -0.04, sole)),
        b.contact(f"{s}_heel", foot, (-0.06, 0.0, sole)),
    ]
    b.keypoint(f"{s}_hip", thigh)
    b.keypoint(f"{s}_knee", shank)
    b.keypoint(f"{s}_ankle", ank)
    b.keypoint(f"{s}_ball", toe)
    b.keypoint(f"{s}_toe_tip", toe, (0.06, 0.0, sole - TOE_JOINT[2]))
    b.keypoint(f"{s}_heel", foot, (-0.06, 0.0, sole))
    return dict(hip_yaw=yaw, hip_roll=roll, thigh=thigh, shank=shank, ankle=ank,
                foot=foot, toe=toe, contacts=contacts)


def _arm(b, side, parent, shoulder_y):
    s = side[0]
    sign = 1.0 if side == "left" else -1.0
    sh = (0.0, shoulder_y, 0.35)
    p = b.revolute(f"{s}_shoulder_pitch", parent, sh, Y, "arm", (-3.0, 1.5),
                   dict(name=f"{s}_shoulder_pitch_link", mass=0.3,
                        inertia=box_inertia(0.3, 0.06, 0.06, 0.06)))
    r = b.revolute(f"{s}_shoulder_roll", p, (0, 0, 0), X, "arm",
                   (-0.2, 2.5) if sign > 0 else (-2.5, 0.2),
                   dict(name=f"{s}_shoulder_roll_link", mass=0.3,
                        inertia=box_inertia(0.3, 0.06, 0.06, 0.06)))
    y = b.revolute(f"{s}_shoulder_yaw", r, (0, 0, 0), Z, "arm", (-1.5, 1.5),
                   dict(name=f"{s}_upper_arm", mass=0.8, com=[0, 0, -0.11],
                        inertia=rod_inertia(0.8, 0.25, 0.035),
                        capsule=_capsule((0, 0, -0.03), (0, 0, -0.22), 0.035)))
    e = b.revolute(f"{s}_elbow", y, (0, 0, -0.25), Y, "arm", (-2.4, 0.0),
                   dict(name=f"{s}_forearm", mass=0.5, com=[0, 0, -0.1],
                        inertia=rod_inertia(0.5, 0.22, 0.03),
                        capsule=_capsule((0, 0, -0.03), (0, 0, -0.2), 0.03)))
    w = b.revolute(f"{s}_wrist", e, (0, 0, -0.22), Z, "arm", (-1.5, 1.5),
                   dict(name=f"{s}_hand", mass=0.2, com=[0, 0, -0.04],
                        inertia=box_inertia(0.2, 0.04, 0.08, 0.08)))
    b.keypoint(f"{s}_shoulder", p)
    b.keypoint(f"{s}_elbow", e)
    b.keypoint(f"{s}_wrist", w)
    return dict(upper=y, fore=e, hand=w)


def prestoe_document():
    b = _Builder("prestoe")
    legs_mass = 2 * (0.5 + 0.6 + 2.0 + 1.0 + 0.1 + 0.45 + 0.1)
    arms_mass = 2 * (0.3 + 0.3 + 0.8 + 0.5 + 0.2)
    torso_mass = 9.0
    pelvis_mass = PRESTOE_MASS - legs_mass - arms_mass - torso_mass
    b.base("pelvis", pelvis_mass, [0.0, 0.0, 0.0], box_inertia(pelvis_mass, 0.18, 0.26, 0.12),
           capsule=_capsule((0, -0.09, -0.02), (0, 0.09, -0.02), 0.07))
    torso = b.revolute("torso_yaw", 0, (0, 0, 0.08), Z, "torso", (-1.0, 1.0),
                       dict(name="torso", mass=torso_mass, com=[0, 0, 0.22],
                            inertia=box_inertia(torso_mass, 0.18, 0.30, 0.40),
                            capsule=_capsule((0, 0, 0.1), (0, 0, 0.3), 0.12)))
    b.keypoint("pelvis", 0)
    b.keypoint("head", torso, (0, 0, 0.55))
    left = _leg(b, "left", 0, 0.09)
    right = _leg(b, "right", 0, -0.09)
    arm_l = _arm(b, "left", torso, 0.19)
    arm_r = _arm(b, "right", torso, -0.19)
    b.pairs = [
        [left["shank"], right["shank"]],
        [left["thigh"], right["thigh"]],
        [left["foot"], right["foot"]],
        [left["shank"], right["foot"]],
        [right["shank"], left["foot"]],
        [arm_l["fore"], torso],
        [arm_r["fore"], torso],
    ]
    tags = {
        "height": PRESTOE_HEIGHT,
        "feet": {"left": left["contacts"], "right": right["contacts"]},
        "kicking_side": "right",
        "kicking_foot": {"link": right["foot"], "offset": [0.02, 0.0, -0.025]},
        "ankle_lock_joints": ["r_ankle_pitch", "r_ankle_roll", "r_toe"],
        "kick_chain": {"pelvis": 0, "thigh": right["thigh"], "shank": right["shank"],
                       "foot": right["foot"], "toe": right["toe"]},
        "joint_groups": _groups(b),
        "approximate": True,
    }
    return b.document(tags)


def _groups(b):
    out = {}
    for j in b.joints[1:]:
        name = j["name"]
        for key in ("hip", "knee", "ankle", "toe", "torso"):
            if key in name:
                out[name] = key
                break
        else:
            out[name] = "arm"
    return out


def kick_leg_document():
    """Reduced kicking model: pelvis (torso and arms lumped in), 7-DoF right
    kicking leg, and a left support leg with a rigid hip and knee / ankle
    pitch / ankle roll joints."""
    b = _Builder("kick_leg")
    kick_leg_mass = 0.5 + 0.6 + 2.0 + 1.0 + 0.1 + 0.45 + 0.1
    support_mass = 1.0 + 0.1 + 0.6
    pelvis_mass = PRESTOE_MASS - kick_leg_mass - support_mass
    # pelvis lumps torso, arms and the support thigh; CoM raised by the torso
    b.base("pelvis", pelvis_mass, [0.0, 0.02, 0.12], box_inertia(pelvis_mass, 0.2, 0.3, 0.5),
           capsule=_capsule((0, 0.09, -0.08), (0, 0.09, -HIP_DROP - THIGH + 0.05), 0.055))
    b.keypoint("pelvis", 0)
    right = _leg(b, "right", 0, -0.09)
    knee = b.revolute("l_knee", 0, (0.0, 0.09, -HIP_DROP - THIGH), Y, "knee", (0.0, 2.4),
                      dict(name="l_shank", mass=1.0, com=[0, 0, -0.13],
                           inertia=rod_inertia(1.0, SHANK, 0.035),
                           capsule=_capsule((0, 0, -0.04), (0, 0, -SHANK + 0.04), 0.04)))
    ank = b.revolute("l_ankle_pitch", knee, (0, 0, -SHANK), Y, "ankle", (-1.0, 1.0),
                     dict(name="l_ankle_link", mass=0.1,
                          inertia=box_inertia(0.1, 0.03, 0.03, 0.03)))
    foot = b.revolute("l_ankle_roll", ank, (0, 0, 0), X, "ankle", (-0.5, 0.5),
                      dict(name="l_foot", mass=0.6, com=[0.03, 0, -0.03],
                           inertia=box_inertia(0.6, 0.22, 0.09, 0.04),
                           capsule=_capsule((-0.04, 0, -0.025), (0.12, 0, -0.025), 0.03)))
    sole = -ANKLE_TO_SOLE
    support = [
        b.contact("l_toe_front_left", foot, (0.16, 0.045, sole)),
        b.contact("l_toe_front_right", foot, (0.16, -0.045, sole)),
        b.contact("l_ball_left", foot, (0.08, 0.045, sole)),
        b.contact("l_ball_right", foot, (0.08, -0.045, sole)),
        b.contact("l_heel", foot, (-0.06, 0.0, sole)),
    ]
    b.keypoint("l_hip", 0, (0.0, 0.09, -HIP_DROP))
    b.keypoint("l_knee", knee)
    b.keypoint("l_ankle", ank)
    b.keypoint("l_toe_tip", foot, (0.16, 0.0, sole))
    b.keypoint("l_heel", foot, (-0.06, 0.0, sole))
    b.pairs = [
        [right["shank"], knee],
        [right["foot"], knee],
        [right["foot"], foot],
        [right["thigh"], 0],
    ]
    tags = {
        "height": HIP_DROP + THIGH + SHANK + ANKLE_TO_SOLE,
        "feet": {"left": support, "right": right["contacts"]},
        "kicking_side": "right",
        "kicking_foot": {"link": right["foot"], "offset": [0.02, 0.0, -0.025]},
        "ankle_lock_joints": ["r_ankle_pitch", "r_ankle_roll", "r_toe"],
        "kick_chain": {"pelvis": 0, "thigh": right["thigh"], "shank": right["shank"],
                       "foot": right["foot"], "toe": right["toe"]},
        "joint_groups": _groups(b),
        "approximate": True,
    }
    return b.document(tags)


BUILDERS = {"prestoe": prestoe_document, "kick_leg": kick_leg_document}


def write_data(directory=None):
    directory = Path(directory or Path(__file__).parent / "data")
    for name, build in BUILDERS.items():
        (directory / f"{name}.json").write_text(json.dumps(build(), indent=1) + "\n")


if __name__ == "__main__":
    write_data()
