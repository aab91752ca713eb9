import numpy as np
import pytest

from kinokick.model import load_model, shipped_model


def chain_document(lengths, masses, axes=None, inertia_scale=0.0, capsules=False):
    """Serial chain hanging from a floating base; link i sits at the end of
    segment i-1 and carries a point mass at ``lengths[i]`` along +x."""
    axes = axes or [[0, 1, 0]] * len(lengths)
    links = [{"name": "base", "mass": 1.0, "com_offset": [0, 0, 0],
              "inertia": [0.01, 0, 0, 0.01, 0, 0.01]}]
    joints = [{"name": "root", "kind": "floating-base", "parent": -1, "origin": [0, 0, 0]}]
    prev_len = 0.0
    for i, (length, mass, axis) in enumerate(zip(lengths, masses, axes)):
        link = {"name": f"l{i}", "mass": mass, "com_offset": [length, 0, 0],
                "inertia": [inertia_scale * mass, 0, 0, inertia_scale * mass, 0,
                            inertia_scale * mass]}
        if capsules:
            link["capsule"] = {"a": [0, 0, 0], "b": [length, 0, 0], "radius": 0.05}
        links.append(link)
        joints.append({"name": f"j{i}", "kind": "revolute", "parent": i,
                       "origin": [prev_len, 0, 0], "axis": list(axis),
                       "q_min": -3, "q_max": 3, "v_min": -10, "v_max": 10,
                       "tau_min": -48, "tau_max": 48})
        prev_len = length
    return {"name": "chain", "links": links, "joints": joints,
            "contact_points": [{"name": "tip", "link": len(lengths), "offset": [prev_len, 0, 0]}],
            "keypoints": [{"name": "tip", "link": len(lengths), "offset": [prev_len, 0, 0]}],
            "collision_pairs": []}


def random_configuration(model, rng, joint_scale=1.0):
    q = model.neutral_configuration()
    q[:3] = rng.normal(size=3)
    quat = rng.normal(size=4)
    q[3:7] = quat / np.linalg.norm(quat)
    lo, hi = model.position_limits
    q[7:] = rng.uniform(np.maximum(lo, -joint_scale), np.minimum(hi, joint_scale))
    return q


@pytest.fixture(scope="session")
def prestoe():
    return shipped_model("prestoe")


@pytest.fixture(scope="session")
def kick_model():
    return shipped_model("kick_leg")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def three_link():
    doc = chain_document([0.4, 0.3, 0.25], [1.5, 1.0, 0.7],
                         axes=[[0, 1, 0], [1, 0, 0], [0, 0.6, 0.8]], inertia_scale=0.02)
    return load_model(doc)


# one pass/fail line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
