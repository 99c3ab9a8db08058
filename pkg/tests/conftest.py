import copy
import json

import numpy as np
import pytest

from beltcodesign.model import DEFAULT_MODEL_PATH, load_model, model_from_dict


@pytest.fixture(scope="session")
def default_doc():
    return json.loads(DEFAULT_MODEL_PATH.read_text())


@pytest.fixture(scope="session")
def model():
    return load_model()


@pytest.fixture
def doc(default_doc):
    return copy.deepcopy(default_doc)


def pendulum_doc(mass=2.0, lc=0.5, izz=0.03, gravity=(0.0, -9.81, 0.0), ee=1.0):
    """One revolute joint about z, centre of mass on the link x axis."""
    return {
        "schema_version": 1,
        "gravity": list(gravity),
        "links": [
            {
                "name": "bar",
                "parent": -1,
                "joint_axis": [0.0, 0.0, 1.0],
                "joint_origin": {"xyz": [0.0, 0.0, 0.0], "rpy": [0.0, 0.0, 0.0]},
                "mass": mass,
                "com": [lc, 0.0, 0.0],
                "inertia": [0.001, 0.02, izz],
            }
        ],
        "end_effector": {"parent": 0, "xyz": [ee, 0.0, 0.0]},
        "limits": {
            "q_min": [-3.0],
            "q_max": [3.0],
            "qd_u_min": [-40.0],
            "qd_u_max": [40.0],
            "tau_u_min": [-10.0],
            "tau_u_max": [10.0],
        },
        "payload_mass": 0.0,
    }


@pytest.fixture
def pendulum():
    return model_from_dict(pendulum_doc())


def random_states(model, rng, count):
    q = rng.uniform(model.q_min, model.q_max, size=(count, model.n_joints))
    qd = rng.uniform(-3, 3, size=(count, model.n_joints))
    return q, qd
