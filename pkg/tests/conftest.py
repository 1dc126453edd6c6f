import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from reactive_control.kinematics import Joint, KinematicChain
from reactive_control.model import load_model


def planar_chain(l1=1.0, l2=1.0, base=None):
    joints = [
        Joint("j1", l1, 0.0, 0.0, 0.0, -np.pi, np.pi, 1.0),
        Joint("j2", l2, 0.0, 0.0, 0.0, -np.pi, np.pi, 1.0, parent=0),
    ]
    return KinematicChain(joints, torso=[], arms={"arm": [0, 1]}, base=np.eye(4) if base is None else base)


@pytest.fixture(scope="session")
def robot():
    return load_model()


@pytest.fixture
def planar():
    return planar_chain()
