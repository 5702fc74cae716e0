import numpy as np
import pytest

from kinefit.camera import Camera, CameraRig
from kinefit.model import load_demo_model, parse_model
from kinefit.synth import SynthConfig, generate_session

TINY_MODEL = """\
# three-segment arm on a free base
body base parent=none
body upper parent=base offset=0,0,0.5
body lower parent=upper offset=0,0,0.4
joint base kind=free name=root
joint upper kind=ball range=-1.0,1.0 name=shoulder
joint lower kind=hinge axis=0,1,0 range=0,2.5 name=elbow
site base_mk body=base pos=0.1,0,0
site upper_mk body=upper pos=0,0.05,0.2
site lower_mk body=lower pos=0,0,0.3
site tip body=lower pos=0.02,0,0.4
scale overall
scale forearm bodies=lower
"""


@pytest.fixture(scope="session")
def biped():
    return load_demo_model("biped")


@pytest.fixture(scope="session")
def spine():
    return load_demo_model("biped_spine")


@pytest.fixture
def tiny_model():
    return parse_model(TINY_MODEL)


@pytest.fixture
def axis_camera():
    """At the origin looking down +z, fx = fy = 1000, principal point at 0."""
    return Camera(
        name="axis",
        fx=1000.0,
        fy=1000.0,
        cx=0.0,
        cy=0.0,
        rotation=(0.0, 0.0, 0.0),
        translation=(0.0, 0.0, 0.0),
        width=2000,
        height=2000,
    )


@pytest.fixture
def axis_rig(axis_camera):
    return CameraRig((axis_camera,))


@pytest.fixture(scope="session")
def small_session(biped):
    """Noiseless one-second session: 2 trials, 4 cameras."""
    config = SynthConfig(n_trials=2, n_cameras=4, duration=1.0, seed=7)
    return generate_session(config, biped)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
