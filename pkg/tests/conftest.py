import numpy as np
import pytest

from tersim.kinematics import ContactModel, StrapRig
from tersim.phantom import BodySurface, VascularPhantom


@pytest.fixture
def body():
    return BodySurface()


@pytest.fixture
def still_body():
    return BodySurface(breathing_amplitude=0.0)


@pytest.fixture
def phantom():
    return VascularPhantom()


@pytest.fixture
def rig():
    return StrapRig()


@pytest.fixture
def contact():
    return ContactModel()


class PlanarSurface:
    """Degenerate test surface: the z=0 plane, chart scaled by `extent` mm.

    Stands in for the body in kinematics tests where closed-form answers
    are wanted.
    """

    def __init__(self, extent=400.0):
        self.extent = extent

    def surface_point(self, u, v, t):
        return np.array([u * self.extent, v * self.extent, 0.0])

    def surface_normal(self, u, v, t):
        return np.array([0.0, 0.0, 1.0])

    def tangent_frame(self, u, v, t):
        return np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0])


@pytest.fixture
def plane():
    return PlanarSurface()
