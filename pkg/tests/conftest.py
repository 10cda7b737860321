"""Shared fixtures: cheap phantoms and a reduced-fidelity imaging preset.

The reduced preset (0.5 mm lateral pixels, 4 fps, 15 Hz control) keeps the
simulation loops fast while leaving every pipeline stage exercised; tests
that depend on the full-resolution geometry build their own configs.
"""

import numpy as np
import pytest

from scoliosim.bmode import ImagingConfig
from scoliosim.controller import ScanConfig
from scoliosim.phantom import CurveSpec, PhantomConfig, build_phantom


@pytest.fixture(scope="session")
def fast_imaging():
    return ImagingConfig(width_px=160, height_px=96, frame_rate=4.0,
                         speckle_sigma=0.0)


@pytest.fixture(scope="session")
def fast_robotic():
    return ScanConfig(mode="robotic", control_rate=15.0)


@pytest.fixture(scope="session")
def fast_manual():
    return ScanConfig(mode="manual", control_rate=15.0)


@pytest.fixture(scope="session")
def straight_phantom():
    return build_phantom(PhantomConfig())


@pytest.fixture(scope="session")
def single_20_phantom():
    return build_phantom(PhantomConfig(
        curves=[CurveSpec(apex_level=10.5, target_spa=20.0, direction="right")]))


@pytest.fixture(scope="session")
def double_phantom():
    return build_phantom(PhantomConfig(curves=[
        CurveSpec(apex_level=11.0, target_spa=20.0, direction="right"),
        CurveSpec(apex_level=3.5, target_spa=12.0, direction="left"),
    ]))


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
