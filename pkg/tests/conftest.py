import numpy as np
import pytest

from field_core.grid import Grid
from integrators.bohm_integrator import IntegratorConfig
from propagation.propagator import PropagatorConfig
from quantum.presets import build_preset


@pytest.fixture
def eq4():
    return build_preset("eq4")


@pytest.fixture
def eq4_2d():
    return build_preset("eq4-2d")


@pytest.fixture
def vortex():
    return build_preset("vortex-2d")


@pytest.fixture
def packet():
    return build_preset("gaussian-packet")


@pytest.fixture
def grid_1d():
    return Grid.uniform(1, -12.0, 12.0, 512)


@pytest.fixture
def integrator_config():
    return IntegratorConfig()


@pytest.fixture
def propagator_config():
    return PropagatorConfig(dt=1e-3)


@pytest.fixture
def quarter_period():
    return np.pi / 2.0
