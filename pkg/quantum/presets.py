import logging
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from field_core.errors import ConfigurationError, InputError
from field_core.grid import Grid
from .states import GaussianPacket, GridState, HarmonicState, Potential, WaveFunction, sample_to_grid

logger = logging.getLogger(__name__)

# Ground state plus second excited state; the second coefficient is the n=2
# component of (1 - 2q^2) exp(-q^2/2) in normalized Hermite functions
EQ4_TERMS = [(1.0, 0), (-np.sqrt(2.0), 2)]
EQ4_2D_TERMS = [(1.0, (0, 0)), (-np.sqrt(2.0), (2, 0))]
# Ground state plus the (1,0) and (0,1) states with a quarter-period phase: the
# nodal set is the helix q1 + i q2 = -exp(it)/sqrt(2)
VORTEX_2D_TERMS = [(1.0, (0, 0)), (1.0, (1, 0)), (1j, (0, 1))]

PACKET_CENTER = -2.0
PACKET_MOMENTUM = 1.0
PACKET_WIDTH = 1.0

SINGULAR_COUPLING = 1.0
DEFAULT_CAP = 1e4

CoefficientSpec = Sequence[Tuple[complex, Union[int, Sequence[int]]]]


def harmonic_potential(dimension: int = 1, hbar: float = 1.0, mass: float = 1.0,
                       omega: float = 1.0) -> Potential:
    return Potential(kind="harmonic", omega=omega, hbar=hbar, masses=(mass,) * dimension)


def make_harmonic_superposition(spec: CoefficientSpec, dimension: int = 1, hbar: float = 1.0,
                                mass: float = 1.0, omega: float = 1.0) -> HarmonicState:
    """Normalized superposition of harmonic-oscillator eigenstates.

    Args:
        spec: (coefficient, eigenstate index) pairs; an index is an int in 1D
            and a tuple of per-axis quantum numbers in 2D
        dimension: Configuration-space dimension
        hbar, mass, omega: Physical constants

    Returns:
        HarmonicState with unit L2 norm at t = 0
    """
    terms = []
    for coefficient, index in spec:
        terms.append((complex(coefficient), tuple(np.atleast_1d(index).astype(int))))
    if not any(abs(c) > 0 for c, _ in terms):
        raise InputError("All superposition coefficients are zero")
    state = HarmonicState(terms, harmonic_potential(dimension, hbar, mass, omega))
    logger.debug(f"Built harmonic superposition with occupations {state.occupations}")
    return state


def _eq4(hbar, mass, omega, grid, cap):
    return make_harmonic_superposition(EQ4_TERMS, 1, hbar, mass, omega)


def _ground(hbar, mass, omega, grid, cap):
    return make_harmonic_superposition([(1.0, 0)], 1, hbar, mass, omega)


def _second_excited(hbar, mass, omega, grid, cap):
    return make_harmonic_superposition([(1.0, 2)], 1, hbar, mass, omega)


def _gaussian_packet(hbar, mass, omega, grid, cap):
    potential = Potential(kind="free", hbar=hbar, masses=(mass,))
    return GaussianPacket([PACKET_CENTER], [PACKET_MOMENTUM], PACKET_WIDTH, potential)


def _point_singular(hbar, mass, omega, grid, cap):
    if grid is None:
        raise ConfigurationError("The point-singular scenario needs a grid")
    ground = make_harmonic_superposition([(1.0, 0)], 1, hbar, mass, omega)
    potential = Potential(kind="point-singular", omega=omega, hbar=hbar, masses=(mass,),
                          centers=((0.0,),), couplings=(SINGULAR_COUPLING,),
                          harmonic_background=True, cap=cap)
    logger.info(f"Point-singular scenario uses potential cap {cap}")
    return sample_to_grid(ground, grid, 0.0, potential)


def _eq4_2d(hbar, mass, omega, grid, cap):
    return make_harmonic_superposition(EQ4_2D_TERMS, 2, hbar, mass, omega)


def _vortex_2d(hbar, mass, omega, grid, cap):
    return make_harmonic_superposition(VORTEX_2D_TERMS, 2, hbar, mass, omega)


PRESETS: Dict[str, Callable[..., WaveFunction]] = {
    "eq4": _eq4,
    "ground": _ground,
    "second-excited": _second_excited,
    "gaussian-packet": _gaussian_packet,
    "point-singular": _point_singular,
    "eq4-2d": _eq4_2d,
    "vortex-2d": _vortex_2d,
}

PRESET_DIMENSIONS = {"eq4-2d": 2, "vortex-2d": 2}


def build_preset(name: str, hbar: float = 1.0, mass: float = 1.0, omega: float = 1.0,
                 grid: Optional[Grid] = None, cap: float = DEFAULT_CAP) -> WaveFunction:
    """Construct a named scenario state at t = 0."""
    if name not in PRESETS:
        raise ConfigurationError(f"Unknown scenario '{name}'. Available: {', '.join(sorted(PRESETS))}")
    return PRESETS[name](hbar, mass, omega, grid, cap)


def is_grid_scenario(state: WaveFunction) -> bool:
    return isinstance(state, GridState)
