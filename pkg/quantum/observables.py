import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from field_core.grid import as_points, broadcast_times
from .states import WaveFunction

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VelocitySample:
    """Guiding-equation velocity at one space-time point.

    ``v`` is None when the point is not regular (|psi| at or below the node threshold).
    """

    v: np.ndarray
    psi_abs: float
    regular: bool

    def __post_init__(self):
        if self.regular and (self.v is None or not np.all(np.isfinite(self.v))):
            raise ValueError("Regular velocity samples must carry a finite velocity")


def eval_psi(state: WaveFunction, q, t: float) -> complex:
    """Value of the wave function at one configuration point."""
    return complex(state.psi(as_points(q, state.dimension)[:1], t)[0])


def velocity_field(state: WaveFunction, q, t) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized velocity field.

    Args:
        state: Wave function to guide the particles
        q: Positions, shape (m, d)
        t: Scalar time or per-point times

    Returns:
        (v, psi_abs, regular): v has shape (m, d) with NaN rows at irregular points
    """
    q = as_points(q, state.dimension)
    sample = state.evaluate(q, broadcast_times(t, q.shape[0]))
    psi_abs = np.abs(sample.psi)
    regular = psi_abs > state.node_threshold
    v = np.full(q.shape, np.nan)
    if np.any(regular):
        ratio = sample.grad[regular] / sample.psi[regular, None]
        v[regular] = state.hbar / state.masses * np.imag(ratio)
    return v, psi_abs, regular


def velocity(state: WaveFunction, q, t: float) -> VelocitySample:
    v, psi_abs, regular = velocity_field(state, as_points(q, state.dimension)[:1], t)
    if not regular[0]:
        return VelocitySample(None, float(psi_abs[0]), False)
    return VelocitySample(v[0], float(psi_abs[0]), True)


def current_field(state: WaveFunction, q, t) -> np.ndarray:
    """Probability current (hbar/m) Im(conj(psi) grad psi), shape (m, d)."""
    q = as_points(q, state.dimension)
    sample = state.evaluate(q, broadcast_times(t, q.shape[0]))
    return state.hbar / state.masses * np.imag(np.conj(sample.psi)[:, None] * sample.grad)


def current(state: WaveFunction, q, t: float) -> np.ndarray:
    return current_field(state, as_points(q, state.dimension)[:1], t)[0]


def spacetime_flux_field(state: WaveFunction, q, t) -> np.ndarray:
    """Space-time flux (j, |psi|^2), shape (m, d + 1)."""
    q = as_points(q, state.dimension)
    sample = state.evaluate(q, broadcast_times(t, q.shape[0]))
    j = state.hbar / state.masses * np.imag(np.conj(sample.psi)[:, None] * sample.grad)
    return np.concatenate([j, (np.abs(sample.psi) ** 2)[:, None]], axis=1)


def spacetime_flux(state: WaveFunction, q, t: float) -> np.ndarray:
    return spacetime_flux_field(state, as_points(q, state.dimension)[:1], t)[0]
