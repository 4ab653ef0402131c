import logging
from typing import List, Literal, Optional, Tuple

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from field_core.errors import ConfigurationError, InputError, PreconditionError
from field_core.grid import ComplexField
from field_core.utils import quadrature, spectral_derivative
from quantum.states import (GaussianPacket, GridHistory, GridState, HarmonicState,
                            WaveFunction)

logger = logging.getLogger(__name__)


class PropagatorConfig(BaseModel):
    """Time-stepping parameters for wave-function evolution."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    dt: float = Field(1e-3, gt=0)
    scheme: Literal["analytic", "split-step"] = "split-step"
    cap: float = Field(1e4, gt=0)
    history_interval: float = Field(0.01, gt=0)


class SplitStepPropagator:
    """Strang splitting exp(-iV dt/2) exp(-iT dt) exp(-iV dt/2) on a periodic grid."""

    def __init__(self, state: GridState, dt: float):
        if not all(axis.periodic for axis in state.grid.axes):
            raise ConfigurationError("Split-step propagation needs a periodic grid")
        if not state.potential.is_smooth and state.potential.cap is None:
            raise ConfigurationError("Singular potential must be capped for split-step propagation")
        self.grid = state.grid
        self.potential = state.potential
        self.hbar = state.hbar
        self.masses = state.masses
        self.dt = float(dt)
        self.potential_values = self.potential.grid_values(self.grid)
        self._exp_potential = np.exp(-0.5j * self.dt * self.potential_values / self.hbar)

        kinetic = np.zeros(self.grid.shape)
        wavenumbers = np.meshgrid(*[a.wavenumbers() for a in self.grid.axes], indexing="ij")
        for axis, k in enumerate(wavenumbers):
            kinetic = kinetic + self.hbar * k ** 2 / (2.0 * self.masses[axis])
        self._exp_kinetic = np.exp(-1j * self.dt * kinetic)

    def __call__(self, values: np.ndarray) -> np.ndarray:
        """Advance raw grid values by one step of size ``dt``."""
        half = values * self._exp_potential
        half = np.fft.ifftn(np.fft.fftn(half) * self._exp_kinetic)
        return half * self._exp_potential

    def evolve(self, state: GridState, steps: int, record_every: Optional[int] = None,
               progress: bool = False) -> Tuple[GridState, List[GridState]]:
        """Take ``steps`` steps from ``state``.

        Returns:
            The final state and, when ``record_every`` is set, the snapshots taken
            every ``record_every`` steps including both end points
        """
        values = np.array(state.field.values)
        t0 = state.timestamp
        snapshots = [state] if record_every else []
        for step in tqdm(range(1, steps + 1), desc="split-step", disable=not progress):
            values = self(values)
            if record_every and (step % record_every == 0 or step == steps):
                snapshots.append(self._snapshot(values, t0 + step * self.dt))
        final = snapshots[-1] if record_every else self._snapshot(values, t0 + steps * self.dt)
        drift = abs(final.normalization - state.normalization)
        logger.debug(f"Split-step: {steps} steps of {self.dt:.3e}, norm drift {drift:.3e}")
        return final, snapshots

    def _snapshot(self, values: np.ndarray, t: float) -> GridState:
        return GridState(ComplexField(self.grid, values, t), self.potential, normalize=False)


def _step_plan(t0: float, t_final: float, dt: float) -> Tuple[int, float]:
    span = t_final - t0
    steps = max(1, int(np.ceil(abs(span) / dt - 1e-9)))
    return steps, span / steps


def evolve_analytic(state: WaveFunction, t: float) -> WaveFunction:
    """Re-reference a closed-form state to time ``t``.

    Every eigen-coefficient picks up exp(-i E_n (t - t0) / hbar); the solution as
    a function of (q, t) is unchanged.
    """
    if not isinstance(state, (HarmonicState, GaussianPacket)):
        raise PreconditionError("evolve_analytic needs a closed-form state")
    if t == state.timestamp:
        return state
    return state.advanced(t - state.timestamp)


def evolve_splitstep(state: GridState, t_final: float, config: PropagatorConfig,
                     progress: bool = False) -> GridState:
    """Split-step evolution of a grid state to ``t_final`` (forward or backward)."""
    if not isinstance(state, GridState):
        raise PreconditionError("evolve_splitstep needs a GridState")
    if t_final == state.timestamp:
        return state
    steps, dt = _step_plan(state.timestamp, t_final, config.dt)
    final, _ = SplitStepPropagator(state, dt).evolve(state, steps, progress=progress)
    return final


def record_history(state: GridState, t_final: float, config: PropagatorConfig,
                   progress: bool = False) -> GridHistory:
    """Evolve a grid state and keep snapshots every ``history_interval``."""
    if t_final <= state.timestamp:
        raise InputError("History recording runs forward in time")
    steps, dt = _step_plan(state.timestamp, t_final, config.dt)
    record_every = max(1, int(round(config.history_interval / dt)))
    _, snapshots = SplitStepPropagator(state, dt).evolve(state, steps, record_every, progress)
    logger.info(f"Recorded {len(snapshots)} snapshots on [{state.timestamp}, {t_final}]")
    return GridHistory(snapshots)


def evolve(state: WaveFunction, t: float, config: PropagatorConfig, progress: bool = False) -> WaveFunction:
    if isinstance(state, GridState):
        if config.scheme == "analytic":
            raise ConfigurationError("Grid states can only be evolved with the split-step scheme")
        return evolve_splitstep(state, t, config, progress)
    return evolve_analytic(state, t)


def time_dependent(state: WaveFunction, t_end: float, config: PropagatorConfig,
                   progress: bool = False) -> WaveFunction:
    """A state that can be evaluated at every time in [timestamp, t_end]."""
    if isinstance(state, GridState):
        return record_history(state, t_end, config, progress)
    return state


def apply_grid_hamiltonian(field: ComplexField, state: GridState) -> ComplexField:
    kinetic = np.zeros(field.grid.shape, dtype=complex)
    for axis in range(field.grid.dimension):
        second = spectral_derivative(field, axis, order=2).values
        kinetic -= state.hbar ** 2 / (2.0 * state.masses[axis]) * second
    return field.with_values(kinetic + state.potential_values() * field.values)


def _packet_moment(state: GaussianPacket, power: int) -> float:
    # momentum density is Gaussian with mean hbar*p and spread hbar/(2 sigma) per axis
    nodes, weights = hermegauss(power + 2)
    weights = weights / np.sqrt(2.0 * np.pi)
    spread = state.hbar / (2.0 * state.width)
    kinetic = np.zeros(1)
    combined = np.ones(1)
    for axis in range(state.dimension):
        p = state.hbar * state.momentum[axis] + spread * nodes
        kinetic = np.add.outer(kinetic, p ** 2 / (2.0 * state.masses[axis])).ravel()
        combined = np.outer(combined, weights).ravel()
    return float(np.sum(combined * kinetic ** power))


def energy_moment(state: WaveFunction, n: int) -> float:
    """<psi| H^(2n) psi>, the squared norm of H^n psi.

    Exact for eigen-expansions and free packets; spectral application of H on
    the grid for grid states with a smooth potential.
    """
    if n <= 0:
        raise InputError(f"Energy moment order must be >= 1, got {n}")
    if isinstance(state, HarmonicState):
        return float(np.sum(state.occupations * state.energies ** (2 * n)))
    if isinstance(state, GaussianPacket):
        return _packet_moment(state, 2 * n)
    if isinstance(state, GridHistory):
        state = state.snapshots[0]
    if not isinstance(state, GridState):
        raise PreconditionError(f"No energy moment available for {type(state).__name__}")
    if not state.potential.is_smooth:
        raise PreconditionError("Grid energy moments need a smooth potential")
    field = state.field
    for _ in range(n):
        field = apply_grid_hamiltonian(field, state)
    return quadrature(field, "abs2") / quadrature(state.field, "abs2")


def mean_energy(state: WaveFunction) -> float:
    """<psi|H psi>, the auxiliary first moment."""
    if isinstance(state, HarmonicState):
        return float(np.sum(state.occupations * state.energies))
    if isinstance(state, GaussianPacket):
        return _packet_moment(state, 1)
    if isinstance(state, GridHistory):
        state = state.snapshots[0]
    if not isinstance(state, GridState):
        raise PreconditionError(f"No mean energy available for {type(state).__name__}")
    hpsi = apply_grid_hamiltonian(state.field, state)
    overlap = np.sum(np.conj(state.field.values) * hpsi.values) * state.grid.cell_volume
    return float(np.real(overlap)) / quadrature(state.field, "abs2")
