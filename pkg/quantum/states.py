import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import eval_hermite, factorial

from field_core.errors import ConfigurationError, InputError, OutOfDomainError, PreconditionError
from field_core.grid import ComplexField, Grid, as_points, broadcast_times
from field_core.utils import SplineInterpolant, quadrature, spectral_derivative

logger = logging.getLogger(__name__)

# |psi| below this fraction of sup|psi| counts as a node for the velocity field
NODE_THRESHOLD = 1e-9
NORM_TOLERANCE = 1e-10
TIME_TOLERANCE = 1e-12
SCALE_EXTENT = 12.0


@dataclass(frozen=True)
class Potential:
    """External potential with its smooth domain and singular set.

    ``kind`` is one of "harmonic", "free" or "point-singular". A point-singular
    potential is V = sum_i g_i / |q - a_i|, optionally on top of a harmonic
    background; on grids it is evaluated with ``cap`` as upper bound.
    """

    kind: str = "harmonic"
    omega: float = 1.0
    hbar: float = 1.0
    masses: Tuple[float, ...] = (1.0,)
    centers: Tuple[Tuple[float, ...], ...] = ()
    couplings: Tuple[float, ...] = ()
    harmonic_background: bool = False
    cap: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("harmonic", "free", "point-singular"):
            raise ConfigurationError(f"Unknown potential kind '{self.kind}'")
        if self.hbar <= 0 or any(m <= 0 for m in self.masses):
            raise ConfigurationError("hbar and masses must be positive")
        if self.kind == "harmonic" and self.omega <= 0:
            raise ConfigurationError("Harmonic potential needs omega > 0")
        if self.kind == "point-singular":
            if not self.centers or len(self.centers) != len(self.couplings):
                raise ConfigurationError("Point-singular potential needs matching centers and couplings")
            if any(len(c) != self.dimension for c in self.centers):
                raise ConfigurationError("Singular centers must match the configuration-space dimension")
        elif self.centers:
            raise ConfigurationError(f"A {self.kind} potential has no singular set")

    @property
    def dimension(self) -> int:
        return len(self.masses)

    @property
    def singular_set(self) -> np.ndarray:
        if not self.centers:
            return np.zeros((0, self.dimension))
        return np.asarray(self.centers, dtype=float)

    @property
    def is_smooth(self) -> bool:
        return self.singular_set.shape[0] == 0

    @property
    def has_harmonic_part(self) -> bool:
        return self.kind == "harmonic" or (self.kind == "point-singular" and self.harmonic_background)

    def capped(self, cap: float) -> "Potential":
        return Potential(self.kind, self.omega, self.hbar, self.masses, self.centers,
                         self.couplings, self.harmonic_background, cap)

    def distance_to_singular(self, q) -> np.ndarray:
        """Distance from each point to the nearest singular point (inf when S is empty)."""
        q = as_points(q, self.dimension)
        singular = self.singular_set
        if singular.shape[0] == 0:
            return np.full(q.shape[0], np.inf)
        diff = q[:, None, :] - singular[None, :, :]
        return np.min(np.linalg.norm(diff, axis=-1), axis=1)

    def values(self, q) -> np.ndarray:
        q = as_points(q, self.dimension)
        result = np.zeros(q.shape[0])
        if self.has_harmonic_part:
            masses = np.asarray(self.masses)
            result += 0.5 * self.omega ** 2 * np.sum(masses * q ** 2, axis=1)
        if self.kind == "point-singular":
            singular = self.singular_set
            with np.errstate(divide="ignore"):
                for center, coupling in zip(singular, self.couplings):
                    result = result + coupling / np.linalg.norm(q - center, axis=1)
            if self.cap is not None:
                result = np.minimum(result, self.cap)
        return result

    def grid_values(self, grid: Grid) -> np.ndarray:
        values = self.values(grid.flat_points()).reshape(grid.shape)
        if not np.all(np.isfinite(values)):
            raise ConfigurationError("Singular potential must be capped before it is used on a grid")
        return values


def free_potential(dimension: int = 1, hbar: float = 1.0, mass: float = 1.0) -> Potential:
    return Potential(kind="free", omega=1.0, hbar=hbar, masses=(mass,) * dimension)


class StateSample(NamedTuple):
    psi: np.ndarray
    grad: np.ndarray
    dpsi_dt: np.ndarray


class WaveFunction(ABC):
    """Time-dependent solution of the Schroedinger equation on configuration space.

    Positions are arrays of shape (m, d); times are scalars or arrays of length m.
    """

    potential: Potential
    timestamp: float = 0.0

    @property
    def dimension(self) -> int:
        return self.potential.dimension

    @property
    def hbar(self) -> float:
        return self.potential.hbar

    @property
    def masses(self) -> np.ndarray:
        return np.asarray(self.potential.masses, dtype=float)

    @property
    def amplitude_scale(self) -> float:
        """sup |psi| over the reference window; node thresholds are relative to it."""
        return self._amplitude_scale

    @property
    def node_threshold(self) -> float:
        return NODE_THRESHOLD * self.amplitude_scale

    @property
    def grid(self) -> Optional[Grid]:
        """Grid the state lives on, None for closed-form states."""
        return None

    @abstractmethod
    def evaluate(self, q, t) -> StateSample:
        """psi, its gradient and its time derivative at the given points."""

    @abstractmethod
    def second_derivatives(self, q, t) -> np.ndarray:
        """Unmixed second partial derivatives, shape (m, d)."""

    def psi(self, q, t) -> np.ndarray:
        return self.evaluate(q, t).psi

    def apply_hamiltonian(self, q, t) -> np.ndarray:
        q = as_points(q, self.dimension)
        second = self.second_derivatives(q, t)
        kinetic = -np.sum(self.hbar ** 2 / (2.0 * self.masses) * second, axis=1)
        return kinetic + self.potential.values(q) * self.psi(q, t)

    def conjugate(self) -> "WaveFunction":
        return ConjugateState(self)

    def valid_time_range(self) -> Tuple[float, float]:
        return (-np.inf, np.inf)


def _hermite_functions(xi: np.ndarray, orders: Sequence[int]) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
    """Normalized Hermite functions and their xi-derivatives for the requested orders."""
    gaussian = np.exp(-0.5 * xi ** 2)
    table = {}
    for n in sorted(set(orders)):
        norm = 1.0 / np.sqrt(2.0 ** n * factorial(n, exact=True) * np.sqrt(np.pi))
        h_n = eval_hermite(n, xi)
        h_lower = 2.0 * n * eval_hermite(n - 1, xi) if n > 0 else np.zeros_like(xi)
        table[n] = (norm * h_n * gaussian, norm * (h_lower - xi * h_n) * gaussian)
    return table


class HarmonicState(WaveFunction):
    """Finite eigen-expansion in the harmonic-oscillator basis.

    Each term is (coefficient, index tuple); the coefficient refers to the
    time ``timestamp`` and picks up the phase exp(-i E (t - timestamp) / hbar).
    """

    def __init__(self, terms: Sequence[Tuple[complex, Tuple[int, ...]]], potential: Potential,
                 timestamp: float = 0.0, normalize: bool = True):
        if potential.kind != "harmonic":
            raise ConfigurationError("HarmonicState needs a harmonic potential")
        self.potential = potential
        self.timestamp = float(timestamp)

        combined: Dict[Tuple[int, ...], complex] = {}
        for coefficient, index in terms:
            index = tuple(int(i) for i in np.atleast_1d(index))
            if len(index) != self.dimension or any(i < 0 for i in index):
                raise InputError(f"Eigenstate index {index} does not fit dimension {self.dimension}")
            combined[index] = combined.get(index, 0.0) + complex(coefficient)
        combined = {index: c for index, c in combined.items() if c != 0}
        if not combined:
            raise InputError("Harmonic superposition needs at least one nonzero coefficient")

        self.indices = sorted(combined)
        coefficients = np.array([combined[index] for index in self.indices], dtype=complex)
        self.normalization = float(np.sqrt(np.sum(np.abs(coefficients) ** 2)))
        if normalize:
            coefficients = coefficients / self.normalization
        self.coefficients = coefficients
        self.energies = np.array([self.energy(index) for index in self.indices])
        self._scales = np.sqrt(self.masses * potential.omega / potential.hbar)
        self._amplitude_scale = self._estimate_amplitude_scale()

    def energy(self, index: Tuple[int, ...]) -> float:
        return self.hbar * self.potential.omega * (sum(index) + 0.5 * self.dimension)

    @property
    def occupations(self) -> np.ndarray:
        return np.abs(self.coefficients) ** 2 / np.sum(np.abs(self.coefficients) ** 2)

    def _phases(self, t: np.ndarray) -> np.ndarray:
        return np.exp(-1j * np.outer(t - self.timestamp, self.energies) / self.hbar)

    def _basis(self, q: np.ndarray):
        """Per-term basis values, gradients and unmixed second derivatives."""
        m = q.shape[0]
        values = np.ones((m, len(self.indices)))
        grads = np.ones((m, len(self.indices), self.dimension))
        seconds = np.ones((m, len(self.indices), self.dimension))
        for axis in range(self.dimension):
            scale = self._scales[axis]
            xi = scale * q[:, axis]
            orders = [index[axis] for index in self.indices]
            table = _hermite_functions(xi, orders)
            for term, n in enumerate(orders):
                phi, dphi = table[n]
                phi = np.sqrt(scale) * phi
                dphi = scale ** 1.5 * dphi
                d2phi = scale ** 2 * (xi ** 2 - (2 * n + 1)) * phi
                values[:, term] *= phi
                for other in range(self.dimension):
                    grads[:, term, other] *= dphi if other == axis else phi
                    seconds[:, term, other] *= d2phi if other == axis else phi
        return values, grads, seconds

    def evaluate(self, q, t) -> StateSample:
        q = as_points(q, self.dimension)
        t = broadcast_times(t, q.shape[0])
        values, grads, _ = self._basis(q)
        weights = self._phases(t) * self.coefficients
        psi = np.sum(values * weights, axis=1)
        grad = np.einsum("mnk,mn->mk", grads, weights)
        dpsi_dt = np.sum(values * weights * (-1j * self.energies / self.hbar), axis=1)
        return StateSample(psi, grad, dpsi_dt)

    def second_derivatives(self, q, t) -> np.ndarray:
        q = as_points(q, self.dimension)
        t = broadcast_times(t, q.shape[0])
        _, _, seconds = self._basis(q)
        weights = self._phases(t) * self.coefficients
        return np.einsum("mnk,mn->mk", seconds, weights)

    def apply_hamiltonian(self, q, t) -> np.ndarray:
        # exact in the eigenbasis: H phi_n = E_n phi_n
        q = as_points(q, self.dimension)
        t = broadcast_times(t, q.shape[0])
        values, _, _ = self._basis(q)
        weights = self._phases(t) * self.coefficients * self.energies
        return np.sum(values * weights, axis=1)

    def advanced(self, dt: float) -> "HarmonicState":
        """Same solution with coefficients re-referenced to ``timestamp + dt``."""
        phases = np.exp(-1j * self.energies * dt / self.hbar)
        terms = list(zip(self.coefficients * phases, self.indices))
        return HarmonicState(terms, self.potential, self.timestamp + dt, normalize=False)

    def _estimate_amplitude_scale(self) -> float:
        if self.dimension == 1:
            axis = np.linspace(-SCALE_EXTENT, SCALE_EXTENT, 2049)[:, None]
        else:
            line = np.linspace(-SCALE_EXTENT, SCALE_EXTENT, 129)
            axis = np.stack([c.ravel() for c in np.meshgrid(line, line, indexing="ij")], axis=-1)
        values, _, _ = self._basis(axis)
        period = 2.0 * np.pi / self.potential.omega
        best = 0.0
        for t in np.linspace(0.0, period, 33):
            best = max(best, float(np.max(np.abs(values @ (self._phases(np.array([t]))[0] * self.coefficients)))))
        return best


class GaussianPacket(WaveFunction):
    """Closed-form free Gaussian wave packet.

    At ``origin`` the packet is prod_k (2 pi sigma^2)^(-1/4)
    exp(-(q_k - c_k)^2 / (4 sigma^2) + i p_k (q_k - c_k)); |psi|^2 has standard
    deviation sigma along each axis. ``timestamp`` is the reference time the
    state is considered to be at and only moves under evolution.
    """

    def __init__(self, center: Sequence[float], momentum: Sequence[float], width: float,
                 potential: Potential, origin: float = 0.0, timestamp: Optional[float] = None):
        if potential.kind != "free":
            raise ConfigurationError("GaussianPacket is a free-particle solution")
        if width <= 0:
            raise InputError("Packet width must be positive")
        self.potential = potential
        self.center = np.asarray(center, dtype=float).reshape(-1)
        self.momentum = np.asarray(momentum, dtype=float).reshape(-1)
        if self.center.size != self.dimension or self.momentum.size != self.dimension:
            raise InputError("Packet center and momentum must match the dimension")
        self.width = float(width)
        self.origin = float(origin)
        self.timestamp = self.origin if timestamp is None else float(timestamp)
        self._amplitude_scale = float((2.0 * np.pi * self.width ** 2) ** (-0.25 * self.dimension))

    def _log_factors(self, q: np.ndarray, t: np.ndarray):
        tau = (t - self.origin)[:, None]
        sigma2 = self.width ** 2
        alpha = 1.0 + 1j * self.hbar * tau / (2.0 * self.masses * sigma2)
        velocity = self.hbar * self.momentum / self.masses
        u = q - self.center - velocity * tau
        log_psi = (-0.25 * np.log(2.0 * np.pi * sigma2) - 0.5 * np.log(alpha)
                   - u ** 2 / (4.0 * sigma2 * alpha)
                   + 1j * self.momentum * (q - self.center)
                   - 1j * self.hbar * self.momentum ** 2 * tau / (2.0 * self.masses))
        slope = -u / (2.0 * sigma2 * alpha) + 1j * self.momentum
        return np.sum(log_psi, axis=1), slope, alpha

    def evaluate(self, q, t) -> StateSample:
        q = as_points(q, self.dimension)
        t = broadcast_times(t, q.shape[0])
        log_psi, slope, alpha = self._log_factors(q, t)
        psi = np.exp(log_psi)
        grad = psi[:, None] * slope
        second = psi[:, None] * (slope ** 2 - 1.0 / (2.0 * self.width ** 2 * alpha))
        dpsi_dt = 0.5j * self.hbar * np.sum(second / self.masses, axis=1)
        return StateSample(psi, grad, dpsi_dt)

    def second_derivatives(self, q, t) -> np.ndarray:
        q = as_points(q, self.dimension)
        t = broadcast_times(t, q.shape[0])
        log_psi, slope, alpha = self._log_factors(q, t)
        psi = np.exp(log_psi)
        return psi[:, None] * (slope ** 2 - 1.0 / (2.0 * self.width ** 2 * alpha))

    def advanced(self, dt: float) -> "GaussianPacket":
        return GaussianPacket(self.center, self.momentum, self.width, self.potential,
                              self.origin, self.timestamp + dt)


class GridState(WaveFunction):
    """Wave function sampled on a periodic grid at a single instant."""

    def __init__(self, field: ComplexField, potential: Potential, normalize: bool = True):
        if field.grid.dimension != potential.dimension:
            raise ConfigurationError("Grid and potential dimensions differ")
        if not all(axis.periodic for axis in field.grid.axes):
            raise ConfigurationError("GridState needs a periodic grid")
        self.normalization = float(np.sqrt(quadrature(field, "abs2")))
        if self.normalization == 0.0:
            raise InputError("Grid wave function vanishes identically")
        if normalize and abs(self.normalization - 1.0) > NORM_TOLERANCE:
            field = field.with_values(field.values / self.normalization)
        self.field = field
        self.potential = potential
        self.timestamp = float(field.timestamp)
        self._amplitude_scale = float(np.max(np.abs(field.values)))
        self._interpolants: Dict[str, SplineInterpolant] = {}

    @property
    def grid(self) -> Grid:
        return self.field.grid

    def potential_values(self) -> np.ndarray:
        return self.potential.grid_values(self.grid)

    def gradient_fields(self) -> List[ComplexField]:
        return [spectral_derivative(self.field, axis) for axis in range(self.dimension)]

    def second_derivative_fields(self) -> List[ComplexField]:
        return [spectral_derivative(self.field, axis, order=2) for axis in range(self.dimension)]

    def hamiltonian_field(self) -> ComplexField:
        kinetic = np.zeros(self.grid.shape, dtype=complex)
        for axis, second in enumerate(self.second_derivative_fields()):
            kinetic -= self.hbar ** 2 / (2.0 * self.masses[axis]) * second.values
        return self.field.with_values(kinetic + self.potential_values() * self.field.values)

    def _interpolant(self, name: str) -> SplineInterpolant:
        if name not in self._interpolants:
            if name == "psi":
                source = self.field
            elif name == "hpsi":
                source = self.hamiltonian_field()
            elif name.startswith("d2_"):
                source = spectral_derivative(self.field, int(name[3:]), order=2)
            else:
                source = spectral_derivative(self.field, int(name[2:]))
            self._interpolants[name] = SplineInterpolant(source)
        return self._interpolants[name]

    def _check_time(self, t) -> None:
        t = np.asarray(t, dtype=float)
        if np.any(np.abs(t - self.timestamp) > TIME_TOLERANCE * max(1.0, abs(self.timestamp))):
            raise PreconditionError(f"GridState is only defined at t={self.timestamp}")

    def evaluate(self, q, t) -> StateSample:
        self._check_time(t)
        q = as_points(q, self.dimension)
        psi = self._interpolant("psi")(q)
        grad = np.stack([self._interpolant(f"d_{axis}")(q) for axis in range(self.dimension)], axis=1)
        dpsi_dt = -1j * self._interpolant("hpsi")(q) / self.hbar
        return StateSample(psi, grad, dpsi_dt)

    def second_derivatives(self, q, t) -> np.ndarray:
        self._check_time(t)
        q = as_points(q, self.dimension)
        return np.stack([self._interpolant(f"d2_{axis}")(q) for axis in range(self.dimension)], axis=1)

    def apply_hamiltonian(self, q, t) -> np.ndarray:
        self._check_time(t)
        return self._interpolant("hpsi")(as_points(q, self.dimension))

    def valid_time_range(self) -> Tuple[float, float]:
        return (self.timestamp, self.timestamp)


class GridHistory(WaveFunction):
    """Grid-evolved wave function available at any time between its snapshots.

    Values and gradients use cubic Hermite interpolation in time (the time
    derivative at a snapshot is -i H psi / hbar); second derivatives are
    interpolated linearly.
    """

    def __init__(self, snapshots: Sequence[GridState]):
        if len(snapshots) < 2:
            raise InputError("GridHistory needs at least two snapshots")
        times = np.array([s.timestamp for s in snapshots])
        if np.any(np.diff(times) <= 0):
            raise InputError("Snapshot times must be strictly increasing")
        self.snapshots = list(snapshots)
        self.times = times
        self.potential = snapshots[0].potential
        self.timestamp = float(times[0])
        self._amplitude_scale = max(s.amplitude_scale for s in snapshots)
        self._time_derivative_gradients: Dict[Tuple[int, int], SplineInterpolant] = {}

    @property
    def grid(self) -> Grid:
        return self.snapshots[0].grid

    def valid_time_range(self) -> Tuple[float, float]:
        return (float(self.times[0]), float(self.times[-1]))

    def _locate(self, t: np.ndarray) -> np.ndarray:
        lo, hi = self.valid_time_range()
        slack = TIME_TOLERANCE * max(1.0, abs(hi))
        if np.any(t < lo - slack) or np.any(t > hi + slack):
            raise OutOfDomainError(f"Time outside the evolved interval [{lo}, {hi}]")
        return np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2)

    def _dgrad_dt(self, snapshot: int, axis: int) -> SplineInterpolant:
        key = (snapshot, axis)
        if key not in self._time_derivative_gradients:
            state = self.snapshots[snapshot]
            hpsi = state.hamiltonian_field()
            self._time_derivative_gradients[key] = SplineInterpolant(
                hpsi.with_values(-1j * spectral_derivative(hpsi, axis).values / self.hbar))
        return self._time_derivative_gradients[key]

    def evaluate(self, q, t) -> StateSample:
        q = as_points(q, self.dimension)
        t = broadcast_times(t, q.shape[0])
        interval = self._locate(t)
        psi = np.empty(q.shape[0], dtype=complex)
        grad = np.empty(q.shape, dtype=complex)
        dpsi_dt = np.empty(q.shape[0], dtype=complex)
        for i in np.unique(interval):
            rows = np.flatnonzero(interval == i)
            left, right = self.snapshots[i], self.snapshots[i + 1]
            width = self.times[i + 1] - self.times[i]
            s = (t[rows] - self.times[i]) / width
            h00, h10, h01, h11 = 2 * s ** 3 - 3 * s ** 2 + 1, s ** 3 - 2 * s ** 2 + s, -2 * s ** 3 + 3 * s ** 2, s ** 3 - s ** 2
            d00, d10, d01, d11 = 6 * s ** 2 - 6 * s, 3 * s ** 2 - 4 * s + 1, -6 * s ** 2 + 6 * s, 3 * s ** 2 - 2 * s
            a = left.evaluate(q[rows], left.timestamp)
            b = right.evaluate(q[rows], right.timestamp)
            psi[rows] = h00 * a.psi + h10 * width * a.dpsi_dt + h01 * b.psi + h11 * width * b.dpsi_dt
            dpsi_dt[rows] = (d00 * a.psi + d01 * b.psi) / width + d10 * a.dpsi_dt + d11 * b.dpsi_dt
            for axis in range(self.dimension):
                ga = self._dgrad_dt(i, axis)(q[rows])
                gb = self._dgrad_dt(i + 1, axis)(q[rows])
                grad[rows, axis] = (h00 * a.grad[:, axis] + h10 * width * ga
                                    + h01 * b.grad[:, axis] + h11 * width * gb)
        return StateSample(psi, grad, dpsi_dt)

    def second_derivatives(self, q, t) -> np.ndarray:
        q = as_points(q, self.dimension)
        t = broadcast_times(t, q.shape[0])
        interval = self._locate(t)
        result = np.empty(q.shape, dtype=complex)
        for i in np.unique(interval):
            rows = np.flatnonzero(interval == i)
            left, right = self.snapshots[i], self.snapshots[i + 1]
            s = ((t[rows] - self.times[i]) / (self.times[i + 1] - self.times[i]))[:, None]
            result[rows] = ((1 - s) * left.second_derivatives(q[rows], left.timestamp)
                            + s * right.second_derivatives(q[rows], right.timestamp))
        return result

    def apply_hamiltonian(self, q, t) -> np.ndarray:
        return 1j * self.hbar * self.evaluate(q, t).dpsi_dt


class ConjugateState(WaveFunction):
    """Complex conjugate of a wave function: the time-reversed flow."""

    def __init__(self, base: WaveFunction):
        self.base = base
        self.potential = base.potential
        self.timestamp = base.timestamp
        self._amplitude_scale = base.amplitude_scale

    @property
    def grid(self) -> Optional[Grid]:
        return self.base.grid

    def evaluate(self, q, t) -> StateSample:
        sample = self.base.evaluate(q, t)
        return StateSample(np.conj(sample.psi), np.conj(sample.grad), np.conj(sample.dpsi_dt))

    def second_derivatives(self, q, t) -> np.ndarray:
        return np.conj(self.base.second_derivatives(q, t))

    def apply_hamiltonian(self, q, t) -> np.ndarray:
        return np.conj(self.base.apply_hamiltonian(q, t))

    def conjugate(self) -> WaveFunction:
        return self.base

    def valid_time_range(self) -> Tuple[float, float]:
        return self.base.valid_time_range()


def sample_to_grid(state: WaveFunction, grid: Grid, t: Optional[float] = None,
                   potential: Optional[Potential] = None) -> GridState:
    """Sample any wave function onto a periodic grid as a normalized GridState."""
    t = state.timestamp if t is None else float(t)
    values = state.psi(grid.flat_points(), t).reshape(grid.shape)
    return GridState(ComplexField(grid, values, t), potential or state.potential)
