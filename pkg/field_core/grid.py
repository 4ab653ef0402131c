import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, InputError

logger = logging.getLogger(__name__)

MIN_POINTS = 16


@dataclass(frozen=True)
class Axis:
    """One axis of a uniform grid.

    Points are a + j*h for j = 0..n-1 with h = (b - a)/n, so a periodic axis
    identifies b with a.
    """

    start: float
    stop: float
    n: int
    periodic: bool = True

    def __post_init__(self):
        if self.n < MIN_POINTS:
            raise ConfigurationError(f"Axis needs at least {MIN_POINTS} points, got {self.n}")
        if not self.stop > self.start:
            raise ConfigurationError(f"Axis extent must satisfy b > a, got [{self.start}, {self.stop}]")
        if self.n & (self.n - 1):
            logger.debug(f"Axis point count {self.n} is not a power of two")

    @property
    def spacing(self) -> float:
        return (self.stop - self.start) / self.n

    @property
    def length(self) -> float:
        return self.stop - self.start

    def points(self) -> np.ndarray:
        return self.start + self.spacing * np.arange(self.n)

    def wavenumbers(self) -> np.ndarray:
        """Angular wavenumbers in FFT order."""
        return 2.0 * np.pi * np.fft.fftfreq(self.n, d=self.spacing)

    def refined(self) -> "Axis":
        return Axis(self.start, self.stop, 2 * self.n, self.periodic)


@dataclass(frozen=True)
class Grid:
    """Uniform grid on a box in configuration space, dimension 1 or 2."""

    axes: Tuple[Axis, ...]

    def __post_init__(self):
        if len(self.axes) not in (1, 2):
            raise ConfigurationError(f"Grid dimension must be 1 or 2, got {len(self.axes)}")

    @classmethod
    def uniform(cls, dimension: int = 1, start: float = -12.0, stop: float = 12.0,
                n: int = 256, periodic: bool = True) -> "Grid":
        """Create a grid with identical axes."""
        return cls(tuple(Axis(start, stop, n, periodic) for _ in range(dimension)))

    @property
    def dimension(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(axis.n for axis in self.axes)

    @property
    def cell_volume(self) -> float:
        return float(np.prod([axis.spacing for axis in self.axes]))

    @property
    def half_extent(self) -> float:
        """Smallest half-width of the box, measured from its center."""
        return min(axis.length / 2.0 for axis in self.axes)

    def coordinates(self) -> List[np.ndarray]:
        """Meshgrid coordinate arrays, indexing 'ij'."""
        return np.meshgrid(*[axis.points() for axis in self.axes], indexing="ij")

    def flat_points(self) -> np.ndarray:
        """All grid points as an array of shape (size, dimension)."""
        return np.stack([c.ravel() for c in self.coordinates()], axis=-1)

    def contains(self, q: np.ndarray) -> np.ndarray:
        """Mask of points lying inside the closed extent."""
        q = np.atleast_2d(q)
        inside = np.ones(q.shape[0], dtype=bool)
        for k, axis in enumerate(self.axes):
            inside &= (q[:, k] >= axis.start) & (q[:, k] <= axis.stop)
        return inside

    def refined(self) -> "Grid":
        return Grid(tuple(axis.refined() for axis in self.axes))


@dataclass(frozen=True)
class ComplexField:
    """Complex samples on a grid at one instant."""

    grid: Grid
    values: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=complex)
        if values.shape != self.grid.shape:
            raise InputError(f"Field shape {values.shape} does not match grid shape {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            raise InputError("Field contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def with_values(self, values: np.ndarray, timestamp: float = None) -> "ComplexField":
        return ComplexField(self.grid, values, self.timestamp if timestamp is None else timestamp)

    def density(self) -> "ComplexField":
        """|f|^2 as a (real-valued) complex field."""
        return self.with_values(np.abs(self.values) ** 2)


@dataclass(frozen=True)
class SpacetimePoint:
    """A configuration point q at time t."""

    q: np.ndarray
    t: float

    def __post_init__(self):
        q = np.atleast_1d(np.asarray(self.q, dtype=float))
        if not (np.all(np.isfinite(q)) and np.isfinite(self.t)):
            raise InputError(f"Spacetime point must be finite, got q={q}, t={self.t}")
        object.__setattr__(self, "q", q)


def as_points(q, dimension: int) -> np.ndarray:
    """Normalize scalar / vector / batch positions to shape (m, dimension)."""
    q = np.asarray(q, dtype=float)
    if q.ndim == 0:
        q = q.reshape(1, 1)
    elif q.ndim == 1:
        q = q.reshape(-1, 1) if dimension == 1 else q.reshape(1, -1)
    if q.shape[-1] != dimension:
        raise InputError(f"Expected positions with {dimension} components, got shape {q.shape}")
    return q


def broadcast_times(t, count: int) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return np.full(count, float(t))
    return np.broadcast_to(t, (count,)).astype(float)


def grid_from_extent(extent: Sequence[Tuple[float, float]], n: int, periodic: bool = True) -> Grid:
    return Grid(tuple(Axis(a, b, n, periodic) for a, b in extent))
