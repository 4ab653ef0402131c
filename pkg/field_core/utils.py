import logging
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq

from .errors import ConfigurationError, InputError, OutOfDomainError, PreconditionError
from .grid import ComplexField, as_points

logger = logging.getLogger(__name__)

CDF_MASS_TOLERANCE = 1e-6
CDF_CHUNK = 2048

QUADRATURE_WEIGHTS = {
    "abs2": lambda f: np.abs(f) ** 2,
    "abs": np.abs,
    "real": np.real,
    "imag": np.imag,
}


def _check_finite(field: ComplexField) -> None:
    if not np.all(np.isfinite(field.values)):
        raise InputError("Field contains NaN or infinite values")


def _spectral_multiply(field: ComplexField, axis: int, order: int) -> np.ndarray:
    if axis < 0 or axis >= field.grid.dimension:
        raise InputError(f"Axis {axis} out of range for a {field.grid.dimension}-d grid")
    grid_axis = field.grid.axes[axis]
    if not grid_axis.periodic:
        raise ConfigurationError(f"Spectral derivative needs a periodic axis, axis {axis} is not")
    _check_finite(field)

    k = grid_axis.wavenumbers()
    symbol = (1j * k) ** order
    if order % 2 == 1 and grid_axis.n % 2 == 0:
        # odd derivatives of the Nyquist mode are not representable
        symbol[grid_axis.n // 2] = 0.0
    shape = [1] * field.grid.dimension
    shape[axis] = grid_axis.n
    transformed = np.fft.fft(field.values, axis=axis)
    return np.fft.ifft(transformed * symbol.reshape(shape), axis=axis)


def spectral_derivative(field: ComplexField, axis: int = 0, order: int = 1) -> ComplexField:
    """Partial derivative of a periodic field computed with the FFT.

    Args:
        field: Field sampled on a grid periodic along ``axis``
        axis: Axis index to differentiate along
        order: Derivative order

    Returns:
        The derivative as a new field with the same grid and timestamp
    """
    return field.with_values(_spectral_multiply(field, axis, order))


def spectral_laplacian(field: ComplexField) -> ComplexField:
    total = np.zeros(field.grid.shape, dtype=complex)
    for axis in range(field.grid.dimension):
        total += _spectral_multiply(field, axis, 2)
    return field.with_values(total)


def quadrature(field: ComplexField, weight: str = "abs2") -> float:
    """Periodic rectangle-rule integral of a field.

    ``weight`` selects the integrand: "abs2" for |f|^2, "abs", "real" or "imag".
    """
    if weight not in QUADRATURE_WEIGHTS:
        raise InputError(f"Unknown quadrature weight '{weight}'")
    _check_finite(field)
    integrand = QUADRATURE_WEIGHTS[weight](field.values)
    return float(np.sum(integrand) * field.grid.cell_volume)


class SplineInterpolant:
    """Cubic (1D) / bicubic (2D) spline interpolant of a grid field.

    Coefficients are prefiltered once; each query is then O(1).
    """

    def __init__(self, field: ComplexField):
        self.grid = field.grid
        self.periodic = all(axis.periodic for axis in self.grid.axes)
        self.mode = "grid-wrap" if self.periodic else "mirror"
        self._real = ndimage.spline_filter(np.ascontiguousarray(field.values.real), order=3, mode=self.mode)
        self._imag = ndimage.spline_filter(np.ascontiguousarray(field.values.imag), order=3, mode=self.mode)

    def _index_coordinates(self, q: np.ndarray) -> np.ndarray:
        q = as_points(q, self.grid.dimension)
        outside = ~self.grid.contains(q)
        if np.any(outside):
            bad = q[outside][0]
            raise OutOfDomainError(f"Query point {bad} lies outside the grid extent")
        coords = np.empty((self.grid.dimension, q.shape[0]))
        for k, axis in enumerate(self.grid.axes):
            coords[k] = (q[:, k] - axis.start) / axis.spacing
        return coords

    def __call__(self, q) -> np.ndarray:
        coords = self._index_coordinates(q)
        real = ndimage.map_coordinates(self._real, coords, order=3, mode=self.mode, prefilter=False)
        imag = ndimage.map_coordinates(self._imag, coords, order=3, mode=self.mode, prefilter=False)
        return real + 1j * imag


def interpolate(field: ComplexField, q) -> complex:
    """Value of the cubic spline interpolant of ``field`` at a single position."""
    return complex(SplineInterpolant(field)(q)[0])


class SpectralCdf:
    """Cumulative distribution of a 1D periodic density.

    The density is expanded in its Fourier series; the antiderivative of the
    series is evaluated exactly at any position, which keeps the CDF spectrally
    accurate between grid points.
    """

    def __init__(self, density: ComplexField, check_mass: bool = True):
        if density.grid.dimension != 1:
            raise PreconditionError("cdf_1d requires a one-dimensional grid")
        axis = density.grid.axes[0]
        if not axis.periodic:
            raise ConfigurationError("cdf_1d requires a periodic grid")
        values = np.real(density.values)
        self.axis = axis
        self.mass = float(np.sum(values) * axis.spacing)
        if check_mass and abs(self.mass - 1.0) > CDF_MASS_TOLERANCE:
            raise PreconditionError(f"Density is not normalized: total mass {self.mass:.3e}")

        coefficients = np.fft.fft(values) / axis.n
        k = axis.wavenumbers()
        self._mean = float(coefficients[0].real)
        nonzero = k != 0.0
        if axis.n % 2 == 0:
            nonzero[axis.n // 2] = False
        self._k = k[nonzero]
        self._g = coefficients[nonzero] / (1j * self._k)
        self._g_full = np.zeros(axis.n, dtype=complex)
        self._g_full[nonzero] = self._g

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        u = np.clip(x - self.axis.start, 0.0, self.axis.length)
        result = np.empty_like(u)
        for lo in range(0, u.size, CDF_CHUNK):
            chunk = u[lo:lo + CDF_CHUNK]
            phases = np.exp(1j * np.outer(chunk, self._k)) - 1.0
            result[lo:lo + CDF_CHUNK] = self._mean * chunk + np.real(phases @ self._g)
        return np.clip(result, 0.0, self.mass)

    def table(self, size: int = 2 ** 14):
        """CDF on ``size + 1`` equally spaced positions covering the extent."""
        n = self.axis.n
        half = n // 2
        padded = np.zeros(size, dtype=complex)
        padded[:half] = self._g_full[:half]
        padded[size - (half - 1):] = self._g_full[half + 1:]
        periodic_part = np.real(np.fft.ifft(padded) * size)
        u = self.axis.length * np.arange(size + 1) / size
        values = np.empty(size + 1)
        values[:-1] = self._mean * u[:-1] + periodic_part - periodic_part[0]
        values[-1] = self.mass
        values = np.clip(np.maximum.accumulate(values), 0.0, self.mass)
        return self.axis.start + u, values

    def inverse_interpolant(self, size: int = 2 ** 14) -> PchipInterpolator:
        """Monotone interpolant of the quantile function built from :meth:`table`."""
        x, values = self.table(size)
        keep = np.concatenate(([True], np.diff(values) > 0.0))
        return PchipInterpolator(values[keep], x[keep], extrapolate=False)

    def quantile(self, p: float, xtol: float = 1e-13) -> float:
        """Position where the CDF reaches ``p``, by bracketed root finding."""
        if p <= 0.0:
            return self.axis.start
        if p >= self.mass:
            return self.axis.stop
        return float(brentq(lambda x: self(x)[0] - p, self.axis.start, self.axis.stop,
                            xtol=xtol, rtol=4 * np.finfo(float).eps, maxiter=200))


def cdf_1d(density: ComplexField, x) -> float:
    """Integral of a normalized 1D density from the left extent up to ``x``."""
    return float(SpectralCdf(density)(x)[0])


def simpson_weights(n: int, length: float) -> np.ndarray:
    """Composite Simpson weights for ``n`` (odd) equally spaced nodes."""
    if n < 3 or n % 2 == 0:
        raise InputError(f"Simpson quadrature needs an odd node count >= 3, got {n}")
    weights = np.ones(n)
    weights[1:-1:2] = 4.0
    weights[2:-1:2] = 2.0
    return weights * length / (3.0 * (n - 1))


def merge_intervals(intervals: Sequence[Sequence[float]]) -> list:
    """Union of closed intervals as a sorted list of disjoint intervals."""
    merged = []
    for lo, hi in sorted((float(a), float(b)) for a, b in intervals if b > a):
        if merged and lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return merged
