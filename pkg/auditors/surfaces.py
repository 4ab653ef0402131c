"""Parametrized hypersurfaces in configuration-space-time.

A surface is discretized into sample points carrying weighted normals N such
that the flux of J = (j, |psi|^2) through the surface is approximated by
sum_i J(q_i, t_i) . N_i. Normals are the coordinate flux form (the cross product
of the parameter tangents), so the result does not depend on how time and space
are weighted against each other; the weighting only shapes tubes and circles.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from field_core.errors import InputError, PreconditionError

logger = logging.getLogger(__name__)

MIN_SAMPLES = 512
TUBE_ANGULAR = 64


@dataclass(frozen=True)
class SurfaceSamples:
    points: np.ndarray
    times: np.ndarray
    normals: np.ndarray

    @property
    def size(self) -> int:
        return self.times.size

    def restricted(self, mask: np.ndarray) -> "SurfaceSamples":
        return SurfaceSamples(self.points[mask], self.times[mask], self.normals[mask])

    @staticmethod
    def concatenate(parts: Sequence["SurfaceSamples"], dimension: int) -> "SurfaceSamples":
        if not parts:
            return SurfaceSamples(np.zeros((0, dimension)), np.zeros(0), np.zeros((0, dimension + 1)))
        return SurfaceSamples(np.concatenate([p.points for p in parts]),
                              np.concatenate([p.times for p in parts]),
                              np.concatenate([p.normals for p in parts]))


class Surface(ABC):
    dimension: int = 1

    @abstractmethod
    def discretize(self, resolution: int = MIN_SAMPLES) -> SurfaceSamples:
        """Sample points and weighted normals with at least ``resolution`` samples."""

    @property
    def feature_size(self) -> float:
        """Smallest extent of the surface; crossing counts keep steps well below it."""
        return np.inf

    def side(self, q: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Signed side function whose sign changes count crossings."""
        raise PreconditionError(f"{type(self).__name__} does not separate space-time into two sides")


class Circle(Surface):
    """Closed curve |q - a|^2 + w^2 (t - b)^2 = r^2 around a point of the (q, t) plane."""

    dimension = 1

    def __init__(self, center_q: float, center_t: float, radius: float, time_weight: float = 1.0):
        if radius <= 0 or time_weight <= 0:
            raise InputError("Circle radius and time weight must be positive")
        self.center_q = float(center_q)
        self.center_t = float(center_t)
        self.radius = float(radius)
        self.time_weight = float(time_weight)

    @property
    def feature_size(self) -> float:
        return min(self.radius, self.radius / self.time_weight)

    def discretize(self, resolution: int = MIN_SAMPLES) -> SurfaceSamples:
        n = max(resolution, MIN_SAMPLES)
        theta = 2.0 * np.pi * np.arange(n) / n
        q = self.center_q + self.radius * np.cos(theta)
        t = self.center_t + self.radius / self.time_weight * np.sin(theta)
        dq = -self.radius * np.sin(theta)
        dt = self.radius / self.time_weight * np.cos(theta)
        weight = 2.0 * np.pi / n
        normals = np.stack([dt * weight, -dq * weight], axis=1)
        return SurfaceSamples(q[:, None], t, normals)

    def side(self, q: np.ndarray, t: np.ndarray) -> np.ndarray:
        q = np.asarray(q).reshape(-1)
        return (q - self.center_q) ** 2 + (self.time_weight * (t - self.center_t)) ** 2 - self.radius ** 2

    def inside(self, q: np.ndarray, t: np.ndarray) -> np.ndarray:
        return self.side(q, t) < 0.0


class Segment(Surface):
    """Straight segment from (q_a, t_a) to (q_b, t_b), midpoint rule."""

    dimension = 1

    def __init__(self, start: Tuple[float, float], end: Tuple[float, float]):
        self.start = np.asarray(start, dtype=float)
        self.end = np.asarray(end, dtype=float)
        if np.allclose(self.start, self.end):
            raise InputError("Degenerate segment: the normal is undefined")

    def discretize(self, resolution: int = MIN_SAMPLES) -> SurfaceSamples:
        n = max(resolution, MIN_SAMPLES)
        s = (np.arange(n) + 0.5) / n
        delta = self.end - self.start
        points = self.start[None, :] + s[:, None] * delta[None, :]
        normals = np.tile(np.array([delta[1], -delta[0]]) / n, (n, 1))
        return SurfaceSamples(points[:, :1], points[:, 1], normals)


class TimeSlice(Surface):
    """Constant-time hyperplane t = t0 over a box of configuration space."""

    def __init__(self, t0: float, extent: Sequence[Tuple[float, float]]):
        self.t0 = float(t0)
        self.extent = [(float(a), float(b)) for a, b in extent]
        self.dimension = len(self.extent)
        if any(b <= a for a, b in self.extent):
            raise InputError("Degenerate time slice: empty extent")

    def discretize(self, resolution: int = MIN_SAMPLES) -> SurfaceSamples:
        n = max(resolution, MIN_SAMPLES) if self.dimension == 1 else max(resolution // 4, 128)
        axes = [a + (b - a) * (np.arange(n) + 0.5) / n for a, b in self.extent]
        points = np.stack([c.ravel() for c in np.meshgrid(*axes, indexing="ij")], axis=-1)
        cell = float(np.prod([(b - a) / n for a, b in self.extent]))
        normals = np.zeros((points.shape[0], self.dimension + 1))
        normals[:, -1] = cell
        return SurfaceSamples(points, np.full(points.shape[0], self.t0), normals)

    def side(self, q: np.ndarray, t: np.ndarray) -> np.ndarray:
        return np.asarray(t, dtype=float) - self.t0


def _orthonormal_frame(direction: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    u = direction / np.linalg.norm(direction)
    helper = np.eye(3)[np.argmin(np.abs(u))]
    e1 = np.cross(u, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(u, e1)


class Tube(Surface):
    """Tube of radius r around a polyline in (q1, q2, t), 64 angular samples."""

    dimension = 2

    def __init__(self, path: np.ndarray, radius: float, time_weight: float = 1.0, angular: int = TUBE_ANGULAR):
        path = np.asarray(path, dtype=float)
        if path.ndim != 2 or path.shape[1] != 3 or path.shape[0] < 2:
            raise InputError("Tube path must be a polyline of at least two (q1, q2, t) points")
        if radius <= 0 or time_weight <= 0:
            raise InputError("Tube radius and time weight must be positive")
        self.path = path
        self.radius = float(radius)
        self.time_weight = float(time_weight)
        self.angular = angular
        self._scale = np.array([1.0, 1.0, self.time_weight])
        lengths = np.linalg.norm(np.diff(path * self._scale, axis=0), axis=1)
        if np.any(lengths == 0):
            raise InputError("Tube path has repeated points: the normal is undefined")
        self._lengths = lengths

    @property
    def feature_size(self) -> float:
        return self.radius

    def inside(self, q: np.ndarray, t: np.ndarray) -> np.ndarray:
        points = np.concatenate([np.atleast_2d(q), np.asarray(t, dtype=float).reshape(-1, 1)], axis=1)
        return polyline_distance(points, self.path, self._scale) < self.radius

    def side(self, q: np.ndarray, t: np.ndarray) -> np.ndarray:
        points = np.concatenate([np.atleast_2d(q), np.asarray(t, dtype=float).reshape(-1, 1)], axis=1)
        return polyline_distance(points, self.path, self._scale) - self.radius

    def discretize(self, resolution: int = MIN_SAMPLES) -> SurfaceSamples:
        phi = 2.0 * np.pi * np.arange(self.angular) / self.angular
        dphi = 2.0 * np.pi / self.angular
        total = float(np.sum(self._lengths))
        parts = []
        for (a, b), length in zip(zip(self.path[:-1], self.path[1:]), self._lengths):
            n = max(2, int(np.ceil(resolution * length / total)))
            s = (np.arange(n) + 0.5) / n
            a_scaled, b_scaled = a * self._scale, b * self._scale
            e1, e2 = _orthonormal_frame(b_scaled - a_scaled)
            ring = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
            centers = a_scaled[None, :] + s[:, None] * (b_scaled - a_scaled)[None, :]
            points = (centers[:, None, :] + self.radius * ring[None, :, :]).reshape(-1, 3) / self._scale
            along = (b - a) / n
            around = self.radius * (-np.sin(phi)[:, None] * e1 + np.cos(phi)[:, None] * e2) / self._scale
            normals = np.cross(around, along[None, :]) * dphi
            parts.append(SurfaceSamples(points[:, :2], points[:, 2], np.tile(normals, (n, 1))))
        return SurfaceSamples.concatenate(parts, 2)


class Cylinder(Surface):
    """Cylinder |q - c| = r over a time interval, in two dimensions."""

    dimension = 2

    def __init__(self, center: Sequence[float], radius: float, t_range: Tuple[float, float]):
        if radius <= 0 or t_range[1] <= t_range[0]:
            raise InputError("Degenerate cylinder")
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        self.t_range = (float(t_range[0]), float(t_range[1]))

    @property
    def feature_size(self) -> float:
        return self.radius

    def discretize(self, resolution: int = MIN_SAMPLES) -> SurfaceSamples:
        n_phi = max(resolution, TUBE_ANGULAR)
        n_t = max(resolution // 4, 64)
        phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
        t0, t1 = self.t_range
        t = t0 + (t1 - t0) * (np.arange(n_t) + 0.5) / n_t
        grid_phi, grid_t = np.meshgrid(phi, t, indexing="ij")
        radial = np.stack([np.cos(grid_phi.ravel()), np.sin(grid_phi.ravel())], axis=1)
        points = self.center[None, :] + self.radius * radial
        weight = self.radius * (2.0 * np.pi / n_phi) * (t1 - t0) / n_t
        normals = np.concatenate([radial * weight, np.zeros((radial.shape[0], 1))], axis=1)
        return SurfaceSamples(points, grid_t.ravel(), normals)

    def side(self, q: np.ndarray, t: np.ndarray) -> np.ndarray:
        return np.linalg.norm(np.atleast_2d(q) - self.center, axis=1) - self.radius


@dataclass(frozen=True)
class Annulus:
    """Ball of radius r with small balls of radius delta removed around singular points."""

    radius: float
    holes: Tuple[Tuple[float, ...], ...] = ()
    delta: float = 0.0

    def __post_init__(self):
        if self.radius <= 0:
            raise InputError("Region radius must be positive")
        if self.holes and self.delta <= 0:
            raise InputError("Holes need a positive collar radius")

    def spatial_boundary(self, dimension: int, resolution: int = MIN_SAMPLES) -> Tuple[np.ndarray, np.ndarray]:
        """Boundary points and outward normals times the boundary measure."""
        if dimension == 1:
            points = [[-self.radius], [self.radius]]
            normals = [[-1.0], [1.0]]
            for (a,) in self.holes:
                points += [[a - self.delta], [a + self.delta]]
                normals += [[1.0], [-1.0]]
            return np.array(points), np.array(normals)
        n = max(resolution, MIN_SAMPLES)
        phi = 2.0 * np.pi * np.arange(n) / n
        radial = np.stack([np.cos(phi), np.sin(phi)], axis=1)
        points = [self.radius * radial]
        normals = [radial * self.radius * 2.0 * np.pi / n]
        for center in self.holes:
            points.append(np.asarray(center)[None, :] + self.delta * radial)
            normals.append(-radial * self.delta * 2.0 * np.pi / n)
        return np.concatenate(points), np.concatenate(normals)


def polyline_distance(points: np.ndarray, path: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Distance from (q1, q2, t) points to a polyline in weighted coordinates."""
    p = points * scale
    best = np.full(points.shape[0], np.inf)
    for a, b in zip(path[:-1] * scale, path[1:] * scale):
        segment = b - a
        s = np.clip((p - a) @ segment / max(segment @ segment, 1e-300), 0.0, 1.0)
        best = np.minimum(best, np.linalg.norm(p - (a + s[:, None] * segment), axis=1))
    return best
