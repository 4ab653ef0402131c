import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import stats
from scipy.integrate import quad
from scipy.optimize import brentq

from field_core.errors import InputError, OutOfDomainError, PreconditionError
from field_core.grid import SpacetimePoint
from field_core.utils import merge_intervals, simpson_weights
from integrators.bohm_integrator import IntegratorConfig, integrate_batch
from propagation.propagator import evolve_analytic
from quantum.observables import current_field, spacetime_flux_field
from quantum.states import GaussianPacket, HarmonicState, WaveFunction
from .equivariance_auditor import density_grid, sample_initial
from .surfaces import (MIN_SAMPLES, Annulus, Circle, Cylinder, Segment, Surface, SurfaceSamples, TimeSlice,
                       Tube)

logger = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 160
SLICE_RESOLUTION = 96
SLICE_COUNT = 64
NODAL_CELL = 0.05
NEWTON_ITERATIONS = 60
NEWTON_STEP_TOL = 1e-15
NODE_RESIDUAL = 1e-10
DEDUP_DISTANCE = 1e-6
DEGENERACY_RATIO = 1e-4
LINE_CURVATURE = 1e-4
CURVATURE_STEP = 1e-3
DISMISS_LEVEL = 1e-3
DISMISS_PROBES = 9
LINK_DISTANCE = 0.5
REFINEMENT_TOLERANCE = 0.01
TAIL_EXTENT = 40.0
GREENS_POINTS = 1025
CONFIDENCE = 0.95

Window = Sequence[Tuple[float, float]]


@dataclass
class NodalLine:
    """Stationary nodal line q = const, a non-generic codimension-1 piece of the nodal set."""

    q: float
    t_min: float
    t_max: float
    count: int
    non_generic: bool = True

    def contains(self, q: np.ndarray, t: np.ndarray, eps: float) -> np.ndarray:
        q = np.asarray(q).reshape(-1)
        return (np.abs(q - self.q) < eps) & (t >= self.t_min) & (t <= self.t_max)


@dataclass
class NodalSet:
    """Zeros of psi inside a space-time window.

    In one dimension ``nodes`` are isolated (q, t) points; in two dimensions the
    refined slice points are linked into ``polylines`` in (q1, q2, t).
    """

    dimension: int
    window: List[Tuple[float, float]]
    nodes: np.ndarray
    residuals: np.ndarray
    lines: List[NodalLine] = field(default_factory=list)
    polylines: List[np.ndarray] = field(default_factory=list)
    unresolved: List[Dict] = field(default_factory=list)

    @property
    def count(self) -> int:
        return int(self.nodes.shape[0])

    @property
    def resolved(self) -> bool:
        return not self.unresolved

    def node_points(self) -> List[SpacetimePoint]:
        return [SpacetimePoint(node[:-1], float(node[-1])) for node in self.nodes]

    def rows(self) -> List[List[float]]:
        return [[*node, residual] for node, residual in zip(self.nodes, self.residuals)]

    def header(self) -> List[str]:
        coordinates = ["q"] if self.dimension == 1 else ["q1", "q2"]
        return coordinates + ["t", "residual"]

    def codimension_report(self) -> Dict:
        return {
            "dimension": self.dimension,
            "isolated_nodes": self.count if self.dimension == 1 else 0,
            "polylines": len(self.polylines),
            "nodal_lines": [{"q": line.q, "t_min": line.t_min, "t_max": line.t_max, "non_generic": line.non_generic}
                            for line in self.lines],
            "unresolved_cells": len(self.unresolved),
        }


class RegionSpec(BaseModel):
    """Radii of the good region: node tubes, singular collars, confinement ball, and the horizon."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    eps: float = Field(..., gt=0)
    delta: float = Field(0.1, gt=0)
    r: float = Field(10.0, gt=0)
    T: float = Field(..., gt=0)
    time_weight: float = Field(1.0, gt=0)


@dataclass
class FluxReport:
    deficit: float
    N_term: float
    S_term: float
    I_term: float
    mc_estimate: float
    mc_half_width: float
    mc_interval: Tuple[float, float]
    mc_count: int
    seed: Optional[int]
    parameters: RegionSpec
    valid: bool = True
    diagnostics: List[str] = field(default_factory=list)
    mc_status_counts: Dict[str, int] = field(default_factory=dict)

    @property
    def total_bound(self) -> float:
        return self.deficit + self.N_term + self.S_term + self.I_term

    @property
    def bound_holds(self) -> bool:
        return self.mc_estimate - self.mc_half_width <= self.total_bound

    def to_dict(self) -> Dict:
        return {
            "parameters": self.parameters.model_dump(),
            "deficit": self.deficit,
            "N_term": self.N_term,
            "S_term": self.S_term,
            "I_term": self.I_term,
            "total_bound": self.total_bound,
            "mc_estimate": self.mc_estimate,
            "mc_half_width": self.mc_half_width,
            "mc_interval": list(self.mc_interval),
            "mc_count": self.mc_count,
            "mc_status_counts": self.mc_status_counts,
            "seed": self.seed,
            "bound_holds": self.bound_holds,
            "valid": self.valid,
            "diagnostics": self.diagnostics,
        }


@dataclass
class CrossingEstimate:
    mean: float
    half_width: float
    count: int
    seed: Optional[int]
    t_start: float
    t_end: float

    def to_dict(self) -> Dict:
        return {"mean": self.mean, "half_width": self.half_width, "count": self.count,
                "seed": self.seed, "t_start": self.t_start, "t_end": self.t_end}


def wilson_interval(hits: int, count: int, confidence: float = CONFIDENCE) -> Tuple[float, float, float]:
    """Wilson score interval for a binomial proportion.

    Returns:
        (low, high, half_width)
    """
    if count <= 0:
        raise InputError("Wilson interval needs a positive sample count")
    z = stats.norm.ppf(0.5 + confidence / 2.0)
    p = hits / count
    denominator = 1.0 + z ** 2 / count
    center = (p + z ** 2 / (2.0 * count)) / denominator
    half = z * np.sqrt(p * (1.0 - p) / count + z ** 2 / (4.0 * count ** 2)) / denominator
    return max(0.0, center - half), min(1.0, center + half), float(half)


# -- nodal set ----------------------------------------------------------------

Field2 = Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]


def _spacetime_field(state: WaveFunction) -> Field2:
    """psi and its (q, t) gradient at points p = (q, t) of a 1D state."""
    def evaluate(p: np.ndarray):
        sample = state.evaluate(p[:, :1], p[:, 1])
        return sample.psi, np.stack([sample.grad[:, 0], sample.dpsi_dt], axis=1)
    return evaluate


def _slice_field(state: WaveFunction, t: float) -> Field2:
    def evaluate(p: np.ndarray):
        sample = state.evaluate(p, t)
        return sample.psi, sample.grad
    return evaluate


def _real_jacobian(jac: np.ndarray) -> np.ndarray:
    # rows (Re psi, Im psi), columns the two coordinates
    return np.stack([jac.real, jac.imag], axis=1)


def _gauss_newton(evaluate: Field2, starts: np.ndarray, max_jump: float):
    p = np.array(starts, dtype=float)
    active = np.ones(p.shape[0], dtype=bool)
    for _ in range(NEWTON_ITERATIONS):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        psi, jac = evaluate(p[idx])
        residual = np.stack([psi.real, psi.imag], axis=1)
        step = -np.einsum("kij,kj->ki", np.linalg.pinv(_real_jacobian(jac), rcond=1e-13), residual)
        length = np.linalg.norm(step, axis=1)
        finite = np.isfinite(length)
        step[~finite] = 0.0
        long = finite & (length > max_jump)
        step[long] *= (max_jump / length[long])[:, None]
        p[idx] += step
        done = ~finite | (length <= NEWTON_STEP_TOL * np.maximum(1.0, np.linalg.norm(p[idx], axis=1)))
        active[idx[done]] = False
    psi, jac = evaluate(p)
    return p, psi, jac


def _flagged_cells(values: np.ndarray) -> np.ndarray:
    """Cells of a 2D lattice where Re and Im both change sign (zeros count as changes)."""
    corners = np.stack([values[:-1, :-1], values[1:, :-1], values[:-1, 1:], values[1:, 1:]])
    flags = np.ones(values[:-1, :-1].shape, dtype=bool)
    for part in (corners.real, corners.imag):
        flags &= (part.min(axis=0) <= 0.0) & (part.max(axis=0) >= 0.0)
    return flags & (np.abs(corners).max(axis=0) > 0.0)


def _cell_minimum(evaluate: Field2, lower: np.ndarray, spacing: np.ndarray) -> float:
    u = np.linspace(0.0, 1.0, DISMISS_PROBES)
    a, b = np.meshgrid(u, u, indexing="ij")
    probes = lower + np.stack([a.ravel(), b.ravel()], axis=1) * spacing
    psi, _ = evaluate(probes)
    return float(np.min(np.abs(psi)))


def _polish_degenerate(evaluate: Field2, p: np.ndarray, null: np.ndarray, curvature: complex,
                       span: float) -> np.ndarray:
    """Refine a node whose Jacobian has rank one.

    Along the null direction psi grows quadratically, so the node is the simple
    root of the curvature-projected directional derivative; the orthogonal
    direction is then solved by one-dimensional Newton steps.
    """
    across = np.array([-null[1], null[0]])

    def slope(s: float) -> float:
        _, jac = evaluate((p + s * null)[None, :])
        return float(np.real(np.conj(curvature) * (jac[0] @ null)))

    h = 1e-8
    while h <= span and slope(-h) * slope(h) > 0.0:
        h *= 4.0
    if slope(-h) * slope(h) > 0.0:
        return p
    s = brentq(slope, -h, h, xtol=1e-16, rtol=4 * np.finfo(float).eps, maxiter=200)
    p = p + s * null
    for _ in range(NEWTON_ITERATIONS):
        psi, jac = evaluate(p[None, :])
        d = jac[0] @ across
        ds = -float(np.real(np.conj(d) * psi[0])) / max(float(np.abs(d) ** 2), 1e-300)
        p = p + ds * across
        if abs(ds) < NEWTON_STEP_TOL:
            break
    return p


def _deduplicate(points: np.ndarray, residuals: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    kept, kept_residuals = [], []
    for point, residual in sorted(zip(points, residuals), key=lambda item: item[1]):
        if all(np.linalg.norm(point - other) > DEDUP_DISTANCE for other in kept):
            kept.append(point)
            kept_residuals.append(residual)
    if not kept:
        return np.zeros((0, points.shape[1] if points.ndim == 2 else 2)), np.zeros(0)
    order = np.lexsort(np.array(kept).T[::-1])
    return np.array(kept)[order], np.array(kept_residuals)[order]


def _check_window(state: WaveFunction, window: Window) -> List[Tuple[float, float]]:
    window = [(float(a), float(b)) for a, b in window]
    if len(window) != state.dimension + 1:
        raise InputError(f"Window needs {state.dimension} spatial ranges and one time range")
    if any(b <= a for a, b in window):
        raise InputError(f"Window ranges must be increasing, got {window}")
    t_lo, t_hi = state.valid_time_range()
    if window[-1][0] < t_lo - 1e-12 or window[-1][1] > t_hi + 1e-12:
        raise OutOfDomainError(f"Time window {window[-1]} exceeds the state's valid range [{t_lo}, {t_hi}]")
    if state.grid is not None:
        for (a, b), axis in zip(window[:-1], state.grid.axes):
            if a < axis.start or b > axis.stop:
                raise OutOfDomainError(f"Spatial window ({a}, {b}) exceeds the grid [{axis.start}, {axis.stop}]")
    return window


def _cells_per_axis(resolution: Union[int, Sequence[int]], count: int) -> List[int]:
    if isinstance(resolution, (int, np.integer)):
        return [int(resolution)] * count
    return [int(n) for n in resolution]


def _nodes_1d(state: WaveFunction, window, resolution) -> NodalSet:
    (qa, qb), (ta, tb) = window
    nq, nt = _cells_per_axis(resolution, 2)
    qs, ts = np.linspace(qa, qb, nq + 1), np.linspace(ta, tb, nt + 1)
    grid_q, grid_t = np.meshgrid(qs, ts, indexing="ij")
    values = state.psi(grid_q.reshape(-1, 1), grid_t.ravel()).reshape(grid_q.shape)
    flagged = np.argwhere(_flagged_cells(values))
    spacing = np.array([qs[1] - qs[0], ts[1] - ts[0]])
    scale = state.amplitude_scale
    logger.debug(f"Nodal scan: {flagged.shape[0]} flagged cells on a {nq}x{nt} lattice")
    if flagged.size == 0:
        logger.info("Nodal set: no sign-change cells in the window")
        return NodalSet(1, list(window), np.zeros((0, 2)), np.zeros(0))

    evaluate = _spacetime_field(state)
    lower = np.stack([qs[flagged[:, 0]], ts[flagged[:, 1]]], axis=1)
    points, psi, jac = _gauss_newton(evaluate, lower + 0.5 * spacing, float(np.linalg.norm(spacing)))
    residual = np.abs(psi)
    _, singular, vt = np.linalg.svd(_real_jacobian(jac))
    ratio = singular[:, 1] / np.maximum(singular[:, 0], 1e-300)

    nodes, node_residuals, line_points, unresolved = [], [], [], []
    inside = np.all((points >= np.array([qa, ta]) - spacing) & (points <= np.array([qb, tb]) + spacing), axis=1)
    for i in range(points.shape[0]):
        if not np.isfinite(residual[i]) or residual[i] >= NODE_RESIDUAL * scale or not inside[i]:
            if _cell_minimum(evaluate, lower[i], spacing) > DISMISS_LEVEL * scale:
                continue
            unresolved.append({"cell": [float(x) for x in lower[i] + 0.5 * spacing],
                               "residual": float(residual[i]), "reason": "no convergence"})
            continue
        p = points[i]
        if ratio[i] < DEGENERACY_RATIO:
            null = vt[i, 1]
            left, _ = evaluate((p - CURVATURE_STEP * null)[None, :])
            mid, _ = evaluate(p[None, :])
            right, _ = evaluate((p + CURVATURE_STEP * null)[None, :])
            curvature = complex((left[0] - 2.0 * mid[0] + right[0]) / CURVATURE_STEP ** 2)
            if abs(curvature) < LINE_CURVATURE * singular[i, 0]:
                if abs(null[1]) > 0.99:
                    line_points.append(p)
                else:
                    unresolved.append({"cell": [float(x) for x in p], "residual": float(residual[i]),
                                       "reason": "moving codimension-1 nodal curve"})
                continue
            p = _polish_degenerate(evaluate, p, null, curvature, float(np.linalg.norm(spacing)))
        if not (qa <= p[0] <= qb and ta <= p[1] <= tb):
            continue
        value, _ = evaluate(p[None, :])
        nodes.append(p)
        node_residuals.append(float(np.abs(value[0])))

    nodes, node_residuals = _deduplicate(np.array(nodes).reshape(-1, 2), np.array(node_residuals))
    lines = _group_lines(np.array(line_points).reshape(-1, 2), spacing, (ta, tb))
    if unresolved:
        logger.warning(f"{len(unresolved)} nodal cells could not be resolved")
    logger.info(f"Nodal set: {nodes.shape[0]} isolated nodes, {len(lines)} stationary lines")
    return NodalSet(1, list(window), nodes, node_residuals, lines=lines, unresolved=unresolved)


def _group_lines(points: np.ndarray, spacing: np.ndarray, t_range: Tuple[float, float]) -> List[NodalLine]:
    lines = []
    for p in points[np.argsort(points[:, 0])] if points.size else []:
        if lines and abs(p[0] - lines[-1][0][-1][0]) < DEDUP_DISTANCE:
            lines[-1][0].append(p)
        else:
            lines.append(([p],))
    result = []
    for (members,) in lines:
        members = np.array(members)
        t_min = max(t_range[0], float(members[:, 1].min()) - spacing[1])
        t_max = min(t_range[1], float(members[:, 1].max()) + spacing[1])
        result.append(NodalLine(float(np.mean(members[:, 0])), t_min, t_max, members.shape[0]))
    return result


def _nodes_2d(state: WaveFunction, window, resolution, slices: int) -> NodalSet:
    (xa, xb), (ya, yb), (ta, tb) = window
    nx, ny = _cells_per_axis(resolution, 2)
    xs, ys = np.linspace(xa, xb, nx + 1), np.linspace(ya, yb, ny + 1)
    grid_x, grid_y = np.meshgrid(xs, ys, indexing="ij")
    lattice = np.stack([grid_x.ravel(), grid_y.ravel()], axis=1)
    spacing = np.array([xs[1] - xs[0], ys[1] - ys[0]])
    scale = state.amplitude_scale
    times = ta + (tb - ta) * (np.arange(slices) + 0.5) / slices

    per_slice, unresolved = [], []
    for t in times:
        evaluate = _slice_field(state, float(t))
        values = state.psi(lattice, float(t)).reshape(grid_x.shape)
        flagged = np.argwhere(_flagged_cells(values))
        found = []
        if flagged.size:
            lower = np.stack([xs[flagged[:, 0]], ys[flagged[:, 1]]], axis=1)
            points, psi, jac = _gauss_newton(evaluate, lower + 0.5 * spacing, float(np.linalg.norm(spacing)))
            singular = np.linalg.svd(_real_jacobian(jac), compute_uv=False)
            for i, p in enumerate(points):
                residual = float(np.abs(psi[i]))
                if not np.isfinite(residual) or residual >= NODE_RESIDUAL * scale:
                    if _cell_minimum(evaluate, lower[i], spacing) > DISMISS_LEVEL * scale:
                        continue
                    unresolved.append({"cell": [*map(float, lower[i] + 0.5 * spacing), float(t)],
                                       "residual": residual, "reason": "no convergence"})
                    continue
                if singular[i, 1] < DEGENERACY_RATIO * singular[i, 0]:
                    unresolved.append({"cell": [*map(float, p), float(t)], "residual": residual,
                                       "reason": "non-generic nodal set inside a time slice"})
                    continue
                if xa <= p[0] <= xb and ya <= p[1] <= yb:
                    found.append((np.array([p[0], p[1], t]), residual))
        if found:
            pts, res = _deduplicate(np.array([f[0] for f in found]), np.array([f[1] for f in found]))
            per_slice.append((pts, res))
        else:
            per_slice.append((np.zeros((0, 3)), np.zeros(0)))

    polylines = _link_slices([pts for pts, _ in per_slice])
    nodes = np.concatenate([pts for pts, _ in per_slice]) if per_slice else np.zeros((0, 3))
    residuals = np.concatenate([res for _, res in per_slice]) if per_slice else np.zeros(0)
    for chain in polylines:
        if chain.shape[0] < 2:
            unresolved.append({"cell": [float(x) for x in chain[0]], "residual": 0.0,
                               "reason": "nodal point seen in a single time slice"})
    polylines = [chain for chain in polylines if chain.shape[0] >= 2]
    if unresolved:
        logger.warning(f"{len(unresolved)} nodal cells could not be resolved")
    logger.info(f"Nodal set: {nodes.shape[0]} slice nodes linked into {len(polylines)} polylines")
    return NodalSet(2, list(window), nodes, residuals, polylines=polylines, unresolved=unresolved)


def _link_slices(slices: List[np.ndarray]) -> List[np.ndarray]:
    """Chain slice nodes into polylines by nearest-neighbour matching of consecutive slices."""
    chains: List[List[np.ndarray]] = []
    open_chains: List[int] = []
    for points in slices:
        used = np.zeros(points.shape[0], dtype=bool)
        still_open = []
        for c in open_chains:
            last = chains[c][-1]
            if points.shape[0] == 0:
                continue
            distance = np.linalg.norm(points[:, :2] - last[:2], axis=1)
            distance[used] = np.inf
            j = int(np.argmin(distance))
            if distance[j] < LINK_DISTANCE:
                chains[c].append(points[j])
                used[j] = True
                still_open.append(c)
        for j in np.flatnonzero(~used):
            chains.append([points[j]])
            still_open.append(len(chains) - 1)
        open_chains = still_open
    return [np.array(chain) for chain in chains]


def find_nodal_set(state: WaveFunction, window: Window, resolution: Union[int, Sequence[int]] = DEFAULT_RESOLUTION,
                   slices: int = SLICE_COUNT) -> NodalSet:
    """Zeros of psi inside a space-time window.

    Args:
        state: Wave function evaluable on the whole window
        window: ((q_min, q_max), (t_min, t_max)) in 1D, one more spatial range in 2D
        resolution: Lattice cells per spatial axis (and along t in 1D)
        slices: Number of time slices scanned in 2D

    Returns:
        NodalSet with refined nodes, stationary lines, polylines and unresolved cells
    """
    window = _check_window(state, window)
    if state.dimension == 1:
        return _nodes_1d(state, window, resolution)
    if state.dimension == 2:
        if isinstance(resolution, (int, np.integer)) and resolution == DEFAULT_RESOLUTION:
            resolution = SLICE_RESOLUTION
        return _nodes_2d(state, window, resolution, slices)
    raise PreconditionError("Nodal sets are only located in one and two dimensions")


# -- flux integrals -----------------------------------------------------------

def surface_flux(state: WaveFunction, samples: SurfaceSamples, signed: bool = False) -> float:
    """sum |J . N| over the samples (or the signed sum)."""
    if samples.size == 0:
        return 0.0
    flux = spacetime_flux_field(state, samples.points, samples.times)
    density = np.sum(flux * samples.normals, axis=1)
    return float(np.sum(density) if signed else np.sum(np.abs(density)))


def _refined_flux(state: WaveFunction, surface: Surface, resolution: int,
                  mask: Optional[Callable[[SurfaceSamples], np.ndarray]] = None) -> float:
    values = []
    for n in (resolution, 2 * resolution):
        samples = surface.discretize(n)
        if mask is not None:
            samples = samples.restricted(mask(samples))
        values.append(surface_flux(state, samples))
    coarse, fine = values
    change = abs(fine - coarse)
    if change > REFINEMENT_TOLERANCE * abs(fine) and change > 1e-14:
        logger.warning(f"{type(surface).__name__} flux changed by {change / max(abs(fine), 1e-300):.2%} "
                       f"under refinement ({coarse:.6e} -> {fine:.6e})")
    return fine


def flux_through_surface(state: WaveFunction, surface: Surface, resolution: int = MIN_SAMPLES) -> float:
    """Integral of |J . n| over a space-time surface: a bound on expected crossings.

    The surface is sampled at ``resolution`` and twice that; the finer value is
    returned and a change above 1% is logged.
    """
    if surface.dimension != state.dimension:
        raise InputError(f"A {surface.dimension}D surface cannot be used with a {state.dimension}D state")
    return _refined_flux(state, surface, resolution)


# -- bad-event bound ----------------------------------------------------------

class FluxAuditor:
    """Flux bound on the probability that a trajectory ends before the horizon.

    Nodal sets and Monte-Carlo runs are cached per auditor, so a ladder of
    region specs shares one ensemble.
    """

    def __init__(self, wavefunction: WaveFunction, integrator_config: Optional[IntegratorConfig] = None,
                 resolution: int = MIN_SAMPLES, progress: bool = False):
        self.wavefunction = wavefunction
        self.integrator_config = integrator_config or IntegratorConfig()
        self.resolution = resolution
        self.progress = progress
        self.t0 = float(wavefunction.timestamp)
        self.state = {}

    # -- geometry ---------------------------------------------------------

    def nodal_set(self, spec: RegionSpec) -> NodalSet:
        psi = self.wavefunction
        margin = spec.eps / spec.time_weight
        t_lo, t_hi = psi.valid_time_range()
        t_window = (max(t_lo, self.t0 - margin), min(t_hi, self.t0 + spec.T + margin))
        reach = spec.r + spec.eps
        if psi.grid is not None:
            reach = min(reach, psi.grid.half_extent)
        window = [(-reach, reach)] * psi.dimension + [t_window]
        key = ("nodes", tuple(map(tuple, window)))
        if key not in self.state:
            if psi.dimension == 1:
                cells = [max(DEFAULT_RESOLUTION, int(np.ceil((b - a) / NODAL_CELL))) for a, b in window]
                self.state[key] = find_nodal_set(psi, window, cells)
            else:
                self.state[key] = find_nodal_set(psi, window)
        return self.state[key]

    def _neighbourhoods(self, nodal: NodalSet, spec: RegionSpec) -> List[Callable]:
        """Membership tests of every node tube, strip and polyline tube."""
        tests = []
        for point in nodal.node_points() if nodal.dimension == 1 else []:
            tests.append(Circle(point.q[0], point.t, spec.eps, spec.time_weight).inside)
        for line in nodal.lines:
            tests.append(lambda q, t, line=line: line.contains(q, t, spec.eps))
        for path in nodal.polylines:
            tests.append(Tube(path, spec.eps, spec.time_weight).inside)
        return tests

    def _good_mask(self, spec: RegionSpec, tests: List[Callable], skip: Optional[int] = None,
                   collars: bool = True, ball: bool = True) -> Callable[[SurfaceSamples], np.ndarray]:
        singular = self.wavefunction.potential

        def mask(samples: SurfaceSamples) -> np.ndarray:
            keep = (samples.times >= self.t0) & (samples.times <= self.t0 + spec.T)
            if ball:
                keep &= np.linalg.norm(samples.points, axis=1) <= spec.r + 1e-12
            if collars and not singular.is_smooth:
                keep &= singular.distance_to_singular(samples.points) >= spec.delta
            for k, inside in enumerate(tests):
                if k != skip and np.any(keep):
                    keep &= ~inside(samples.points, samples.times)
            return keep
        return mask

    def _node_surfaces(self, nodal: NodalSet, spec: RegionSpec) -> List[Surface]:
        surfaces: List[Surface] = []
        t_end = self.t0 + spec.T
        if nodal.dimension == 1:
            surfaces += [Circle(point.q[0], point.t, spec.eps, spec.time_weight) for point in nodal.node_points()]
            for line in nodal.lines:
                lo, hi = max(line.t_min, self.t0), min(line.t_max, t_end)
                walls = [Segment((line.q + side * spec.eps, lo), (line.q + side * spec.eps, hi))
                         for side in (-1.0, 1.0)] if hi > lo else []
                caps = [TimeSlice(t, [(line.q - spec.eps, line.q + spec.eps)]) for t in (line.t_min, line.t_max)]
                surfaces.append(_Composite(walls + caps, 1))
        else:
            surfaces += [Tube(path, spec.eps, spec.time_weight) for path in nodal.polylines]
        return surfaces

    def _n_term(self, nodal: NodalSet, spec: RegionSpec, tests: List[Callable]) -> float:
        total = 0.0
        for k, surface in enumerate(self._node_surfaces(nodal, spec)):
            total += _refined_flux(self.wavefunction, surface, self.resolution, self._good_mask(spec, tests, skip=k))
        return total

    def _s_term(self, spec: RegionSpec, tests: List[Callable]) -> float:
        potential = self.wavefunction.potential
        total = 0.0
        for center in potential.singular_set:
            if potential.dimension == 1:
                surfaces = [Segment((center[0] + side * spec.delta, self.t0),
                                    (center[0] + side * spec.delta, self.t0 + spec.T)) for side in (-1.0, 1.0)]
            else:
                surfaces = [Cylinder(center, spec.delta, (self.t0, self.t0 + spec.T))]
            for surface in surfaces:
                total += _refined_flux(self.wavefunction, surface, self.resolution,
                                       self._good_mask(spec, tests, collars=False))
        return total

    def _i_term(self, spec: RegionSpec, tests: List[Callable]) -> float:
        if self.wavefunction.dimension == 1:
            surfaces = [Segment((side * spec.r, self.t0), (side * spec.r, self.t0 + spec.T)) for side in (-1.0, 1.0)]
        else:
            surfaces = [Cylinder(np.zeros(2), spec.r, (self.t0, self.t0 + spec.T))]
        total = 0.0
        for surface in surfaces:
            total += _refined_flux(self.wavefunction, surface, self.resolution, self._good_mask(spec, tests, ball=False))
        return total

    def _density(self, q: float) -> float:
        return float(np.abs(self.wavefunction.psi(np.array([[q]]), self.t0)[0]) ** 2)

    def _deficit(self, nodal: NodalSet, spec: RegionSpec) -> float:
        psi = self.wavefunction
        if psi.dimension == 2:
            return self._deficit_2d(nodal, spec)
        bad = []
        for q, t in nodal.nodes:
            gap = spec.time_weight * abs(t - self.t0)
            if gap < spec.eps:
                half = np.sqrt(spec.eps ** 2 - gap ** 2)
                bad.append((q - half, q + half))
        for line in nodal.lines:
            if line.t_min <= self.t0 <= line.t_max:
                bad.append((line.q - spec.eps, line.q + spec.eps))
        for (a,) in psi.potential.singular_set:
            bad.append((a - spec.delta, a + spec.delta))
        intervals = merge_intervals([(max(lo, -spec.r), min(hi, spec.r)) for lo, hi in bad])
        if psi.grid is not None:
            left, right = psi.grid.axes[0].start, psi.grid.axes[0].stop
        else:
            left, right = -TAIL_EXTENT, TAIL_EXTENT
        if spec.r < right:
            intervals.append([spec.r, right])
        if -spec.r > left:
            intervals.append([left, -spec.r])
        mass = 0.0
        for lo, hi in intervals:
            value, _ = quad(self._density, lo, hi, epsabs=0.0, epsrel=1e-10, limit=200)
            mass += value
        return float(mass)

    def _deficit_2d(self, nodal: NodalSet, spec: RegionSpec) -> float:
        psi = self.wavefunction
        grid = density_grid(psi)
        points = grid.flat_points()
        rho = np.abs(psi.psi(points, self.t0)) ** 2
        bad = np.linalg.norm(points, axis=1) > spec.r
        if not psi.potential.is_smooth:
            bad |= psi.potential.distance_to_singular(points) < spec.delta
        times = np.full(points.shape[0], self.t0)
        for path in nodal.polylines:
            bad |= Tube(path, spec.eps, spec.time_weight).inside(points, times)
        return float(np.sum(rho[bad]) * grid.cell_volume)

    # -- Monte Carlo ------------------------------------------------------

    def monte_carlo(self, T: float, count: int, seed: Optional[int]) -> Dict:
        """Fraction of |psi|^2-distributed trajectories with a bad event before the horizon."""
        key = ("mc", float(T), int(count), seed, self.integrator_config.model_dump_json())
        if key not in self.state:
            ensemble = sample_initial(self.wavefunction, count, seed)
            result = integrate_batch(self.wavefunction, ensemble.points, self.t0, T, self.integrator_config,
                                     progress=self.progress)
            hits = int(np.sum(result.bad_event_mask()))
            low, high, half = wilson_interval(hits, count)
            counts = result.status_counts()
            if counts.get("StepCollapse"):
                logger.warning(f"{counts['StepCollapse']} trajectories collapsed; they are not counted as bad events")
            self.state[key] = {"estimate": hits / count, "half_width": half, "interval": (low, high),
                               "hits": hits, "status_counts": counts}
            logger.info(f"Monte Carlo: {hits}/{count} bad events before T={T} (seed={seed})")
        return self.state[key]

    def bad_event_bound(self, spec: RegionSpec, mc_count: int, seed: Optional[int]) -> FluxReport:
        """Deficit + N + S + I flux bound alongside a Monte-Carlo estimate of P(tau+ < T).

        Args:
            spec: Radii of the good region and the horizon
            mc_count: Number of Monte-Carlo trajectories (0 skips the estimate)
            seed: Seed of the initial ensemble

        Returns:
            FluxReport; ``valid`` is False when parts of the nodal set could not be resolved
        """
        if self.wavefunction.potential.dimension == 1 and self.wavefunction.potential.singular_set.size:
            for (a,) in self.wavefunction.potential.singular_set:
                if abs(a) + spec.delta > spec.r:
                    raise InputError(f"Singular collar around {a} leaves the confinement ball")
        t_lo, t_hi = self.wavefunction.valid_time_range()
        if self.t0 + spec.T > t_hi + 1e-12:
            raise OutOfDomainError(f"Horizon {self.t0 + spec.T} exceeds the state's time range [{t_lo}, {t_hi}]")

        nodal = self.nodal_set(spec)
        tests = self._neighbourhoods(nodal, spec)
        diagnostics = [f"unresolved nodal cell at {cell['cell']}: {cell['reason']}" for cell in nodal.unresolved]
        report = FluxReport(
            deficit=self._deficit(nodal, spec),
            N_term=self._n_term(nodal, spec, tests),
            S_term=self._s_term(spec, tests),
            I_term=self._i_term(spec, tests),
            mc_estimate=float("nan"), mc_half_width=float("nan"), mc_interval=(float("nan"), float("nan")),
            mc_count=mc_count, seed=seed, parameters=spec,
            valid=nodal.resolved, diagnostics=diagnostics,
        )
        if mc_count > 0:
            mc = self.monte_carlo(spec.T, mc_count, seed)
            report.mc_estimate = mc["estimate"]
            report.mc_half_width = mc["half_width"]
            report.mc_interval = mc["interval"]
            report.mc_status_counts = mc["status_counts"]
        logger.info(f"Flux bound eps={spec.eps} delta={spec.delta} r={spec.r}: deficit={report.deficit:.3e} "
                    f"N={report.N_term:.3e} S={report.S_term:.3e} I={report.I_term:.3e} "
                    f"total={report.total_bound:.3e} mc={report.mc_estimate:.3e}")
        return report

    def horizon_ladder(self, radii: Sequence[float], T: float) -> List[Dict]:
        """I(r) for a ladder of confinement radii, nodes ignored."""
        ladder = []
        for r in radii:
            spec = RegionSpec(eps=1.0, r=r, T=T)
            ladder.append({"r": float(r), "I": self._i_term(spec, [])})
        return ladder


class _Composite(Surface):
    """Union of surfaces with a shared dimension, flux is summed over the parts."""

    def __init__(self, parts: Sequence[Surface], dimension: int):
        self.parts = list(parts)
        self.dimension = dimension

    def discretize(self, resolution: int = MIN_SAMPLES) -> SurfaceSamples:
        return SurfaceSamples.concatenate([p.discretize(resolution) for p in self.parts], self.dimension)


def bad_event_bound(state: WaveFunction, spec: RegionSpec, mc_count: int, seed: Optional[int],
                    config: Optional[IntegratorConfig] = None, progress: bool = False) -> FluxReport:
    return FluxAuditor(state, config, progress=progress).bad_event_bound(spec, mc_count, seed)


def horizon_ladder(state: WaveFunction, radii: Sequence[float], T: float) -> List[Dict]:
    return FluxAuditor(state).horizon_ladder(radii, T)


# -- Green's identity ---------------------------------------------------------

def _odd(n: int) -> int:
    n = max(3, int(n))
    return n if n % 2 else n + 1


def _volume_integrand(state: WaveFunction, q: np.ndarray, t: float) -> np.ndarray:
    psi = state.psi(q, t)
    hpsi = state.apply_hamiltonian(q, t)
    return np.conj(psi) * hpsi - np.conj(hpsi) * psi


def _volume_1d(state: WaveFunction, region: Annulus, t: float, points: int) -> complex:
    holes = merge_intervals([(a - region.delta, a + region.delta) for (a,) in region.holes])
    pieces, start = [], -region.radius
    for lo, hi in holes:
        if lo > start:
            pieces.append((start, lo))
        start = max(start, hi)
    if start < region.radius:
        pieces.append((start, region.radius))
    total = 0.0 + 0.0j
    for lo, hi in pieces:
        n = _odd(points * (hi - lo) / (2.0 * region.radius))
        q = np.linspace(lo, hi, n)
        total += np.sum(simpson_weights(n, hi - lo) * _volume_integrand(state, q[:, None], t))
    return complex(total)


def _disk_integral(state: WaveFunction, center: np.ndarray, radius: float, t: float, points: int) -> complex:
    n_r = _odd(points)
    n_phi = 2 * (n_r - 1)
    rho = np.linspace(0.0, radius, n_r)
    phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
    grid_r, grid_phi = np.meshgrid(rho, phi, indexing="ij")
    q = center + np.stack([(grid_r * np.cos(grid_phi)).ravel(), (grid_r * np.sin(grid_phi)).ravel()], axis=1)
    values = _volume_integrand(state, q, t).reshape(grid_r.shape) * grid_r
    weights = simpson_weights(n_r, radius)[:, None] * (2.0 * np.pi / n_phi)
    return complex(np.sum(weights * values))


def greens_identity_terms(state: WaveFunction, region: Annulus, t: Optional[float] = None,
                          points: int = GREENS_POINTS) -> Tuple[complex, complex]:
    """Volume term int psi* H psi - (H psi)* psi and boundary term -i hbar oint j . n.

    Both are computed independently: the volume term by Simpson quadrature of H
    applied to psi, the boundary term from the current on the region's boundary.
    """
    t = state.timestamp if t is None else float(t)
    if state.grid is not None and region.radius > state.grid.half_extent:
        raise InputError(f"Region radius {region.radius} extends outside the grid")
    for center in region.holes:
        if len(center) != state.dimension:
            raise InputError("Hole centers must match the configuration-space dimension")
        if np.linalg.norm(center) + region.delta > region.radius:
            raise InputError(f"Hole around {center} is not inside the region")
    if state.dimension == 1:
        volume = _volume_1d(state, region, t, points)
    elif state.dimension == 2:
        volume = _disk_integral(state, np.zeros(2), region.radius, t, points)
        for center in region.holes:
            volume -= _disk_integral(state, np.asarray(center, dtype=float), region.delta, t, points)
    else:
        raise PreconditionError("Green's identity is checked in one and two dimensions")
    boundary_points, normals = region.spatial_boundary(state.dimension, max(MIN_SAMPLES, 2 * points))
    j = current_field(state, boundary_points, t)
    boundary = -1j * state.hbar * np.sum(j * normals)
    return volume, complex(boundary)


def greens_identity_residual(state: WaveFunction, region: Annulus, t: Optional[float] = None,
                             points: int = GREENS_POINTS) -> float:
    volume, boundary = greens_identity_terms(state, region, t, points)
    residual = abs(volume - boundary)
    logger.debug(f"Green's identity on r={region.radius}: volume {volume:.6e}, boundary {boundary:.6e}")
    return float(residual)


# -- crossings ----------------------------------------------------------------

def expected_crossings(state: WaveFunction, surface: Surface, count: int, seed: Optional[int],
                       t_start: float, t_end: float, config: Optional[IntegratorConfig] = None,
                       progress: bool = False) -> CrossingEstimate:
    """Monte-Carlo mean number of trajectory crossings of a surface.

    Points are drawn from |psi|^2 at ``t_start`` and integrated to ``t_end``;
    every accepted step whose end points lie on different sides of the surface
    counts one crossing. The step size is kept below a tenth of the surface's
    smallest extent.
    """
    if t_end <= t_start:
        raise InputError("Crossing counts run forward in time")
    if isinstance(state, (HarmonicState, GaussianPacket)):
        state = evolve_analytic(state, t_start)
    elif state.timestamp != t_start:
        raise PreconditionError("Crossing counts need a closed-form state or one referenced at t_start")
    config = config or IntegratorConfig()
    size = surface.feature_size
    if np.isfinite(size):
        config = config.model_copy(update={"max_step": min(config.max_step, size / 10.0),
                                           "max_displacement": min(config.max_displacement, size / 10.0)})
    crossings = np.zeros(count)

    def observe(rows, t_old, q_old, t_new, q_new):
        before = surface.side(q_old, t_old) < 0.0
        after = surface.side(q_new, t_new) < 0.0
        crossings[rows] += before != after

    ensemble = sample_initial(state, count, seed)
    integrate_batch(state, ensemble.points, t_start, t_end - t_start, config, observer=observe, progress=progress)
    mean = float(np.mean(crossings))
    half = float(stats.norm.ppf(0.5 + CONFIDENCE / 2.0) * np.std(crossings, ddof=1) / np.sqrt(count)) \
        if count > 1 else float("inf")
    logger.info(f"Expected crossings of {type(surface).__name__}: {mean:.4e} +- {half:.2e} ({count} trajectories)")
    return CrossingEstimate(mean, half, count, seed, float(t_start), float(t_end))
