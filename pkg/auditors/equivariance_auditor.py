import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from scipy.optimize import brentq

from field_core.errors import InputError, PreconditionError, StatisticsError
from field_core.grid import ComplexField, Grid, as_points
from field_core.utils import SpectralCdf, quadrature, spectral_derivative
from integrators.bohm_integrator import BatchResult, IntegratorConfig, TerminationStatus, integrate_batch
from propagation.propagator import PropagatorConfig, evolve_splitstep
from quantum.states import GridState, WaveFunction

logger = logging.getLogger(__name__)

CDF_TABLE_SIZE = 2 ** 14
DENSITY_POINTS = 512
DENSITY_EXTENT = (-12.0, 12.0)
MIN_ALIVE = 100
KS_CRITICAL_99 = 1.63
TIME_STEP = 1e-3
SPACE_STEP = 1e-3
REJECTION_CHUNK = 65536


@dataclass
class Ensemble:
    """Configuration points representing a density at a common time.

    ``status`` holds a TerminationStatus per point; only Completed points are
    alive and enter distributional statistics.
    """

    points: np.ndarray
    t: float
    seed: Optional[int]
    status: np.ndarray = None
    weights: np.ndarray = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim == 1:
            self.points = self.points[:, None]
        if self.status is None:
            self.status = np.full(self.points.shape[0], TerminationStatus.COMPLETED, dtype=object)
        if self.weights is None:
            self.weights = np.full(self.points.shape[0], 1.0 / max(1, self.points.shape[0]))
        alive = self.alive_mask
        if not np.all(np.isfinite(self.points[alive])):
            raise InputError("Ensemble points must be finite")

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dimension(self) -> int:
        return self.points.shape[1]

    @property
    def alive_mask(self) -> np.ndarray:
        return self.status == TerminationStatus.COMPLETED

    @property
    def alive_points(self) -> np.ndarray:
        return self.points[self.alive_mask]

    @property
    def n_alive(self) -> int:
        return int(np.sum(self.alive_mask))

    @property
    def terminated_fraction(self) -> float:
        return 1.0 - self.n_alive / self.size if self.size else 0.0

    def status_counts(self) -> Dict[str, int]:
        counts = {s.value: 0 for s in TerminationStatus if s is not TerminationStatus.RUNNING}
        for s in self.status:
            counts[TerminationStatus(s).value] += 1
        return counts

    def shifted(self, offset: float) -> "Ensemble":
        return Ensemble(self.points + offset, self.t, self.seed, self.status.copy(), self.weights.copy())

    def summary(self, ks: Optional[float] = None) -> Dict:
        return {
            "t": self.t,
            "seed": self.seed,
            "count": self.size,
            "n_alive": self.n_alive,
            "terminated_fraction": self.terminated_fraction,
            "terminated_by_status": {k: v for k, v in self.status_counts().items() if k != "Completed"},
            "ks": ks,
            "ks_critical_99": KS_CRITICAL_99 / np.sqrt(max(1, self.n_alive)),
        }


def make_rng(seed: Optional[int]) -> np.random.Generator:
    """Counter-based generator so that draws do not depend on scheduling."""
    return np.random.Generator(np.random.Philox(seed))


def density_grid(state: WaveFunction) -> Grid:
    if state.grid is not None:
        return state.grid
    return Grid.uniform(state.dimension, DENSITY_EXTENT[0], DENSITY_EXTENT[1], DENSITY_POINTS)


def density_field(state: WaveFunction, t: float, grid: Optional[Grid] = None) -> ComplexField:
    """|psi_t|^2 sampled on a grid."""
    grid = grid or density_grid(state)
    values = state.psi(grid.flat_points(), t).reshape(grid.shape)
    return ComplexField(grid, np.abs(values) ** 2, t)


def state_cdf(state: WaveFunction, t: float, grid: Optional[Grid] = None) -> SpectralCdf:
    grid = grid or density_grid(state)
    if grid.dimension != 1:
        raise PreconditionError("Cumulative distributions are only defined in one dimension")
    return SpectralCdf(density_field(state, t, grid))


def _sample_1d(state: WaveFunction, count: int, rng: np.random.Generator) -> np.ndarray:
    cdf = state_cdf(state, state.timestamp)
    quantile = cdf.inverse_interpolant(CDF_TABLE_SIZE)
    u = rng.random(count) * cdf.mass
    points = quantile(u)
    # flat table tails leave the interpolant undefined near mass 1
    for i in np.flatnonzero(~np.isfinite(points)):
        points[i] = cdf.quantile(u[i])
    return points[:, None]


def _sample_2d(state: WaveFunction, count: int, rng: np.random.Generator) -> np.ndarray:
    grid = Grid.uniform(2, DENSITY_EXTENT[0], DENSITY_EXTENT[1], 128)
    density = density_field(state, state.timestamp, grid).values.real.ravel()
    nodes = grid.flat_points()
    weights = density / np.sum(density)
    mean = weights @ nodes
    centered = nodes - mean
    covariance = (centered * weights[:, None]).T @ centered * 2.25
    envelope = stats.multivariate_normal(mean=mean, cov=covariance)
    bound = 1.1 * np.max(density / envelope.pdf(nodes))

    accepted = []
    total = 0
    while total < count:
        proposals = rng.multivariate_normal(mean, covariance, size=REJECTION_CHUNK)
        inside = grid.contains(proposals)
        proposals = proposals[inside]
        target = np.abs(state.psi(proposals, state.timestamp)) ** 2
        keep = rng.random(proposals.shape[0]) * bound * envelope.pdf(proposals) < target
        accepted.append(proposals[keep])
        total += int(np.sum(keep))
    return np.concatenate(accepted)[:count]


def sample_initial(state: WaveFunction, count: int, seed: Optional[int]) -> Ensemble:
    """Draw ``count`` i.i.d. points from |psi|^2 at the state's timestamp.

    Args:
        state: Normalized wave function
        count: Number of points
        seed: Seed of the Philox generator (same seed, same points)

    Returns:
        Ensemble at ``state.timestamp``
    """
    if count <= 0:
        raise InputError(f"Ensemble size must be positive, got {count}")
    rng = make_rng(seed)
    if state.dimension == 1:
        points = _sample_1d(state, count, rng)
    else:
        points = _sample_2d(state, count, rng)
    logger.info(f"Sampled {count} initial points from |psi|^2 (seed={seed})")
    return Ensemble(points, state.timestamp, seed)


def _ensembles_from_batch(ens: Ensemble, rows: np.ndarray, result: BatchResult,
                          times: Sequence[float]) -> List[Ensemble]:
    snapshots = {}
    for k, t in enumerate(result.output_times):
        positions = result.output_positions[k]
        reached = np.all(np.isfinite(positions), axis=1)
        points = ens.points.copy()
        status = ens.status.copy()
        points[rows] = np.where(reached[:, None], positions, result.q)
        finished = result.status.copy()
        finished[reached] = TerminationStatus.COMPLETED
        status[rows] = finished
        snapshots[float(t)] = Ensemble(points, float(t), ens.seed, status, ens.weights.copy())
    return [snapshots[float(t)] for t in times]


def propagate_ensemble_times(ens: Ensemble, state: WaveFunction, times: Sequence[float],
                             config: IntegratorConfig, progress: bool = False) -> List[Ensemble]:
    """Advance an ensemble through several times in a single integration run."""
    times = [float(t) for t in times]
    if not times:
        return []
    horizon = max(times, key=lambda t: abs(t - ens.t))
    directions = {np.sign(t - ens.t) for t in times if t != ens.t}
    if len(directions) > 1:
        raise InputError("All target times must lie on the same side of the ensemble time")
    rows = np.flatnonzero(ens.alive_mask)
    result = integrate_batch(state, ens.points[rows], ens.t, horizon - ens.t, config,
                             output_times=times, progress=progress)
    snapshots = _ensembles_from_batch(ens, rows, result, times)
    for snapshot in snapshots:
        logger.info(f"Ensemble at t={snapshot.t:.6g}: {snapshot.n_alive}/{snapshot.size} alive, "
                    f"terminated fraction {snapshot.terminated_fraction:.3e}")
    return snapshots


def propagate_ensemble(ens: Ensemble, state: WaveFunction, t: float, config: IntegratorConfig,
                       progress: bool = False) -> Ensemble:
    """Move every alive point along its trajectory to time ``t``; terminations stay as data."""
    return propagate_ensemble_times(ens, state, [t], config, progress)[0]


def ks_distance(ens: Ensemble, state: WaveFunction, grid: Optional[Grid] = None) -> float:
    """Kolmogorov-Smirnov distance between alive points and the CDF of |psi_t|^2."""
    if ens.dimension != 1:
        raise PreconditionError("KS distance is only defined for one-dimensional ensembles")
    alive = ens.alive_points[:, 0]
    if alive.size < MIN_ALIVE:
        raise StatisticsError(f"KS distance needs at least {MIN_ALIVE} alive points, got {alive.size}")
    cdf = state_cdf(state, ens.t, grid)
    return float(stats.kstest(alive, cdf).statistic)


def ks_critical_value(n: int) -> float:
    return KS_CRITICAL_99 / np.sqrt(n)


def quantile_transport(state: WaveFunction, q0: float, t: float, t0: Optional[float] = None,
                       grid: Optional[Grid] = None) -> float:
    """Position whose |psi_t|^2 mass to the left equals the |psi_t0|^2 mass left of q0.

    Defined through nodes as well, since it only involves cumulative masses.
    """
    if state.dimension != 1:
        raise PreconditionError("The quantile transport map is one-dimensional")
    t0 = state.timestamp if t0 is None else float(t0)
    q0 = float(np.asarray(q0).reshape(-1)[0])
    if t == t0:
        return q0
    grid = grid or density_grid(state)
    axis = grid.axes[0]
    if not axis.start <= q0 <= axis.stop:
        raise InputError(f"q0={q0} lies outside the grid extent [{axis.start}, {axis.stop}]")
    p = float(state_cdf(state, t0, grid)(q0)[0])
    return transport_quantile(state_cdf(state, t, grid), p)


def transport_quantile(cdf: SpectralCdf, p: float, tol: float = 1e-10) -> float:
    if p < -1e-12 or p > 1.0 + 1e-12:
        raise InputError(f"Target quantile {p} lies outside (0, 1)")
    if p <= 0.0:
        return cdf.axis.start
    if p >= cdf.mass:
        return cdf.axis.stop
    root = brentq(lambda x: cdf(x)[0] - p, cdf.axis.start, cdf.axis.stop, xtol=1e-14,
                  rtol=4 * np.finfo(float).eps, maxiter=200)
    residual = abs(cdf(root)[0] - p)
    if residual > tol:
        logger.warning(f"Quantile transport residual {residual:.2e} exceeds {tol:.0e}")
    return float(root)


def _density_time_derivative(state: WaveFunction, q: np.ndarray, t: float, tau: float) -> np.ndarray:
    offsets = np.array([-2.0, -1.0, 1.0, 2.0]) * tau
    weights = np.array([1.0, -8.0, 8.0, -1.0]) / (12.0 * tau)
    total = np.zeros(q.shape[0])
    for offset, weight in zip(offsets, weights):
        total += weight * np.abs(state.psi(q, t + offset)) ** 2
    return total


def _flux_divergence(state: WaveFunction, q: np.ndarray, t: float) -> np.ndarray:
    psi = state.psi(q, t)
    second = state.second_derivatives(q, t)
    return np.sum(state.hbar / state.masses * np.imag(np.conj(psi)[:, None] * second), axis=1)


def _advected_divergence(state: WaveFunction, q: np.ndarray, t: float, delta: float) -> np.ndarray:
    """div(rho v) by fourth-order centered differences of rho*v."""
    total = np.zeros(q.shape[0])
    for axis in range(state.dimension):
        shift = np.zeros(state.dimension)
        shift[axis] = delta
        for offset, weight in zip((-2.0, -1.0, 1.0, 2.0), (1.0, -8.0, 8.0, -1.0)):
            sample = state.evaluate(q + offset * shift, t)
            v = state.hbar / state.masses[axis] * np.imag(sample.grad[:, axis] / sample.psi)
            total += weight * np.abs(sample.psi) ** 2 * v / (12.0 * delta)
    return total


def continuity_residual(state: WaveFunction, q, t: float, tau: float = TIME_STEP,
                        delta: float = SPACE_STEP) -> Tuple[float, float]:
    """Residuals of the quantum continuity equation at one point.

    Returns:
        (|d rho/dt + div j|, |d rho/dt + div(rho v)|); the second is NaN at
        points that are not regular
    """
    q = as_points(q, state.dimension)[:1]
    drho = _density_time_derivative(state, q, t, tau)
    current_form = float(abs(drho + _flux_divergence(state, q, t))[0])
    if np.abs(state.psi(q, t))[0] <= state.node_threshold:
        return current_form, float("nan")
    velocity_form = float(abs(drho + _advected_divergence(state, q, t, delta))[0])
    return current_form, velocity_form


def grid_continuity_residual(state: GridState, config: PropagatorConfig) -> float:
    """Grid mean of |d rho/dt + div j| with the time derivative from split-step steps of +-dt."""
    if not isinstance(state, GridState):
        raise PreconditionError("grid_continuity_residual needs a GridState")
    forward = evolve_splitstep(state, state.timestamp + config.dt, config)
    backward = evolve_splitstep(state, state.timestamp - config.dt, config)
    drho = (np.abs(forward.field.values) ** 2 - np.abs(backward.field.values) ** 2) / (2.0 * config.dt)
    divergence = np.zeros(state.grid.shape)
    psi = state.field.values
    for axis in range(state.dimension):
        gradient = spectral_derivative(state.field, axis).values
        j = state.hbar / state.masses[axis] * np.imag(np.conj(psi) * gradient)
        divergence += np.real(spectral_derivative(state.field.with_values(j), axis).values)
    return float(np.mean(np.abs(drho + divergence)))


def termination_trend(state: WaveFunction, count: int, seed: int, t: float, node_eps_ladder: Sequence[float],
                      config: IntegratorConfig, progress: bool = False) -> List[Dict]:
    """Terminated fraction of the same ensemble for a decreasing ladder of node thresholds."""
    ens = sample_initial(state, count, seed)
    trend = []
    for node_eps in node_eps_ladder:
        final = propagate_ensemble(ens, state, t, config.model_copy(update={"node_eps": node_eps}), progress)
        trend.append({"node_eps": node_eps, "terminated_fraction": final.terminated_fraction,
                      "terminated_by_status": final.summary()["terminated_by_status"]})
        logger.info(f"node_eps={node_eps:.1e}: terminated fraction {final.terminated_fraction:.3e}")
    return trend


def total_mass(state: WaveFunction, t: float, grid: Optional[Grid] = None) -> float:
    return quadrature(density_field(state, t, grid), "real")
