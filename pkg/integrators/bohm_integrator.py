import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import minimize_scalar
from tqdm import tqdm

from field_core.errors import PreconditionError
from field_core.grid import as_points, broadcast_times
from quantum.states import GridState, SCALE_EXTENT, WaveFunction

logger = logging.getLogger(__name__)

# Dormand-Prince 5(4) tableau; the last stage is evaluated at the step end (FSAL)
DOPRI_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
DOPRI_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
DOPRI_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
DOPRI_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0
# interior minima of |psi|^2 below (CANDIDATE_FACTOR * node level)^2 are refined
CANDIDATE_FACTOR = 1e3
HERMITE_PROBES = np.linspace(0.0, 1.0, 33)


class IntegratorConfig(BaseModel):
    """Tolerances and event thresholds for the guiding-equation integrator.

    ``node_eps`` is relative to sup|psi|; ``escape_radius`` defaults to the grid
    half-extent minus one.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    rel_tol: float = Field(1e-10, gt=0)
    abs_tol: float = Field(1e-12, gt=0)
    node_eps: float = Field(1e-7, gt=0)
    escape_radius: Optional[float] = Field(None, gt=0)
    sing_dist: float = Field(1e-6, gt=0)
    max_step: float = Field(0.05, gt=0)
    max_displacement: float = Field(0.05, gt=0)
    initial_step: float = Field(1e-3, gt=0)
    min_step: float = Field(1e-14, gt=0)
    event_tol: float = Field(1e-10, gt=0)
    max_steps: int = Field(2_000_000, gt=0)


class TerminationStatus(str, Enum):
    COMPLETED = "Completed"
    HIT_NODE = "HitNode"
    HIT_SINGULAR = "HitSingularPotential"
    ESCAPED = "Escaped"
    STEP_COLLAPSE = "StepCollapse"
    RUNNING = "Running"


BAD_EVENTS = (TerminationStatus.HIT_NODE, TerminationStatus.HIT_SINGULAR, TerminationStatus.ESCAPED)

StepObserver = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray], None]


@dataclass
class Trajectory:
    """Sampled maximal solution of the guiding equation.

    ``tau_minus`` / ``tau_plus`` are event times, +-inf when the run reached its
    horizon without an event, and None for a direction that was not integrated.
    """

    q0: np.ndarray
    t0: float
    times: np.ndarray
    positions: np.ndarray
    psi_abs: np.ndarray
    velocities: np.ndarray
    status: TerminationStatus
    tau_minus: Optional[float] = None
    tau_plus: Optional[float] = None

    @property
    def final_time(self) -> float:
        return float(self.times[-1])

    @property
    def final_position(self) -> np.ndarray:
        return self.positions[-1]

    def position_at(self, t: float, tol: float = 1e-12) -> np.ndarray:
        """Recorded position at a sample time (use ``output_times`` to force samples)."""
        hits = np.flatnonzero(np.abs(self.times - t) <= tol * max(1.0, abs(t)))
        if hits.size == 0:
            raise KeyError(f"No trajectory sample at t={t}")
        return self.positions[hits[0]]

    def rows(self) -> List[List[float]]:
        return [[t, *q, a, *v] for t, q, a, v in zip(self.times, self.positions, self.psi_abs, self.velocities)]


@dataclass
class BatchResult:
    """Final states of a batch of trajectories integrated together."""

    q0: np.ndarray
    t0: np.ndarray
    q: np.ndarray
    t: np.ndarray
    status: np.ndarray
    event_time: np.ndarray
    output_times: np.ndarray
    output_positions: np.ndarray
    samples: Optional[List[List[Tuple[float, np.ndarray, float, np.ndarray]]]] = None

    @property
    def alive(self) -> np.ndarray:
        return self.status == TerminationStatus.COMPLETED

    def status_counts(self) -> Dict[str, int]:
        counts = {s.value: 0 for s in TerminationStatus if s is not TerminationStatus.RUNNING}
        for s in self.status:
            counts[TerminationStatus(s).value] += 1
        return counts

    @property
    def terminated_fraction(self) -> float:
        return float(np.mean(~self.alive)) if self.status.size else 0.0

    def bad_event_mask(self) -> np.ndarray:
        return np.isin(self.status, BAD_EVENTS)

    def trajectory(self, i: int) -> Trajectory:
        if self.samples is None:
            raise PreconditionError("Batch was integrated without recording samples")
        rows = self.samples[i]
        return Trajectory(
            q0=self.q0[i], t0=float(self.t0[i]),
            times=np.array([r[0] for r in rows]),
            positions=np.array([r[1] for r in rows]),
            psi_abs=np.array([r[2] for r in rows]),
            velocities=np.array([r[3] for r in rows]),
            status=self.status[i],
        )


@dataclass
class _PointData:
    v: np.ndarray
    psi: np.ndarray
    grad: np.ndarray
    dpsi_dt: np.ndarray

    def take(self, rows) -> "_PointData":
        return _PointData(self.v[rows], self.psi[rows], self.grad[rows], self.dpsi_dt[rows])

    def put(self, rows, other: "_PointData") -> None:
        self.v[rows] = other.v
        self.psi[rows] = other.psi
        self.grad[rows] = other.grad
        self.dpsi_dt[rows] = other.dpsi_dt


class BohmIntegrator:
    """Adaptive Dormand-Prince integration of dQ/dt = v(Q, t) for batches of particles.

    Every particle keeps its own step size; steps stop exactly at the horizon
    and at requested output times. Node, escape and singular-distance events are
    located by bisection on the step.
    """

    def __init__(self, state: WaveFunction, config: IntegratorConfig):
        if isinstance(state, GridState):
            raise PreconditionError("A single-instant GridState cannot guide trajectories; record a history first")
        self.state = state
        self.config = config
        self.dimension = state.dimension
        self.node_level = config.node_eps * state.amplitude_scale
        self.singular = state.potential.singular_set
        if config.escape_radius is not None:
            self.escape_radius = config.escape_radius
        elif state.grid is not None:
            self.escape_radius = state.grid.half_extent - 1.0
        else:
            self.escape_radius = SCALE_EXTENT - 1.0
        self.t_range = state.valid_time_range()

    # -- field evaluation -------------------------------------------------

    def _sample(self, q: np.ndarray, t: np.ndarray) -> _PointData:
        m, d = q.shape
        data = _PointData(np.full((m, d), np.nan), np.full(m, np.nan, dtype=complex),
                          np.full((m, d), np.nan, dtype=complex), np.full(m, np.nan, dtype=complex))
        valid = np.all(np.isfinite(q), axis=1) & np.isfinite(t)
        if self.state.grid is not None:
            valid &= self.state.grid.contains(np.where(np.isfinite(q), q, np.inf))
        lo, hi = self.t_range
        slack = 1e-12 * max(1.0, abs(lo), abs(hi)) if np.isfinite(hi) else 0.0
        valid &= (t >= lo - slack) & (t <= hi + slack)
        if not np.any(valid):
            return data
        rows = np.flatnonzero(valid)
        sample = self.state.evaluate(q[rows], t[rows])
        data.psi[rows] = sample.psi
        data.grad[rows] = sample.grad
        data.dpsi_dt[rows] = sample.dpsi_dt
        regular = np.abs(sample.psi) > self.state.node_threshold
        if np.any(regular):
            ratio = sample.grad[regular] / sample.psi[regular, None]
            data.v[rows[regular]] = self.state.hbar / self.state.masses * np.imag(ratio)
        return data

    def _event_values(self, q: np.ndarray, psi: np.ndarray) -> Dict[TerminationStatus, np.ndarray]:
        psi_abs = np.abs(psi)
        node = np.where(np.isfinite(psi_abs), psi_abs - self.node_level, -1.0)
        escape = self.escape_radius - np.linalg.norm(q, axis=1)
        escape = np.where(np.isfinite(escape), escape, -1.0)
        if self.singular.shape[0]:
            distance = np.min(np.linalg.norm(q[:, None, :] - self.singular[None], axis=-1), axis=1)
            singular = np.where(np.isfinite(distance), distance - self.config.sing_dist, -1.0)
        else:
            singular = np.full(q.shape[0], np.inf)
        return {
            TerminationStatus.HIT_NODE: node,
            TerminationStatus.ESCAPED: escape,
            TerminationStatus.HIT_SINGULAR: singular,
        }

    def _dopri(self, q: np.ndarray, t: np.ndarray, k1: np.ndarray, h: np.ndarray, direction: float):
        dh = (direction * h)[:, None]
        stages = [k1]
        last = None
        for i in range(1, 7):
            increment = sum(a * k for a, k in zip(DOPRI_A[i], stages) if a != 0.0)
            last = self._sample(q + dh * increment, t + direction * h * DOPRI_C[i])
            stages.append(last.v)
        q_new = q + dh * sum(b * k for b, k in zip(DOPRI_B, stages) if b != 0.0)
        error = dh * sum(e * k for e, k in zip(DOPRI_E, stages) if e != 0.0)
        return q_new, error, last

    def _substep(self, q: np.ndarray, t: float, s: float, direction: float) -> Tuple[np.ndarray, _PointData]:
        """Position and field data after a single step of length ``s`` from (q, t)."""
        q = q.reshape(1, -1)
        if s <= 0.0:
            return q[0], self._sample(q, np.array([t]))
        k1 = self._sample(q, np.array([t])).v
        q_new, _, data = self._dopri(q, np.array([t]), k1, np.array([s]), direction)
        return q_new[0], data

    # -- event location ---------------------------------------------------

    def _event_function(self, kind: TerminationStatus, q: np.ndarray, t: float, direction: float):
        def g(s: float) -> float:
            position, data = self._substep(q, t, s, direction)
            return float(self._event_values(position.reshape(1, -1), data.psi)[kind][0])
        return g

    def _bisect(self, g, lo: float, hi: float) -> float:
        """Shrink [lo, hi] with g(lo) > 0 >= g(hi) until it is shorter than event_tol."""
        while hi - lo > self.config.event_tol:
            mid = 0.5 * (lo + hi)
            if g(mid) > 0.0:
                lo = mid
            else:
                hi = mid
        return hi

    def _locate_event(self, q: np.ndarray, t: float, h: float, direction: float,
                      fired: Sequence[TerminationStatus], node_candidate: bool) -> Optional[Tuple[float, TerminationStatus]]:
        found = []
        for kind in fired:
            found.append((self._bisect(self._event_function(kind, q, t, direction), 0.0, h), kind))
        if node_candidate and TerminationStatus.HIT_NODE not in fired:
            g = self._event_function(TerminationStatus.HIT_NODE, q, t, direction)
            result = minimize_scalar(g, bounds=(0.0, h), method="bounded", options={"xatol": 1e-12})
            if result.fun <= 0.0:
                found.append((self._bisect(g, 0.0, float(result.x)), TerminationStatus.HIT_NODE))
        if not found:
            return None
        return min(found, key=lambda item: item[0])

    def _node_candidates(self, start: _PointData, end: _PointData, h: np.ndarray, direction: float) -> np.ndarray:
        """Cubic Hermite prediction of |psi|^2 along each step; flags deep interior minima."""
        rho0 = np.abs(start.psi) ** 2
        rho1 = np.abs(end.psi) ** 2
        drho0 = direction * 2.0 * np.real(np.conj(start.psi) * (start.dpsi_dt + np.sum(start.grad * start.v, axis=1)))
        drho1 = direction * 2.0 * np.real(np.conj(end.psi) * (end.dpsi_dt + np.sum(end.grad * end.v, axis=1)))
        u = HERMITE_PROBES[None, :]
        h00, h10 = 2 * u ** 3 - 3 * u ** 2 + 1, u ** 3 - 2 * u ** 2 + u
        h01, h11 = -2 * u ** 3 + 3 * u ** 2, u ** 3 - u ** 2
        estimate = (h00 * rho0[:, None] + h10 * (h * drho0)[:, None]
                    + h01 * rho1[:, None] + h11 * (h * drho1)[:, None])
        lowest = np.min(estimate, axis=1)
        return np.isfinite(lowest) & (lowest < (CANDIDATE_FACTOR * self.node_level) ** 2)

    # -- main loop --------------------------------------------------------

    def integrate(self, q0, t0, T: float, output_times: Optional[Sequence[float]] = None,
                  record: bool = False, observer: Optional[StepObserver] = None,
                  progress: bool = False) -> BatchResult:
        """Integrate every initial condition over |T| in the direction of sign(T).

        Args:
            q0: Initial positions, shape (m, d)
            t0: Initial time (scalar or per particle)
            T: Signed time horizon
            output_times: Absolute times at which every surviving particle lands exactly
            record: Keep every accepted step as a sample
            observer: Called as observer(rows, t_old, q_old, t_new, q_new) after accepted steps
            progress: Show a tqdm bar counting finished particles

        Returns:
            BatchResult with final positions, statuses and event times
        """
        cfg = self.config
        q = as_points(q0, self.dimension).astype(float).copy()
        m = q.shape[0]
        t = broadcast_times(t0, m).copy()
        q_start, t_start = q.copy(), t.copy()
        direction = 1.0 if T >= 0 else -1.0
        t_end = t + T

        outputs = np.array(sorted(output_times or [], reverse=direction < 0), dtype=float)
        out_positions = np.full((outputs.size, m, self.dimension), np.nan)
        next_out = np.zeros(m, dtype=int)

        status = np.full(m, TerminationStatus.RUNNING, dtype=object)
        event_time = np.full(m, np.nan)
        samples = [[] for _ in range(m)] if record else None
        current = self._sample(q, t)
        h = np.full(m, min(cfg.max_step, cfg.initial_step))

        def store(rows, data: _PointData):
            if samples is None:
                return
            for row, position, psi, v in zip(rows, q[rows], data.psi, data.v):
                samples[row].append((float(t[row]), position.copy(), float(np.abs(psi)), v.copy()))

        def land_outputs(rows):
            for row in rows:
                while next_out[row] < outputs.size and direction * (outputs[next_out[row]] - t[row]) <= 1e-12:
                    if abs(outputs[next_out[row]] - t[row]) <= 1e-12 * max(1.0, abs(t[row])):
                        out_positions[next_out[row], row] = q[row]
                    next_out[row] += 1

        all_rows = np.arange(m)
        events = self._event_values(q, current.psi)
        for kind, values in events.items():
            bad = (values <= 0.0) & (status == TerminationStatus.RUNNING)
            status[bad] = kind
            event_time[bad] = t[bad]
        irregular = (status == TerminationStatus.RUNNING) & ~np.all(np.isfinite(current.v), axis=1)
        status[irregular] = TerminationStatus.HIT_NODE
        event_time[irregular] = t[irregular]
        if np.any(status != TerminationStatus.RUNNING):
            logger.warning(f"{int(np.sum(status != TerminationStatus.RUNNING))} initial points are not regular")
        store(all_rows, current)
        land_outputs(all_rows)
        done = (status == TerminationStatus.RUNNING) & (T == 0.0)
        status[done] = TerminationStatus.COMPLETED

        bar = tqdm(total=m, desc="trajectories", disable=not progress)
        bar.update(int(np.sum(status != TerminationStatus.RUNNING)))
        steps = 0
        while True:
            idx = np.flatnonzero(status == TerminationStatus.RUNNING)
            if idx.size == 0:
                break
            steps += 1
            if steps > cfg.max_steps:
                logger.warning(f"Step budget exhausted with {idx.size} particles still running")
                status[idx] = TerminationStatus.STEP_COLLAPSE
                event_time[idx] = t[idx]
                break

            limit = np.abs(t_end[idx] - t[idx])
            target = t_end[idx].copy()
            if outputs.size:
                pending = next_out[idx] < outputs.size
                upcoming = outputs[np.minimum(next_out[idx], outputs.size - 1)]
                closer = pending & (np.abs(upcoming - t[idx]) < limit)
                limit = np.where(closer, np.abs(upcoming - t[idx]), limit)
                target = np.where(closer, upcoming, target)
            landing = h[idx] >= limit
            hh = np.where(landing, limit, h[idx])

            start = current.take(idx)
            q_new, error, end = self._dopri(q[idx], t[idx], start.v, hh, direction)
            t_new = np.where(landing, target, t[idx] + direction * hh)

            finite = np.all(np.isfinite(q_new), axis=1) & np.all(np.isfinite(error), axis=1) \
                & np.all(np.isfinite(end.v), axis=1)
            scale = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(q[idx]), np.abs(q_new))
            with np.errstate(invalid="ignore"):
                ratio = np.max(np.abs(error) / scale, axis=1)
                displacement = np.linalg.norm(q_new - q[idx], axis=1)
            ratio[~finite] = np.inf
            too_far = finite & (displacement > cfg.max_displacement)
            accept = finite & (ratio <= 1.0) & ~too_far

            with np.errstate(divide="ignore"):
                factor = np.clip(SAFETY * ratio ** -0.2, MIN_FACTOR, MAX_FACTOR)
            factor[~finite] = 0.25
            factor[too_far] = np.minimum(factor[too_far], 0.5 * cfg.max_displacement / displacement[too_far])

            rejected = idx[~accept]
            h[rejected] = hh[~accept] * np.minimum(factor[~accept], SAFETY)
            collapse = rejected[h[rejected] < cfg.min_step]
            if collapse.size:
                logger.warning(f"Step collapse for {collapse.size} particles near t={t[collapse[0]]:.6g}")
                status[collapse] = TerminationStatus.STEP_COLLAPSE
                event_time[collapse] = t[collapse]
                bar.update(collapse.size)

            if not np.any(accept):
                continue
            local = np.flatnonzero(accept)
            rows = idx[local]
            end_data = end.take(local)
            events = self._event_values(q_new[local], end_data.psi)
            fired_any = np.zeros(local.size, dtype=bool)
            for values in events.values():
                fired_any |= values <= 0.0
            candidates = np.zeros(local.size, dtype=bool)
            quiet = ~fired_any
            if np.any(quiet):
                candidates[quiet] = self._node_candidates(start.take(local[quiet]), end_data.take(quiet),
                                                          hh[local[quiet]], direction)

            q_old, t_old = q[rows].copy(), t[rows].copy()
            h[rows] = np.minimum(np.where(landing[local], np.maximum(h[rows], hh[local] * factor[local]),
                                          hh[local] * factor[local]), cfg.max_step)
            q[rows] = q_new[local]
            t[rows] = t_new[local]
            current.put(rows, end_data)

            for j in np.flatnonzero(fired_any | candidates):
                row = rows[j]
                fired = [kind for kind, values in events.items() if values[j] <= 0.0]
                located = self._locate_event(q_old[j], t_old[j], hh[local[j]], direction, fired, bool(candidates[j]))
                if located is None:
                    continue
                s, kind = located
                position, data = self._substep(q_old[j], t_old[j], s, direction)
                q[row] = position
                t[row] = t_old[j] + direction * s
                current.put([row], data)
                status[row] = kind
                event_time[row] = t[row]
                bar.update(1)

            if observer is not None:
                observer(rows, t_old, q_old, t[rows].copy(), q[rows].copy())
            store(rows, current.take(rows))
            land_outputs(rows)
            finished = rows[(status[rows] == TerminationStatus.RUNNING) & (t[rows] == t_end[rows])]
            status[finished] = TerminationStatus.COMPLETED
            bar.update(finished.size)
        bar.close()

        counts = {s.value: int(np.sum(status == s)) for s in TerminationStatus if s is not TerminationStatus.RUNNING}
        logger.debug(f"Integrated {m} trajectories in {steps} batch steps: {counts}")
        return BatchResult(q_start, t_start, q, t, status, event_time, outputs, out_positions, samples)


def _check_regular(integrator: BohmIntegrator, q0: np.ndarray, t0: float) -> None:
    data = integrator._sample(q0, np.array([t0]))
    events = integrator._event_values(q0, data.psi)
    if events[TerminationStatus.HIT_NODE][0] <= 0.0 or not np.all(np.isfinite(data.v)):
        raise PreconditionError(f"Initial point q0={q0[0]} at t0={t0} is at or too close to a node")
    if events[TerminationStatus.ESCAPED][0] <= 0.0:
        raise PreconditionError(f"Initial point q0={q0[0]} lies beyond the escape radius {integrator.escape_radius}")
    if events[TerminationStatus.HIT_SINGULAR][0] <= 0.0:
        raise PreconditionError(f"Initial point q0={q0[0]} lies within sing_dist of the singular set")


def integrate_batch(state: WaveFunction, q0, t0, T: float, config: IntegratorConfig,
                    output_times: Optional[Sequence[float]] = None, record: bool = False,
                    observer: Optional[StepObserver] = None, progress: bool = False) -> BatchResult:
    """Ensemble engine: irregular initial points become terminated data, not errors."""
    return BohmIntegrator(state, config).integrate(q0, t0, T, output_times, record, observer, progress)


def integrate_trajectory(state: WaveFunction, q0, t0: float, T: float, config: IntegratorConfig,
                         output_times: Optional[Sequence[float]] = None) -> Trajectory:
    """Integrate one trajectory over |T| (backward when T < 0), recording every step."""
    integrator = BohmIntegrator(state, config)
    q0 = as_points(q0, state.dimension)[:1]
    _check_regular(integrator, q0, float(t0))
    result = integrator.integrate(q0, float(t0), T, output_times, record=True)
    trajectory = result.trajectory(0)
    if T < 0:
        trajectory = _reversed(trajectory)
    event = result.status[0] if result.status[0] != TerminationStatus.COMPLETED else None
    if T >= 0:
        trajectory.tau_plus = float(result.event_time[0]) if event else np.inf
    else:
        trajectory.tau_minus = float(result.event_time[0]) if event else -np.inf
    logger.debug(f"Trajectory from q0={q0[0]} t0={t0}: {result.status[0].value} at t={result.t[0]:.12g}")
    return trajectory


def _reversed(trajectory: Trajectory) -> Trajectory:
    """Backward runs are stored with increasing sample times."""
    return Trajectory(trajectory.q0, trajectory.t0, trajectory.times[::-1], trajectory.positions[::-1],
                      trajectory.psi_abs[::-1], trajectory.velocities[::-1], trajectory.status)


def maximal_interval(state: WaveFunction, q0, t0: float, T: float, config: IntegratorConfig) -> Tuple[float, float]:
    """(tau_minus, tau_plus) within the horizon |T|; +-inf marks a censored side."""
    forward = integrate_trajectory(state, q0, t0, abs(T), config)
    backward = integrate_trajectory(state, q0, t0, -abs(T), config)
    return backward.tau_minus, forward.tau_plus
