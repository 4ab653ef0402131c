import logging
import os
from typing import Dict, List, Optional, Tuple

import numpy as np

from auditors.equivariance_auditor import (ks_critical_value, ks_distance, propagate_ensemble_times,
                                           quantile_transport, sample_initial)
from auditors.flux_auditor import FluxAuditor, RegionSpec, find_nodal_set
from db.artifacts import ensure_output_dir, write_csv, write_json
from field_core.errors import PreconditionError
from field_core.grid import Grid
from field_core.utils import quadrature
from integrators.bohm_integrator import TerminationStatus, Trajectory, integrate_batch, integrate_trajectory
from propagation.propagator import energy_moment, evolve_analytic, evolve_splitstep, mean_energy, time_dependent
from quantum.presets import PRESET_DIMENSIONS, build_preset
from quantum.states import GaussianPacket, GridState, HarmonicState, WaveFunction, sample_to_grid
from .config import ScenarioConfig

logger = logging.getLogger(__name__)

QUANTILE_POINTS = 49
QUANTILE_TOLERANCE = 1e-5


def build_state(config: ScenarioConfig) -> WaveFunction:
    """Scenario state at t = 0; grid scenarios live on the configured grid."""
    dimension = PRESET_DIMENSIONS.get(config.scenario, 1)
    grid = Grid.uniform(dimension, config.grid.start, config.grid.stop, config.grid.n)
    physics = config.physics
    return build_preset(config.scenario, physics.hbar, physics.mass, physics.omega, grid, config.propagator.cap)


def _evolving(state: WaveFunction, t_end: float, config: ScenarioConfig) -> WaveFunction:
    """A state evaluable up to ``t_end`` (grid states are recorded as a history)."""
    return time_dependent(state, t_end, config.propagator, config.progress)


def _path(config: ScenarioConfig, name: str) -> str:
    return os.path.join(config.output_dir, name)


# -- trajectories -------------------------------------------------------------

def _node_crossers(state: WaveFunction, config: ScenarioConfig) -> List[Tuple[str, float, float, float]]:
    """(label, q0, t0, backward span) of the paths that touch the nodes of the eq4 superposition.

    Paths through (+-1, 0) are seeded at the quarter period by quantile transport and
    run backward into the node; the central path starts at the origin.
    """
    if config.scenario != "eq4":
        return []
    quarter = np.pi / (2.0 * config.physics.omega)
    crossers = [("node-crosser 0", 0.0, 0.0, 0.0)]
    for q_node in (-1.0, 1.0):
        q_seed = quantile_transport(state, q_node, quarter, t0=0.0)
        crossers.append((f"node-crosser {q_node:+.0f}", q_seed, quarter, quarter))
    return crossers


def _trajectory_rows(label: str, trajectory: Trajectory, backward: bool = False) -> List[List]:
    rows = []
    last = 0 if backward else len(trajectory.times) - 1
    for k, (t, q, a, v) in enumerate(zip(trajectory.times, trajectory.positions, trajectory.psi_abs,
                                         trajectory.velocities)):
        event = trajectory.status.value if k == last and trajectory.status != TerminationStatus.COMPLETED else ""
        rows.append([label, float(trajectory.q0[0]), t, q[0], a, v[0], event])
    return rows


def _run_path(state: WaveFunction, label: str, q0: float, t0: float, T: float, backward: float,
              config: ScenarioConfig, samples: int) -> Tuple[List[List], Dict]:
    rows, summary = [], {"path": label, "q0": q0, "t0": t0}
    if backward > 0:
        back = integrate_trajectory(state, q0, t0, -backward, config.integrator)
        rows += _trajectory_rows(label, back, backward=True)
        summary["tau_minus"] = back.tau_minus
        summary["backward_status"] = back.status.value
    span = T - t0
    outputs = list(np.linspace(t0, t0 + span, samples))
    forward = integrate_trajectory(state, q0, t0, span, config.integrator, outputs)
    forward_rows = _trajectory_rows(label, forward)
    rows += forward_rows[1:] if backward > 0 else forward_rows
    summary["tau_plus"] = forward.tau_plus
    summary["status"] = forward.status.value
    summary["final_q"] = float(forward.final_position[0])
    return rows, summary


def handle_trajectories(config: ScenarioConfig) -> Dict:
    """Plot-ready trajectory fan with the node-touching paths marked by their events."""
    spec = config.trajectories
    state = build_state(config)
    if state.dimension != 1:
        raise PreconditionError("The trajectory fan is drawn for one-dimensional scenarios")
    state = _evolving(state, spec.T, config)
    rows, paths = [], []
    for q0 in np.linspace(spec.fan_start, spec.fan_stop, spec.fan_count):
        label = f"fan {q0:+.4f}"
        try:
            path_rows, summary = _run_path(state, label, float(q0), 0.0, spec.T, 0.0, config, spec.samples)
        except PreconditionError as e:
            logger.warning(f"Skipping {label}: {e}")
            paths.append({"path": label, "q0": float(q0), "t0": 0.0, "status": "Irregular"})
            continue
        rows += path_rows
        paths.append(summary)
    for label, q0, t0, backward in _node_crossers(state, config):
        path_rows, summary = _run_path(state, label, q0, t0, spec.T, backward, config, spec.samples)
        rows += path_rows
        paths.append(summary)

    write_csv(_path(config, "trajectories.csv"), ["path", "q0", "t", "q", "psi_abs", "v", "event"], rows)
    result = {"command": "trajectories", "scenario": config.scenario, "paths": paths}
    write_json(_path(config, "trajectories_summary.json"), result)
    return result


# -- ensemble -----------------------------------------------------------------

def handle_ensemble(config: ScenarioConfig) -> Dict:
    """Equivariance check: KS distance of the propagated ensemble at every target time."""
    spec = config.ensemble
    state = build_state(config)
    times = sorted(spec.times)
    state = _evolving(state, max(times), config)
    ensemble = sample_initial(state, spec.count, spec.seed)
    snapshots = propagate_ensemble_times(ensemble, state, times, config.integrator, config.progress)

    summaries = []
    for snapshot in snapshots:
        ks = ks_distance(snapshot, state) if state.dimension == 1 else None
        summary = snapshot.summary(ks)
        if ks is not None:
            summary["ks_passed"] = bool(ks < ks_critical_value(snapshot.n_alive))
        summaries.append(summary)
    header = ["id", "t"] + [f"q_{k + 1}" for k in range(state.dimension)] + ["status"]
    rows = ([i, snapshot.t, *snapshot.points[i], snapshot.status[i].value]
            for snapshot in [ensemble, *snapshots] for i in range(ensemble.size))
    write_csv(_path(config, "ensemble.csv"), header, rows)
    result = {"command": "ensemble", "scenario": config.scenario, "times": times, "snapshots": summaries}
    write_json(_path(config, "ensemble_summary.json"), result)
    return result


# -- flux audit ---------------------------------------------------------------

def handle_flux_audit(config: ScenarioConfig) -> Dict:
    """Flux bound along the configured eps/delta ladders with one shared Monte-Carlo run."""
    ladder = config.region
    state = _evolving(build_state(config), ladder.T, config)
    auditor = FluxAuditor(state, config.integrator, progress=config.progress)
    reports = []
    for delta in ladder.delta:
        for eps in ladder.eps:
            spec = RegionSpec(eps=eps, delta=delta, r=ladder.r, T=ladder.T, time_weight=ladder.time_weight)
            reports.append(auditor.bad_event_bound(spec, config.ensemble.mc_count, config.ensemble.seed))

    n_terms = [report.N_term for report in reports[:len(ladder.eps)]]
    s_terms = [reports[k * len(ladder.eps)].S_term for k in range(len(ladder.delta))]
    nodal = auditor.nodal_set(reports[0].parameters)
    write_csv(_path(config, "nodal_set.csv"), nodal.header(), nodal.rows())
    result = {
        "command": "flux-audit",
        "scenario": config.scenario,
        "reports": [report.to_dict() for report in reports],
        "N_strictly_decreasing": bool(all(b < a for a, b in zip(n_terms, n_terms[1:]))),
        "S_decreasing": bool(all(b <= a for a, b in zip(s_terms, s_terms[1:]))),
        "bound_holds": bool(all(report.bound_holds for report in reports if report.mc_count > 0)),
        "horizon_ladder": auditor.horizon_ladder(ladder.radii, ladder.T),
        "nodal_set": nodal.codimension_report(),
    }
    write_json(_path(config, "flux_report.json"), result)
    return result


# -- nodes --------------------------------------------------------------------

def handle_nodes(config: ScenarioConfig) -> Dict:
    state = build_state(config)
    window = [tuple(r) for r in config.window]
    state = _evolving(state, window[-1][1], config)
    nodal = find_nodal_set(state, window)
    write_csv(_path(config, "nodes.csv"), nodal.header(), nodal.rows())
    if nodal.polylines:
        rows = [[k, *point] for k, path in enumerate(nodal.polylines) for point in path]
        write_csv(_path(config, "nodal_polylines.csv"), ["polyline", "q1", "q2", "t"], rows)
    result = {"command": "nodes", "scenario": config.scenario, "window": config.window,
              "count": nodal.count, "resolved": nodal.resolved, "unresolved": nodal.unresolved,
              "codimension": nodal.codimension_report()}
    write_json(_path(config, "nodes_summary.json"), result)
    return result


# -- quantile check -----------------------------------------------------------

def handle_quantile_check(config: ScenarioConfig) -> Dict:
    """Compare ODE endpoints with the quantile-transport map over a grid of starting points."""
    state = build_state(config)
    if state.dimension != 1:
        raise PreconditionError("The quantile check is one-dimensional")
    t = config.t
    state = _evolving(state, t, config)
    q0 = np.linspace(-3.0, 3.0, QUANTILE_POINTS)
    result_batch = integrate_batch(state, q0, state.timestamp, t - state.timestamp, config.integrator,
                                   progress=config.progress)
    rows, excluded, differences = [], [], []
    for i, start in enumerate(q0):
        if result_batch.status[i] != TerminationStatus.COMPLETED:
            excluded.append({"q0": float(start), "status": result_batch.status[i].value})
            continue
        ode = float(result_batch.q[i, 0])
        oracle = quantile_transport(state, float(start), t)
        differences.append(abs(ode - oracle))
        rows.append([start, ode, oracle, abs(ode - oracle)])
    write_csv(_path(config, "quantile_check.csv"), ["q0", "q_ode", "q_quantile", "abs_diff"], rows)
    max_diff = max(differences) if differences else None
    result = {"command": "quantile-check", "scenario": config.scenario, "t": t, "compared": len(rows),
              "excluded": excluded, "max_abs_diff": max_diff,
              "passed": max_diff is not None and max_diff < QUANTILE_TOLERANCE}
    write_json(_path(config, "quantile_summary.json"), result)
    return result


# -- evolve -------------------------------------------------------------------

def _closed_form(state: WaveFunction) -> Optional[WaveFunction]:
    return state if isinstance(state, (HarmonicState, GaussianPacket)) else None


def handle_evolve(config: ScenarioConfig) -> Dict:
    """Split-step evolution to ``t`` compared with the closed-form propagator where one exists."""
    state = build_state(config)
    exact = _closed_form(state)
    start = state if isinstance(state, GridState) else sample_to_grid(state, state.grid or Grid.uniform(
        state.dimension, config.grid.start, config.grid.stop, config.grid.n), 0.0)
    final = evolve_splitstep(start, config.t, config.propagator, config.progress)
    norm_start = float(np.sqrt(quadrature(start.field, "abs2")))
    norm_final = float(np.sqrt(quadrature(final.field, "abs2")))
    points = start.grid.flat_points()
    split = final.field.values.ravel()
    result = {"command": "evolve", "scenario": config.scenario, "t": config.t, "dt": config.propagator.dt,
              "n": config.grid.n, "norm_drift": abs(norm_final - norm_start)}

    if exact is not None:
        reference = evolve_analytic(exact, config.t).psi(points, config.t)
        result["max_abs_error"] = float(np.max(np.abs(split - reference)))
        result["energy_mean"] = mean_energy(exact)
        result["energy_moment_1"] = energy_moment(exact, 1)
        result["grid_energy_mean"] = mean_energy(start)
        result["grid_energy_moment_1"] = energy_moment(start, 1)
        result["energy_drift"] = abs(mean_energy(final) - result["grid_energy_mean"])
    else:
        reference = np.full(split.shape, np.nan + 0j)
    header = [f"q{k + 1}" for k in range(points.shape[1])] if points.shape[1] > 1 else ["q"]
    rows = ([*p, s.real, s.imag, r.real, r.imag] for p, s, r in zip(points, split, reference))
    write_csv(_path(config, "evolve_field.csv"), header + ["re_split", "im_split", "re_exact", "im_exact"], rows)
    write_json(_path(config, "evolve_summary.json"), result)
    return result


HANDLERS = {
    "trajectories": handle_trajectories,
    "ensemble": handle_ensemble,
    "flux-audit": handle_flux_audit,
    "nodes": handle_nodes,
    "quantile-check": handle_quantile_check,
    "evolve": handle_evolve,
}


def prepare_output(config: ScenarioConfig) -> str:
    path = ensure_output_dir(config.output_dir)
    write_json(_path(config, "resolved_config.json"), config.model_dump(mode="json"))
    return path
