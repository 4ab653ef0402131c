import numpy as np
import pytest

from auditors.equivariance_auditor import (Ensemble, continuity_residual, grid_continuity_residual, ks_critical_value,
                                           ks_distance, propagate_ensemble, propagate_ensemble_times,
                                           quantile_transport, sample_initial, state_cdf, termination_trend,
                                           total_mass)
from field_core.errors import InputError, PreconditionError, StatisticsError
from field_core.grid import Grid
from integrators.bohm_integrator import IntegratorConfig, TerminationStatus, integrate_batch
from propagation.propagator import PropagatorConfig
from quantum.states import sample_to_grid

NODE_CROSSERS = (-1.0, 0.0, 1.0)


def test_sampling_is_reproducible(eq4):
    first = sample_initial(eq4, 500, seed=11)
    second = sample_initial(eq4, 500, seed=11)
    other = sample_initial(eq4, 500, seed=12)
    np.testing.assert_array_equal(first.points, second.points)
    assert not np.array_equal(first.points, other.points)
    assert first.t == eq4.timestamp
    assert first.n_alive == 500


def test_initial_sample_follows_the_density(eq4):
    ensemble = sample_initial(eq4, 20_000, seed=5)
    assert ks_distance(ensemble, eq4) < 1.5 * ks_critical_value(ensemble.n_alive)


def test_fresh_ensembles_pass_the_ks_test_at_the_nominal_rate(eq4):
    # 50 draws at the 99% level: more than two rejections has probability below 1.5%
    failures = 0
    for seed in range(100, 150):
        ensemble = sample_initial(eq4, 1000, seed=seed)
        failures += ks_distance(ensemble, eq4) >= ks_critical_value(ensemble.n_alive)
    assert failures <= 2


def test_shifted_ensemble_is_rejected(eq4):
    ensemble = sample_initial(eq4, 1000, seed=21)
    shifted = Ensemble(ensemble.points + 0.5, ensemble.t, ensemble.seed)
    assert ks_distance(shifted, eq4) > 0.1
    assert ks_distance(shifted, eq4) > ks_critical_value(shifted.n_alive)


def test_two_dimensional_sample_is_centred(eq4_2d):
    ensemble = sample_initial(eq4_2d, 4000, seed=2)
    assert ensemble.points.shape == (4000, 2)
    assert abs(np.mean(ensemble.points[:, 1])) < 0.1
    with pytest.raises(PreconditionError):
        ks_distance(ensemble, eq4_2d)


def test_ks_distance_needs_enough_alive_points(eq4):
    ensemble = Ensemble(np.linspace(-1.0, 1.0, 50), 0.0, None)
    with pytest.raises(StatisticsError):
        ks_distance(ensemble, eq4)


def test_ensemble_rejects_non_finite_alive_points():
    with pytest.raises(InputError):
        Ensemble(np.array([0.0, np.nan]), 0.0, None)
    status = np.array([TerminationStatus.COMPLETED, TerminationStatus.HIT_NODE], dtype=object)
    ensemble = Ensemble(np.array([0.0, np.nan]), 0.0, None, status)
    assert ensemble.n_alive == 1
    assert ensemble.terminated_fraction == 0.5
    assert ensemble.summary()["terminated_by_status"]["HitNode"] == 1


@pytest.mark.slow
def test_equivariance_of_the_eq4_ensemble(eq4, integrator_config):
    ensemble = sample_initial(eq4, 100_000, seed=7)
    times = [np.pi / 8, np.pi / 4, np.pi / 2, np.pi]
    for snapshot in propagate_ensemble_times(ensemble, eq4, times, integrator_config):
        assert ks_distance(snapshot, eq4) < ks_critical_value(snapshot.n_alive)
        assert snapshot.terminated_fraction < 1e-3


def test_small_ensemble_stays_distributed_as_the_density(eq4, integrator_config):
    ensemble = sample_initial(eq4, 2000, seed=3)
    final = propagate_ensemble(ensemble, eq4, np.pi / 4, integrator_config)
    assert final.t == pytest.approx(np.pi / 4)
    assert ks_distance(final, eq4) < 1.5 * ks_critical_value(final.n_alive)


def test_ensemble_times_must_lie_on_one_side(eq4, integrator_config):
    ensemble = sample_initial(eq4, 200, seed=1)
    with pytest.raises(InputError):
        propagate_ensemble_times(ensemble, eq4, [-0.1, 0.1], integrator_config)
    assert propagate_ensemble_times(ensemble, eq4, [], integrator_config) == []


def test_quantile_transport_agrees_with_the_ode(eq4, integrator_config):
    starts = np.array([q for q in np.linspace(-3.0, 3.0, 49) if min(abs(q - c) for c in NODE_CROSSERS) > 1e-12])
    t = np.pi / 4
    result = integrate_batch(eq4, starts, 0.0, t, integrator_config)
    assert np.all(result.alive)
    oracle = np.array([quantile_transport(eq4, q0, t) for q0 in starts])
    assert np.max(np.abs(result.q[:, 0] - oracle)) < 1e-5


def test_quantile_transport_edge_cases(eq4):
    assert quantile_transport(eq4, 0.4, 0.0) == 0.4
    with pytest.raises(InputError):
        quantile_transport(eq4, 20.0, 0.5)
    # the central node crosser is fixed by symmetry
    assert quantile_transport(eq4, 0.0, 1.0) == pytest.approx(0.0, abs=1e-10)


def test_total_mass_is_conserved(eq4):
    for t in (0.0, 0.7, 2.0):
        assert total_mass(eq4, t) == pytest.approx(1.0, abs=1e-12)
    assert state_cdf(eq4, 0.3)(0.0)[0] == pytest.approx(0.5, abs=1e-12)


@pytest.mark.parametrize("q, t", [(0.3, 0.2), (-1.7, 1.1), (0.9, 2.5)])
def test_analytic_continuity_residual_is_small(eq4, q, t):
    current_form, velocity_form = continuity_residual(eq4, q, t)
    assert current_form < 1e-8
    assert velocity_form < 1e-8


def test_continuity_residual_at_a_node_skips_the_velocity_form(eq4):
    current_form, velocity_form = continuity_residual(eq4, 1.0, 0.0)
    assert current_form < 1e-8
    assert np.isnan(velocity_form)


def test_grid_continuity_residual_converges(eq4):
    # the coarse grid still carries spatial error, the fine one only the dt^2 splitting error
    coarse = grid_continuity_residual(sample_to_grid(eq4, Grid.uniform(1, -12.0, 12.0, 40), 0.3),
                                      PropagatorConfig(dt=0.02))
    fine = grid_continuity_residual(sample_to_grid(eq4, Grid.uniform(1, -12.0, 12.0, 80), 0.3),
                                    PropagatorConfig(dt=0.01))
    assert fine < coarse
    assert coarse / fine >= 4.0
    with pytest.raises(PreconditionError):
        grid_continuity_residual(eq4, PropagatorConfig())


def test_termination_trend_reports_every_threshold(eq4):
    trend = termination_trend(eq4, 300, 4, np.pi / 2, [1e-3, 1e-5], IntegratorConfig())
    assert [row["node_eps"] for row in trend] == [1e-3, 1e-5]
    assert all(0.0 <= row["terminated_fraction"] <= 1.0 for row in trend)
