import numpy as np
import pytest

from field_core.errors import ConfigurationError, InputError, OutOfDomainError, PreconditionError
from field_core.grid import ComplexField, Grid
from field_core.utils import quadrature
from propagation.propagator import (PropagatorConfig, SplitStepPropagator, energy_moment, evolve, evolve_analytic,
                                    evolve_splitstep, mean_energy, record_history, time_dependent)
from quantum.presets import build_preset, harmonic_potential
from quantum.states import GridHistory, GridState, Potential, sample_to_grid


def splitstep_error(state, grid, t, dt):
    final = evolve_splitstep(sample_to_grid(state, grid, 0.0), t, PropagatorConfig(dt=dt))
    exact = state.psi(grid.flat_points(), t)
    return float(np.max(np.abs(final.field.values.ravel() - exact))), final


def test_eq4_energy_moments_are_exact(eq4):
    assert mean_energy(eq4) == pytest.approx(11.0 / 6.0, abs=1e-9)
    assert energy_moment(eq4, 1) == pytest.approx(17.0 / 4.0, abs=1e-9)


def test_grid_energy_moments_reproduce_the_closed_form(eq4, grid_1d):
    state = sample_to_grid(eq4, grid_1d, 0.0)
    assert mean_energy(state) == pytest.approx(11.0 / 6.0, abs=1e-6)
    assert energy_moment(state, 1) == pytest.approx(17.0 / 4.0, abs=1e-6)


def test_energy_moments_of_an_unnormalized_field(grid_1d):
    ground = build_preset("ground")
    values = 2.0 * ground.psi(grid_1d.flat_points(), 0.0).reshape(grid_1d.shape)
    for normalize in (True, False):
        state = GridState(ComplexField(grid_1d, values, 0.0), harmonic_potential(), normalize=normalize)
        assert mean_energy(state) == pytest.approx(0.5, abs=1e-9)
        assert energy_moment(state, 1) == pytest.approx(0.25, abs=1e-9)


def test_packet_energy_moments(packet):
    # free packet: <H> = (p^2 + 1/(4 sigma^2)) / 2 with hbar = m = sigma = 1
    assert mean_energy(packet) == pytest.approx(0.5 * (1.0 + 0.25), rel=1e-12)
    grid = Grid.uniform(1, -40.0, 40.0, 2048)
    assert energy_moment(packet, 1) == pytest.approx(energy_moment(sample_to_grid(packet, grid, 0.0), 1), rel=1e-6)


def test_energy_moment_rejects_order_zero(eq4):
    with pytest.raises(InputError):
        energy_moment(eq4, 0)


def test_singular_grid_state_has_no_energy_moment(grid_1d):
    with pytest.raises(PreconditionError):
        energy_moment(build_preset("point-singular", grid=grid_1d), 1)


def test_analytic_evolution_keeps_the_solution(eq4):
    later = evolve_analytic(eq4, 1.2)
    assert later.timestamp == 1.2
    q = np.linspace(-2.0, 2.0, 9)
    np.testing.assert_allclose(later.psi(q, 2.0), eq4.psi(q, 2.0), atol=1e-14)
    assert evolve_analytic(eq4, 0.0) is eq4


def test_analytic_evolution_needs_a_closed_form(eq4, grid_1d):
    with pytest.raises(PreconditionError):
        evolve_analytic(sample_to_grid(eq4, grid_1d, 0.0), 1.0)


@pytest.mark.slow
def test_splitstep_matches_the_analytic_propagator(eq4, grid_1d):
    error, final = splitstep_error(eq4, grid_1d, np.pi / 2, 1e-3)
    assert error < 1e-6
    assert abs(np.sqrt(quadrature(final.field, "abs2")) - 1.0) < 1e-10


@pytest.mark.slow
def test_splitstep_error_is_second_order_in_dt(eq4, grid_1d):
    coarse, _ = splitstep_error(eq4, grid_1d, np.pi / 2, 4e-3)
    fine, _ = splitstep_error(eq4, grid_1d, np.pi / 2, 2e-3)
    assert 3.0 <= coarse / fine <= 5.0


@pytest.mark.slow
def test_splitstep_conserves_the_energy(eq4, grid_1d):
    _, final = splitstep_error(eq4, grid_1d, np.pi / 2, 5e-4)
    assert abs(mean_energy(final) - 11.0 / 6.0) < 1e-6
    assert abs(energy_moment(final, 1) - 17.0 / 4.0) < 1e-5


def test_splitstep_runs_backward(eq4, grid_1d):
    start = sample_to_grid(eq4, grid_1d, 0.5)
    back = evolve_splitstep(start, 0.0, PropagatorConfig(dt=1e-3))
    assert back.timestamp == pytest.approx(0.0)
    np.testing.assert_allclose(back.field.values.ravel(), eq4.psi(grid_1d.flat_points(), 0.0), atol=1e-6)


def test_splitstep_needs_capped_singular_potential(eq4, grid_1d):
    potential = Potential(kind="point-singular", masses=(1.0,), centers=((0.3,),), couplings=(1.0,))
    state = sample_to_grid(eq4, grid_1d, 0.0, potential)
    with pytest.raises(ConfigurationError):
        SplitStepPropagator(state, 1e-3)
    assert SplitStepPropagator(sample_to_grid(eq4, grid_1d, 0.0, potential.capped(1e4)), 1e-3).dt == 1e-3


def test_evolve_dispatches_on_the_state_type(eq4, grid_1d):
    assert evolve(eq4, 1.0, PropagatorConfig()).timestamp == 1.0
    grid_state = sample_to_grid(eq4, grid_1d, 0.0)
    with pytest.raises(ConfigurationError):
        evolve(grid_state, 0.1, PropagatorConfig(scheme="analytic"))
    assert evolve(grid_state, 0.1, PropagatorConfig()).timestamp == pytest.approx(0.1)


def test_history_interpolates_between_snapshots(eq4, grid_1d):
    history = record_history(sample_to_grid(eq4, grid_1d, 0.0), 0.2, PropagatorConfig(dt=1e-3, history_interval=0.02))
    assert isinstance(history, GridHistory)
    assert history.valid_time_range() == pytest.approx((0.0, 0.2))
    q = np.array([[-0.7], [0.4], [1.3]])
    t = 0.1234
    sample = history.evaluate(q, t)
    exact = eq4.evaluate(q, t)
    np.testing.assert_allclose(sample.psi, exact.psi, atol=1e-5)
    np.testing.assert_allclose(sample.grad, exact.grad, atol=1e-5)
    with pytest.raises(OutOfDomainError):
        history.psi(q, 0.3)
    with pytest.raises(InputError):
        record_history(sample_to_grid(eq4, grid_1d, 0.0), -0.1, PropagatorConfig())


def test_time_dependent_leaves_closed_form_states_alone(eq4, grid_1d):
    assert time_dependent(eq4, 1.0, PropagatorConfig()) is eq4
    assert isinstance(time_dependent(sample_to_grid(eq4, grid_1d, 0.0), 0.05, PropagatorConfig()), GridHistory)


def test_propagator_config_forbids_unknown_keys():
    with pytest.raises(ValueError):
        PropagatorConfig(step=0.1)
    with pytest.raises(ValueError):
        PropagatorConfig(dt=-1.0)
