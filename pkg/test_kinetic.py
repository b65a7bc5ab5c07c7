import math

import numpy as np
import pandas as pd
import pytest

from src.collision import build_tableau
from src.errors import DistributionError, FitError, PositivityError
from src.homogeneous import SelfSimilarFrame, cooling_state, physical_cooling
from src.kinetic import (
    PhaseField,
    SpectralGrid,
    boussinesq_residuals,
    hydro_moments,
    init_well_prepared,
    kinetic_run,
    local_haff_fit,
    local_haff_gap,
    local_step,
    local_temperatures,
    neutral_perturbation,
    strang_step,
    taylor_green,
    transport_step,
)
from src.lattice import maxwellian, velocity_moments


@pytest.fixture
def grid():
    return SpectralGrid((8, 8))


def _uniform_phase(lattice, grid, f, eps=1.0, alpha=1.0):
    values = np.broadcast_to(f, tuple(grid.shape) + (lattice.size,)).copy()
    return PhaseField(lattice, grid, values, eps, alpha)


def test_spectral_gradient_and_divergence(grid):
    x = grid.coordinates()
    gradient = grid.gradient(np.sin(x[0]) * np.cos(2 * x[1]))
    np.testing.assert_allclose(gradient[0], np.cos(x[0]) * np.cos(2 * x[1]), atol=1e-12)
    np.testing.assert_allclose(gradient[1], -2 * np.sin(x[0]) * np.sin(2 * x[1]), atol=1e-12)
    np.testing.assert_allclose(grid.divergence(np.stack([np.sin(x[0]), np.cos(x[1])])),
                               np.cos(x[0]) - np.sin(x[1]), atol=1e-12)


def test_taylor_green_is_divergence_free(grid):
    u = taylor_green(grid, amplitude=0.3)
    assert grid.rms(grid.divergence(u)) < 1e-13
    assert grid.rms(u[0]) == pytest.approx(0.15)


def test_phase_field_checks_shape(small_lattice, grid):
    with pytest.raises(DistributionError):
        PhaseField(small_lattice, grid, np.ones((8, 8, small_lattice.size + 1)), 0.1, 1.0)


def test_transport_step_shifts_each_velocity_node(small_lattice, grid):
    x = grid.coordinates()
    profile = 1.0 + 0.1 * np.sin(x[0]) + 0.05 * np.cos(x[1])
    m = maxwellian(small_lattice, 1.0, None, 1.0)
    phase = PhaseField(small_lattice, grid, profile[..., None] * m, 0.5, 1.0)
    dt = 0.2
    moved = transport_step(phase, dt)
    node = small_lattice.size - 1
    v = small_lattice.nodes[node]
    shifted = 1.0 + 0.1 * np.sin(x[0] - v[0] * dt / 0.5) + 0.05 * np.cos(x[1] - v[1] * dt / 0.5)
    np.testing.assert_allclose(moved.values[..., node], shifted * m[node], atol=1e-12)
    np.testing.assert_allclose(moved.values.mean(axis=(0, 1)), phase.values.mean(axis=(0, 1)), atol=1e-14)
    assert moved.time == pytest.approx(dt)
    assert moved.step == 1


def test_transport_over_a_full_lattice_period_is_identity(small_lattice, grid, rng):
    values = rng.random(tuple(grid.shape) + (small_lattice.size,))
    phase = PhaseField(small_lattice, grid, values, 0.3, 1.0)
    dt = 0.3 * 2.0 * math.pi / small_lattice.spacing
    x = grid.coordinates()
    smooth = PhaseField(small_lattice, grid, (1.0 + np.sin(x[0]) * np.cos(x[1]))[..., None] * values[0, 0], 0.3, 1.0)
    np.testing.assert_allclose(transport_step(smooth, dt).values, smooth.values, atol=1e-12)
    np.testing.assert_allclose(transport_step(phase, 0.0).values, values, atol=1e-14)


def test_local_part_keeps_identical_cells_identical(small_inelastic, grid, positive_pair):
    f, _ = positive_pair
    lattice = small_inelastic.lattice
    phase = _uniform_phase(lattice, grid, f, eps=1.0, alpha=small_inelastic.alpha)
    stepped = strang_step(phase, 0.05, small_inelastic, transport=False)
    cells = stepped.values.reshape(-1, lattice.size)
    np.testing.assert_allclose(cells, np.broadcast_to(cells[0], cells.shape), rtol=1e-13)
    assert velocity_moments(lattice, cells[0])["mass"] == pytest.approx(velocity_moments(lattice, f)["mass"])
    assert stepped.time == pytest.approx(0.05)
    assert stepped.step == 1


def test_threaded_local_step_matches_serial(small_inelastic, grid, positive_pair):
    f, g = positive_pair
    lattice = small_inelastic.lattice
    phase = _uniform_phase(lattice, grid, f, alpha=small_inelastic.alpha)
    phase.values[1::2] = g
    serial, _ = local_step(phase, 0.05, small_inelastic)
    threaded, _ = local_step(phase, 0.05, small_inelastic, n_jobs=2, chunk=8)
    np.testing.assert_allclose(serial, threaded, rtol=1e-13)


def test_local_step_rejects_alpha_mismatch(small_elastic, grid, positive_pair):
    f, _ = positive_pair
    phase = _uniform_phase(small_elastic.lattice, grid, f, alpha=0.9)
    with pytest.raises(DistributionError):
        local_step(phase, 0.01, small_elastic)


def test_positivity_failure_names_the_cell(small_elastic, grid):
    lattice = small_elastic.lattice
    m = maxwellian(lattice, 1.0, None, 1.0)
    phase = _uniform_phase(lattice, grid, m)
    flat = phase.values.reshape(-1, lattice.size)
    flat[6, 0] = -0.5 * m.max()
    with pytest.raises(PositivityError) as info:
        local_step(phase, 1e-6, small_elastic, chunk=4)
    assert info.value.cell == 6


def test_well_prepared_data_satisfy_constraints(desk_lattice, desk_theta1, grid):
    reference = maxwellian(desk_lattice, 1.0, None, desk_theta1)
    x = grid.coordinates()
    theta0 = 0.2 * np.cos(x[0])
    u0 = taylor_green(grid, amplitude=0.5)
    phase = init_well_prepared(desk_lattice, grid, -desk_theta1 * theta0, u0, theta0, 0.01, 1.0, reference,
                               desk_theta1)
    constraints = phase.meta["constraints"]
    assert constraints["clipped_fraction"] == 0.0
    assert constraints["mean_divergence"] < 1e-13
    assert constraints["boussinesq"] < 1e-14
    assert constraints["mass"] == pytest.approx(float(velocity_moments(desk_lattice, reference)["mass"]), rel=1e-12)

    hydro = hydro_moments(phase, reference, desk_theta1)
    np.testing.assert_allclose(hydro.rho, -desk_theta1 * theta0, atol=1e-3)
    np.testing.assert_allclose(hydro.u, u0, atol=1e-3)
    np.testing.assert_allclose(hydro.theta, theta0, atol=1e-3)
    residuals = boussinesq_residuals(hydro, desk_theta1, grid)
    assert residuals["incompressibility"] < 1e-10
    assert residuals["boussinesq"] < 1e-3


def test_well_prepared_data_reject_negative_densities(desk_lattice, desk_theta1, grid):
    reference = maxwellian(desk_lattice, 1.0, None, desk_theta1)
    with pytest.raises(DistributionError):
        init_well_prepared(desk_lattice, grid, 0.0, taylor_green(grid, 5.0), 0.0, 1.0, 1.0, reference, desk_theta1)


def test_hydro_moments_need_positive_eps(small_lattice, grid):
    m = maxwellian(small_lattice, 1.0, None, 1.0)
    with pytest.raises(DistributionError):
        hydro_moments(_uniform_phase(small_lattice, grid, m, eps=0.0), m, 1.0)


def test_neutral_perturbation_has_no_conserved_moments(desk_lattice, desk_theta1):
    h = neutral_perturbation(desk_lattice, desk_theta1)
    moments = velocity_moments(desk_lattice, h)
    scale = desk_lattice.weight * np.abs(h).sum()
    assert abs(moments["mass"]) < 1e-12 * scale
    np.testing.assert_allclose(moments["momentum"], 0.0, atol=1e-12 * scale)
    assert abs(moments["energy"]) < 1e-10 * scale
    assert np.abs(h).max() > 0


def test_kinetic_run_samples_and_keeps_mass(desk_elastic, desk_theta1):
    grid = SpectralGrid((4, 4))
    lattice = desk_elastic.lattice
    state = cooling_state(desk_elastic)
    x = grid.coordinates()
    theta0 = 0.1 * np.cos(x[0])
    phase = init_well_prepared(lattice, grid, -desk_theta1 * theta0, taylor_green(grid, 0.1), theta0, 0.2, 1.0,
                               state.values, desk_theta1)
    samples = []
    final, series = kinetic_run(phase, desk_elastic, state.values, desk_theta1, dt=0.01, horizon=0.04,
                                sample_every=2, on_sample=lambda current, hydro: samples.append(current.time))
    assert len(series) == 3
    assert samples == pytest.approx([0.0, 0.02, 0.04])
    assert final.step == 4
    np.testing.assert_allclose(series["mass"], series["mass"].iloc[0], rtol=1e-10)
    assert set(series.columns) >= {"t", "distance", "min_f", "momentum", "energy", "incompressibility", "boussinesq"}


def _cooling_reference(rate, temperature, horizon, samples=2000):
    t = np.linspace(0.0, horizon, samples)
    return pd.DataFrame({"t": t, "temperature": temperature / (1.0 + rate * t) ** 2})


def test_local_temperatures_remove_the_bulk_flow(desk_lattice, desk_theta1):
    grid = SpectralGrid((2, 2))
    drifting = maxwellian(desk_lattice, 1.0, [0.3, 0.0], desk_theta1)
    temperatures = local_temperatures(_uniform_phase(desk_lattice, grid, drifting))
    np.testing.assert_allclose(temperatures, desk_theta1, rtol=1e-3)
    assert velocity_moments(desk_lattice, drifting)["temperature"] == pytest.approx(desk_theta1 + 0.045, rel=1e-3)


def test_local_haff_gap_accepts_a_steady_self_similar_run():
    frame = SelfSimilarFrame(0.1, 2.0)
    taus = np.linspace(0.0, 1.5, 40)
    temperatures = np.full((40, 3), 1.7)
    reference = _cooling_reference(2.0, 1.7, float(frame.physical_time(1.5)))
    gaps = local_haff_gap(taus, temperatures, frame, reference)
    assert gaps.shape == (3,)
    np.testing.assert_allclose(gaps, 0.0, atol=1e-3)


def test_local_haff_gap_catches_a_wrong_cooling_rate():
    frame = SelfSimilarFrame(0.1, 2.0)
    taus = np.linspace(0.0, 1.5, 40)
    temperatures = np.full((40, 2), 1.7)
    horizon = float(frame.physical_time(1.5))
    np.testing.assert_allclose(local_haff_fit(taus, temperatures, frame), -2.0, atol=1e-8)
    assert np.all(local_haff_gap(taus, temperatures, frame, _cooling_reference(2.4, 1.7, horizon)) > 0.3)
    growing = 1.7 * np.sqrt(frame.scale(frame.physical_time(taus)))[:, None] * np.ones((1, 2))
    assert np.all(local_haff_gap(taus, growing, frame, _cooling_reference(2.0, 1.7, horizon)) > 0.3)


def test_local_haff_gap_needs_a_long_enough_reference():
    frame = SelfSimilarFrame(0.1, 2.0)
    with pytest.raises(FitError):
        local_haff_gap(np.linspace(0.0, 1.5, 40), np.ones((40, 1)), frame, _cooling_reference(2.0, 1.0, 1.0))


@pytest.mark.slow
def test_local_haff_law_follows_the_physical_run(desk_lattice, quadrature16, desk_theta1):
    alpha, eps = 0.95, 0.5
    tableau = build_tableau(desk_lattice, quadrature16, alpha)
    state = cooling_state(tableau)
    grid = SpectralGrid((4, 4))
    frame = SelfSimilarFrame(eps, (1.0 - alpha) / eps ** 2)
    phase = init_well_prepared(desk_lattice, grid, 0.0, taylor_green(grid, 0.2), 0.0, eps, alpha, state.values,
                               desk_theta1)
    taus, temperatures = [], []

    def on_sample(current, _):
        taus.append(current.time)
        temperatures.append(np.ravel(local_temperatures(current)))

    tau_end = float(frame.clock(50.0))
    kinetic_run(phase, tableau, state.values, desk_theta1, 0.05, tau_end, sample_every=5, on_sample=on_sample)
    reference = physical_cooling(state.values, tableau, eps, float(frame.physical_time(taus[-1])), samples=160)
    assert local_haff_gap(taus, np.array(temperatures), frame, reference).max() < 0.05
    np.testing.assert_allclose(local_haff_fit(taus, np.array(temperatures), frame), -2.0, atol=0.15)
