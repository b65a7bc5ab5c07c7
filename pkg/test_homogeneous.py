
import numpy as np
import pytest

from src.collision import build_tableau
from src.errors import CFLError, CollisionError, ConvergenceError, PositivityError
from src.gaussian import theta1_closed_form
from src.homogeneous import (
    SelfSimilarFrame,
    cooling_state,
    drift_term,
    enforce_positivity,
    frame_discrepancy,
    haff_fit,
    max_time_step,
    physical_cooling,
    self_similar_map,
    step_physical,
    step_selfsim,
    steady_residual,
    symmetrize,
)
from src.lattice import maxwellian, moment, velocity_moments


def test_drift_has_zero_mass(small_lattice, rng):
    f = rng.random((4, small_lattice.size))
    out = drift_term(small_lattice, f, 0.3)
    np.testing.assert_allclose(out.sum(axis=-1), 0.0, atol=1e-13 * np.abs(out).sum())


def test_drift_momentum_moment_is_minus_kappa_momentum(fine_lattice):
    f = maxwellian(fine_lattice, 1.0, [0.3, -0.2], 0.7)
    kappa = 0.05
    drift = moment(fine_lattice, drift_term(fine_lattice, f, kappa), fine_lattice.nodes)
    np.testing.assert_allclose(drift, -kappa * moment(fine_lattice, f, fine_lattice.nodes), rtol=1e-10)


def test_drift_energy_moment_is_minus_two_kappa_energy(fine_lattice):
    f = maxwellian(fine_lattice, 1.0, None, 0.7)
    kappa = 0.05
    drift = moment(fine_lattice, drift_term(fine_lattice, f, kappa), fine_lattice.sq_speed)
    energy = moment(fine_lattice, f, fine_lattice.sq_speed)
    assert drift == pytest.approx(-2.0 * kappa * energy, rel=1e-3)


def test_drift_vanishes_without_kappa(small_lattice, rng):
    np.testing.assert_array_equal(drift_term(small_lattice, rng.random(small_lattice.size), 0.0), 0.0)


def test_step_rejects_time_step_beyond_cfl(small_inelastic, positive_pair):
    f, _ = positive_pair
    limit = max_time_step(f, small_inelastic, 1.0, 0.1)
    with pytest.raises(CFLError):
        step_selfsim(f, 10.0 * limit, small_inelastic)


def test_physical_step_conserves_mass_and_loses_energy(small_inelastic, positive_pair):
    f, _ = positive_pair
    lattice = small_inelastic.lattice
    dt = 0.5 * max_time_step(f, small_inelastic, 1.0, 0.0)
    stepped = step_physical(f, dt, small_inelastic)
    before, after = velocity_moments(lattice, f), velocity_moments(lattice, stepped)
    assert after["mass"] == pytest.approx(before["mass"], rel=1e-12)
    np.testing.assert_allclose(after["momentum"], before["momentum"], atol=1e-12)
    assert after["energy"] < before["energy"]


def test_batched_step_matches_single_step(small_inelastic, positive_pair):
    f, g = positive_pair
    dt = 0.5 * min(max_time_step(f, small_inelastic, 1.0, 0.1), max_time_step(g, small_inelastic, 1.0, 0.1))
    batch = step_selfsim(np.stack([f, g]), dt, small_inelastic)
    np.testing.assert_allclose(batch[1], step_selfsim(g, dt, small_inelastic), rtol=1e-13, atol=1e-16)


def test_enforce_positivity_clips_within_budget(small_lattice):
    f = maxwellian(small_lattice, 1.0, None, 1.0)
    f[0] = -1e-9 * f.max()
    fixed, worst = enforce_positivity(small_lattice, f)
    assert fixed.min() >= 0.0
    assert fixed.sum() == pytest.approx(f.sum(), rel=1e-14)
    assert 0.0 < worst < 1e-6


def test_enforce_positivity_rejects_large_negative_mass(small_lattice):
    f = maxwellian(small_lattice, 1.0, None, 1.0)
    f[0] = -0.1 * f.max()
    with pytest.raises(PositivityError):
        enforce_positivity(small_lattice, f)


def test_symmetrize_removes_momentum(small_lattice, positive_pair):
    _, g = positive_pair
    np.testing.assert_allclose(velocity_moments(small_lattice, symmetrize(small_lattice, g))["momentum"], 0.0,
                               atol=1e-14)


def test_self_similar_frame_clock():
    frame = SelfSimilarFrame(eps=0.1, rate=2.0)
    t = np.array([0.0, 0.5, 4.5])
    np.testing.assert_allclose(frame.physical_time(frame.clock(t)), t, atol=1e-12)
    assert float(frame.scale(4.5)) == pytest.approx(10.0)
    assert float(SelfSimilarFrame(0.1, 0.0).clock(3.0)) == 3.0


def test_self_similar_map_keeps_mass(fine_lattice):
    frame = SelfSimilarFrame(eps=1.0, rate=1.0)
    F = maxwellian(fine_lattice, 1.0, None, 0.5)
    f = self_similar_map(fine_lattice, F, 1.0, frame)
    assert f.sum() == pytest.approx(F.sum(), rel=1e-12)
    assert velocity_moments(fine_lattice, f)["temperature"] == pytest.approx(2.0, rel=2e-2)
    with pytest.raises(ValueError):
        self_similar_map(fine_lattice, F, 1.0, frame, direction="sideways")


def test_lattice_theta1_close_to_closed_form(desk_lattice, desk_theta1):
    assert desk_theta1 == pytest.approx(theta1_closed_form(2), rel=0.15)


def test_elastic_cooling_state_is_the_maxwellian(desk_elastic, desk_theta1):
    state = cooling_state(desk_elastic)
    lattice = desk_elastic.lattice
    assert state.steps == 0
    assert lattice.weight * state.values.sum() == pytest.approx(1.0, rel=1e-14)
    assert state.temperature == pytest.approx(desk_theta1, rel=1e-3)
    assert state.summary()["alpha"] == 1.0


def test_cooling_state_rejects_strong_inelasticity(small_lattice, quadrature8):
    with pytest.raises(CollisionError):
        cooling_state(build_tableau(small_lattice, quadrature8, 0.5))


def test_cooling_state_step_budget(small_lattice, quadrature8):
    tableau = build_tableau(small_lattice, quadrature8, 0.95)
    with pytest.raises(ConvergenceError):
        cooling_state(tableau, tol=1e-30, max_steps=1)


@pytest.mark.slow
def test_inelastic_cooling_state_is_steady_and_symmetric(desk_lattice, quadrature16, desk_theta1):
    tableau = build_tableau(desk_lattice, quadrature16, 0.95)
    state = cooling_state(tableau, tol=1e-6)
    m = velocity_moments(desk_lattice, state.values)
    assert m["mass"] == pytest.approx(1.0, rel=1e-12)
    np.testing.assert_allclose(m["momentum"], 0.0, atol=1e-14)
    assert steady_residual(state.values, tableau) <= 1e-6
    assert state.values.min() >= 0.0
    assert state.temperature == pytest.approx(desk_theta1 * 4.0 / 1.95 ** 2, rel=0.15)


@pytest.mark.slow
def test_haff_law_in_physical_variables(desk_lattice, quadrature16, desk_theta1):
    tableau = build_tableau(desk_lattice, quadrature16, 0.98)
    eps = 0.1
    series = physical_cooling(maxwellian(desk_lattice, 1.0, None, desk_theta1), tableau, eps, horizon=4.5)
    fit = haff_fit(series["t"], series["energy"], (1.0 - 0.98) / eps ** 2)
    assert fit.exponent == pytest.approx(-2.0, abs=0.1)
    assert fit.prefactor == pytest.approx(2 * desk_theta1, rel=0.1)
    np.testing.assert_allclose(series["mass"], 1.0, rtol=1e-6)


@pytest.mark.slow
def test_frames_agree_after_mapping(desk_lattice, quadrature16, desk_theta1):
    tableau = build_tableau(desk_lattice, quadrature16, 0.98)
    F0 = maxwellian(desk_lattice, 1.0, None, desk_theta1)
    assert frame_discrepancy(F0, tableau, 0.1, 0.2) < 0.05
