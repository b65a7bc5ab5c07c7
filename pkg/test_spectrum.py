import numpy as np
import pytest

from src.collision import build_tableau
from src.errors import SpectrumError
from src.homogeneous import cooling_state, drift_term
from src.lattice import maxwellian, velocity_moments
from src.spectrum import (
    LinearOperatorMatrix,
    SpectralReport,
    assemble_linearized,
    drift_matrix,
    energy_eigenfunction,
    energy_limit_profile,
    kernel_coordinates,
    kernel_form,
    kernel_projection_pi0,
    normalize_eigenfunction,
    spectrum_near_zero,
    weighted_asymmetry,
)


@pytest.fixture(scope="module")
def elastic_operator(desk_elastic, desk_theta1):
    m = maxwellian(desk_elastic.lattice, 1.0, None, desk_theta1)
    return assemble_linearized(m, desk_elastic, alpha=1.0)


def _diagonal_operator(lattice, kappa=0.01):
    """Operator with known eigenvalues: two near kappa, 0, -kappa and a spread below -1."""
    n = lattice.size
    values = -1.0 - 0.01 * np.arange(n)
    values[:4] = [1.1 * kappa, 0.9 * kappa, 0.0, -kappa]
    return LinearOperatorMatrix(1.0 - kappa, kappa, lattice, np.linspace(1.0, 2.0, n), matrix=np.diag(values))


def test_drift_matrix_matches_drift_term(small_lattice, rng):
    h = rng.normal(size=small_lattice.size)
    np.testing.assert_allclose(drift_matrix(small_lattice, 0.2) @ h, drift_term(small_lattice, h, 0.2), atol=1e-13)


def test_linearized_columns_carry_no_mass(elastic_operator):
    assert elastic_operator.column_mass_defect() < 1e-10


def test_matrix_free_operator_matches_dense(desk_elastic, desk_theta1, elastic_operator, rng):
    m = maxwellian(desk_elastic.lattice, 1.0, None, desk_theta1)
    free = assemble_linearized(m, desk_elastic, alpha=1.0, matrix_free=True)
    assert not free.dense
    h = rng.normal(size=desk_elastic.lattice.size)
    expected = elastic_operator.apply(h)
    np.testing.assert_allclose(free.apply(h), expected, atol=1e-12 * np.abs(expected).max())
    with pytest.raises(SpectrumError):
        free.column_mass_defect()


def test_assembly_rejects_alpha_mismatch(desk_elastic, desk_theta1):
    m = maxwellian(desk_elastic.lattice, 1.0, None, desk_theta1)
    with pytest.raises(SpectrumError):
        assemble_linearized(m, desk_elastic, alpha=0.99)
    with pytest.raises(SpectrumError):
        assemble_linearized(m[:-1], desk_elastic, alpha=1.0)


def test_weighted_asymmetry_is_finite(elastic_operator, desk_theta1):
    value = weighted_asymmetry(elastic_operator, desk_theta1)
    assert np.isfinite(value)
    assert value >= 0.0


@pytest.mark.parametrize("method", ["dense", "arnoldi"])
def test_spectrum_classifies_modes(small_lattice, method):
    report = spectrum_near_zero(_diagonal_operator(small_lattice), radius=0.2, method=method)
    assert report.count_ok
    assert np.all(report.certified)
    assert report.labels == ["momentum", "momentum", "mass", "energy"]
    assert report.mu_alpha == pytest.approx(0.01)
    np.testing.assert_allclose(np.sort(report.eigenvalues[report.modes("momentum")].real), [0.009, 0.011])
    payload = report.to_dict()
    assert payload["count"] == 4
    assert payload["labels"][2] == "mass"


def test_spectrum_reports_wrong_count_without_labels(small_lattice):
    operator = _diagonal_operator(small_lattice)
    report = spectrum_near_zero(operator, radius=0.005, method="dense")
    assert report.count == 1
    assert not report.count_ok
    assert report.labels == ["other"]
    assert np.isnan(report.mu_alpha)


def test_arnoldi_finds_modes_absent_from_the_reference(small_lattice):
    operator = _diagonal_operator(small_lattice)
    operator.reference[:2] = 0.0
    report = spectrum_near_zero(operator, radius=0.2, method="arnoldi")
    assert report.count_ok
    assert report.labels == ["momentum", "momentum", "mass", "energy"]
    assert report.mu_alpha == pytest.approx(0.01)


def test_arnoldi_is_reproducible_for_a_fixed_seed(small_lattice):
    operator = _diagonal_operator(small_lattice)
    first = spectrum_near_zero(operator, radius=0.2, method="arnoldi", seed=7)
    second = spectrum_near_zero(operator, radius=0.2, method="arnoldi", seed=7)
    np.testing.assert_array_equal(first.eigenvalues, second.eigenvalues)


def test_arnoldi_raises_when_the_disk_count_never_matches(small_lattice):
    with pytest.raises(SpectrumError, match="expected 4"):
        spectrum_near_zero(_diagonal_operator(small_lattice), radius=0.005, method="arnoldi")


def test_dense_method_needs_matrix(small_lattice):
    operator = _diagonal_operator(small_lattice)
    free = LinearOperatorMatrix(operator.alpha, operator.kappa, small_lattice, operator.reference,
                                operator=operator.as_linear_operator())
    with pytest.raises(SpectrumError):
        spectrum_near_zero(free, method="dense")
    with pytest.raises(SpectrumError):
        spectrum_near_zero(operator, method="qr")


def test_normalize_eigenfunction_fixes_sign_and_norm(desk_lattice, desk_theta1):
    profile = energy_limit_profile(desk_lattice, desk_theta1)
    phi = normalize_eigenfunction(desk_lattice, -5.0 * profile)
    assert phi[desk_lattice.origin_index] < 0
    weights = 1.0 + desk_lattice.sq_speed
    assert desk_lattice.weight * np.sum(np.abs(phi) * weights) == pytest.approx(1.0)
    with pytest.raises(SpectrumError):
        normalize_eigenfunction(desk_lattice, desk_lattice.nodes[:, 0])


def test_energy_eigenfunction_angle_to_limit_profile(desk_lattice, desk_theta1):
    profile = energy_limit_profile(desk_lattice, desk_theta1)
    n = desk_lattice.size
    report = SpectralReport(
        alpha=0.99, kappa=0.01, radius=0.2,
        eigenvalues=np.array([0.01, 0.01, 0.0, -0.01], dtype=complex),
        vectors=np.vstack([np.ones((3, n)), -2.0 * profile]),
        residuals=np.zeros(4), labels=["momentum", "momentum", "mass", "energy"],
        mu_alpha=0.01, expected_count=4, method="dense", lattice=desk_lattice,
    )
    phi, angle = energy_eigenfunction(report, desk_theta1)
    assert angle == pytest.approx(0.0, abs=1e-4)
    assert phi[desk_lattice.origin_index] < 0


def test_kernel_coordinates_invert_kernel_form(desk_lattice, desk_theta1):
    h = kernel_form(desk_lattice, 0.3, [0.1, -0.2], 0.05, desk_theta1)
    coords = kernel_coordinates(desk_lattice, h, desk_theta1)
    assert coords["rho"] == pytest.approx(0.3, abs=1e-12)
    np.testing.assert_allclose(coords["u"], [0.1, -0.2], atol=1e-12)
    assert coords["theta"] == pytest.approx(0.05, abs=1e-12)


def test_kernel_form_of_zero_state_vanishes(desk_lattice, desk_theta1):
    np.testing.assert_array_equal(kernel_form(desk_lattice, 0.0, [0.0, 0.0], 0.0, desk_theta1), 0.0)


def test_pi0_is_an_idempotent_moment_preserving_projection(desk_lattice, desk_theta1, rng):
    h = rng.normal(size=desk_lattice.size) * maxwellian(desk_lattice, 1.0, None, desk_theta1)
    once = kernel_projection_pi0(desk_lattice, h, desk_theta1)
    np.testing.assert_allclose(kernel_projection_pi0(desk_lattice, once, desk_theta1), once,
                               atol=1e-12 * np.abs(once).max())
    before, after = velocity_moments(desk_lattice, h), velocity_moments(desk_lattice, once)
    for key in ("mass", "energy"):
        assert after[key] == pytest.approx(before[key], abs=1e-12)
    np.testing.assert_allclose(after["momentum"], before["momentum"], atol=1e-12)


def test_pi0_fixes_kernel_elements(desk_lattice, desk_theta1):
    h = kernel_form(desk_lattice, np.array([0.2, -0.1]), np.array([[0.0, 0.3], [0.1, 0.0]]), np.array([0.0, 0.4]),
                    desk_theta1)
    np.testing.assert_allclose(kernel_projection_pi0(desk_lattice, h, desk_theta1), h, atol=1e-12)


@pytest.mark.slow
def test_elastic_spectrum_has_d_plus_two_certified_zero_modes(elastic_operator):
    report = spectrum_near_zero(elastic_operator)
    assert report.count == 4
    assert np.all(report.certified)
    np.testing.assert_allclose(report.eigenvalues, 0.0, atol=1e-6)


@pytest.mark.slow
def test_inelastic_energy_eigenvalue_tracks_one_minus_alpha(desk_lattice, quadrature16):
    alpha = 0.99
    tableau = build_tableau(desk_lattice, quadrature16, alpha)
    report = spectrum_near_zero(assemble_linearized(cooling_state(tableau), tableau))
    assert report.count_ok
    assert report.mu_alpha / (1.0 - alpha) == pytest.approx(1.0, abs=0.1)
    momentum = report.eigenvalues[report.modes("momentum")].real
    np.testing.assert_allclose(momentum, 1.0 - alpha, rtol=0.1)
