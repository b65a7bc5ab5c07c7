import numpy as np
import pytest

from src.collision import build_tableau
from src.errors import TransportError
from src.gaussian import moment_constant_a, tail_share
from src.lattice import maxwellian
from src.spectrum import assemble_linearized
from src.transport import (
    TransportReport,
    compute_transport_report,
    forcing_J0,
    nonlinear_closures,
    solve_phi_psi,
    temperature_scaling,
    tensor_A,
    vector_b,
)


@pytest.fixture(scope="module")
def resolved_transport(resolved_elastic, resolved_theta1):
    return compute_transport_report(resolved_elastic, resolved_theta1)


def _report(**overrides):
    payload = {"dimension": 2, "theta1": 2.26, "nu": 0.8, "gamma": 1.3, "gamma_b": 0.5, "a": 1.2, "c_bar": 0.6}
    payload.update(overrides)
    return payload


def test_tensor_A_is_symmetric_and_traceless(rng):
    v = rng.normal(size=(50, 3))
    A = tensor_A(v)
    np.testing.assert_allclose(np.trace(A, axis1=-2, axis2=-1), 0.0, atol=1e-13)
    np.testing.assert_allclose(A, np.swapaxes(A, -1, -2))
    np.testing.assert_allclose(tensor_A([1.0, 0.0]), [[0.5, 0.0], [0.0, -0.5]])


def test_vector_b():
    np.testing.assert_allclose(vector_b([2.0, 0.0], 1.0), [0.0, 0.0])
    np.testing.assert_allclose(vector_b([0.0, 3.0], 1.0), [0.0, 7.5])


def test_forcing_J0_is_linear_in_the_fields():
    theta1, c_bar = 2.0, 0.6
    assert forcing_J0(0.0, 0.0, 1.0, theta1, c_bar) == 0.0
    expected = -0.5 * c_bar * theta1 ** 1.5 * (0.1 + 0.75 * theta1 * 0.2)
    assert float(forcing_J0(0.1, 0.2, 0.5, theta1, c_bar)) == pytest.approx(expected)
    np.testing.assert_allclose(forcing_J0(np.ones(3), np.zeros(3), 0.0, theta1, c_bar), 0.0)


def test_transport_report_round_trips_through_dict():
    report = TransportReport(**_report(residuals={"phi": 1e-9}))
    again = TransportReport.from_dict({**report.to_dict(), "unrelated": 3})
    assert again.to_dict().keys() == report.to_dict().keys()
    assert (again.nu, again.gamma, again.c_bar, again.residuals) == (0.8, 1.3, 0.6, {"phi": 1e-9})


@pytest.mark.parametrize("overrides", [{"nu": 0.0}, {"gamma": -1.0}, {"theta1": 0.0}])
def test_transport_report_rejects_nonpositive_constants(overrides):
    with pytest.raises(TransportError):
        TransportReport(**_report(**overrides))


def test_transport_report_needs_required_keys():
    payload = _report()
    del payload["c_bar"]
    with pytest.raises(TransportError):
        TransportReport.from_dict(payload)


def test_transport_pipeline_needs_elastic_tableau(small_inelastic):
    with pytest.raises(TransportError):
        compute_transport_report(small_inelastic)


def test_resolved_transport_constants(resolved_transport, resolved_theta1):
    report, solution, coefficients = resolved_transport
    assert report.nu > 0
    assert report.gamma > 0
    assert report.theta1 == resolved_theta1
    assert report.c_bar == pytest.approx(report.gamma_b * moment_constant_a(2))
    assert report.a_lattice == pytest.approx(report.a, rel=0.1)
    assert solution.leakage < 1e-6
    assert coefficients.phi_gram.shape == (2, 2, 2, 2)
    assert report.grid["directions"] > 0


def test_closures_reject_inelastic_tableau(resolved_transport, small_inelastic):
    _, solution, _ = resolved_transport
    with pytest.raises(TransportError):
        nonlinear_closures(0.0, [0.1, 0.0], 0.0, solution, small_inelastic)


def test_closure_forms_vanish_without_velocity(resolved_transport, resolved_elastic):
    _, solution, _ = resolved_transport
    closure = nonlinear_closures(0.1, [0.0, 0.0], 0.05, solution, resolved_elastic)
    np.testing.assert_allclose(closure.tensor_closed, 0.0)
    np.testing.assert_allclose(closure.vector_closed, 0.0)
    assert set(closure.to_dict()) >= {"tensor_gap", "vector_gap"}


@pytest.mark.slow
def test_transport_coefficients_agree_between_formulas(resolved_transport):
    report, solution, coefficients = resolved_transport
    assert coefficients.nu_gap < 0.05
    assert coefficients.gamma_gap < 0.05
    assert coefficients.nu_pattern_error < 0.05
    assert coefficients.gamma_pattern_error < 0.05
    assert max(solution.radiality().values()) < 0.1


@pytest.mark.slow
def test_nonlinear_closures_match_closed_forms(resolved_transport, resolved_elastic):
    _, solution, _ = resolved_transport
    u = np.array([0.1, 0.0])
    assert nonlinear_closures(0.0, u, 0.0, solution, resolved_elastic).tensor_gap < 0.1
    assert nonlinear_closures(0.0, u, 0.05, solution, resolved_elastic).vector_gap < 0.1


@pytest.mark.slow
def test_hard_sphere_coefficients_scale_with_root_temperature(resolved_lattice, quadrature16, resolved_theta1):
    exponents = temperature_scaling(build_tableau(resolved_lattice, quadrature16, 1.0), resolved_theta1)
    assert exponents["nu"] == pytest.approx(0.5, abs=0.1)
    assert exponents["gamma"] == pytest.approx(0.5, abs=0.1)


def test_tail_share_of_gaussian_moments():
    assert tail_share(2, 0.0, 1.0, power=4) == pytest.approx(1.0)
    assert tail_share(2, 5.0, 1.0) == pytest.approx(np.exp(-12.5))
    assert tail_share(2, 8.0 * np.sqrt(2.0), 2.0, power=4) < 1e-10 < tail_share(2, 5.0, 1.0, power=4)


def test_phi_psi_solve_distinguishes_truncated_lattices(desk_elastic, desk_theta1, resolved_elastic,
                                                        resolved_theta1):
    truncated = assemble_linearized(maxwellian(desk_elastic.lattice, 1.0, None, desk_theta1), desk_elastic,
                                    alpha=1.0)
    with pytest.raises(TransportError, match="widen the lattice"):
        solve_phi_psi(truncated, desk_theta1)

    resolved = assemble_linearized(maxwellian(resolved_elastic.lattice, 1.0, None, resolved_theta1),
                                   resolved_elastic, alpha=1.0)
    solution = solve_phi_psi(resolved, resolved_theta1)
    assert solution.leakage < 1e-6
