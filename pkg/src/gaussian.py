"""Closed-form Gaussian constants used to cross-check lattice sums."""

import math

import numpy as np
from scipy import integrate, special

from src.errors import ConvergenceError

# Angular average of (1 - sigma.u_hat)/2 for the isotropic normalized kernel.
GAMMA_B = 0.5

_CLOSED_FORM_A = {
    2: 6.0 * math.sqrt(math.pi),
    3: 32.0 / math.sqrt(math.pi),
}


def sphere_area(d):
    """Surface measure of the unit sphere in R^d."""
    return 2.0 * math.pi ** (d / 2.0) / special.gamma(d / 2.0)


def moment_constant_a(d):
    """
    Gaussian moment constant a(d) = (2 sqrt2 / (2 pi)^{d/2}) int exp(-|v|^2/2) |v|^3 dv.

    Evaluated by adaptive radial quadrature, so that a(d) theta^{3/2} is the
    double integral of M_theta(v) M_theta(v*) |v - v*|^3.

    Args:
        d (int): Velocity dimension.

    Returns:
        float: a(d).
    """
    value, error = integrate.quad(lambda r: math.exp(-0.5 * r * r) * r ** (d + 2), 0.0, np.inf,
                                  epsabs=1e-13, epsrel=1e-12)
    if not np.isfinite(value) or error > 1e-9 * abs(value):
        raise ConvergenceError(f"radial quadrature for a({d}) did not converge (error {error:.2e})")
    return 2.0 * math.sqrt(2.0) / (2.0 * math.pi) ** (d / 2.0) * sphere_area(d) * value


def moment_constant_a_closed_form(d):
    return _CLOSED_FORM_A[d]


def theta1_closed_form(d, gamma_b=GAMMA_B, a=None):
    """Leading-order energy balance 2 kappa d theta = (1 - alpha^2)(gamma_b/4) a theta^{3/2} as alpha -> 1."""
    if a is None:
        a = moment_constant_a(d)
    return 16.0 * d * d / (gamma_b * a) ** 2


def cooling_temperature_estimate(d, alpha, theta1=None):
    """Same balance at finite alpha: theta_alpha = theta_1 * 4 / (1 + alpha)^2."""
    if theta1 is None:
        theta1 = theta1_closed_form(d)
    return theta1 * 4.0 / (1.0 + alpha) ** 2


def tail_share(d, radius, theta, power=0):
    """Share of int |v|^power M_theta dv that lies outside the ball of the given radius."""
    return float(special.gammaincc(0.5 * (d + power), radius * radius / (2.0 * theta)))
