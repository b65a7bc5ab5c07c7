import math

import numpy as np
import pytest

from src.collision import build_tableau
from src.gaussian import theta1_closed_form
from src.homogeneous import lattice_theta1
from src.lattice import build_lattice, build_sphere_quadrature, maxwellian


@pytest.fixture(scope="session")
def small_lattice():
    """Coarse 9x9 lattice for conservation and shape checks."""
    return build_lattice(2, 9, 6.0)


@pytest.fixture(scope="session")
def fine_lattice():
    """33x33 lattice on [-8, 8]^2 where unit-temperature Gaussians are resolved to rounding."""
    return build_lattice(2, 33, 8.0)


@pytest.fixture(scope="session")
def desk_lattice():
    """15x15 lattice wide enough for M_theta1 in d=2."""
    return build_lattice(2, 15, 5.0 * math.sqrt(theta1_closed_form(2)))


@pytest.fixture(scope="session")
def resolved_lattice():
    """21x21 lattice out to 8 sqrt(theta_1), where the fourth Gaussian moment is resolved to rounding."""
    return build_lattice(2, 21, 8.0 * math.sqrt(theta1_closed_form(2)))


@pytest.fixture(scope="session")
def quadrature8():
    return build_sphere_quadrature(2, 8)


@pytest.fixture(scope="session")
def quadrature16():
    return build_sphere_quadrature(2, 16)


@pytest.fixture(scope="session")
def small_elastic(small_lattice, quadrature8):
    return build_tableau(small_lattice, quadrature8, 1.0)


@pytest.fixture(scope="session")
def small_inelastic(small_lattice, quadrature8):
    return build_tableau(small_lattice, quadrature8, 0.9)


@pytest.fixture(scope="session")
def desk_elastic(desk_lattice, quadrature16):
    return build_tableau(desk_lattice, quadrature16, 1.0)


@pytest.fixture(scope="session")
def resolved_elastic(resolved_lattice, quadrature16):
    return build_tableau(resolved_lattice, quadrature16, 1.0)


@pytest.fixture(scope="session")
def resolved_theta1(resolved_lattice):
    return lattice_theta1(resolved_lattice)


@pytest.fixture(scope="session")
def desk_theta1(desk_lattice):
    return lattice_theta1(desk_lattice)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def positive_pair(small_lattice, rng):
    """Two strictly positive distributions with compact support inside the hull."""
    bump = maxwellian(small_lattice, 1.0, None, 1.5)
    f = bump * (1.0 + 0.3 * rng.random(small_lattice.size))
    g = maxwellian(small_lattice, 0.8, [0.4, -0.3], 1.0) * (1.0 + 0.3 * rng.random(small_lattice.size))
    return f, g
