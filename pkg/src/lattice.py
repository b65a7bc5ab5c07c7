"""Velocity lattice, sphere quadrature and discrete moments."""

import itertools
import logging
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import ndimage

from src.errors import DistributionError, LatticeError, QuadratureError

logger = logging.getLogger(__name__)

NEGATIVITY_TOLERANCE = 1e-12
_GOLDEN = (1.0 + math.sqrt(5.0)) / 2.0


@dataclass(frozen=True)
class VelocityLattice:
    """
    Uniform Cartesian velocity grid on [-R, R]^d with N nodes per axis.

    Nodes are ordered row-major (last axis fastest), so node i and node
    n - 1 - i are mirror images under v -> -v.
    """

    dimension: int
    nodes_per_axis: int
    extent: float

    @property
    def spacing(self):
        return 2.0 * self.extent / (self.nodes_per_axis - 1)

    @property
    def weight(self):
        return self.spacing ** self.dimension

    @property
    def size(self):
        return self.nodes_per_axis ** self.dimension

    @property
    def shape(self):
        return (self.nodes_per_axis,) * self.dimension

    @property
    def half_width(self):
        return self.nodes_per_axis // 2

    @property
    def origin_index(self):
        return self.size // 2

    @cached_property
    def axis(self):
        values = (np.arange(self.nodes_per_axis) - self.half_width) * self.spacing
        values.setflags(write=False)
        return values

    @cached_property
    def multi_index(self):
        grids = np.meshgrid(*([np.arange(self.nodes_per_axis)] * self.dimension), indexing="ij")
        index = np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)
        index.setflags(write=False)
        return index

    @cached_property
    def nodes(self):
        nodes = (self.multi_index - self.half_width) * self.spacing
        nodes.setflags(write=False)
        return nodes

    @cached_property
    def sq_speed(self):
        values = np.sum(self.nodes ** 2, axis=1)
        values.setflags(write=False)
        return values

    @cached_property
    def mirror(self):
        """Index permutation implementing v -> -v."""
        return np.arange(self.size)[::-1].copy()

    def describe(self):
        return {
            "dimension": self.dimension,
            "nodes_per_axis": self.nodes_per_axis,
            "extent": self.extent,
            "spacing": self.spacing,
        }


@dataclass(frozen=True)
class SphereQuadrature:
    """Directions sigma_m on S^{d-1} with weights summing to one."""

    dimension: int
    directions: np.ndarray
    weights: np.ndarray

    @property
    def count(self):
        return len(self.weights)

    def gamma_b(self, u_hat):
        """Quadrature value of the angular average of (1 - sigma.u_hat)/2."""
        u_hat = np.asarray(u_hat, dtype=float)
        return float(np.sum(self.weights * (1.0 - self.directions @ u_hat)) / 2.0)


def build_lattice(d, N, R):
    """
    Builds the truncated velocity lattice.

    Args:
        d (int): Dimension, 2 or 3.
        N (int): Odd number of nodes per axis, so v = 0 is a node.
        R (float): Half-width of the grid.

    Returns:
        VelocityLattice: The lattice.
    """
    if d not in (2, 3):
        raise LatticeError(f"unsupported dimension d={d}")
    if int(N) != N or N < 3:
        raise LatticeError(f"need an integer node count >= 3, got N={N}")
    if N % 2 == 0:
        raise LatticeError(f"node count must be odd so that v=0 is a node, got N={N}")
    if not np.isfinite(R) or R <= 0:
        raise LatticeError(f"extent must be positive, got R={R}")
    return VelocityLattice(int(d), int(N), float(R))


def _polyhedron(points):
    points = np.asarray(points, dtype=float)
    return points / np.linalg.norm(points, axis=1, keepdims=True)


def _signed_permutations(base):
    out = set()
    for perm in itertools.permutations(base):
        for signs in itertools.product((1.0, -1.0), repeat=len(base)):
            out.add(tuple(s * p for s, p in zip(signs, perm)))
    return sorted(out)


def _cyclic_signed(base):
    out = set()
    for shift in range(3):
        rotated = base[shift:] + base[:shift]
        for signs in itertools.product((1.0, -1.0), repeat=3):
            out.add(tuple(s * p for s, p in zip(signs, rotated)))
    return sorted(out)


def _sphere_set_3d(M):
    axes = _signed_permutations((1.0, 0.0, 0.0))
    edges = _signed_permutations((1.0, 1.0, 0.0))
    cube = _signed_permutations((1.0, 1.0, 1.0))
    if M == 8:
        return _polyhedron(cube), np.full(8, 1.0 / 8)
    if M == 12:
        return _polyhedron(_cyclic_signed((0.0, 1.0, _GOLDEN))), np.full(12, 1.0 / 12)
    if M == 14:
        weights = np.concatenate([np.full(6, 1.0 / 15), np.full(8, 3.0 / 40)])
        return _polyhedron(axes + cube), weights
    if M == 20:
        points = cube + _cyclic_signed((0.0, 1.0 / _GOLDEN, _GOLDEN))
        return _polyhedron(points), np.full(20, 1.0 / 20)
    if M == 26:
        weights = np.concatenate([np.full(6, 1.0 / 21), np.full(12, 4.0 / 105), np.full(8, 9.0 / 280)])
        return _polyhedron(axes + edges + cube), weights
    # antipodal golden spiral, exact only for odd moments
    half = M // 2
    k = np.arange(half)
    z = (k + 0.5) / half
    phi = 2.0 * math.pi * k / _GOLDEN
    ring = np.sqrt(1.0 - z * z)
    upper = np.stack([ring * np.cos(phi), ring * np.sin(phi), z], axis=1)
    return np.concatenate([upper, -upper]), np.full(M, 1.0 / M)


def build_sphere_quadrature(d, M):
    """
    Antipodally symmetric quadrature of the normalized angular kernel.

    d=2 uses M equispaced angles starting at (1, 0). d=3 uses the cube,
    icosahedron, dodecahedron or a Lebedev set when M matches one of them.
    """
    if d not in (2, 3):
        raise QuadratureError(f"unsupported dimension d={d}")
    if int(M) != M or M % 2 or M < (4 if d == 2 else 8):
        raise QuadratureError(f"direction count must be even and large enough, got M={M}")
    M = int(M)
    if d == 2:
        angles = 2.0 * math.pi * np.arange(M) / M
        directions = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        weights = np.full(M, 1.0 / M)
    else:
        directions, weights = _sphere_set_3d(M)
    # exact antipodal pairs: overwrite the second half of each pair with the negated first
    for m in range(M):
        partner = int(np.argmin(np.sum((directions + directions[m]) ** 2, axis=1)))
        if partner > m:
            directions[partner] = -directions[m]
    directions.setflags(write=False)
    weights.setflags(write=False)
    return SphereQuadrature(d, directions, weights)


def _weight_values(lattice, psi):
    values = psi(lattice.nodes) if callable(psi) else psi
    values = np.asarray(values, dtype=float)
    if values.shape[:1] != (lattice.size,):
        raise DistributionError(f"weight function has shape {values.shape}, lattice has {lattice.size} nodes")
    if not np.all(np.isfinite(values)):
        raise DistributionError("weight function is not finite on the lattice")
    return values


def moment(lattice, f, psi):
    """
    Discrete moment w * sum_i psi(v_i) f_i.

    Args:
        lattice (VelocityLattice): Lattice of f.
        f (np.ndarray): Values of shape (..., n).
        psi: Array of shape (n,) or (n, ...) or a callable of the node array.

    Returns:
        Moment of shape f.shape[:-1] + psi.shape[1:].
    """
    f = np.asarray(f, dtype=float)
    if f.shape[-1] != lattice.size:
        raise DistributionError(f"distribution has {f.shape[-1]} nodes, lattice has {lattice.size}")
    if not np.all(np.isfinite(f)):
        raise DistributionError("distribution contains non-finite values")
    weights = _weight_values(lattice, psi)
    extra = weights.ndim - 1
    expanded = f.reshape(f.shape + (1,) * extra)
    return lattice.weight * np.sum(expanded * weights, axis=f.ndim - 1)


def velocity_moments(lattice, f):
    """Mass, momentum, kinetic energy sum |v|^2 f and temperature of f."""
    mass = moment(lattice, f, np.ones(lattice.size))
    momentum = moment(lattice, f, lattice.nodes)
    energy = moment(lattice, f, lattice.sq_speed)
    with np.errstate(divide="ignore", invalid="ignore"):
        temperature = energy / (lattice.dimension * mass)
    return {"mass": mass, "momentum": momentum, "energy": energy, "temperature": temperature}


def l1_norm(lattice, f, weighted=False):
    """Discrete L1 norm, optionally with the weight <v>^2 = 1 + |v|^2."""
    weights = 1.0 + lattice.sq_speed if weighted else np.ones(lattice.size)
    return lattice.weight * np.sum(np.abs(f) * weights, axis=-1)


def check_distribution(lattice, f, name="distribution"):
    f = np.asarray(f, dtype=float)
    if f.shape[-1] != lattice.size:
        raise DistributionError(f"{name} has {f.shape[-1]} nodes, lattice has {lattice.size}")
    if not np.all(np.isfinite(f)):
        raise DistributionError(f"{name} contains non-finite values")
    scale = np.max(np.abs(f), axis=-1, keepdims=True)
    if np.any(f < -NEGATIVITY_TOLERANCE * scale):
        raise DistributionError(f"{name} has negative values beyond tolerance (min {f.min():.3e})")
    return f


def maxwellian(lattice, rho=1.0, u=None, theta=1.0):
    """
    Maxwellian rho (2 pi theta)^{-d/2} exp(-|v - u|^2 / (2 theta)) sampled at the nodes.

    A violation of the tail containment ||u|| + 4 sqrt(theta) <= R is logged
    together with the discrete mass defect.
    """
    if rho <= 0 or theta <= 0:
        raise DistributionError(f"need rho > 0 and theta > 0, got rho={rho}, theta={theta}")
    d = lattice.dimension
    u = np.zeros(d) if u is None else np.asarray(u, dtype=float)
    shifted = np.sum((lattice.nodes - u) ** 2, axis=1)
    values = rho * (2.0 * math.pi * theta) ** (-d / 2.0) * np.exp(-shifted / (2.0 * theta))
    if np.linalg.norm(u) + 4.0 * math.sqrt(theta) > lattice.extent:
        defect = rho - lattice.weight * values.sum()
        logger.warning("Maxwellian tail leaves the lattice hull (theta=%.4g, |u|=%.4g, R=%.4g); mass defect %.3e",
                       theta, np.linalg.norm(u), lattice.extent, defect)
    return values


def maxwellian_defect(lattice, f, rho, u, theta):
    """Deviation of the discrete moments of f from (rho, rho u, rho (d theta + |u|^2))."""
    d = lattice.dimension
    u = np.zeros(d) if u is None else np.asarray(u, dtype=float)
    m = velocity_moments(lattice, f)
    return {
        "mass": float(m["mass"] - rho),
        "momentum": float(np.max(np.abs(m["momentum"] - rho * u))),
        "energy": float(m["energy"] - rho * (d * theta + u @ u)),
    }


def sample(lattice, f, points, order=3):
    """
    Evaluates the lattice function f at arbitrary velocities by spline interpolation.

    Points outside the hull get zero; negative overshoots of the spline are clipped.

    Args:
        lattice (VelocityLattice): Lattice of f.
        f (np.ndarray): Values of shape (..., n).
        points (np.ndarray): Velocities of shape (m, d).
        order (int): Spline order passed to scipy.ndimage.map_coordinates.

    Returns:
        np.ndarray: Values of shape (..., m).
    """
    f = np.asarray(f, dtype=float)
    coords = (np.asarray(points, dtype=float) / lattice.spacing + lattice.half_width).T
    inside = np.all((coords >= -1e-9) & (coords <= lattice.nodes_per_axis - 1 + 1e-9), axis=0)
    batch = f.reshape((-1,) + lattice.shape)
    out = np.empty((batch.shape[0], coords.shape[1]))
    for row, grid in enumerate(batch):
        out[row] = ndimage.map_coordinates(grid, coords, order=order, mode="constant", cval=0.0)
    out[:, ~inside] = 0.0
    np.maximum(out, 0.0, out=out)
    return out.reshape(f.shape[:-1] + (coords.shape[1],))


def resample(source, f, target, order=3):
    """Moves f from one lattice onto another, keeping its discrete mass."""
    values = sample(source, f, target.nodes, order=order)
    mass_in = source.weight * np.sum(f, axis=-1, keepdims=True)
    mass_out = target.weight * np.sum(values, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(mass_out > 0, mass_in / mass_out, 0.0)
    defect = float(np.max(np.abs(mass_out - mass_in) / np.maximum(np.abs(mass_in), 1e-300)))
    logger.debug("--> Resampled onto R=%.4g: relative mass defect %.3e", target.extent, defect)
    return values * scale
