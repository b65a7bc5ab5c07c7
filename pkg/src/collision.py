"""Inelastic hard-sphere collision operator on a velocity lattice."""

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import NamedTuple

import numpy as np
from joblib import Parallel, delayed, effective_n_jobs
from scipy import sparse
from scipy.spatial.distance import cdist

from src.errors import CollisionError
from src.gaussian import GAMMA_B, sphere_area
from src.lattice import SphereQuadrature, VelocityLattice, maxwellian

logger = logging.getLogger(__name__)

TABLEAU_VERSION = 3
PAIR_STORAGE = "pairs"
OFFSET_STORAGE = "offsets"
ALPHA_FLOOR = 1e-6
UNIT_TOLERANCE = 1e-12
_CHUNK_ROWS = 512


@dataclass(frozen=True)
class RestitutionLaw:
    """Nearly elastic coupling alpha(eps) = 1 - lambda0 eps^2."""

    lambda0: float

    def __post_init__(self):
        if not np.isfinite(self.lambda0) or self.lambda0 < 0:
            raise CollisionError(f"lambda0 must be >= 0, got {self.lambda0}")

    def alpha(self, eps):
        value = 1.0 - self.lambda0 * eps * eps
        if value < ALPHA_FLOOR:
            logger.warning("alpha(eps=%.4g) = %.4g clamped to %.1e", eps, value, ALPHA_FLOOR)
            value = ALPHA_FLOOR
        return min(value, 1.0)

    def kappa(self, eps):
        return 1.0 - self.alpha(eps)

    def cooling_rate(self, eps):
        """c_eps = (1 - alpha(eps)) / eps^2."""
        return self.kappa(eps) / (eps * eps)

    def decay_rate(self, eps):
        """Nominal relaxation rate of the energy mode."""
        return self.cooling_rate(eps)


def _check_unit(vectors, name):
    norms = np.linalg.norm(vectors, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOLERANCE):
        raise CollisionError(f"{name} must be a unit vector (norm deviation {np.max(np.abs(norms - 1.0)):.2e})")


def post_collision_sigma(v, v_star, sigma, alpha):
    """
    Post-collision velocities in the sigma-representation.

    v' = v + (1+alpha)/4 (|u| sigma - u), v*' = v* - (1+alpha)/4 (|u| sigma - u), u = v - v*.
    All arguments broadcast over leading axes.
    """
    if not 0.0 < alpha <= 1.0:
        raise CollisionError(f"restitution must lie in (0, 1], got {alpha}")
    v, v_star, sigma = (np.asarray(x, dtype=float) for x in (v, v_star, sigma))
    _check_unit(sigma, "sigma")
    u = v - v_star
    speed = np.linalg.norm(u, axis=-1, keepdims=True)
    delta = 0.25 * (1.0 + alpha) * (speed * sigma - u)
    return v + delta, v_star - delta


def energy_loss(v, v_star, sigma, alpha):
    """Kinetic energy change -(1 - alpha^2)/4 |u|^2 (1 - sigma.u_hat) of a sigma-collision."""
    u = np.asarray(v, dtype=float) - np.asarray(v_star, dtype=float)
    speed = np.linalg.norm(u, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cosine = np.where(speed > 0, np.sum(u * sigma, axis=-1) / np.where(speed > 0, speed, 1.0), 1.0)
    return -0.25 * (1.0 - alpha * alpha) * speed * speed * (1.0 - cosine)


def post_collision_n(v, v_star, n, alpha):
    """Impact representation: v' = v - (1+alpha)/2 (u.n) n, so that u'.n = -alpha u.n."""
    if not 0.0 < alpha <= 1.0:
        raise CollisionError(f"restitution must lie in (0, 1], got {alpha}")
    v, v_star, n = (np.asarray(x, dtype=float) for x in (v, v_star, n))
    _check_unit(n, "n")
    u = v - v_star
    delta = 0.5 * (1.0 + alpha) * np.sum(u * n, axis=-1, keepdims=True) * n
    return v - delta, v_star + delta


def sigma_from_impact(u, n):
    """sigma = u_hat - 2 (u_hat.n) n, mapping the impact direction to the sigma-representation."""
    u = np.asarray(u, dtype=float)
    u_hat = u / np.linalg.norm(u, axis=-1, keepdims=True)
    return u_hat - 2.0 * np.sum(u_hat * n, axis=-1, keepdims=True) * n


def angular_kernel_n(x, d):
    """b0(x) = 2^{d-1} |x|^{d-2} b(1 - 2x^2) for the isotropic kernel b = 1/|S^{d-1}|."""
    x = np.asarray(x, dtype=float)
    if np.any(np.abs(x) > 1.0):
        raise CollisionError("cosine outside [-1, 1]")
    return 2.0 ** (d - 1) * np.abs(x) ** (d - 2) / sphere_area(d)


@dataclass
class ProjectionTable:
    """
    Energy-straddling projection for every relative offset and direction, in grid units.

    Only lexicographically negative offsets o = i - j are kept, one per unordered
    pair. lam and mu are displacements of the first particle and ratio is the share
    deposited on lam. Where no lattice pair reaches the post-collision energy,
    bracketed is False and the whole share goes to the lowest-energy pair next to
    the target, which keeps mass and momentum and never adds energy.
    """

    dimension: int
    nodes_per_axis: int
    offsets: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    ratio: np.ndarray
    ok: np.ndarray
    bracketed: np.ndarray

    def __len__(self):
        return len(self.offsets)


class OffsetBlock(NamedTuple):
    """All pairs (j + o, j) of one offset o with their deposition operator of shape (n, pairs)."""

    first: np.ndarray
    second: np.ndarray
    operator: sparse.csr_matrix
    collision_weight: np.ndarray
    skipped_weight: np.ndarray
    unbracketed_weight: np.ndarray


def _offset_block(table, lattice, quadrature, k):
    d, N = table.dimension, table.nodes_per_axis
    o = table.offsets[k]
    lo = np.maximum(0, -o)
    hi = N - np.maximum(0, o)
    second = np.indices(tuple(hi - lo)).reshape(d, -1).T + lo
    first = second + o
    strides = N ** np.arange(d - 1, -1, -1)
    lam, mu, r = table.lam[k], table.mu[k], table.ratio[k]
    targets = (first[:, None, :] + lam, second[:, None, :] - lam, first[:, None, :] + mu, second[:, None, :] - mu)
    inside = np.broadcast_to(table.ok[k], (len(second), quadrature.count)).copy()
    for t in targets:
        inside &= np.all((t >= 0) & (t < N), axis=2)

    coeff = 0.5 * lattice.weight * lattice.spacing * float(np.linalg.norm(o)) * quadrature.weights
    k_in = np.where(inside, coeff, 0.0)
    collision = k_in.sum(axis=1)
    skipped = np.where(inside, 0.0, coeff).sum(axis=1)
    unbracketed = np.where(table.bracketed[k], 0.0, k_in).sum(axis=1)

    columns = np.broadcast_to(np.arange(len(second))[:, None], inside.shape)
    src_first = first @ strides
    src_second = second @ strides
    rows, cols, vals = [src_first, src_second], [np.arange(len(second))] * 2, [-collision, -collision]
    for t, share in zip(targets, (r, r, 1.0 - r, 1.0 - r)):
        value = k_in * share
        keep = value > 0
        rows.append(t[keep] @ strides)
        cols.append(columns[keep])
        vals.append(value[keep])
    operator = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(lattice.size, len(second))
    ).tocsr()
    return OffsetBlock(src_first, src_second, operator, collision, skipped, unbracketed)


def _shares(part, total):
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, part / np.where(total > 0, total, 1.0), 0.0)


@dataclass
class CollisionTableau:
    """
    Precomputed deposition for the discrete collision operator.

    The projection table is stored per relative offset and does not depend on the
    lattice extent. With pair storage the unordered pairs are also assembled into
    one sparse operator mapping the symmetrized products f_i g_j + f_j g_i to node
    densities. With offset storage the same operator is rebuilt block by block on
    every call, so memory stays O((2N)^d M) at the price of time.
    """

    lattice: VelocityLattice
    quadrature: SphereQuadrature
    alpha: float
    table: ProjectionTable
    storage: str = PAIR_STORAGE
    left: np.ndarray = None
    right: np.ndarray = None
    operator: sparse.csr_matrix = None
    collision_weight: np.ndarray = None
    skipped_weight: np.ndarray = None
    unbracketed_weight: np.ndarray = None
    n_jobs: int = 1
    version: int = TABLEAU_VERSION
    meta: dict = field(default_factory=dict)

    @property
    def pair_count(self):
        n = self.lattice.size
        return n * (n - 1) // 2

    @property
    def key(self):
        lat = self.lattice
        return (lat.dimension, lat.nodes_per_axis, lat.extent, self.quadrature.count, self.alpha)

    def blocks(self, start=0, stop=None):
        """Offset blocks start..stop of the projection table on the current lattice."""
        stop = len(self.table) if stop is None else stop
        for k in range(start, stop):
            yield _offset_block(self.table, self.lattice, self.quadrature, k)

    def _require_pairs(self, what):
        if self.storage != PAIR_STORAGE:
            raise CollisionError(f"{what} needs pair storage, this tableau keeps {self.storage}")

    @cached_property
    def frequency_matrix(self):
        """Symmetric K with K_ij the summed valid collision weight of pair {i, j}."""
        self._require_pairs("the frequency matrix")
        n = self.lattice.size
        rows = np.concatenate([self.left, self.right])
        cols = np.concatenate([self.right, self.left])
        data = np.concatenate([self.collision_weight, self.collision_weight])
        return sparse.csr_matrix((data, (rows, cols)), shape=(n, n))

    def pair_products(self, f, g):
        self._require_pairs("pair products")
        return f[..., self.left] * g[..., self.right] + f[..., self.right] * g[..., self.left]

    def loss_frequency(self, f):
        """Discrete loss frequency Lambda_i = 2 sum_j K_ij f_j of collide(f, f)."""
        f = np.asarray(f, dtype=float)
        if self.storage == PAIR_STORAGE:
            if f.ndim == 1:
                return 2.0 * (self.frequency_matrix @ f)
            flat = f.reshape(-1, f.shape[-1])
            return 2.0 * (self.frequency_matrix @ flat.T).T.reshape(f.shape)
        out = np.zeros(f.shape)
        for block in self.blocks():
            out[..., block.first] += block.collision_weight * f[..., block.second]
            out[..., block.second] += block.collision_weight * f[..., block.first]
        return 2.0 * out

    def flux_shares(self, f, g=None):
        """
        Shares of the collision flux skipped off the hull and deposited unbracketed.

        Returns:
            tuple: (skipped fraction, unbracketed fraction), each relative to the full flux.
        """
        f = np.asarray(f, dtype=float)
        g = f if g is None else np.asarray(g, dtype=float)
        if self.storage == PAIR_STORAGE:
            products = np.abs(self.pair_products(f, g))
            total = products @ (self.collision_weight + self.skipped_weight)
            return _shares(products @ self.skipped_weight, total), _shares(products @ self.unbracketed_weight, total)
        total = skipped = unbracketed = 0.0
        for block in self.blocks():
            products = np.abs(f[..., block.first] * g[..., block.second] + f[..., block.second] * g[..., block.first])
            total = total + products @ (block.collision_weight + block.skipped_weight)
            skipped = skipped + products @ block.skipped_weight
            unbracketed = unbracketed + products @ block.unbracketed_weight
        return _shares(skipped, total), _shares(unbracketed, total)

    def skipped_fraction(self, f, g=None):
        """Share of the collision flux dropped because a target left the hull."""
        return self.flux_shares(f, g)[0]

    def unbracketed_fraction(self, f, g=None):
        """Share of the collision flux whose post-collision energy lies below every lattice pair."""
        return self.flux_shares(f, g)[1]

    def rescaled(self, lattice):
        """Same tableau on a lattice with identical (d, N) and another extent."""
        own = self.lattice
        if (lattice.dimension, lattice.nodes_per_axis) != (own.dimension, own.nodes_per_axis):
            raise CollisionError("rescaling needs the same dimension and node count")
        if self.storage != PAIR_STORAGE:
            return replace(self, lattice=lattice, meta=dict(self.meta))
        factor = (lattice.spacing / own.spacing) ** (own.dimension + 1)
        return replace(
            self,
            lattice=lattice,
            operator=(self.operator * factor).tocsr(),
            collision_weight=self.collision_weight * factor,
            skipped_weight=self.skipped_weight * factor,
            unbracketed_weight=self.unbracketed_weight * factor,
            meta=dict(self.meta),
        )


_NEIGHBOURS = {d: np.array(list(itertools.product((-1, 0, 1), repeat=d)), dtype=np.int64) for d in (2, 3)}
_CORNERS = {d: np.array(list(itertools.product((0, 1), repeat=d)), dtype=np.int64) for d in (2, 3)}


def _projection_table(d, N, quadrature, alpha):
    """
    Energy-straddling node pair for every negative relative offset and direction.

    Works in grid units relative to the first particle: the post-collision
    displacement p sits on the sphere |x - c| = |p - c| around the pair centre
    c = -U/2. lambda is the nearest candidate node on or inside that sphere,
    mu the nearest outside, and r weights them so the pair energy is exact.
    The corners around c hold the lowest-energy nodes, so when none of them is
    inside the sphere no lattice pair can carry the post-collision energy.
    """
    span = np.arange(-(N - 1), N)
    offsets = np.stack([g.ravel() for g in np.meshgrid(*([span] * d), indexing="ij")], axis=1)
    offsets = offsets[: (len(offsets) - 1) // 2]
    n_off, M = len(offsets), quadrature.count
    offsets_f = offsets.astype(float)
    speed = np.linalg.norm(offsets_f, axis=1)
    centre = -0.5 * offsets_f
    corner_nodes = np.floor(centre).astype(np.int64)[:, None, :] + _CORNERS[d][None]

    lam = np.zeros((n_off, M, d), dtype=np.int16)
    mu = np.zeros((n_off, M, d), dtype=np.int16)
    ratio = np.ones((n_off, M))
    ok = np.zeros((n_off, M), dtype=bool)
    bracketed = np.zeros((n_off, M), dtype=bool)
    rows = np.arange(n_off)
    for m, sigma in enumerate(quadrature.directions):
        delta = 0.25 * (1.0 + alpha) * (speed[:, None] * sigma - offsets_f)
        target = np.sum((delta - centre) ** 2, axis=1)
        near = np.rint(delta).astype(np.int64)[:, None, :] + _NEIGHBOURS[d][None]
        cand = np.concatenate([near, corner_nodes], axis=1)
        energy = np.sum((cand - centre[:, None, :]) ** 2, axis=2)
        dist = np.sum((cand - delta[:, None, :]) ** 2, axis=2)
        inside = energy <= (target * (1.0 + 1e-13) + 1e-13)[:, None]
        d_in = np.where(inside, dist, np.inf)
        d_out = np.where(inside, np.inf, dist)
        li = np.argmin(d_in, axis=1)
        mi = np.argmin(d_out, axis=1)
        has_in = np.isfinite(d_in[rows, li])
        has_out = np.isfinite(d_out[rows, mi])
        e_min = energy.min(axis=1)
        lowest = energy <= (e_min * (1.0 + 1e-13) + 1e-13)[:, None]
        fi = np.argmin(np.where(lowest, dist, np.inf), axis=1)

        e_lam = energy[rows, li]
        e_mu = energy[rows, mi]
        gap = e_mu - e_lam
        r = np.where(gap > 0, (e_mu - target) / np.where(gap > 0, gap, 1.0), 1.0)
        bracket = has_in & has_out
        fallback = np.where(has_in[:, None], cand[rows, li], cand[rows, fi])
        lam[:, m] = np.where(bracket[:, None], cand[rows, li], fallback)
        mu[:, m] = np.where(bracket[:, None], cand[rows, mi], fallback)
        ratio[:, m] = np.where(bracket, np.clip(r, 0.0, 1.0), 1.0)
        ok[:, m] = speed > 0
        bracketed[:, m] = bracket
    return ProjectionTable(d, N, offsets, lam, mu, ratio, ok, bracketed)


def build_tableau(lattice, quadrature, alpha, max_entries=200_000_000):
    """
    Precomputes the collision tableau for (lattice, quadrature, alpha).

    Args:
        lattice (VelocityLattice): Velocity lattice.
        quadrature (SphereQuadrature): Directions with the same dimension.
        alpha (float): Restitution coefficient in (0, 1].
        max_entries (int): Largest pair operator worth assembling. Beyond it the
            tableau keeps offset storage and applies the table block by block.

    Returns:
        CollisionTableau: The tableau.
    """
    if quadrature.dimension != lattice.dimension:
        raise CollisionError("quadrature and lattice dimensions differ")
    if not 0.0 < alpha <= 1.0:
        raise CollisionError(f"restitution must lie in (0, 1], got {alpha}")
    d, N, n = lattice.dimension, lattice.nodes_per_axis, lattice.size
    if N < 9:
        logger.warning("Lattice with N=%d is below the recommended N >= 9 for collision work", N)
    n_pairs = n * (n - 1) // 2
    estimate = 4 * n_pairs * quadrature.count
    storage = PAIR_STORAGE if estimate <= max_entries else OFFSET_STORAGE

    label = f"d={d} N={N} R={lattice.extent:.4g} M={quadrature.count} alpha={alpha:.6g}"
    logger.info("--- BUILDING COLLISION TABLEAU (%s, %d pairs, %s storage) ---", label, n_pairs, storage)
    table = _projection_table(d, N, quadrature, alpha)
    unbracketed = float(1.0 - table.bracketed.mean()) if len(table) else 0.0
    tableau = CollisionTableau(
        lattice=lattice,
        quadrature=quadrature,
        alpha=float(alpha),
        table=table,
        storage=storage,
        meta={"offsets": len(table), "estimated_entries": int(estimate), "unbracketed_entries": unbracketed},
    )
    if storage == OFFSET_STORAGE:
        logger.info("--> Tableau ready: %d offset blocks, pair operator of ~%.2e entries not assembled",
                    len(table), estimate)
        return tableau

    blocks = list(tableau.blocks())
    tableau.left = np.concatenate([b.first for b in blocks]).astype(np.int32)
    tableau.right = np.concatenate([b.second for b in blocks]).astype(np.int32)
    tableau.operator = sparse.hstack([b.operator for b in blocks], format="csr")
    tableau.collision_weight = np.concatenate([b.collision_weight for b in blocks])
    tableau.skipped_weight = np.concatenate([b.skipped_weight for b in blocks])
    tableau.unbracketed_weight = np.concatenate([b.unbracketed_weight for b in blocks])
    tableau.meta["entries"] = int(tableau.operator.nnz)

    total = tableau.collision_weight.sum() + tableau.skipped_weight.sum()
    skipped_share = tableau.skipped_weight.sum() / total if total > 0 else 0.0
    logger.info("--> Tableau ready: %d stored entries, uniform-weight skipped share %.3e, unbracketed entries %.3e",
                tableau.operator.nnz, skipped_share, unbracketed)
    return tableau


def _check_pair(f, g, tableau):
    n = tableau.lattice.size
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    if f.shape[-1] != n or g.shape[-1] != n:
        raise CollisionError(f"distribution sizes {f.shape[-1]}, {g.shape[-1]} do not match lattice size {n}")
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
        raise CollisionError("collision input contains non-finite values")
    return f, g


def _collide_blocks(f, g, tableau, start, stop):
    out = np.zeros(f.shape)
    for block in tableau.blocks(start, stop):
        products = f[:, block.first] * g[:, block.second] + f[:, block.second] * g[:, block.first]
        out += (block.operator @ products.T).T
    return out


def collide(f, g, tableau, alpha=None, n_jobs=None):
    """
    Discrete bilinear collision operator Q_alpha(g, f), symmetric in (f, g).

    Accepts single distributions of shape (n,) or batches of shape (..., n).
    Mass and momentum of the output vanish to rounding; its energy moment is
    -(1 - alpha^2) D(f, g) up to the skipped and unbracketed flux. With offset
    storage the blocks are split into contiguous ranges over n_jobs threads
    (default tableau.n_jobs) and the partial sums are added in range order.
    """
    if alpha is not None and not math.isclose(alpha, tableau.alpha, rel_tol=0.0, abs_tol=1e-14):
        raise CollisionError(f"tableau built for alpha={tableau.alpha}, called with alpha={alpha}")
    f, g = _check_pair(f, g, tableau)
    if tableau.storage == PAIR_STORAGE:
        products = tableau.pair_products(f, g)
        if products.ndim == 1:
            return tableau.operator @ products
        flat = products.reshape(-1, products.shape[-1])
        return (tableau.operator @ flat.T).T.reshape(f.shape[:-1] + (f.shape[-1],))

    n_jobs = tableau.n_jobs if n_jobs is None else n_jobs
    workers = max(1, min(effective_n_jobs(n_jobs), len(tableau.table)))
    bounds = np.linspace(0, len(tableau.table), workers + 1).astype(int)
    flat_f = f.reshape(-1, f.shape[-1])
    flat_g = np.broadcast_to(g, f.shape).reshape(-1, f.shape[-1])
    parts = Parallel(n_jobs=workers, prefer="threads")(
        delayed(_collide_blocks)(flat_f, flat_g, tableau, a, b) for a, b in zip(bounds[:-1], bounds[1:])
    )
    out = parts[0]
    for part in parts[1:]:
        out = out + part
    return out.reshape(f.shape)


def linearized_collision_matrix(tableau, reference):
    """Dense matrix of h -> collide(G, h) + collide(h, G) for the reference G."""
    tableau._require_pairs("the dense linearized matrix")
    reference = np.asarray(reference, dtype=float)
    n, n_pairs = tableau.lattice.size, tableau.pair_count
    pairs = np.arange(n_pairs)
    coupling = sparse.csr_matrix(
        (np.concatenate([reference[tableau.left], reference[tableau.right]]),
         (np.concatenate([pairs, pairs]), np.concatenate([tableau.right, tableau.left]))),
        shape=(n_pairs, n),
    )
    return 2.0 * (tableau.operator @ coupling).toarray()


def pair_kernel_apply(lattice, g, power):
    """sum_j |v_i - v_j|^power g_j for every node i, evaluated in row chunks."""
    g = np.asarray(g, dtype=float)
    nodes = lattice.nodes
    out = np.empty(g.shape)
    for start in range(0, lattice.size, _CHUNK_ROWS):
        stop = min(start + _CHUNK_ROWS, lattice.size)
        kernel = cdist(nodes[start:stop], nodes) ** power
        out[..., start:stop] = g @ kernel.T
    return out


def dissipation(lattice, f, g, gamma_b=GAMMA_B):
    """D(f, g) = (gamma_b / 4) w^2 sum_ij f_i g_j |v_i - v_j|^3."""
    f = np.asarray(f, dtype=float)
    return 0.25 * gamma_b * lattice.weight ** 2 * np.sum(f * pair_kernel_apply(lattice, g, 3), axis=-1)


def collision_report(f, g, tableau):
    """Conservation and dissipation diagnostics of collide(f, g)."""
    lattice = tableau.lattice
    q = collide(f, g, tableau)
    w = lattice.weight
    energy = w * float(q @ lattice.sq_speed)
    expected = -(1.0 - tableau.alpha ** 2) * float(dissipation(lattice, f, g))
    scale = max(abs(expected), w * float(np.abs(q) @ lattice.sq_speed), 1e-300)
    skipped, unbracketed = tableau.flux_shares(f, g)
    return {
        "mass": w * float(q.sum()),
        "momentum": (w * (q @ lattice.nodes)).tolist(),
        "energy": energy,
        "expected_energy": expected,
        "energy_gap": abs(energy - expected) / scale,
        "skipped_fraction": float(skipped),
        "unbracketed_fraction": float(unbracketed),
    }


def lattice_moment_constant(lattice, theta):
    """Lattice value of a: w^2 sum_ij M_i M_j |v_i - v_j|^3 / theta^{3/2} for the unit-mass M_theta."""
    m = maxwellian(lattice, 1.0, None, theta)
    return float(dissipation(lattice, m, m, gamma_b=4.0)) / theta ** 1.5
