"""Linearized operator around the cooling state, its spectrum near zero and the kernel projection."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.sparse import linalg as sparse_linalg

from src.collision import collide, linearized_collision_matrix
from src.errors import SpectrumError
from src.homogeneous import drift_term
from src.lattice import l1_norm, maxwellian

logger = logging.getLogger(__name__)

DEFAULT_RADIUS = 0.2
CERTIFICATE_TOLERANCE = 1e-6
BULK_RADIUS = 4.0
ARNOLDI_ATTEMPTS = 3


@dataclass
class LinearOperatorMatrix:
    """
    Discrete h -> Q(G, h) + Q(h, G) - kappa div(v h) around a reference G.

    Either a dense matrix or a matrix-free scipy LinearOperator is held.
    """

    alpha: float
    kappa: float
    lattice: object
    reference: np.ndarray
    matrix: np.ndarray = None
    operator: sparse_linalg.LinearOperator = None

    @property
    def size(self):
        return self.lattice.size

    @property
    def dense(self):
        return self.matrix is not None

    def apply(self, h):
        if self.dense:
            return self.matrix @ h
        return self.operator.matvec(h)

    def as_linear_operator(self):
        if self.operator is not None:
            return self.operator
        return sparse_linalg.aslinearoperator(self.matrix)

    def column_mass_defect(self):
        """Largest discrete mass of L e_i over the basis vectors."""
        if not self.dense:
            raise SpectrumError("column sums need the dense matrix")
        return float(np.max(np.abs(self.lattice.weight * self.matrix.sum(axis=0))))

    def reference_residual(self):
        return float(l1_norm(self.lattice, self.apply(self.reference)))


def drift_matrix(lattice, kappa):
    """Dense matrix of h -> kappa div(v h)."""
    return drift_term(lattice, np.eye(lattice.size), kappa).T


def assemble_linearized(reference, tableau, alpha=None, matrix_free=False):
    """
    Assembles the linearized operator around a cooling state.

    Args:
        reference: CoolingState or distribution array G.
        tableau (CollisionTableau): Tableau at the same alpha.
        alpha (float): Restitution of the reference when G is passed as an array.
        matrix_free (bool): Build a LinearOperator instead of the dense matrix.

    Returns:
        LinearOperatorMatrix: The operator.
    """
    if hasattr(reference, "values"):
        alpha = reference.alpha if alpha is None else alpha
        if not math.isclose(reference.alpha, tableau.alpha, rel_tol=0.0, abs_tol=1e-14):
            raise SpectrumError(f"cooling state at alpha={reference.alpha} but tableau at alpha={tableau.alpha}")
        G = reference.values
    else:
        G = np.asarray(reference, dtype=float)
    alpha = tableau.alpha if alpha is None else alpha
    if not math.isclose(alpha, tableau.alpha, rel_tol=0.0, abs_tol=1e-14):
        raise SpectrumError(f"reference at alpha={alpha} but tableau at alpha={tableau.alpha}")
    lattice = tableau.lattice
    if G.shape != (lattice.size,):
        raise SpectrumError(f"reference has shape {G.shape}, lattice has {lattice.size} nodes")
    kappa = 1.0 - alpha

    if matrix_free:
        def matvec(h):
            h = np.asarray(h).ravel()
            if np.iscomplexobj(h):
                return matvec(h.real) + 1j * matvec(h.imag)
            return 2.0 * collide(G, h, tableau) - drift_term(lattice, h, kappa)

        operator = sparse_linalg.LinearOperator((lattice.size, lattice.size), matvec=matvec, dtype=float)
        return LinearOperatorMatrix(alpha, kappa, lattice, G, operator=operator)

    logger.info("--- ASSEMBLING LINEARIZED OPERATOR (alpha=%.6g, %d nodes) ---", alpha, lattice.size)
    matrix = linearized_collision_matrix(tableau, G) - drift_matrix(lattice, kappa)
    result = LinearOperatorMatrix(alpha, kappa, lattice, G, matrix=matrix)
    logger.info("--> Column mass defect %.3e, residual on reference %.3e",
                result.column_mass_defect(), result.reference_residual())
    return result


def weighted_asymmetry(L, theta, bulk_radius=BULK_RADIUS):
    """
    Relative asymmetry of L in the M^{-1} weighted inner product.

    Measured on the nodes with |v| <= bulk_radius sqrt(theta), where the
    weight exp(|v|^2 / 2 theta) stays moderate.
    """
    lattice = L.lattice
    m = maxwellian(lattice, 1.0, None, theta)
    bulk = np.flatnonzero(lattice.sq_speed <= bulk_radius ** 2 * theta)
    root = np.sqrt(m[bulk])
    block = L.matrix[np.ix_(bulk, bulk)]
    scaled = block * root[None, :] / root[:, None]
    return float(np.linalg.norm(scaled - scaled.T) / np.linalg.norm(scaled))


@dataclass
class SpectralReport:
    """Eigenvalues in a disk around zero with residual certificates and their classification."""

    alpha: float
    kappa: float
    radius: float
    eigenvalues: np.ndarray
    vectors: np.ndarray
    residuals: np.ndarray
    labels: list
    mu_alpha: float
    expected_count: int
    method: str
    lattice: object = field(repr=False, default=None)

    @property
    def count(self):
        return len(self.eigenvalues)

    @property
    def count_ok(self):
        return self.count == self.expected_count

    @property
    def certified(self):
        return self.residuals <= CERTIFICATE_TOLERANCE

    def modes(self, label):
        return [i for i, name in enumerate(self.labels) if name == label]

    def to_dict(self):
        return {
            "alpha": self.alpha,
            "kappa": self.kappa,
            "radius": self.radius,
            "eigenvalues": [[float(z.real), float(z.imag)] for z in self.eigenvalues],
            "residuals": [float(r) for r in self.residuals],
            "certified": [bool(c) for c in self.certified],
            "labels": list(self.labels),
            "mu_alpha": self.mu_alpha,
            "count": self.count,
            "expected_count": self.expected_count,
            "method": self.method,
        }


def _real_vector(v):
    """Removes the arbitrary complex phase of an eigenvector of a real eigenvalue."""
    pivot = v[np.argmax(np.abs(v))]
    return np.real(v * (abs(pivot) / pivot))


def _classify(eigenvalues, d):
    """Labels by descending real part: d momentum modes, the mass mode, then the energy mode."""
    order = np.argsort(-eigenvalues.real, kind="stable")
    labels = ["other"] * len(eigenvalues)
    if len(eigenvalues) == d + 2:
        for rank, idx in enumerate(order):
            labels[idx] = "momentum" if rank < d else ("mass" if rank == d else "energy")
    return order, labels


def _arnoldi(L, expected, radius, extra, seed=0):
    """
    Arnoldi eigen-pairs of largest real part, widening the subspace until the disk holds the expected count.

    The start vector perturbs the reference with a seeded generator so that modes of
    other symmetry than the reference are present from the first step.
    """
    n = L.size
    rng = np.random.default_rng(seed)
    reference = np.asarray(L.reference, dtype=float)
    v0 = reference * (1.0 + 0.1 * rng.standard_normal(n)) + 1e-3 * np.max(np.abs(reference)) * rng.standard_normal(n)
    k = min(expected + extra, n - 2)
    count = 0
    for attempt in range(1, ARNOLDI_ATTEMPTS + 1):
        ncv = min(n, max(4 * k, 40))
        try:
            values, vectors = sparse_linalg.eigs(L.as_linear_operator(), k=k, which="LR", v0=v0, ncv=ncv,
                                                 tol=1e-12, maxiter=50 * n)
        except sparse_linalg.ArpackNoConvergence as exc:
            raise SpectrumError(f"Arnoldi iteration did not converge ({len(exc.eigenvalues)} of {k} pairs)") from exc
        count = int(np.sum(np.abs(values) < radius))
        if count == expected and count < k:
            return values, vectors
        logger.warning("Arnoldi attempt %d (k=%d, ncv=%d) left %d eigenvalues in the %.3g-disk, expected %d",
                       attempt, k, ncv, count, radius, expected)
        if k >= n - 2:
            break
        k = min(2 * k, n - 2)
    raise SpectrumError(f"Arnoldi found {count} eigenvalues in the {radius:.3g}-disk, expected {expected}; "
                        f"check the radius or use the dense solver")


def spectrum_near_zero(L, radius=DEFAULT_RADIUS, method="auto", extra=6, seed=0):
    """
    Eigenvalues of L in the disk |lambda| < radius.

    Args:
        L (LinearOperatorMatrix): Linearized operator.
        radius (float): Disk radius, below the coercivity scale of the collision part.
        method (str): "dense", "arnoldi" or "auto" (dense when the matrix is held).
        extra (int): Additional Arnoldi vectors beyond the expected d + 2 on the first attempt.
        seed (int): Seed of the Arnoldi start vector.

    Returns:
        SpectralReport: Eigen-pairs in the disk, each with its relative residual.

    Raises:
        SpectrumError: When Arnoldi cannot place d + 2 eigenvalues in the disk. The dense
            solver reports a wrong count in the SpectralReport instead.
    """
    d = L.lattice.dimension
    expected = d + 2
    if method == "auto":
        method = "dense" if L.dense else "arnoldi"
    logger.info("--- SPECTRUM NEAR ZERO (alpha=%.6g, radius=%.3g, %s) ---", L.alpha, radius, method)
    if method == "dense":
        if not L.dense:
            raise SpectrumError("dense eigensolver needs the assembled matrix")
        values, vectors = linalg.eig(L.matrix)
    elif method == "arnoldi":
        values, vectors = _arnoldi(L, expected, radius, extra, seed)
    else:
        raise SpectrumError(f"unknown eigensolver {method!r}")

    inside = np.flatnonzero(np.abs(values) < radius)
    values = values[inside]
    vectors = vectors[:, inside]
    residuals = np.empty(len(values))
    real_vectors = np.empty((len(values), L.size))
    for j, (lam, vec) in enumerate(zip(values, vectors.T)):
        residuals[j] = np.linalg.norm(L.apply(vec.real) + 1j * L.apply(vec.imag) - lam * vec) / np.linalg.norm(vec)
        real_vectors[j] = _real_vector(vec)
    order, labels = _classify(values, d)
    values, real_vectors, residuals = values[order], real_vectors[order], residuals[order]
    labels = [labels[i] for i in order]

    if len(values) != expected:
        logger.warning("Found %d eigenvalues in the %.3g-disk, expected %d: %s", len(values), radius, expected,
                       np.array2string(values, precision=5))
    uncertified = int(np.sum(residuals > CERTIFICATE_TOLERANCE))
    if uncertified:
        logger.warning("%d eigen-pair(s) exceed the residual certificate %.1e", uncertified, CERTIFICATE_TOLERANCE)
    mu = float(-values[labels.index("energy")].real) if "energy" in labels else float("nan")
    logger.info("--> %d eigenvalues in disk, mu_alpha=%.6g", len(values), mu)
    return SpectralReport(
        alpha=L.alpha,
        kappa=L.kappa,
        radius=radius,
        eigenvalues=values,
        vectors=real_vectors,
        residuals=residuals,
        labels=labels,
        mu_alpha=mu,
        expected_count=expected,
        method=method,
        lattice=L.lattice,
    )


def normalize_eigenfunction(lattice, phi):
    """Scales phi to unit L1(<v>^2) norm with phi(0) < 0."""
    phi = np.asarray(phi, dtype=float)
    centre = phi[lattice.origin_index]
    if abs(centre) <= 1e-12 * np.max(np.abs(phi)):
        raise SpectrumError("eigenfunction vanishes at v = 0; sign cannot be fixed")
    scaled = phi / l1_norm(lattice, phi, weighted=True)
    return -scaled if centre > 0 else scaled


def energy_limit_profile(lattice, theta1):
    """(|v|^2 - d theta_1) M_theta1 on the lattice."""
    return (lattice.sq_speed - lattice.dimension * theta1) * maxwellian(lattice, 1.0, None, theta1)


def energy_eigenfunction(report, theta1):
    """
    Normalized energy eigenfunction and its angle to the limit profile.

    Returns:
        tuple: (phi_alpha, angle in degrees to (|v|^2 - d theta_1) M in discrete L2).
    """
    if "energy" not in report.labels:
        raise SpectrumError("energy eigenvalue is not isolated in the report")
    lattice = report.lattice
    phi = normalize_eigenfunction(lattice, report.vectors[report.labels.index("energy")])
    profile = energy_limit_profile(lattice, theta1)
    cosine = float(phi @ profile / (np.linalg.norm(phi) * np.linalg.norm(profile)))
    angle = math.degrees(math.acos(min(1.0, max(-1.0, cosine))))
    logger.info("--> Energy eigenfunction angle to limit profile: %.3f deg", angle)
    return phi, angle


def kernel_basis(lattice, theta1):
    """Psi_1 = 1, Psi_{1+i} = v_i / sqrt(theta_1), Psi_{d+2} = (|v|^2 - d theta_1) / (theta_1 sqrt(2d))."""
    d = lattice.dimension
    rows = [np.ones(lattice.size)]
    rows.extend(lattice.nodes.T / math.sqrt(theta1))
    rows.append((lattice.sq_speed - d * theta1) / (theta1 * math.sqrt(2.0 * d)))
    return np.vstack(rows)


def _gram(lattice, theta1):
    if theta1 <= 0:
        raise SpectrumError(f"theta_1 must be positive, got {theta1}")
    psi = kernel_basis(lattice, theta1)
    m = maxwellian(lattice, 1.0, None, theta1)
    gram = lattice.weight * (psi * m) @ psi.T
    return psi, m, gram


def _coefficients(lattice, h, psi, gram):
    h = np.asarray(h, dtype=float)
    flat = h.reshape(-1, h.shape[-1])
    solved = linalg.solve(gram, lattice.weight * (psi @ flat.T), assume_a="sym")
    return solved.T.reshape(h.shape[:-1] + (len(psi),))


def kernel_projection_pi0(lattice, h, theta1):
    """
    Projection onto span{Psi_i M} along the moments <., Psi_j>.

    Uses the lattice Gram matrix of the Psi basis, so it is idempotent and
    keeps the mass, momentum and energy moments of h exactly.
    """
    psi, m, gram = _gram(lattice, theta1)
    return (_coefficients(lattice, h, psi, gram) @ psi) * m


def kernel_form(lattice, rho, u, theta, theta1):
    """
    Kernel-form fluctuation (rho + u.v + theta/2 (|v|^2 - d theta_1)) M_theta1.

    Args:
        rho (array-like): Shape (...).
        u (array-like): Shape (..., d).
        theta (array-like): Shape (...).

    Returns:
        np.ndarray: Shape (..., n).
    """
    rho = np.asarray(rho, dtype=float)
    u = np.asarray(u, dtype=float)
    theta = np.asarray(theta, dtype=float)
    m = maxwellian(lattice, 1.0, None, theta1)
    shell = lattice.sq_speed - lattice.dimension * theta1
    values = rho[..., None] + u @ lattice.nodes.T + 0.5 * theta[..., None] * shell
    return values * m


def kernel_coordinates(lattice, h, theta1):
    """Inverse of kernel_form on the projected part of h: returns rho, u, theta."""
    psi, _, gram = _gram(lattice, theta1)
    coefficients = _coefficients(lattice, h, psi, gram)
    d = lattice.dimension
    return {
        "rho": coefficients[..., 0],
        "u": coefficients[..., 1:d + 1] / math.sqrt(theta1),
        "theta": 2.0 * coefficients[..., d + 1] / (theta1 * math.sqrt(2.0 * d)),
    }
