"""Closure constants of the limiting fluid system: theta_1, nu, gamma, c_bar."""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg

from src.collision import collide, lattice_moment_constant
from src.errors import TransportError
from src.gaussian import GAMMA_B, moment_constant_a, tail_share
from src.homogeneous import lattice_theta1
from src.lattice import build_lattice, maxwellian
from src.spectrum import assemble_linearized, kernel_form, kernel_projection_pi0

logger = logging.getLogger(__name__)

__all__ = [
    "tensor_A",
    "vector_b",
    "solve_phi_psi",
    "viscosity_conductivity",
    "moment_constant_a",
    "forcing_J0",
    "nonlinear_closures",
    "compute_transport_report",
    "TransportReport",
]

LEAKAGE_TOLERANCE = 1e-6
RESOLVED_EXTENT = 8.0
RESIDUAL_TOLERANCE = 1e-4
BULK_RADIUS = 5.0


def tensor_A(v):
    """Traceless A(v) = v (x) v - |v|^2 / d Id, shape (..., d, d)."""
    v = np.asarray(v, dtype=float)
    d = v.shape[-1]
    outer = v[..., :, None] * v[..., None, :]
    return outer - (np.sum(v * v, axis=-1) / d)[..., None, None] * np.eye(d)


def vector_b(v, theta1):
    """b(v) = (|v|^2 - (d+2) theta_1) v / 2."""
    v = np.asarray(v, dtype=float)
    d = v.shape[-1]
    return 0.5 * (np.sum(v * v, axis=-1) - (d + 2) * theta1)[..., None] * v


def _bulk(lattice, theta1, radius=BULK_RADIUS):
    return lattice.sq_speed <= radius ** 2 * theta1


@dataclass
class PhiPsiSolution:
    """
    Solutions X = phi M and Y = psi M of L_1(X) = -A M, L_1(Y) = -b M.

    phi_m has shape (d, d, n) and is symmetric in its first two axes;
    psi_m has shape (d, n).
    """

    lattice: object
    theta1: float
    maxwellian: np.ndarray
    phi_m: np.ndarray
    psi_m: np.ndarray
    residuals: dict
    leakage: float

    @property
    def bulk(self):
        return _bulk(self.lattice, self.theta1)

    def phi(self):
        """phi^{ij} = X^{ij} / M on the bulk nodes, zero elsewhere."""
        return np.where(self.bulk, self.phi_m / np.where(self.bulk, self.maxwellian, 1.0), 0.0)

    def psi(self):
        return np.where(self.bulk, self.psi_m / np.where(self.bulk, self.maxwellian, 1.0), 0.0)

    def radiality(self, radius=3.0, floor=0.05):
        """
        Largest relative spread of phi^{ij}/A^{ij} and psi_i/b_i over nodes of equal speed.

        Only nodes with |v| <= radius sqrt(theta_1) and |A^{ij}|, |b_i| above
        floor times their bulk maximum contribute.
        """
        lattice = self.lattice
        nodes = lattice.nodes
        shells = np.rint(lattice.sq_speed / lattice.spacing ** 2).astype(np.int64)
        inner = lattice.sq_speed <= radius ** 2 * self.theta1
        A = np.moveaxis(tensor_A(nodes), 0, -1)
        b = vector_b(nodes, self.theta1).T
        spreads = {}
        for name, field_values, shape in (("phi", self.phi(), A), ("psi", self.psi(), b)):
            ratios, keys = [], []
            for index in np.ndindex(shape.shape[:-1]):
                base = shape[index]
                keep = inner & (np.abs(base) > floor * np.max(np.abs(base[inner])))
                ratios.append(field_values[index][keep] / base[keep])
                keys.append(shells[keep])
            ratios = np.concatenate(ratios)
            keys = np.concatenate(keys)
            worst = 0.0
            for shell in np.unique(keys):
                group = ratios[keys == shell]
                if len(group) > 1:
                    worst = max(worst, float(np.ptp(group) / max(np.max(np.abs(group)), 1e-300)))
            spreads[name] = worst
        return spreads

    def growth_constants(self):
        """max |phi| / <v>^3 and max |psi| / <v>^4 over the bulk."""
        bracket = np.sqrt(1.0 + self.lattice.sq_speed)
        bulk = self.bulk
        phi = np.max(np.abs(self.phi()), axis=(0, 1))
        psi = np.max(np.abs(self.psi()), axis=0)
        return {
            "phi": float(np.max(phi[bulk] / bracket[bulk] ** 3)),
            "psi": float(np.max(psi[bulk] / bracket[bulk] ** 4)),
        }


def solve_phi_psi(L1, theta1, leakage_tolerance=LEAKAGE_TOLERANCE):
    """
    Projected least-squares solves of L_1(phi M) = -A M and L_1(psi M) = -b M.

    The right-hand sides and the solutions are passed through I - pi_0.

    Args:
        L1 (LinearOperatorMatrix): Elastic operator assembled around M_theta1.
        theta1 (float): Reference temperature.
        leakage_tolerance (float): Allowed kernel component of the right-hand sides.

    Returns:
        PhiPsiSolution: Tensor and vector solutions with per-component residuals.
    """
    if L1.alpha != 1.0:
        raise TransportError(f"phi/psi solves need the elastic operator, got alpha={L1.alpha}")
    if not L1.dense:
        raise TransportError("phi/psi solves need the assembled matrix")
    lattice = L1.lattice
    d, n = lattice.dimension, lattice.size
    m = maxwellian(lattice, 1.0, None, theta1)
    A = tensor_A(lattice.nodes)
    b = vector_b(lattice.nodes, theta1)

    labels, columns = [], []
    for i in range(d):
        for j in range(i, d):
            labels.append(("phi", i, j))
            columns.append(-A[:, i, j] * m)
    for i in range(d):
        labels.append(("psi", i))
        columns.append(-b[:, i] * m)
    rhs = np.array(columns)
    kernel_part = kernel_projection_pi0(lattice, rhs, theta1)
    scale = np.sum(np.abs(rhs), axis=1)
    leakage = float(np.max(np.sum(np.abs(kernel_part), axis=1) / scale))
    truncation = tail_share(d, lattice.extent, theta1, power=4)
    if leakage > leakage_tolerance:
        if truncation > leakage_tolerance:
            raise TransportError(
                f"lattice extent R={lattice.extent:.4g} ({lattice.extent / math.sqrt(theta1):.2f} sqrt(theta_1)) "
                f"truncates {truncation:.1e} of the fourth Gaussian moment, so the right-hand sides leak "
                f"{leakage:.3e} into the kernel (limit {leakage_tolerance:.1e}); "
                f"widen the lattice to R >= {RESOLVED_EXTENT:g} sqrt(theta_1)"
            )
        raise TransportError(
            f"right-hand sides leak {leakage:.3e} into the kernel (limit {leakage_tolerance:.1e}) although the "
            f"lattice tail holds only {truncation:.1e} of the fourth moment; the kernel projection is inconsistent"
        )
    rhs = rhs - kernel_part

    logger.info("--- SOLVING PHI/PSI (%d right-hand sides, %d nodes) ---", len(rhs), n)
    solution, _, rank, _ = linalg.lstsq(L1.matrix, rhs.T)
    solution = solution.T
    solution = solution - kernel_projection_pi0(lattice, solution, theta1)
    misfit = solution @ L1.matrix.T - rhs
    residuals = {}
    for label, row, target in zip(labels, misfit, rhs):
        key = "_".join(str(p) for p in label)
        residuals[key] = float(np.linalg.norm(row) / np.linalg.norm(target))
    worst = max(residuals.values())
    if worst > RESIDUAL_TOLERANCE:
        logger.warning("phi/psi residual %.3e exceeds %.1e (matrix rank %d of %d)", worst, RESIDUAL_TOLERANCE, rank, n)
    logger.info("--> Largest relative residual %.3e, kernel leakage %.3e", worst, leakage)

    phi_m = np.zeros((d, d, n))
    psi_m = np.zeros((d, n))
    for label, row in zip(labels, solution):
        if label[0] == "phi":
            _, i, j = label
            phi_m[i, j] = row
            phi_m[j, i] = row
        else:
            psi_m[label[1]] = row
    return PhiPsiSolution(lattice, theta1, m, phi_m, psi_m, residuals, leakage)


def _viscosity_pattern(d):
    eye = np.eye(d)
    return (np.einsum("ik,jl->ijkl", eye, eye) + np.einsum("il,jk->ijkl", eye, eye)
            - (2.0 / d) * np.einsum("ij,kl->ijkl", eye, eye))


@dataclass
class TransportCoefficients:
    nu: float
    gamma: float
    nu_flux: float
    gamma_flux: float
    nu_gap: float
    gamma_gap: float
    nu_pattern_error: float
    gamma_pattern_error: float
    phi_gram: np.ndarray = field(repr=False)
    psi_gram: np.ndarray = field(repr=False)


def viscosity_conductivity(solution, L1):
    """
    nu and gamma from the Gram tensors <phi^{ij} L_1(phi^{kl} M)> and <psi_i L_1(psi_j M)>.

    The flux forms <phi : A M> and <psi . b M> give the second estimate;
    their relative gaps are the consistency certificate.
    """
    lattice = solution.lattice
    d = lattice.dimension
    w = lattice.weight
    bulk = solution.bulk
    phi, psi = solution.phi(), solution.psi()
    applied_phi = solution.phi_m.reshape(d * d, -1) @ L1.matrix.T
    applied_psi = solution.psi_m @ L1.matrix.T

    phi_gram = w * np.einsum("an,bn->ab", phi.reshape(d * d, -1)[:, bulk], applied_phi[:, bulk]).reshape(d, d, d, d)
    psi_gram = w * np.einsum("an,bn->ab", psi[:, bulk], applied_psi[:, bulk])
    nu = -np.einsum("ijij->", phi_gram) / ((d - 1) * (d + 2))
    gamma = -2.0 * np.trace(psi_gram) / (d * (d + 2))

    A = np.moveaxis(tensor_A(lattice.nodes), 0, -1)
    b = vector_b(lattice.nodes, solution.theta1).T
    nu_flux = w * np.sum((solution.phi_m * A)[..., bulk]) / ((d - 1) * (d + 2))
    gamma_flux = 2.0 * w * np.sum((solution.psi_m * b)[:, bulk]) / (d * (d + 2))

    if not (nu > 0 and gamma > 0):
        raise TransportError(f"transport coefficients must be positive: nu={nu:.6g}, gamma={gamma:.6g}")
    nu_pattern = float(np.max(np.abs(phi_gram + nu * _viscosity_pattern(d))) / nu)
    gamma_pattern = float(np.max(np.abs(psi_gram + 0.5 * (d + 2) * gamma * np.eye(d))) / gamma)
    result = TransportCoefficients(
        nu=float(nu),
        gamma=float(gamma),
        nu_flux=float(nu_flux),
        gamma_flux=float(gamma_flux),
        nu_gap=float(abs(nu - nu_flux) / nu),
        gamma_gap=float(abs(gamma - gamma_flux) / gamma),
        nu_pattern_error=nu_pattern,
        gamma_pattern_error=gamma_pattern,
        phi_gram=phi_gram,
        psi_gram=psi_gram,
    )
    logger.info("--> nu=%.6g (flux form %.6g), gamma=%.6g (flux form %.6g)", nu, nu_flux, gamma, gamma_flux)
    return result


def forcing_J0(rho, theta, lambda0, theta1, c_bar):
    """J_0 = -lambda0 c_bar theta_1^{3/2} (rho + 3/4 theta_1 theta), pointwise."""
    rho = np.asarray(rho, dtype=float)
    theta = np.asarray(theta, dtype=float)
    return -lambda0 * c_bar * theta1 ** 1.5 * (rho + 0.75 * theta1 * theta)


@dataclass
class ClosureReport:
    tensor: np.ndarray
    tensor_closed: np.ndarray
    vector: np.ndarray
    vector_closed: np.ndarray
    tensor_gap: float
    vector_gap: float

    def to_dict(self):
        return {
            "tensor": self.tensor.tolist(),
            "tensor_closed": self.tensor_closed.tolist(),
            "vector": self.vector.tolist(),
            "vector_closed": self.vector_closed.tolist(),
            "tensor_gap": self.tensor_gap,
            "vector_gap": self.vector_gap,
        }


def _gap(measured, closed):
    scale = np.linalg.norm(closed)
    difference = np.linalg.norm(measured - closed)
    return float(difference / scale) if scale > 0 else float(difference)


def nonlinear_closures(rho, u, theta, solution, tableau):
    """
    <phi Q_1(h, h)> and <psi Q_1(h, h)> for the kernel-form h against their closed forms.

    Closed forms: theta_1^2 (u (x) u - |u|^2/d Id) and (d+2)/2 theta_1^3 theta u.
    """
    if tableau.alpha != 1.0:
        raise TransportError("closures are evaluated with the elastic tableau")
    lattice = solution.lattice
    d, theta1 = lattice.dimension, solution.theta1
    u = np.asarray(u, dtype=float)
    h = kernel_form(lattice, rho, u, theta, theta1)
    q = collide(h, h, tableau)
    w = lattice.weight
    tensor = w * np.einsum("ijn,n->ij", solution.phi(), q)
    vector = w * solution.psi() @ q
    tensor_closed = theta1 ** 2 * (np.outer(u, u) - (u @ u / d) * np.eye(d))
    vector_closed = 0.5 * (d + 2) * theta1 ** 3 * theta * u
    report = ClosureReport(tensor, tensor_closed, vector, vector_closed,
                           _gap(tensor, tensor_closed), _gap(vector, vector_closed))
    logger.debug("Closure gaps: tensor %.3e, vector %.3e", report.tensor_gap, report.vector_gap)
    return report


@dataclass
class TransportReport:
    """Constants consumed by the fluid solver, with the evidence behind them."""

    dimension: int
    theta1: float
    nu: float
    gamma: float
    gamma_b: float
    a: float
    c_bar: float
    a_lattice: float = float("nan")
    nu_gap: float = float("nan")
    gamma_gap: float = float("nan")
    nu_pattern_error: float = float("nan")
    gamma_pattern_error: float = float("nan")
    residuals: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.nu > 0 and self.gamma > 0):
            raise TransportError(f"transport report needs nu > 0 and gamma > 0, got {self.nu}, {self.gamma}")
        if self.theta1 <= 0:
            raise TransportError(f"theta_1 must be positive, got {self.theta1}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, payload):
        known = {k: payload[k] for k in cls.__dataclass_fields__ if k in payload}
        missing = {"dimension", "theta1", "nu", "gamma", "gamma_b", "a", "c_bar"} - set(known)
        if missing:
            raise TransportError(f"transport report lacks {sorted(missing)}")
        return cls(**known)


def compute_transport_report(tableau, theta1=None):
    """
    Full transport pipeline on an elastic tableau.

    Args:
        tableau (CollisionTableau): Tableau with alpha = 1.
        theta1 (float): Reference temperature, default the lattice theta_1.

    Returns:
        tuple: (TransportReport, PhiPsiSolution, TransportCoefficients).
    """
    if tableau.alpha != 1.0:
        raise TransportError(f"transport coefficients need the elastic tableau, got alpha={tableau.alpha}")
    lattice = tableau.lattice
    d = lattice.dimension
    theta1 = lattice_theta1(lattice) if theta1 is None else theta1
    logger.info("--- TRANSPORT COEFFICIENTS (d=%d, theta_1=%.6g) ---", d, theta1)
    m = maxwellian(lattice, 1.0, None, theta1)
    L1 = assemble_linearized(m, tableau, alpha=1.0)
    solution = solve_phi_psi(L1, theta1)
    coefficients = viscosity_conductivity(solution, L1)
    a = moment_constant_a(d)
    report = TransportReport(
        dimension=d,
        theta1=float(theta1),
        nu=coefficients.nu,
        gamma=coefficients.gamma,
        gamma_b=GAMMA_B,
        a=a,
        c_bar=GAMMA_B * a,
        a_lattice=lattice_moment_constant(lattice, theta1),
        nu_gap=coefficients.nu_gap,
        gamma_gap=coefficients.gamma_gap,
        nu_pattern_error=coefficients.nu_pattern_error,
        gamma_pattern_error=coefficients.gamma_pattern_error,
        residuals=solution.residuals,
        grid={**lattice.describe(), "directions": tableau.quadrature.count},
    )
    return report, solution, coefficients


def temperature_scaling(tableau, theta1, factor=4.0):
    """
    Exponent p of nu ~ theta^p measured between theta_1 and factor * theta_1.

    The lattice is widened by sqrt(factor) and the tableau rescaled, so both
    solves see the same resolution relative to the thermal speed.
    """
    lattice = tableau.lattice
    wider = build_lattice(lattice.dimension, lattice.nodes_per_axis, lattice.extent * math.sqrt(factor))
    base, _, _ = compute_transport_report(tableau, theta1)
    hot, _, _ = compute_transport_report(tableau.rescaled(wider), theta1 * factor)
    exponents = {
        "nu": math.log(hot.nu / base.nu) / math.log(factor),
        "gamma": math.log(hot.gamma / base.gamma) / math.log(factor),
    }
    logger.info("--> Temperature scaling exponents: nu %.4f, gamma %.4f", exponents["nu"], exponents["gamma"])
    return exponents
