"""Space-homogeneous cooling in physical and self-similar variables."""

import logging
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import optimize

from src.collision import collide, lattice_moment_constant
from src.errors import CFLError, CollisionError, ConvergenceError, FitError, PositivityError
from src.fitting import is_monotone, loglog_fit, polynomial_extrapolation
from src.gaussian import GAMMA_B, theta1_closed_form
from src.lattice import (
    NEGATIVITY_TOLERANCE,
    VelocityLattice,
    build_lattice,
    l1_norm,
    maxwellian,
    moment,
    resample,
    sample,
    velocity_moments,
)

logger = logging.getLogger(__name__)

DEFAULT_CFL = 0.5
CLIP_BUDGET = 1e-6


@dataclass(frozen=True)
class SelfSimilarFrame:
    """Clock tau(t) = log(1 + c t)/c and scale V(t) = 1 + c t."""

    eps: float
    rate: float

    @classmethod
    def from_law(cls, law, eps):
        return cls(eps, law.cooling_rate(eps))

    def scale(self, t):
        return 1.0 + self.rate * np.asarray(t, dtype=float)

    def clock(self, t):
        t = np.asarray(t, dtype=float)
        if self.rate == 0:
            return t
        return np.log1p(self.rate * t) / self.rate

    def physical_time(self, tau):
        tau = np.asarray(tau, dtype=float)
        if self.rate == 0:
            return tau
        return np.expm1(self.rate * tau) / self.rate


@dataclass
class CoolingState:
    """Homogeneous cooling state G_alpha with its temperature and steady residual."""

    alpha: float
    values: np.ndarray
    temperature: float
    residual: float
    steps: int
    lattice: VelocityLattice

    def summary(self):
        return {
            "alpha": self.alpha,
            "temperature": self.temperature,
            "residual": self.residual,
            "steps": self.steps,
            "lattice": self.lattice.describe(),
        }


def drift_term(lattice, f, kappa):
    """
    kappa div_v(v f) by centred differences in flux form.

    The face flux is the mean of v f on the two adjacent nodes and vanishes
    through the hull, so the output has zero discrete mass to rounding.
    """
    f = np.asarray(f, dtype=float)
    if kappa == 0:
        return np.zeros_like(f)
    batch = f.shape[:-1]
    grid = f.reshape(batch + lattice.shape)
    out = np.zeros_like(grid)
    n_batch = len(batch)
    for k in range(lattice.dimension):
        ax = n_batch + k
        shape = [1] * grid.ndim
        shape[ax] = lattice.nodes_per_axis
        flux = np.moveaxis(grid * lattice.axis.reshape(shape), ax, -1)
        div = np.empty_like(flux)
        div[..., 1:-1] = flux[..., 2:] - flux[..., :-2]
        div[..., 0] = flux[..., 0] + flux[..., 1]
        div[..., -1] = -(flux[..., -2] + flux[..., -1])
        out += np.moveaxis(div, -1, ax)
    return (kappa / (2.0 * lattice.spacing)) * out.reshape(f.shape)


def kinetic_rhs(f, tableau, eps, kappa):
    """Right-hand side (Q(f, f) - kappa div(v f)) / eps^2 of the homogeneous equation."""
    return (collide(f, f, tableau) - drift_term(tableau.lattice, f, kappa)) / (eps * eps)


def max_time_step(f, tableau, eps, kappa, cfl=DEFAULT_CFL):
    """dt_max = cfl eps^2 dv / (kappa R + Lambda_max) with the measured loss frequency."""
    lattice = tableau.lattice
    loss = float(np.max(tableau.loss_frequency(f)))
    return cfl * eps * eps * lattice.spacing / (kappa * lattice.extent + loss)


def enforce_positivity(lattice, f, budget=CLIP_BUDGET):
    """
    Clips negative values beyond tolerance and restores the discrete mass per row.

    Returns:
        tuple: (values, largest clipped mass fraction).
    """
    flat = f.reshape(-1, f.shape[-1])
    scale = np.max(np.abs(flat), axis=1)
    bad = np.flatnonzero(np.min(flat, axis=1) < -NEGATIVITY_TOLERANCE * scale)
    if bad.size == 0:
        return f, 0.0
    flat = flat.copy()
    worst = 0.0
    for row in bad:
        values = flat[row]
        mass = values.sum()
        negative = -values[values < 0].sum()
        fraction = negative / max(values[values > 0].sum(), 1e-300)
        if fraction > budget:
            raise PositivityError(fraction, cell=int(row))
        clipped = np.maximum(values, 0.0)
        flat[row] = clipped * (mass / clipped.sum())
        worst = max(worst, fraction)
    logger.debug("Positivity clip on %d row(s), largest clipped fraction %.3e", bad.size, worst)
    return flat.reshape(f.shape), worst


def _advance(f, dt, tableau, eps, kappa, cfl, check_cfl):
    if check_cfl:
        limit = max_time_step(f, tableau, eps, kappa, cfl)
        if dt > limit * (1.0 + 1e-12):
            raise CFLError(dt, limit)
    k1 = kinetic_rhs(f, tableau, eps, kappa)
    stage = f + dt * k1
    k2 = kinetic_rhs(stage, tableau, eps, kappa)
    new = 0.5 * (f + stage + dt * k2)
    new, _ = enforce_positivity(tableau.lattice, new)
    return new


def step_selfsim(f, dt, tableau, eps=1.0, cfl=DEFAULT_CFL, check_cfl=True):
    """
    One SSP-RK2 step of eps^2 df/dt = Q(f, f) - kappa div(v f), kappa = 1 - alpha.

    Args:
        f (np.ndarray): Distribution or batch of distributions of shape (..., n).
        dt (float): Time step.
        tableau (CollisionTableau): Carries the lattice and alpha.
        eps (float): Knudsen number.

    Returns:
        np.ndarray: Updated distribution(s).
    """
    return _advance(np.asarray(f, dtype=float), dt, tableau, eps, 1.0 - tableau.alpha, cfl, check_cfl)


def step_physical(F, dt, tableau, eps=1.0, cfl=DEFAULT_CFL, check_cfl=True):
    """As step_selfsim without the drift: eps^2 dF/dt = Q(F, F)."""
    return _advance(np.asarray(F, dtype=float), dt, tableau, eps, 0.0, cfl, check_cfl)


def steady_residual(f, tableau):
    """Discrete L1 norm of Q(f, f) - kappa div(v f)."""
    return float(l1_norm(tableau.lattice, kinetic_rhs(f, tableau, 1.0, 1.0 - tableau.alpha)))


def symmetrize(lattice, f):
    """Even part f(v)/2 + f(-v)/2, which has zero momentum."""
    return 0.5 * (f + f[..., lattice.mirror])


def self_similar_map(lattice, values, t, frame, direction="forward", order=3):
    """
    Change of variables F(t, v) = V^d f(tau, V v).

    "forward" maps physical F to self-similar f, "inverse" maps f back to F.
    The result keeps the input mass exactly; the interpolation and hull
    defect before renormalization is logged.
    """
    values = np.asarray(values, dtype=float)
    scale = float(frame.scale(t))
    if scale == 1.0:
        return values.copy()
    d = lattice.dimension
    if direction == "forward":
        mapped = scale ** (-d) * sample(lattice, values, lattice.nodes / scale, order=order)
    elif direction == "inverse":
        mapped = scale ** d * sample(lattice, values, lattice.nodes * scale, order=order)
    else:
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    mass_in = np.sum(values, axis=-1, keepdims=True)
    mass_out = np.sum(mapped, axis=-1, keepdims=True)
    defect = float(np.max(np.abs(1.0 - mass_out / mass_in)))
    if direction == "inverse" and defect > 1e-6:
        logger.warning("Self-similar map V=%.4g: %.3e of the mass fell outside the hull or was lost to interpolation",
                       scale, defect)
    return mapped * (mass_in / mass_out)


def lattice_theta1(lattice, gamma_b=GAMMA_B, iterations=4):
    """theta_1 from the energy balance with the lattice moment constant, by fixed-point iteration."""
    d = lattice.dimension
    theta = theta1_closed_form(d, gamma_b)
    for _ in range(iterations):
        theta = 16.0 * d * d / (gamma_b * lattice_moment_constant(lattice, theta)) ** 2
    return theta


def energy_balance(theta, tableau):
    """Energy moment of Q(M, M) - kappa div(v M) for the unit-mass Maxwellian at theta."""
    lattice = tableau.lattice
    m = maxwellian(lattice, 1.0, None, theta)
    rhs = collide(m, m, tableau) - drift_term(lattice, m, 1.0 - tableau.alpha)
    return float(moment(lattice, rhs, lattice.sq_speed))


def balanced_temperature(tableau):
    """Temperature of the Maxwellian whose discrete energy balance vanishes."""
    theta1 = lattice_theta1(tableau.lattice)
    alpha = tableau.alpha
    if alpha == 1.0:
        return theta1
    guess = theta1 * 4.0 / (1.0 + alpha) ** 2
    low, high = 0.7 * guess, 1.4 * guess
    f_low, f_high = energy_balance(low, tableau), energy_balance(high, tableau)
    if f_low * f_high > 0:
        logger.warning("Energy balance not bracketed on [%.4g, %.4g]; seeding at %.4g", low, high, guess)
        return guess
    return optimize.brentq(energy_balance, low, high, args=(tableau,), xtol=1e-13, rtol=1e-12)


def cooling_state(tableau, tol=1e-6, eps=1.0, max_steps=200_000, cfl=DEFAULT_CFL, check_every=25,
                  seed_temperature=None):
    """
    Homogeneous cooling state by long-time integration of the self-similar equation.

    Args:
        tableau (CollisionTableau): Tableau at the target alpha.
        tol (float): Steady residual to reach.
        eps (float): Knudsen scaling of the time variable.
        max_steps (int): Step budget before ConvergenceError.
        cfl (float): Fraction of the stability limit used per step.
        check_every (int): Steps between residual evaluations.
        seed_temperature (float): Seed Maxwellian temperature, default balanced.

    Returns:
        CoolingState: G_alpha with mass 1 and zero momentum.
    """
    lattice, alpha = tableau.lattice, tableau.alpha
    if not 0.8 <= alpha <= 1.0:
        raise CollisionError(f"cooling states are computed for alpha in [0.8, 1], got {alpha}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    kappa = 1.0 - alpha
    theta = balanced_temperature(tableau) if seed_temperature is None else seed_temperature
    g = maxwellian(lattice, 1.0, None, theta)
    residual = steady_residual(g, tableau)
    logger.info("--- COOLING STATE alpha=%.6g (seed theta=%.6g, residual %.3e) ---", alpha, theta, residual)
    steps = 0
    if kappa > 0:
        while residual > tol:
            if steps >= max_steps:
                raise ConvergenceError(f"cooling state alpha={alpha} stalled at residual {residual:.3e} "
                                       f"after {steps} steps")
            dt = 0.9 * max_time_step(g, tableau, eps, kappa, cfl)
            for _ in range(check_every):
                g = _advance(g, dt, tableau, eps, kappa, cfl, check_cfl=False)
            steps += check_every
            g = symmetrize(lattice, g)
            residual = steady_residual(g, tableau)
            logger.debug("step %d: residual %.3e", steps, residual)
    g = symmetrize(lattice, g)
    g = g / (lattice.weight * g.sum())
    temperature = float(velocity_moments(lattice, g)["temperature"])
    logger.info("--> Cooling state: theta_alpha=%.6g after %d steps (residual %.3e)", temperature, steps, residual)
    return CoolingState(alpha, g, temperature, residual, steps, lattice)


@dataclass(frozen=True)
class ThetaEstimate:
    theta1: float
    closed_form: float
    relative_gap: float
    trend: str

    def summary(self):
        return {"theta1": self.theta1, "closed_form": self.closed_form,
                "relative_gap": self.relative_gap, "trend": self.trend}


def theta1_estimate(samples, closed_form=None, degree=None):
    """
    Extrapolates theta_alpha to alpha = 1 from (alpha, theta_alpha) samples.

    Args:
        samples (list): Pairs (alpha, theta_alpha), at least three.
        closed_form (float): Reference value for the relative gap.
        degree (int): Polynomial degree in 1 - alpha.

    Returns:
        ThetaEstimate: Extrapolated value, gap and trend direction.
    """
    if len(samples) < 3:
        raise FitError(f"theta_1 extrapolation needs at least 3 samples, got {len(samples)}")
    ordered = sorted(samples, key=lambda s: 1.0 - s[0])
    x = np.array([1.0 - a for a, _ in ordered])
    y = np.array([t for _, t in ordered])
    value = polynomial_extrapolation(x, y, degree)
    trend = is_monotone(y)
    if trend is None:
        logger.warning("theta_alpha samples are not monotone in alpha: %s", np.array2string(y, precision=6))
        trend = "non-monotone"
    gap = abs(value - closed_form) / closed_form if closed_form else float("nan")
    return ThetaEstimate(value, closed_form if closed_form else float("nan"), gap, trend)


@dataclass(frozen=True)
class HaffFit:
    exponent: float
    prefactor: float
    r_squared: float
    decades: float

    def summary(self):
        return {"exponent": self.exponent, "prefactor": self.prefactor,
                "r2": self.r_squared, "decades": self.decades}


def haff_fit(times, temperatures, rate, min_samples=20, min_decades=1.0):
    """Least-squares fit of log T against log V(t) = log(1 + c t)."""
    times = np.asarray(times, dtype=float)
    scale = 1.0 + rate * times
    if len(times) < min_samples:
        raise FitError(f"Haff fit needs at least {min_samples} samples, got {len(times)}")
    decades = float(np.log10(scale.max() / scale.min()))
    if decades < min_decades - 1e-12:
        raise FitError(f"series spans {decades:.2f} decades of V, need {min_decades}")
    fit = loglog_fit(scale, temperatures, min_samples)
    return HaffFit(fit.slope, math.exp(fit.intercept), fit.r_squared, decades)


def physical_cooling(F0, tableau, eps, horizon, samples=40, cfl=DEFAULT_CFL, zoom=True):
    """
    Physical-variable cooling run eps^2 dF/dt = Q(F, F), sampled geometrically in V.

    Whenever the temperature has dropped four-fold since the last zoom, F is
    resampled onto a lattice of half the extent and the tableau rescaled, so
    the gas stays resolved over several decades of cooling.

    Returns:
        pd.DataFrame: Columns t, V, energy, temperature, momentum, mass, extent.
    """
    lattice = tableau.lattice
    rate = (1.0 - tableau.alpha) / eps ** 2
    if rate > 0:
        targets = (np.geomspace(1.0, 1.0 + rate * horizon, samples) - 1.0) / rate
    else:
        targets = np.linspace(0.0, horizon, samples)
    F = np.asarray(F0, dtype=float).copy()
    reference = float(velocity_moments(lattice, F)["temperature"])
    t = 0.0
    records = []
    logger.info("--- PHYSICAL COOLING alpha=%.6g eps=%.4g horizon=%.4g ---", tableau.alpha, eps, horizon)
    for target in targets:
        while t < target - 1e-14:
            dt = min(0.9 * max_time_step(F, tableau, eps, 0.0, cfl), target - t)
            F = _advance(F, dt, tableau, eps, 0.0, cfl, check_cfl=False)
            t += dt
            if zoom and velocity_moments(lattice, F)["temperature"] < reference / 4.0:
                smaller = build_lattice(lattice.dimension, lattice.nodes_per_axis, lattice.extent / 2.0)
                F = resample(lattice, F, smaller)
                tableau = tableau.rescaled(smaller)
                lattice = smaller
                reference /= 4.0
                logger.debug("Zoomed lattice to R=%.4g at t=%.4g", lattice.extent, t)
        m = velocity_moments(lattice, F)
        records.append({
            "t": t,
            "V": 1.0 + rate * t,
            "energy": float(m["energy"]),
            "temperature": float(m["temperature"]),
            "momentum": float(np.linalg.norm(m["momentum"])),
            "mass": float(m["mass"]),
            "extent": lattice.extent,
        })
    return pd.DataFrame.from_records(records)


def frame_discrepancy(F0, tableau, eps, horizon, cfl=DEFAULT_CFL):
    """
    Evolves F0 in both frames and compares them after mapping to self-similar variables.

    Returns:
        float: Discrete L1 distance between the mapped physical run and the self-similar run.
    """
    lattice = tableau.lattice
    kappa = 1.0 - tableau.alpha
    frame = SelfSimilarFrame(eps, kappa / eps ** 2)
    F = np.asarray(F0, dtype=float).copy()
    f = F.copy()
    t = 0.0
    while t < horizon - 1e-14:
        dt = min(0.9 * max_time_step(F, tableau, eps, 0.0, cfl), horizon - t)
        F = _advance(F, dt, tableau, eps, 0.0, cfl, check_cfl=False)
        t += dt
    tau_end = float(frame.clock(horizon))
    tau = 0.0
    while tau < tau_end - 1e-14:
        dt = min(0.9 * max_time_step(f, tableau, eps, kappa, cfl), tau_end - tau)
        f = _advance(f, dt, tableau, eps, kappa, cfl, check_cfl=False)
        tau += dt
    mapped = self_similar_map(lattice, F, horizon, frame, "forward")
    return float(l1_norm(lattice, mapped - f))
