"""Pseudo-spectral solver for the forced incompressible Navier-Stokes-Fourier limit system."""

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from src.errors import CFLError, NSFError
from src.kinetic import SpectralGrid
from src.spectrum import kernel_form

logger = logging.getLogger(__name__)

TAIL_LIMIT = 0.1
ADVECTIVE_CFL = 0.5


@dataclass(frozen=True)
class NSFParameters:
    """
    Coefficients of

        du/dt - (nu/theta_1) Lap u + theta_1 u.grad u + grad p = lambda0 u
        dtheta/dt - (gamma/theta_1^2) Lap theta + theta_1 u.grad theta = lambda0 c_bar sqrt(theta_1) / (2(d+2)) theta
    """

    dimension: int
    nu: float
    gamma: float
    theta1: float
    lambda0: float
    c_bar: float

    @classmethod
    def from_transport_report(cls, report, lambda0):
        return cls(report.dimension, report.nu, report.gamma, report.theta1, lambda0, report.c_bar)

    @property
    def viscosity(self):
        return self.nu / self.theta1

    @property
    def diffusivity(self):
        return self.gamma / self.theta1 ** 2

    @property
    def theta_forcing(self):
        return self.lambda0 * self.c_bar * math.sqrt(self.theta1) / (2.0 * (self.dimension + 2))


def _leray_hat(k, u_hat):
    k2 = np.sum(k * k, axis=0)
    safe = np.where(k2 > 0, k2, 1.0)
    return u_hat - k * (np.sum(k * u_hat, axis=0) / safe)


def leray_project(grid, u):
    """Divergence-free part of a real vector field of shape (d, *grid.shape)."""
    return grid.inverse(_leray_hat(grid.nyquist_free(), grid.forward(np.asarray(u, dtype=float))))


@dataclass
class FluidState:
    """Spectral coefficients of u (divergence free) and theta (zero mean)."""

    grid: SpectralGrid
    params: NSFParameters
    u_hat: np.ndarray
    theta_hat: np.ndarray
    time: float = 0.0

    @classmethod
    def from_fields(cls, grid, params, u, theta, time=0.0):
        mask = grid.dealias_mask()
        u_hat = _leray_hat(grid.nyquist_free(), grid.forward(np.asarray(u, dtype=float))) * mask
        theta_hat = grid.forward(np.broadcast_to(np.asarray(theta, dtype=float), grid.shape)) * mask
        theta_hat[(0,) * grid.dimension] = 0.0
        return cls(grid, params, u_hat, theta_hat, time)

    def u(self):
        return self.grid.inverse(self.u_hat)

    def theta(self):
        return self.grid.inverse(self.theta_hat)

    def rho(self):
        return -self.params.theta1 * self.theta()

    def kinetic_energy(self):
        return 0.5 * float(np.mean(np.sum(self.u() ** 2, axis=0)))

    def theta_norm(self):
        return float(np.mean(self.theta() ** 2))

    def divergence(self):
        return self.grid.rms(self.grid.divergence(self.u()))

    def theta_mean(self):
        return float(abs(self.theta_hat[(0,) * self.grid.dimension]) / self.grid.cells)

    def tail_fraction(self):
        """Share of spectral energy in the upper half of the retained band."""
        grid = self.grid
        index = np.stack(np.meshgrid(*[np.abs(np.fft.fftfreq(n, d=1.0 / n)) / (n / 3.0) for n in grid.shape],
                                     indexing="ij"))
        tail = np.max(index, axis=0) >= 0.5
        density = np.sum(np.abs(self.u_hat) ** 2, axis=0) + np.abs(self.theta_hat) ** 2
        total = density.sum()
        return float(density[tail].sum() / total) if total > 0 else 0.0


def _linear_rates(grid, params):
    k2 = grid.k_squared()
    rate_u = -params.viscosity * k2 + params.lambda0
    rate_theta = -params.diffusivity * k2 + params.theta_forcing
    return rate_u, rate_theta


def advection_terms(state):
    """
    Spectral nonlinear terms -theta_1 P[(u.grad) u] and -theta_1 u.grad theta, dealiased.

    Returns:
        tuple: (velocity term of shape (d, *shape), temperature term).
    """
    grid = state.grid
    k = grid.nyquist_free()
    mask = grid.dealias_mask()
    theta1 = state.params.theta1
    u = grid.inverse(state.u_hat)
    d = grid.dimension
    transport_u = np.zeros_like(u)
    for i in range(d):
        gradient = grid.inverse(1j * k * state.u_hat[i][None])
        transport_u[i] = np.sum(u * gradient, axis=0)
    grad_theta = grid.inverse(1j * k * state.theta_hat[None])
    term_u = -theta1 * _leray_hat(k, grid.forward(transport_u)) * mask
    term_theta = -theta1 * grid.forward(np.sum(u * grad_theta, axis=0)) * mask
    return term_u, term_theta


def max_advective_step(state, cfl=ADVECTIVE_CFL):
    speed = float(np.max(np.abs(state.u()))) * state.params.theta1
    if speed == 0:
        return math.inf
    spacing = state.grid.length / max(state.grid.shape)
    return cfl * spacing / speed


def nsf_step(state, dt, cfl=ADVECTIVE_CFL, check_energy=True):
    """
    One integrating-factor RK2 step.

    Diffusion and the linear forcing are integrated exactly per mode; the
    advection is explicit. The Leray projection, the pinned theta mean and
    the spectral tail are checked afterwards.
    """
    limit = max_advective_step(state, cfl)
    if dt > limit:
        raise CFLError(dt, limit, "advective")
    grid, params = state.grid, state.params
    rate_u, rate_theta = _linear_rates(grid, params)
    decay_u, decay_theta = np.exp(rate_u * dt), np.exp(rate_theta * dt)
    zero = (0,) * grid.dimension

    n0_u, n0_theta = advection_terms(state)
    stage = replace(state,
                    u_hat=decay_u * (state.u_hat + dt * n0_u),
                    theta_hat=decay_theta * (state.theta_hat + dt * n0_theta))
    n1_u, n1_theta = advection_terms(stage)
    u_hat = decay_u * state.u_hat + 0.5 * dt * (decay_u * n0_u + n1_u)
    theta_hat = decay_theta * state.theta_hat + 0.5 * dt * (decay_theta * n0_theta + n1_theta)
    u_hat = _leray_hat(grid.nyquist_free(), u_hat)
    theta_hat[zero] = 0.0
    new = replace(state, u_hat=u_hat, theta_hat=theta_hat, time=state.time + dt)

    if check_energy and params.lambda0 == 0:
        for name, before, after in (("kinetic energy", state.kinetic_energy(), new.kinetic_energy()),
                                    ("theta norm", state.theta_norm(), new.theta_norm())):
            if after > before * (1.0 + 1e-8) + 1e-300:
                raise NSFError(f"{name} increased from {before:.12e} to {after:.12e} at t={new.time:.5g}")
    tail = new.tail_fraction()
    if tail > TAIL_LIMIT:
        raise NSFError(f"spectral tail holds {tail:.1%} of the energy at t={new.time:.5g}; resolution lost")
    return new


def limit_profile(state, lattice):
    """Kinetic fluctuation (rho + u.v + theta/2 (|v|^2 - d theta_1)) M per cell, shape (*shape, n)."""
    theta = state.theta()
    u = np.moveaxis(state.u(), 0, -1)
    return kernel_form(lattice, state.rho(), u, theta, state.params.theta1)


def run_nsf(state, dt, horizon, sample_every=1, on_sample=None, cfl=ADVECTIVE_CFL):
    """
    Integrates to the horizon, sampling diagnostics.

    Returns:
        tuple: (final FluidState, pd.DataFrame with t, kinetic_energy, theta_norm, divergence, theta_mean, tail).
    """
    steps = max(1, math.ceil(horizon / dt - 1e-9))
    dt = horizon / steps
    records = []

    def record(current):
        records.append({"t": current.time, "kinetic_energy": current.kinetic_energy(),
                        "theta_norm": current.theta_norm(), "divergence": current.divergence(),
                        "theta_mean": current.theta_mean(), "tail": current.tail_fraction()})
        if on_sample is not None:
            on_sample(current)

    logger.info("--- NSF RUN (%s grid, %d steps of %.4g) ---", "x".join(map(str, state.grid.shape)), steps, dt)
    record(state)
    current = state
    for step in range(1, steps + 1):
        current = nsf_step(current, dt, cfl)
        if step % sample_every == 0 or step == steps:
            record(current)
    series = pd.DataFrame.from_records(records)
    logger.info("--> Final kinetic energy %.6e, theta norm %.6e", current.kinetic_energy(), current.theta_norm())
    return current, series
