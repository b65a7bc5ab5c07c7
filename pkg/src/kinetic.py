"""Space-inhomogeneous kinetic solver on the periodic torus and its hydrodynamic observables."""

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import fft

from src.errors import DistributionError, FitError, PositivityError
from src.fitting import exponential_rate_fit, is_monotone
from src.homogeneous import (
    CLIP_BUDGET,
    DEFAULT_CFL,
    _advance,
    haff_fit,
    max_time_step,
    symmetrize,
)
from src.lattice import l1_norm, maxwellian, velocity_moments
from src.spectrum import kernel_form, kernel_projection_pi0
from src.transport import tensor_A, vector_b

logger = logging.getLogger(__name__)

TORUS_LENGTH = 2.0 * math.pi


@dataclass(frozen=True)
class SpectralGrid:
    """Periodic grid on [0, L)^d with integer-spaced angular wavenumbers when L = 2 pi."""

    shape: tuple
    length: float = TORUS_LENGTH
    workers: int = 1

    @property
    def dimension(self):
        return len(self.shape)

    @property
    def cells(self):
        return int(np.prod(self.shape))

    @property
    def axes(self):
        return tuple(range(-self.dimension, 0))

    def wavenumbers(self):
        return [2.0 * math.pi * np.fft.fftfreq(n, d=self.length / n) for n in self.shape]

    def k_vectors(self):
        """Wavevector components, shape (d, *shape)."""
        return np.stack(np.meshgrid(*self.wavenumbers(), indexing="ij"))

    def k_squared(self):
        return np.sum(self.k_vectors() ** 2, axis=0)

    def nyquist_free(self):
        """Wavevectors with the Nyquist component of even axes set to zero."""
        ks = []
        for n, k in zip(self.shape, self.wavenumbers()):
            k = k.copy()
            if n % 2 == 0:
                k[n // 2] = 0.0
            ks.append(k)
        return np.stack(np.meshgrid(*ks, indexing="ij"))

    def dealias_mask(self):
        """2/3-rule mask on every axis."""
        masks = [np.abs(np.fft.fftfreq(n, d=1.0 / n)) < n / 3.0 for n in self.shape]
        return np.all(np.stack(np.meshgrid(*masks, indexing="ij")), axis=0)

    def coordinates(self):
        axes = [np.arange(n) * self.length / n for n in self.shape]
        return np.stack(np.meshgrid(*axes, indexing="ij"))

    def forward(self, values):
        return fft.fftn(values, axes=self.axes, workers=self.workers)

    def inverse(self, values):
        return fft.ifftn(values, axes=self.axes, workers=self.workers).real

    def divergence(self, u):
        """Spectral divergence of a vector field of shape (d, *shape)."""
        k = self.nyquist_free()
        return self.inverse(np.sum(1j * k * self.forward(u), axis=0))

    def gradient(self, s):
        k = self.nyquist_free()
        return self.inverse(1j * k * self.forward(s)[None])

    def rms(self, values):
        return float(np.sqrt(np.mean(np.asarray(values) ** 2)))


@dataclass
class PhaseField:
    """Distribution per spatial cell: values of shape (*grid.shape, n)."""

    lattice: object
    grid: SpectralGrid
    values: np.ndarray
    eps: float
    alpha: float
    time: float = 0.0
    step: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = tuple(self.grid.shape) + (self.lattice.size,)
        if self.values.shape != expected:
            raise DistributionError(f"phase field has shape {self.values.shape}, expected {expected}")

    def with_values(self, values, dt=0.0, steps=0):
        return replace(self, values=values, time=self.time + dt, step=self.step + steps, meta=dict(self.meta))

    def cell_moments(self):
        return velocity_moments(self.lattice, self.values)

    def global_moments(self):
        """Spatial means of the cell moments, with the minimum of f."""
        m = self.cell_moments()
        axes = tuple(range(self.grid.dimension))
        return {
            "mass": float(np.mean(m["mass"])),
            "momentum": np.mean(m["momentum"], axis=axes),
            "energy": float(np.mean(m["energy"])),
            "min_f": float(np.min(self.values)),
        }


def transport_step(phase, dt):
    """
    Exact periodic advection eps^2 df/dt + eps v.grad f = 0 over dt.

    Each velocity node is shifted by v_j dt / eps through the spatial Fourier
    phase exp(-i k.v_j dt / eps); the Nyquist mode of even axes is left in place.
    """
    grid = phase.grid
    k = grid.nyquist_free()
    shift = np.tensordot(np.moveaxis(k, 0, -1), phase.lattice.nodes.T, axes=1)
    spatial = tuple(range(grid.dimension))
    transformed = fft.fftn(phase.values, axes=spatial, workers=grid.workers) * np.exp(-1j * shift * (dt / phase.eps))
    values = fft.ifftn(transformed, axes=spatial, workers=grid.workers).real
    return phase.with_values(values, dt=dt, steps=1)


def _local_chunk(start, values, dt, tableau, eps, kappa, n_sub, cfl):
    try:
        for _ in range(n_sub):
            values = _advance(values, dt, tableau, eps, kappa, cfl, check_cfl=False)
    except PositivityError as exc:
        raise PositivityError(exc.clipped_fraction, cell=start + (exc.cell or 0)) from exc
    return values


def local_step(phase, dt, tableau, cfl=DEFAULT_CFL, n_jobs=1, chunk=64):
    """
    Collision and drift over dt in every cell, with ceil(dt / dt_max) sub-steps.

    Cells are split in contiguous chunks and advanced in joblib threads;
    a failing cell is reported by its flat index.
    """
    if not math.isclose(tableau.alpha, phase.alpha, rel_tol=0.0, abs_tol=1e-14):
        raise DistributionError(f"tableau at alpha={tableau.alpha}, phase field at alpha={phase.alpha}")
    n = phase.lattice.size
    flat = phase.values.reshape(-1, n)
    kappa = 1.0 - phase.alpha
    limit = max_time_step(flat, tableau, phase.eps, kappa, cfl)
    n_sub = max(1, math.ceil(dt / limit))
    sub_dt = dt / n_sub
    parts = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_local_chunk)(s, flat[s:s + chunk], sub_dt, tableau, phase.eps, kappa, n_sub, cfl)
        for s in range(0, len(flat), chunk)
    )
    return np.concatenate(parts).reshape(phase.values.shape), n_sub


def strang_step(phase, dt, tableau, cfl=DEFAULT_CFL, n_jobs=1, transport=True, collisions=True):
    """
    Half transport, collision and drift over dt in every cell, half transport.

    Args:
        phase (PhaseField): Current state.
        dt (float): Step in the self-similar clock.
        tableau (CollisionTableau): Tableau at phase.alpha.
        cfl (float): Fraction of the local stability limit per sub-step.
        n_jobs (int): Worker threads for the cell loop.
        transport (bool): Disable to run the local part only.
        collisions (bool): Disable to run pure transport.

    Returns:
        PhaseField: Advanced state.
    """
    current = phase
    if transport:
        current = transport_step(current, 0.5 * dt)
    if collisions:
        values, n_sub = local_step(current, dt, tableau, cfl, n_jobs)
        current = current.with_values(values)
        logger.debug("Strang step at t=%.5g used %d local sub-steps", phase.time, n_sub)
    if transport:
        current = transport_step(current, 0.5 * dt)
    return replace(current, time=phase.time + dt, step=phase.step + 1)


@dataclass
class HydroFields:
    """Fluctuation moments per cell; vector fields are stored component first."""

    rho: np.ndarray
    u: np.ndarray
    theta: np.ndarray
    pressure: np.ndarray
    flux_A: np.ndarray
    flux_b: np.ndarray
    time: float = 0.0

    def mean_rho(self):
        return float(np.mean(self.rho))


def hydro_moments(phase, reference, theta1):
    """
    Moments of h = (F - G) / eps in every cell.

    rho = <h>, u = <v h> / theta_1, theta = (<|v|^2 h> - d theta_1 rho) / (d theta_1^2),
    pressure <|v|^2 h> / d and the A- and b-fluxes.
    """
    if phase.eps == 0:
        raise DistributionError("hydrodynamic fluctuations need eps > 0")
    lattice = phase.lattice
    d = lattice.dimension
    h = (phase.values - np.asarray(reference, dtype=float)) / phase.eps
    w = lattice.weight
    rho = w * h.sum(axis=-1)
    u = np.moveaxis(w * h @ lattice.nodes, -1, 0) / theta1
    second = w * h @ lattice.sq_speed
    theta = (second - d * theta1 * rho) / (d * theta1 ** 2)
    A = tensor_A(lattice.nodes).reshape(lattice.size, d * d)
    flux_A = np.moveaxis((w * h @ A).reshape(h.shape[:-1] + (d, d)), (-2, -1), (0, 1))
    flux_b = np.moveaxis(w * h @ vector_b(lattice.nodes, theta1), -1, 0)
    return HydroFields(rho, u, theta, second / d, flux_A, flux_b, time=phase.time)


def boussinesq_residuals(hydro, theta1, grid):
    """RMS of div u and of the mean-corrected rho + theta_1 theta."""
    combined = hydro.rho + theta1 * hydro.theta
    return {
        "incompressibility": grid.rms(grid.divergence(hydro.u)),
        "boussinesq": grid.rms(combined - np.mean(combined)),
    }


def init_well_prepared(lattice, grid, rho0, u0, theta0, eps, alpha, reference, theta1, budget=CLIP_BUDGET):
    """
    F = G + eps h0 with h0 the kernel-form fluctuation of (rho0, u0, theta0).

    Args:
        rho0 (np.ndarray): Density fluctuation of shape grid.shape.
        u0 (np.ndarray): Velocity of shape (d, *grid.shape).
        theta0 (np.ndarray): Temperature fluctuation of shape grid.shape.
        reference (np.ndarray): Cooling state G_alpha.

    Returns:
        PhaseField: The initial state; its meta carries the constraint report.
    """
    shape = grid.shape
    rho0 = np.broadcast_to(np.asarray(rho0, dtype=float), shape)
    theta0 = np.broadcast_to(np.asarray(theta0, dtype=float), shape)
    u0 = np.broadcast_to(np.asarray(u0, dtype=float), (lattice.dimension,) + tuple(shape))
    h0 = kernel_form(lattice, rho0, np.moveaxis(u0, 0, -1), theta0, theta1)
    values = np.asarray(reference, dtype=float) + eps * h0
    flat = values.reshape(-1, lattice.size)
    negative = np.maximum(-flat, 0.0).sum(axis=1)
    fraction = float(np.max(negative / np.maximum(flat, 0.0).sum(axis=1)))
    if fraction > budget:
        raise DistributionError(f"eps={eps} gives negative F with clipped fraction {fraction:.3e} (limit {budget:.1e})")
    if fraction > 0:
        mass = flat.sum(axis=1, keepdims=True)
        clipped = np.maximum(flat, 0.0)
        flat = clipped * mass / clipped.sum(axis=1, keepdims=True)
        values = flat.reshape(values.shape)
    phase = PhaseField(lattice, grid, values, eps, alpha)
    report = {
        **{k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in phase.global_moments().items()},
        "clipped_fraction": fraction,
        "mean_rho": float(np.mean(rho0)),
        "mean_divergence": grid.rms(grid.divergence(u0)),
        "boussinesq": grid.rms(rho0 + theta1 * theta0 - np.mean(rho0 + theta1 * theta0)),
    }
    phase.meta["constraints"] = report
    logger.info("--> Well-prepared data: mass %.12f, |momentum| %.3e, Boussinesq residual %.3e",
                report["mass"], float(np.linalg.norm(report["momentum"])), report["boussinesq"])
    return phase


def taylor_green(grid, amplitude=1.0):
    """Divergence-free u = A (sin x cos y, -cos x sin y[, 0])."""
    x = grid.coordinates()
    u = np.zeros_like(x)
    u[0] = amplitude * np.sin(x[0]) * np.cos(x[1])
    u[1] = -amplitude * np.cos(x[0]) * np.sin(x[1])
    return u


def neutral_perturbation(lattice, theta1):
    """|v|^4 M / theta_1^2 projected off the kernel: no mass, momentum or energy."""
    m = maxwellian(lattice, 1.0, None, theta1)
    raw = (lattice.sq_speed ** 2 / theta1 ** 2) * m
    return raw - kernel_projection_pi0(lattice, raw, theta1)


@dataclass
class RelaxationResult:
    rate: float
    predicted: float
    fit: object
    series: pd.DataFrame

    def summary(self):
        return {"rate": self.rate, "predicted": self.predicted, "relative_gap": abs(self.rate / self.predicted - 1.0)
                if self.predicted > 0 else float("nan"), **self.fit.metrics()}


def relaxation_series(state, tableau, eps, horizon, theta1, amplitude=0.1, samples=60, perturbation=None,
                      cfl=DEFAULT_CFL):
    """
    Homogeneous relaxation of G + eps h towards G, sampled on a uniform time grid.

    Args:
        state (CoolingState): Reference G_alpha with tableau.alpha.
        eps (float): Knudsen number of the run.
        horizon (float): End time.
        theta1 (float): Temperature of the kernel basis.
        amplitude (float): Size of the perturbation.
        perturbation (str): "energy" or "neutral"; default energy when alpha < 1.

    Returns:
        pd.DataFrame: Columns t, distance, min_f, mass, energy.
    """
    lattice = tableau.lattice
    G = state.values
    kind = perturbation or ("energy" if tableau.alpha < 1.0 else "neutral")
    if kind == "energy":
        h = kernel_form(lattice, 0.0, np.zeros(lattice.dimension), amplitude, theta1)
    elif kind == "neutral":
        h = amplitude * neutral_perturbation(lattice, theta1)
    else:
        raise ValueError(f"unknown perturbation {kind!r}")
    f = G + eps * h
    kappa = 1.0 - tableau.alpha
    t = 0.0
    records = []
    logger.info("--- RELAXATION alpha=%.6g eps=%.4g (%s perturbation) ---", tableau.alpha, eps, kind)
    for target in np.linspace(0.0, horizon, samples):
        while t < target - 1e-14:
            dt = min(0.9 * max_time_step(f, tableau, eps, kappa, cfl), target - t)
            f = _advance(f, dt, tableau, eps, kappa, cfl, check_cfl=False)
            t += dt
        f = symmetrize(lattice, f)
        m = velocity_moments(lattice, f)
        records.append({"t": t, "distance": float(l1_norm(lattice, f - G)), "min_f": float(f.min()),
                        "mass": float(m["mass"]), "energy": float(m["energy"])})
    return pd.DataFrame.from_records(records)


def relaxation_experiment(state, tableau, eps, horizon, theta1, amplitude=0.1, samples=60, tail=0.5,
                          perturbation=None, cfl=DEFAULT_CFL):
    """
    Fitted decay rate of ||f - G|| over the trailing part of a relaxation series.

    Args:
        tail (float): Trailing fraction of samples used in the fit.

    Returns:
        RelaxationResult: Rate, predicted (1 - alpha)/eps^2, fit and series.
    """
    series = relaxation_series(state, tableau, eps, horizon, theta1, amplitude, samples, perturbation, cfl)
    kappa = 1.0 - tableau.alpha
    start = int(len(series) * (1.0 - tail))
    window = series.iloc[start:]
    if is_monotone(window["distance"].to_numpy()) != "decreasing":
        raise FitError("relaxation tail is not monotone; exponential fit rejected")
    rate, fit = exponential_rate_fit(window["t"], window["distance"])
    predicted = kappa / eps ** 2
    logger.info("--> Decay rate %.5g (predicted %.5g, R2 %.4f)", rate, predicted, fit.r_squared)
    return RelaxationResult(rate, predicted, fit, series)


def local_temperatures(phase):
    """Temperature of the peculiar velocity, (E - |m|^2 / rho) / (d rho), in every cell."""
    m = velocity_moments(phase.lattice, phase.values)
    bulk = np.sum(m["momentum"] ** 2, axis=-1) / m["mass"]
    return (m["energy"] - bulk) / (phase.lattice.dimension * m["mass"])


def local_haff_fit(taus, temperatures, frame, min_samples=20, min_decades=1.0):
    """
    Per-cell Haff exponents from a self-similar run.

    Self-similar temperatures are mapped to physical ones by T = T_ss / V^2
    at the physical time of each sample.

    Args:
        taus (array-like): Sample times in the self-similar clock.
        temperatures (np.ndarray): Shape (samples, cells).

    Returns:
        np.ndarray: Fitted exponent per cell.
    """
    times, physical = _physical_temperatures(taus, temperatures, frame)
    return np.array([haff_fit(times, physical[:, c], frame.rate, min_samples, min_decades).exponent
                     for c in range(physical.shape[1])])


def local_haff_gap(taus, temperatures, frame, reference):
    """
    Largest relative gap per cell between the mapped self-similar temperatures and a physical run.

    The reference comes from physical_cooling, which integrates eps^2 dF/dt = Q(F, F)
    without drift, so it does not share the clock, the scale or the drift of the
    self-similar run. Reference temperatures are interpolated in log T.

    Args:
        reference (pd.DataFrame): Columns t and temperature.

    Returns:
        np.ndarray: max_t |T_cell(t) / T_ref(t) - 1| per cell.
    """
    times, physical = _physical_temperatures(taus, temperatures, frame)
    t_ref = reference["t"].to_numpy(dtype=float)
    if times.max() > t_ref.max() * (1.0 + 1e-9):
        raise FitError(f"reference run ends at t={t_ref.max():.4g}, samples reach t={times.max():.4g}")
    expected = np.exp(np.interp(times, t_ref, np.log(reference["temperature"].to_numpy(dtype=float))))
    return np.max(np.abs(physical / expected[:, None] - 1.0), axis=0)


def _physical_temperatures(taus, temperatures, frame):
    times = frame.physical_time(np.asarray(taus, dtype=float))
    scale = frame.scale(times)
    return times, np.asarray(temperatures, dtype=float) / scale[:, None] ** 2


def kinetic_run(phase, tableau, reference, theta1, dt, horizon, sample_every=1, n_jobs=1, on_sample=None):
    """
    Strang-split run with periodic sampling of moments and residuals.

    Args:
        on_sample (callable): Called with (phase, HydroFields) at every sample.

    Returns:
        tuple: (final PhaseField, pd.DataFrame series).
    """
    grid = phase.grid
    records = []
    steps = max(1, math.ceil(horizon / dt - 1e-9))
    dt = horizon / steps

    def record(current):
        hydro = hydro_moments(current, reference, theta1)
        g = current.global_moments()
        residuals = boussinesq_residuals(hydro, theta1, grid)
        distance = float(np.mean(l1_norm(current.lattice, current.values - reference)))
        records.append({"t": current.time, "distance": distance, "min_f": g["min_f"], "mass": g["mass"],
                        "momentum": float(np.linalg.norm(g["momentum"])), "energy": g["energy"], **residuals})
        if on_sample is not None:
            on_sample(current, hydro)

    logger.info("--- KINETIC RUN eps=%.4g alpha=%.6g (%d steps of %.4g) ---", phase.eps, phase.alpha, steps, dt)
    record(phase)
    current = phase
    for step in range(1, steps + 1):
        current = strang_step(current, dt, tableau, n_jobs=n_jobs)
        if step % sample_every == 0 or step == steps:
            record(current)
    return current, pd.DataFrame.from_records(records)
