"""Subcommand orchestration: each run_* builds what it needs, writes artifacts and records checks."""

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import pandas as pd

from src import __version__, nsf
from src.collision import RestitutionLaw, collision_report
from src.data_loader import cached_tableau, load_report, save_report, save_series, save_snapshot
from src.fitting import is_monotone, loglog_fit
from src.gaussian import theta1_closed_form
from src.homogeneous import (
    SelfSimilarFrame,
    cooling_state,
    haff_fit,
    lattice_theta1,
    physical_cooling,
    theta1_estimate,
)
from src.kinetic import (
    SpectralGrid,
    init_well_prepared,
    kinetic_run,
    local_haff_fit,
    local_haff_gap,
    local_temperatures,
    relaxation_experiment,
    relaxation_series,
    taylor_green,
)
from src.lattice import build_lattice, build_sphere_quadrature, l1_norm, maxwellian
from src.spectrum import (
    CERTIFICATE_TOLERANCE,
    assemble_linearized,
    energy_eigenfunction,
    spectrum_near_zero,
    weighted_asymmetry,
)
from src.transport import TransportReport, compute_transport_report, nonlinear_closures, temperature_scaling

logger = logging.getLogger(__name__)


@dataclass
class Outcome:
    """Report, acceptance checks and artifact paths of one subcommand."""

    command: str
    report: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    artifacts: list = field(default_factory=list)

    def check(self, name, value, limit, passed):
        passed = bool(passed)
        self.checks.append({"name": name, "value": value, "limit": limit, "passed": passed})
        if passed:
            logger.info("--> Check %s passed: %s (limit %s)", name, value, limit)
        else:
            logger.warning("Check %s FAILED: %s (limit %s)", name, value, limit)

    @property
    def passed(self):
        return all(c["passed"] for c in self.checks)

    @property
    def failures(self):
        return [c["name"] for c in self.checks if not c["passed"]]

    def to_dict(self, cfg):
        return {
            "command": self.command,
            "config_hash": cfg.config_hash(),
            "code_version": __version__,
            "passed": self.passed,
            "failures": self.failures,
            "checks": self.checks,
            "report": self.report,
            "artifacts": [str(a) for a in self.artifacts],
        }


class Workspace:
    """Shared lattice, tableaux, cooling states and transport report of one configuration."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.out_dir = Path(cfg.run["out"])
        self.cache_dir = Path(cfg.run["cache_dir"]) if cfg.run["cache_dir"] else None
        self.threads = cfg.run["threads"]
        self._tableaux = {}
        self._states = {}
        self._transport = None

    @cached_property
    def lattice(self):
        d = self.cfg.run["dimension"]
        extent = self.cfg.lattice["extent_factor"] * math.sqrt(theta1_closed_form(d))
        return build_lattice(d, self.cfg.lattice["nodes"], extent)

    @cached_property
    def quadrature(self):
        return build_sphere_quadrature(self.cfg.run["dimension"], self.cfg.lattice["directions"])

    @cached_property
    def theta1(self):
        value = lattice_theta1(self.lattice)
        logger.info("--> Lattice theta_1 = %.6g (closed form %.6g)", value, theta1_closed_form(self.lattice.dimension))
        return value

    def path(self, command, name):
        return self.out_dir / command / name

    def tableau(self, alpha):
        if alpha not in self._tableaux:
            tableau = cached_tableau(self.lattice, self.quadrature, alpha, self.cache_dir)
            tableau.n_jobs = self.threads
            self._tableaux[alpha] = tableau
        return self._tableaux[alpha]

    def cooling_state(self, alpha):
        if alpha not in self._states:
            solver = self.cfg.solver
            self._states[alpha] = cooling_state(self.tableau(alpha), tol=solver["tol"], cfl=solver["cfl"],
                                                max_steps=solver["max_steps"])
        return self._states[alpha]

    def transport_report(self):
        """Configured report file, else this run's transport output, else a fresh computation."""
        if self._transport is not None:
            return self._transport
        candidates = [Path(p) for p in (self.cfg.nsf["transport_report"],) if p]
        candidates.append(self.path("transport", "transport_report.json"))
        for candidate in candidates:
            if candidate.exists():
                self._transport = TransportReport.from_dict(load_report(candidate))
                logger.info("--> Using transport report %s", candidate)
                return self._transport
        report, _, _ = compute_transport_report(self.tableau(1.0), self.theta1)
        save_report(report.to_dict(), self.path("transport", "transport_report.json"))
        self._transport = report
        return report

    def finish(self, outcome):
        path = self.path(outcome.command, "report.json")
        save_report(outcome.to_dict(self.cfg), path)
        return outcome


def run_cooling_state(cfg, ws=None):
    """Cooling states over the configured alphas, the theta_1 extrapolation and the distance trend."""
    ws = ws or Workspace(cfg)
    out = Outcome("cooling-state")
    th = cfg.thresholds
    lattice, theta1 = ws.lattice, ws.theta1
    reference = maxwellian(lattice, 1.0, None, theta1)
    rows = []
    for alpha in sorted(cfg.physics["alphas"], reverse=True):
        state = ws.cooling_state(alpha)
        distance = float(l1_norm(lattice, state.values - reference, weighted=True))
        rows.append({**{k: v for k, v in state.summary().items() if k != "lattice"}, "distance": distance})
        stem = ws.path("cooling-state", f"G_alpha{alpha:g}")
        out.artifacts.append(save_snapshot(stem, {"G": state.values},
                                           {**state.summary(), "theta1": theta1, "kind": "cooling-state"}))
    table = pd.DataFrame.from_records(rows)
    out.artifacts.append(save_series(table, ws.path("cooling-state", "cooling_states.csv")))
    out.report["lattice_theta1"] = theta1
    out.report["states"] = rows

    inelastic = table[table["alpha"] < 1.0]
    if len(inelastic):
        alpha = float(inelastic["alpha"].iloc[0])
        m = maxwellian(lattice, 1.0, None, theta1)
        dissipation = collision_report(m, m, ws.tableau(alpha))
        out.report["dissipation"] = dissipation
        out.check("dissipation_identity", dissipation["energy_gap"], th["energy_gap"],
                  dissipation["energy_gap"] <= th["energy_gap"])
    if len(inelastic) >= 3:
        estimate = theta1_estimate(list(zip(inelastic["alpha"], inelastic["temperature"])),
                                   closed_form=theta1_closed_form(lattice.dimension))
        out.report["theta1_estimate"] = estimate.summary()
        out.check("theta1_closed_form_gap", estimate.relative_gap, th["theta1_gap"],
                  estimate.relative_gap <= th["theta1_gap"])
    if len(inelastic) >= 2:
        fit = loglog_fit(1.0 - inelastic["alpha"].to_numpy(), inelastic["distance"].to_numpy())
        out.report["distance_trend"] = fit.metrics()
        out.check("distance_trend_slope", fit.slope, [1 - th["trend_slope"], 1 + th["trend_slope"]],
                  abs(fit.slope - 1.0) <= th["trend_slope"])
    return ws.finish(out)


def run_spectrum(cfg, ws=None):
    """Spectra near zero over the configured alphas with count, mode and eigenfunction checks."""
    ws = ws or Workspace(cfg)
    out = Outcome("spectrum")
    th = cfg.thresholds
    d = ws.lattice.dimension
    method = cfg.solver["eigensolver"]
    matrix_free = method == "arnoldi" or (method == "auto" and d == 3)
    reports = {}
    entries = []
    for alpha in sorted(cfg.physics["alphas"], reverse=True):
        L = assemble_linearized(ws.cooling_state(alpha), ws.tableau(alpha), matrix_free=matrix_free)
        report = spectrum_near_zero(L, cfg.solver["radius"], method="arnoldi" if matrix_free else "dense",
                                    seed=cfg.run["seed"])
        reports[alpha] = report
        entries.append(report.to_dict())
        out.check(f"count[{alpha:g}]", report.count, report.expected_count, report.count_ok)
        out.check(f"certified[{alpha:g}]", float(np.max(report.residuals, initial=0.0)), CERTIFICATE_TOLERANCE,
                  bool(np.all(report.certified)))
        if alpha < 1.0 and report.count_ok:
            kappa = 1.0 - alpha
            momentum = report.eigenvalues[report.modes("momentum")].real
            worst = float(np.max(np.abs(momentum / kappa - 1.0)))
            out.check(f"momentum_modes[{alpha:g}]", worst, th["kappa_rel"], worst <= th["kappa_rel"])
            ratio = report.mu_alpha / kappa
            out.check(f"mu_ratio[{alpha:g}]", ratio, [1 - th["mu_ratio"], 1 + th["mu_ratio"]],
                      abs(ratio - 1.0) <= th["mu_ratio"])
    out.report["spectra"] = entries
    out.artifacts.append(save_report(entries, ws.path("spectrum", "spectra.json")))
    if not matrix_free:
        elastic = assemble_linearized(maxwellian(ws.lattice, 1.0, None, ws.theta1), ws.tableau(1.0), alpha=1.0)
        out.report["elastic_weighted_asymmetry"] = weighted_asymmetry(elastic, ws.theta1)

    usable = {a: r for a, r in reports.items() if a < 1.0 and "energy" in r.labels}
    if usable:
        alpha = min(usable, key=lambda a: abs(a - 0.99))
        phi, angle = energy_eigenfunction(usable[alpha], ws.theta1)
        out.artifacts.append(save_snapshot(ws.path("spectrum", f"phi_alpha{alpha:g}"), {"phi": phi},
                                           {"alpha": alpha, "angle_deg": angle, "kind": "energy-eigenfunction"}))
        out.check(f"eigenfunction_angle[{alpha:g}]", angle, th["angle_deg"], angle <= th["angle_deg"])
    if len(usable) >= 3:
        ordered = sorted(usable, reverse=True)
        x = np.array([1.0 - a for a in ordered])
        mu = np.array([usable[a].mu_alpha for a in ordered])
        trend = is_monotone(mu)
        out.check("mu_monotone", trend, "increasing", trend == "increasing")
        correction = np.abs(mu - x)
        if np.all(correction > 0):
            fit = loglog_fit(x, correction)
            out.report["mu_correction"] = fit.metrics()
            out.check("mu_correction_exponent", fit.slope, th["correction_exponent"],
                      fit.slope >= th["correction_exponent"])
    return ws.finish(out)


def run_transport(cfg, ws=None):
    """Transport report, its consistency certificates and the nonlinear closures."""
    ws = ws or Workspace(cfg)
    out = Outcome("transport")
    th = cfg.thresholds
    tableau = ws.tableau(1.0)
    report, solution, coefficients = compute_transport_report(tableau, ws.theta1)
    ws._transport = report
    out.artifacts.append(save_report(report.to_dict(), ws.path("transport", "transport_report.json")))
    out.report["transport"] = report.to_dict()
    out.report["radiality"] = solution.radiality()
    out.report["growth_constants"] = solution.growth_constants()
    out.report["psi_gram"] = coefficients.psi_gram

    out.check("nu_two_formula", coefficients.nu_gap, th["two_formula"], coefficients.nu_gap <= th["two_formula"])
    out.check("gamma_two_formula", coefficients.gamma_gap, th["two_formula"],
              coefficients.gamma_gap <= th["two_formula"])
    out.check("nu_index_pattern", coefficients.nu_pattern_error, th["pattern"],
              coefficients.nu_pattern_error <= th["pattern"])
    out.check("gamma_index_pattern", coefficients.gamma_pattern_error, th["pattern"],
              coefficients.gamma_pattern_error <= th["pattern"])

    d = ws.lattice.dimension
    u = np.zeros(d)
    u[0] = 0.1
    tensor = nonlinear_closures(0.0, u, 0.0, solution, tableau)
    vector = nonlinear_closures(0.0, u, 0.05, solution, tableau)
    out.report["closures"] = {"tensor": tensor.to_dict(), "vector": vector.to_dict()}
    out.check("tensor_closure", tensor.tensor_gap, th["closure"], tensor.tensor_gap <= th["closure"])
    out.check("vector_closure", vector.vector_gap, th["closure"], vector.vector_gap <= th["closure"])
    if cfg.solver["temperature_scaling"]:
        out.report["temperature_scaling"] = temperature_scaling(tableau, ws.theta1)
    return ws.finish(out)


def run_haff(cfg, ws=None):
    """Physical-variable Haff fit and, optionally, per-cell exponents of an inhomogeneous run."""
    ws = ws or Workspace(cfg)
    out = Outcome("haff")
    th, haff = cfg.thresholds, cfg.haff
    lattice, theta1 = ws.lattice, ws.theta1
    d = lattice.dimension
    alpha, eps = haff["alpha"], haff["eps"]
    tableau = ws.tableau(alpha)
    rate = (1.0 - alpha) / eps ** 2

    series = physical_cooling(maxwellian(lattice, 1.0, None, theta1), tableau, eps, haff["horizon"],
                              samples=haff["samples"], cfl=cfg.solver["cfl"])
    out.artifacts.append(save_series(series, ws.path("haff", "physical_cooling.csv")))
    fit = haff_fit(series["t"], series["energy"], rate)
    out.report["global"] = fit.summary()
    out.check("haff_exponent", fit.exponent, [-2 - th["haff_exponent"], -2 + th["haff_exponent"]],
              abs(fit.exponent + 2.0) <= th["haff_exponent"])
    prefactor_gap = abs(fit.prefactor / (d * theta1) - 1.0)
    out.check("haff_prefactor", prefactor_gap, th["haff_prefactor"], prefactor_gap <= th["haff_prefactor"])

    if haff["local"]:
        grid = SpectralGrid((haff["local_cells"],) * d, workers=ws.threads)
        state = ws.cooling_state(alpha)
        phase = init_well_prepared(lattice, grid, 0.0, taylor_green(grid, haff["local_amplitude"]), 0.0, eps,
                                   alpha, state.values, theta1)
        frame = SelfSimilarFrame(eps, rate)
        tau_end = float(frame.clock(haff["horizon"]))
        taus, temperatures = [], []

        def on_sample(current, _):
            taus.append(current.time)
            temperatures.append(np.ravel(local_temperatures(current)))

        steps = math.ceil(tau_end / haff["local_dt"])
        kinetic_run(phase, tableau, state.values, theta1, haff["local_dt"], tau_end,
                    sample_every=max(1, steps // haff["samples"]), n_jobs=ws.threads, on_sample=on_sample)
        temperatures = np.array(temperatures)
        exponents = local_haff_fit(taus, temperatures, frame)
        reference = physical_cooling(state.values, tableau, eps, float(frame.physical_time(taus[-1])),
                                     samples=4 * haff["samples"], cfl=cfg.solver["cfl"])
        out.artifacts.append(save_series(reference, ws.path("haff", "state_cooling.csv")))
        gaps = local_haff_gap(taus, temperatures, frame, reference)
        out.artifacts.append(save_series(pd.DataFrame({"cell": np.arange(len(exponents)), "exponent": exponents,
                                                       "reference_gap": gaps}),
                                         ws.path("haff", "local_exponents.csv")))
        worst = float(np.max(np.abs(exponents + 2.0)))
        worst_gap = float(gaps.max())
        out.report["local"] = {"min": float(exponents.min()), "max": float(exponents.max()), "worst_gap": worst,
                               "reference_gap": worst_gap}
        out.check("local_haff_exponent", worst, th["local_haff"], worst <= th["local_haff"])
        out.check("local_haff_reference", worst_gap, th["local_haff_reference"],
                  worst_gap <= th["local_haff_reference"])
    return ws.finish(out)


def run_relax(cfg, ws=None):
    """Decay rates of homogeneous relaxation for each lambda0 and their ratio."""
    ws = ws or Workspace(cfg)
    out = Outcome("relax")
    th, relax = cfg.thresholds, cfg.relax
    eps = relax["eps"]
    rates = {}
    for lambda0 in sorted(relax["lambdas"]):
        alpha = RestitutionLaw(lambda0).alpha(eps)
        result = relaxation_experiment(ws.cooling_state(alpha), ws.tableau(alpha), eps, relax["horizon"], ws.theta1,
                                       amplitude=relax["amplitude"], samples=relax["samples"], tail=relax["tail"],
                                       cfl=cfg.solver["cfl"])
        out.artifacts.append(save_series(result.series, ws.path("relax", f"relax_lambda{lambda0:g}.csv")))
        rates[lambda0] = result.rate
        gap = abs(result.rate / lambda0 - 1.0)
        out.report[f"lambda{lambda0:g}"] = {"alpha": alpha, **result.summary()}
        out.check(f"rate[{lambda0:g}]", gap, th["relax_rate"], gap <= th["relax_rate"])
    if len(rates) >= 2:
        low, high = min(rates), max(rates)
        ratio_gap = abs((rates[high] / rates[low]) / (high / low) - 1.0)
        out.check("rate_ratio", ratio_gap, th["relax_rate"], ratio_gap <= th["relax_rate"])
    if relax["elastic"]:
        series = relaxation_series(ws.cooling_state(1.0), ws.tableau(1.0), eps, relax["horizon"], ws.theta1,
                                   amplitude=relax["amplitude"], samples=relax["samples"], perturbation="neutral",
                                   cfl=cfg.solver["cfl"])
        out.artifacts.append(save_series(series, ws.path("relax", "relax_elastic.csv")))
        ratio = float(series["distance"].iloc[-1] / series["distance"].iloc[0])
        out.check("elastic_plateau", ratio, 0.1, ratio <= 0.1)
    return ws.finish(out)


def _sweep_case(cfg, ws, label, lambda0, grid, u0, theta0):
    sweep = cfg.sweep
    theta1 = ws.theta1
    transport = ws.transport_report()
    rho0 = -theta1 * theta0
    fluid = nsf.FluidState.from_fields(grid, nsf.NSFParameters.from_transport_report(transport, lambda0), u0, theta0)
    references = []
    _, nsf_series = nsf.run_nsf(fluid, sweep["dt"], sweep["horizon"], sweep["sample_every"],
                            on_sample=lambda s: references.append((s.rho(), s.u(), s.theta())))
    artifacts = [save_series(nsf_series, ws.path("sweep", f"{label}_nsf.csv"))]

    rows = []
    for eps in sweep["eps"]:
        law = RestitutionLaw(lambda0)
        alpha = law.alpha(eps)
        state = ws.cooling_state(alpha)
        phase = init_well_prepared(ws.lattice, grid, rho0, u0, theta0, eps, alpha, state.values, theta1)
        discrepancies = []

        def on_sample(current, hydro):
            rho, u, theta = references[len(discrepancies)]
            squared = (hydro.rho - rho) ** 2 + np.sum((hydro.u - u) ** 2, axis=0) + (hydro.theta - theta) ** 2
            discrepancies.append(float(np.sqrt(np.mean(squared))))

        final, series = kinetic_run(phase, ws.tableau(alpha), state.values, theta1, sweep["dt"], sweep["horizon"],
                                    sample_every=sweep["sample_every"], n_jobs=ws.threads, on_sample=on_sample)
        series["discrepancy"] = discrepancies
        series["physical_time"] = SelfSimilarFrame.from_law(law, eps).physical_time(series["t"].to_numpy())
        csv = save_series(series, ws.path("sweep", f"{label}_eps{eps:g}.csv"))
        artifacts.append(csv)
        if sweep["snapshots"]:
            artifacts.append(save_snapshot(ws.path("sweep", f"{label}_eps{eps:g}_final"), {"f": final.values},
                                           {"eps": eps, "alpha": alpha, "step": final.step, "time": final.time,
                                            "grid": list(grid.shape), "lattice": ws.lattice.describe()}))
        rows.append({
            "eps": eps,
            "alpha": alpha,
            "discrepancy": float(np.mean(discrepancies)),
            "boussinesq": float(series["boussinesq"].mean()),
            "incompressibility": float(series["incompressibility"].mean()),
            "series": str(csv),
        })
    return rows, artifacts


def run_sweep(cfg, ws=None):
    """Kinetic moments against the fluid limit over the eps list, forced and optionally classical."""
    ws = ws or Workspace(cfg)
    out = Outcome("sweep")
    sweep = cfg.sweep
    d = ws.lattice.dimension
    grid = SpectralGrid((cfg.space["cells"],) * d, workers=ws.threads)
    u0 = taylor_green(grid, sweep["amplitude"])
    theta0 = sweep["theta_amplitude"] * np.cos(grid.coordinates()[0])
    lambda0 = cfg.physics["lambda0"]
    cases = [("forced", lambda0)]
    if sweep["classical"] and lambda0 > 0:
        cases.append(("classical", 0.0))
    for label, value in cases:
        rows, artifacts = _sweep_case(cfg, ws, label, value, grid, u0, theta0)
        out.artifacts.extend(artifacts)
        table = pd.DataFrame.from_records(rows)
        out.artifacts.append(save_series(table, ws.path("sweep", f"{label}_summary.csv")))
        out.report[label] = rows
        if len(rows) >= 2:
            discrepancy = table["discrepancy"].to_numpy()
            boussinesq = table["boussinesq"].to_numpy()
            out.check(f"{label}_discrepancy_decreasing", discrepancy.tolist(), "strictly decreasing",
                      np.all(np.diff(discrepancy) < 0))
            out.check(f"{label}_boussinesq_decreasing", boussinesq.tolist(), "strictly decreasing",
                      np.all(np.diff(boussinesq) < 0))
            if np.all(discrepancy > 0):
                out.report[f"{label}_order"] = loglog_fit(table["eps"], discrepancy).metrics()
    return ws.finish(out)


def run_nsf(cfg, ws=None):
    """Fluid solver alone against its exact Taylor-Green and single-mode solutions."""
    ws = ws or Workspace(cfg)
    out = Outcome("nsf")
    th, settings = cfg.thresholds, cfg.nsf
    transport = ws.transport_report()
    params = nsf.NSFParameters.from_transport_report(transport, cfg.physics["lambda0"])
    d = transport.dimension
    grid = SpectralGrid((settings["cells"],) * d, workers=ws.threads)
    x = grid.coordinates()
    horizon, amplitude = settings["horizon"], settings["amplitude"]
    out.report["parameters"] = {"viscosity": params.viscosity, "diffusivity": params.diffusivity,
                                "theta_forcing": params.theta_forcing, "lambda0": params.lambda0}
    for initial in settings["initial"]:
        if initial == "taylor-green":
            start = nsf.FluidState.from_fields(grid, params, taylor_green(grid, amplitude), 0.0)
        else:
            u0 = np.zeros_like(x)
            u0[1] = amplitude * np.sin(x[0])
            start = nsf.FluidState.from_fields(grid, params, u0, amplitude * np.cos(x[0]))
        final, series = nsf.run_nsf(start, settings["dt"], horizon)
        out.artifacts.append(save_series(series, ws.path("nsf", f"{initial}.csv")))
        out.check(f"{initial}_divergence", float(series["divergence"].max()), th["divergence"],
                  series["divergence"].max() <= th["divergence"])
        out.check(f"{initial}_theta_mean", float(series["theta_mean"].max()), th["divergence"],
                  series["theta_mean"].max() <= th["divergence"])
        if initial == "taylor-green":
            expected = math.exp(2.0 * (params.lambda0 - 2.0 * params.viscosity) * final.time)
            gap = abs(final.kinetic_energy() / start.kinetic_energy() / expected - 1.0)
            out.check("taylor_green_decay", gap, th["nsf_taylor_green"], gap <= th["nsf_taylor_green"])
        else:
            mode = (1,) + (0,) * (d - 1)
            theta_rate = params.theta_forcing - params.diffusivity
            velocity_rate = params.lambda0 - params.viscosity
            theta_gap = abs(abs(final.theta_hat[mode] / start.theta_hat[mode]) / math.exp(theta_rate * final.time) - 1)
            u_gap = abs(abs(final.u_hat[1][mode] / start.u_hat[1][mode]) / math.exp(velocity_rate * final.time) - 1)
            out.check("theta_mode_rate", theta_gap, th["nsf_mode"], theta_gap <= th["nsf_mode"])
            out.check("velocity_mode_rate", u_gap, th["nsf_mode"], u_gap <= th["nsf_mode"])
    return ws.finish(out)


COMMANDS = {
    "cooling-state": run_cooling_state,
    "spectrum": run_spectrum,
    "transport": run_transport,
    "haff": run_haff,
    "relax": run_relax,
    "sweep": run_sweep,
    "nsf": run_nsf,
}
