"""Inelastic granular Boltzmann toolkit: cooling states, spectra, transport and the fluid limit."""

__version__ = "0.3.0"
