"""Exception hierarchy shared by every module of the toolkit."""


class GranularError(Exception):
    """Base class for all errors raised by granular-hydro."""


class LatticeError(GranularError, ValueError):
    """Invalid velocity lattice parameters."""


class QuadratureError(GranularError, ValueError):
    """Invalid sphere quadrature request."""


class DistributionError(GranularError, ValueError):
    """Non-finite, negative or mismatched distribution values."""


class CollisionError(GranularError, ValueError):
    """Invalid collision inputs or tableau mismatch."""


class CFLError(GranularError):
    """Requested time step exceeds the stability limit."""

    def __init__(self, dt, dt_max, what="time step"):
        self.dt = dt
        self.dt_max = dt_max
        super().__init__(f"{what} dt={dt:.3e} exceeds stability limit {dt_max:.3e}")


class PositivityError(GranularError):
    """Clipped negative mass exceeded the per-step budget."""

    def __init__(self, clipped_fraction, cell=None):
        self.clipped_fraction = clipped_fraction
        self.cell = cell
        where = "" if cell is None else f" in cell {cell}"
        super().__init__(f"clipped mass fraction {clipped_fraction:.3e}{where} exceeds budget")


class ConvergenceError(GranularError):
    """An iteration did not reach its tolerance."""


class SpectrumError(GranularError):
    """Eigen-decomposition failed or returned an unexpected structure."""


class TransportError(GranularError):
    """Transport coefficient computation failed a consistency check."""


class FitError(GranularError, ValueError):
    """Degenerate or rejected regression input."""


class NSFError(GranularError):
    """Fluid solver blow-up or broken invariant."""


class ConfigError(GranularError, ValueError):
    """Invalid run configuration, with the key path and source line if known."""

    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        location = ""
        if key is not None:
            location += f" [{key}]"
        if line is not None:
            location += f" (line {line})"
        super().__init__(f"{message}{location}")
