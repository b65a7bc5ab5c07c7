import logging
from dataclasses import dataclass

import numpy as np
import statsmodels.api as sm

from src.errors import FitError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LineFit:
    """Ordinary least squares line y = intercept + slope x with its quality."""

    slope: float
    intercept: float
    r_squared: float
    samples: int
    slope_stderr: float

    def metrics(self):
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "r2": self.r_squared,
            "samples": self.samples,
            "slope_stderr": self.slope_stderr,
        }


def _clean(x, y, min_samples):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise FitError(f"need two 1-D series of equal length, got {x.shape} and {y.shape}")
    if len(x) < min_samples:
        raise FitError(f"need at least {min_samples} samples, got {len(x)}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise FitError("series contains non-finite values")
    if np.ptp(x) == 0:
        raise FitError("abscissa is constant")
    return x, y


def fit_line(x, y, min_samples=2):
    """
    Fits y = intercept + slope x with statsmodels OLS.

    Args:
        x (array-like): Abscissa.
        y (array-like): Ordinate.
        min_samples (int): Minimum number of points.

    Returns:
        LineFit: Slope, intercept and R^2.
    """
    x, y = _clean(x, y, min_samples)
    results = sm.OLS(y, sm.add_constant(x, has_constant="add")).fit()
    intercept, slope = results.params
    stderr = float(results.bse[1]) if len(x) > 2 else float("nan")
    r2 = float(results.rsquared) if np.ptp(y) > 0 else 1.0
    return LineFit(float(slope), float(intercept), r2, len(x), stderr)


def loglog_fit(x, y, min_samples=2):
    """Power law y = C x^p fitted as a line in log-log coordinates."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x <= 0) or np.any(y <= 0):
        raise FitError("log-log fit needs strictly positive data")
    return fit_line(np.log(x), np.log(y), min_samples)


def exponential_rate_fit(t, y, min_samples=3):
    """Decay rate of y ~ A exp(-rate t); returns (rate, LineFit)."""
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise FitError("exponential fit needs strictly positive data")
    fit = fit_line(t, np.log(y), min_samples)
    return -fit.slope, fit


def polynomial_extrapolation(x, y, degree=None):
    """
    Richardson-type extrapolation of y(x) to x = 0 by a least-squares polynomial.

    Args:
        x (array-like): Abscissae, e.g. 1 - alpha.
        y (array-like): Samples.
        degree (int): Polynomial degree, default min(len(x) - 1, 2).

    Returns:
        float: Value of the fitted polynomial at x = 0.
    """
    x, y = _clean(x, y, 2)
    if degree is None:
        degree = min(len(x) - 1, 2)
    if degree >= len(x):
        raise FitError(f"degree {degree} needs more than {len(x)} samples")
    design = np.vander(x, degree + 1, increasing=True)
    results = sm.OLS(y, design).fit()
    return float(results.params[0])


def is_monotone(values, rtol=0.0):
    """Direction of a sequence: 'increasing', 'decreasing' or None when it is neither."""
    values = np.asarray(values, dtype=float)
    steps = np.diff(values)
    slack = rtol * np.max(np.abs(values)) if len(values) else 0.0
    if np.all(steps >= -slack):
        return "increasing"
    if np.all(steps <= slack):
        return "decreasing"
    return None
