import json
import logging
from pathlib import Path

import joblib
import numpy as np
import pandas as pd

from src.collision import TABLEAU_VERSION, build_tableau
from src.errors import DistributionError

logger = logging.getLogger(__name__)


def load_series(filepath):
    """
    Loads a time series from a CSV file.

    Args:
        filepath (Path): Path to the CSV file.

    Returns:
        pd.DataFrame: Loaded series.
    """
    logger.debug("... Loading series from: %s", filepath)
    return pd.read_csv(filepath)


def save_series(df, filepath):
    """
    Saves a time series to CSV without the index.

    Args:
        df (pd.DataFrame): Series to save.
        filepath (Path): Destination path.
    """
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(filepath, index=False)
    logger.info("--> Success: Series saved to: %s", filepath)
    return filepath


def _to_builtin(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    if isinstance(value, complex):
        return [value.real, value.imag]
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def save_report(payload, filepath):
    """Writes a JSON report with sorted keys."""
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    filepath.write_text(json.dumps(payload, sort_keys=True, indent=2, default=_to_builtin) + "\n", encoding="utf-8")
    logger.info("--> Success: Report saved to: %s", filepath)
    return filepath


def load_report(filepath):
    return json.loads(Path(filepath).read_text(encoding="utf-8"))


def save_snapshot(stem, fields, meta):
    """
    Writes one little-endian float64 raw file per field plus a JSON sidecar.

    Args:
        stem (Path): Output stem; files are <stem>.<field>.f8 and <stem>.json.
        fields (dict): Name to array.
        meta (dict): Grid metadata, eps, alpha, step, time.

    Returns:
        Path: The sidecar path.
    """
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name, values in fields.items():
        values = np.ascontiguousarray(values, dtype="<f8")
        values.tofile(stem.parent / f"{stem.name}.{name}.f8")
        shapes[name] = list(values.shape)
    sidecar = stem.parent / f"{stem.name}.json"
    save_report({**meta, "fields": shapes}, sidecar)
    return sidecar


def load_snapshot(stem):
    """Reads a snapshot written by save_snapshot; returns (fields, meta)."""
    stem = Path(stem)
    meta = load_report(stem.parent / f"{stem.name}.json")
    fields = {}
    for name, shape in meta["fields"].items():
        raw = np.fromfile(stem.parent / f"{stem.name}.{name}.f8", dtype="<f8")
        if raw.size != int(np.prod(shape)):
            raise DistributionError(f"snapshot field {name!r} has {raw.size} values, sidecar says {shape}")
        fields[name] = raw.reshape(shape)
    return fields, meta


def tableau_path(cache_dir, lattice, quadrature, alpha):
    d, N, R = lattice.dimension, lattice.nodes_per_axis, lattice.extent
    return Path(cache_dir) / f"tableau_d{d}_N{N}_R{R:.6g}_M{quadrature.count}_a{alpha:.10g}.joblib"


def save_tableau(tableau, filepath):
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    joblib.dump(tableau, filepath)
    logger.info("--> Tableau saved to: %s", filepath)


def load_tableau(filepath):
    """Loads a cached tableau, or None when it is missing or from another format version."""
    filepath = Path(filepath)
    if not filepath.exists():
        return None
    tableau = joblib.load(filepath)
    if getattr(tableau, "version", None) != TABLEAU_VERSION:
        logger.warning("Cached tableau %s has format version %s, expected %s; rebuilding",
                       filepath, getattr(tableau, "version", None), TABLEAU_VERSION)
        return None
    return tableau


def cached_tableau(lattice, quadrature, alpha, cache_dir=None):
    """Tableau for (lattice, quadrature, alpha), built once per cache directory."""
    if cache_dir is None:
        return build_tableau(lattice, quadrature, alpha)
    path = tableau_path(cache_dir, lattice, quadrature, alpha)
    tableau = load_tableau(path)
    if tableau is None:
        tableau = build_tableau(lattice, quadrature, alpha)
        save_tableau(tableau, path)
    else:
        logger.debug("Loaded cached tableau from %s", path)
    return tableau


def generate_synthetic_cooling(n_samples=40, rate=2.0, prefactor=5.0, exponent=-2.0, noise=0.0, horizon=10.0):
    """
    Synthetic cooling series T = prefactor * V^exponent with V = 1 + rate t.

    Args:
        n_samples (int): Number of rows to generate.
        rate (float): Cooling rate c in V = 1 + c t.
        noise (float): Relative log-normal noise level.

    Returns:
        pd.DataFrame: Columns t, V, temperature.
    """
    rng = np.random.default_rng(42)
    t = np.linspace(0.0, horizon, n_samples)
    scale = 1.0 + rate * t
    temperature = prefactor * scale ** exponent
    if noise > 0:
        temperature = temperature * np.exp(rng.normal(0.0, noise, n_samples))
    return pd.DataFrame({"t": t, "V": scale, "temperature": temperature})
