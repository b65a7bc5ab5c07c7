"""Run configuration: YAML sections with documented defaults and strict validation."""

import copy
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import yaml

from src.errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULTS = {
    "run": {
        "name": "desk",
        "dimension": 2,
        "seed": 42,
        "out": "runs",
        "cache_dir": "cache",
        "threads": 1,
    },
    "lattice": {
        "nodes": 17,
        # R = extent_factor * sqrt(theta_1)
        "extent_factor": 8.0,
        "directions": 16,
    },
    "space": {
        "cells": 16,
    },
    "physics": {
        "lambda0": 0.5,
        "alphas": [0.999, 0.995, 0.99, 0.95],
    },
    "solver": {
        "tol": 1e-6,
        "cfl": 0.5,
        "max_steps": 200000,
        "radius": 0.2,
        "eigensolver": "auto",
        "temperature_scaling": False,
    },
    "haff": {
        "alpha": 0.98,
        "eps": 0.1,
        "horizon": 4.5,
        "samples": 40,
        "local": True,
        "local_cells": 8,
        "local_dt": 0.02,
        "local_amplitude": 0.5,
    },
    "relax": {
        "eps": 0.1,
        "lambdas": [0.25, 0.5],
        "horizon": 6.0,
        "amplitude": 0.1,
        "samples": 60,
        "tail": 0.5,
        "elastic": True,
    },
    "sweep": {
        "eps": [0.2, 0.1, 0.05],
        "horizon": 1.0,
        "dt": 0.01,
        "sample_every": 5,
        "amplitude": 0.5,
        "theta_amplitude": 0.0,
        "classical": True,
        "snapshots": True,
    },
    "nsf": {
        "cells": 32,
        "dt": 0.005,
        "horizon": 1.0,
        "initial": ["taylor-green", "mode"],
        "amplitude": 0.5,
        "transport_report": "",
    },
    "thresholds": {
        "energy_gap": 0.02,
        "theta1_gap": 0.15,
        "trend_slope": 0.2,
        "kappa_rel": 0.1,
        "mu_ratio": 0.1,
        "correction_exponent": 1.5,
        "angle_deg": 10.0,
        "two_formula": 0.01,
        "pattern": 0.03,
        "closure": 0.05,
        "haff_exponent": 0.1,
        "haff_prefactor": 0.1,
        "local_haff": 0.15,
        "local_haff_reference": 0.05,
        "relax_rate": 0.3,
        "nsf_mode": 1e-6,
        "nsf_taylor_green": 1e-4,
        "divergence": 1e-10,
    },
}

_POSITIVE = {
    ("solver", "tol"), ("solver", "cfl"), ("solver", "radius"), ("solver", "max_steps"),
    ("lattice", "extent_factor"), ("haff", "eps"), ("haff", "horizon"), ("haff", "local_dt"),
    ("relax", "eps"), ("relax", "horizon"), ("relax", "tail"), ("sweep", "horizon"), ("sweep", "dt"),
    ("sweep", "sample_every"), ("nsf", "dt"), ("nsf", "horizon"), ("run", "threads"),
}
_EIGENSOLVERS = {"auto", "dense", "arnoldi"}
_NSF_INITIAL = {"taylor-green", "mode"}


def _line_marks(text):
    """Maps 'section' and 'section.key' to 1-based YAML source lines."""
    marks = {}
    root = yaml.compose(text)
    if not isinstance(root, yaml.MappingNode):
        return marks
    for key_node, value_node in root.value:
        section = key_node.value
        marks[section] = key_node.start_mark.line + 1
        if isinstance(value_node, yaml.MappingNode):
            for sub_key, _ in value_node.value:
                marks[f"{section}.{sub_key.value}"] = sub_key.start_mark.line + 1
    return marks


def _coerce(default, value):
    """PyYAML reads exponent floats without a dot, such as 1e-6, as strings."""
    if isinstance(default, float) and isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    if isinstance(default, list) and default and isinstance(value, list):
        return [_coerce(default[0], item) for item in value]
    return value


def _matches(default, value):
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        if not isinstance(value, list):
            return False
        return all(_matches(default[0], item) for item in value) if default else True
    return False


@dataclass
class RunConfig:
    """Resolved configuration; each section is a flat mapping."""

    run: dict
    lattice: dict
    space: dict
    physics: dict
    solver: dict
    haff: dict
    relax: dict
    sweep: dict
    nsf: dict
    thresholds: dict
    source: str = ""

    def to_dict(self):
        return {name: copy.deepcopy(getattr(self, name)) for name in DEFAULTS}

    def config_hash(self):
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_overrides(self, **sections):
        data = self.to_dict()
        for section, values in sections.items():
            data[section].update({k: v for k, v in values.items() if v is not None})
        resolved = RunConfig(**data, source=self.source)
        validate(resolved)
        return resolved

    @property
    def out_dir(self):
        return Path(self.run["out"])


def validate(cfg, marks=None):
    """Semantic checks; raises ConfigError naming the key and its line."""
    marks = marks or {}

    def fail(message, section, key):
        path = f"{section}.{key}"
        raise ConfigError(message, key=path, line=marks.get(path, marks.get(section)))

    for section, key in sorted(_POSITIVE):
        if getattr(cfg, section)[key] <= 0:
            fail("must be positive", section, key)
    for key, value in cfg.thresholds.items():
        if value <= 0:
            fail("tolerances must be positive", "thresholds", key)
    if cfg.run["dimension"] not in (2, 3):
        fail("dimension must be 2 or 3", "run", "dimension")
    nodes = cfg.lattice["nodes"]
    if nodes < 9 or nodes % 2 == 0:
        fail(f"nodes must be odd and at least 9, got {nodes}", "lattice", "nodes")
    directions = cfg.lattice["directions"]
    if directions < 8 or directions % 2:
        fail(f"directions must be even and at least 8, got {directions}", "lattice", "directions")
    if cfg.space["cells"] < 4:
        fail("need at least 4 cells per axis", "space", "cells")
    if cfg.nsf["cells"] < 8:
        fail("need at least 8 cells per axis", "nsf", "cells")
    if cfg.physics["lambda0"] < 0:
        fail("lambda0 must be non-negative", "physics", "lambda0")
    alphas = cfg.physics["alphas"]
    if not alphas or any(not 0.8 <= a <= 1.0 for a in alphas):
        fail("alphas must be a non-empty list in [0.8, 1]", "physics", "alphas")
    if not 0.8 <= cfg.haff["alpha"] < 1.0:
        fail("haff alpha must lie in [0.8, 1)", "haff", "alpha")
    eps = cfg.sweep["eps"]
    if not eps:
        fail("eps list is empty", "sweep", "eps")
    if any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
        fail(f"eps list must be positive and strictly decreasing, got {eps}", "sweep", "eps")
    lambdas = cfg.relax["lambdas"]
    if not lambdas or any(x <= 0 for x in lambdas):
        fail("lambdas must be a non-empty list of positive values", "relax", "lambdas")
    if not 0 < cfg.relax["tail"] <= 1:
        fail("tail must lie in (0, 1]", "relax", "tail")
    if cfg.solver["eigensolver"] not in _EIGENSOLVERS:
        fail(f"eigensolver must be one of {sorted(_EIGENSOLVERS)}", "solver", "eigensolver")
    unknown = set(cfg.nsf["initial"]) - _NSF_INITIAL
    if unknown or not cfg.nsf["initial"]:
        fail(f"initial must list entries of {sorted(_NSF_INITIAL)}", "nsf", "initial")
    return cfg


def parse_config(text, source="<string>"):
    """
    Parses YAML text over the defaults.

    Args:
        text (str): YAML document; sections and keys not given keep their defaults.
        source (str): Name used in diagnostics.

    Returns:
        RunConfig: Validated configuration.
    """
    try:
        data = yaml.safe_load(text) or {}
        marks = _line_marks(text) if text.strip() else {}
    except yaml.YAMLError as exc:
        line = exc.problem_mark.line + 1 if getattr(exc, "problem_mark", None) else None
        raise ConfigError(f"{source}: invalid YAML: {exc}", line=line) from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping of sections", line=1)

    resolved = copy.deepcopy(DEFAULTS)
    for section, values in data.items():
        if section not in DEFAULTS:
            raise ConfigError(f"{source}: unknown section", key=str(section), line=marks.get(section))
        if values is None:
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"{source}: section must be a mapping", key=section, line=marks.get(section))
        for key, value in values.items():
            path = f"{section}.{key}"
            if key not in DEFAULTS[section]:
                raise ConfigError(f"{source}: unknown key", key=path, line=marks.get(path))
            default = DEFAULTS[section][key]
            value = _coerce(default, value)
            if not _matches(default, value):
                raise ConfigError(f"{source}: expected {type(default).__name__}, got {value!r}",
                                  key=path, line=marks.get(path))
            if isinstance(default, float):
                value = [float(v) for v in value] if isinstance(value, list) else float(value)
            resolved[section][key] = value
    cfg = RunConfig(**resolved, source=source)
    return validate(cfg, marks)


def load_config(path=None):
    """Loads and validates a YAML config file; None gives the defaults."""
    if path is None:
        return parse_config("", source="<defaults>")
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cfg = parse_config(path.read_text(encoding="utf-8"), source=str(path))
    logger.info("--> Loaded config %s (hash %s)", path, cfg.config_hash()[:12])
    return cfg
