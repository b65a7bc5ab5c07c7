from pathlib import Path

import pytest

from src.config import DEFAULTS, load_config, parse_config
from src.errors import ConfigError

CONFIGS = Path(__file__).parent / "configs"


def test_defaults_are_valid():
    cfg = load_config()
    assert cfg.to_dict() == DEFAULTS
    assert cfg.source == "<defaults>"


@pytest.mark.parametrize("name", ["desk.yaml", "acceptance_3d.yaml"])
def test_shipped_configs_load(name):
    cfg = load_config(CONFIGS / name)
    assert cfg.solver["tol"] == pytest.approx(1e-6)
    assert cfg.run["dimension"] in (2, 3)


def test_partial_sections_keep_defaults():
    cfg = parse_config("lattice:\n  nodes: 21\n")
    assert cfg.lattice["nodes"] == 21
    assert cfg.lattice["directions"] == DEFAULTS["lattice"]["directions"]
    assert cfg.sweep == DEFAULTS["sweep"]


def test_unknown_key_names_its_line():
    with pytest.raises(ConfigError) as info:
        parse_config("run:\n  dimension: 2\n  colour: red\n")
    assert info.value.key == "run.colour"
    assert info.value.line == 3
    assert "line 3" in str(info.value)


def test_unknown_section_is_rejected():
    with pytest.raises(ConfigError) as info:
        parse_config("plots:\n  style: dark\n")
    assert info.value.key == "plots"
    assert info.value.line == 1


@pytest.mark.parametrize("text, key", [
    ("sweep:\n  eps: []\n", "sweep.eps"),
    ("sweep:\n  eps: [0.1, 0.2]\n", "sweep.eps"),
    ("sweep:\n  eps: [0.1, 0.1]\n", "sweep.eps"),
    ("lattice:\n  nodes: 16\n", "lattice.nodes"),
    ("run:\n  dimension: 4\n", "run.dimension"),
    ("solver:\n  tol: -1.0\n", "solver.tol"),
    ("solver:\n  eigensolver: qr\n", "solver.eigensolver"),
    ("physics:\n  alphas: [0.5]\n", "physics.alphas"),
    ("haff:\n  alpha: 1.0\n", "haff.alpha"),
    ("nsf:\n  initial: [vortex]\n", "nsf.initial"),
])
def test_invalid_values_are_rejected(text, key):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.key == key


@pytest.mark.parametrize("text", ["lattice:\n  nodes: nine\n", "run:\n  threads: 2.5\n", "haff:\n  local: 1\n"])
def test_wrong_types_are_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_exponent_floats_without_dot_are_coerced():
    cfg = parse_config("solver:\n  tol: 1e-8\nsweep:\n  eps: [2e-1, 1e-1]\n")
    assert cfg.solver["tol"] == 1e-8
    assert cfg.sweep["eps"] == [0.2, 0.1]


def test_integers_are_accepted_for_float_keys():
    cfg = parse_config("physics:\n  lambda0: 1\n")
    assert isinstance(cfg.physics["lambda0"], float)


def test_invalid_yaml_and_missing_files(tmp_path):
    with pytest.raises(ConfigError):
        parse_config("run: [unclosed\n")
    with pytest.raises(ConfigError):
        parse_config("- just\n- a list\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")


def test_config_hash_tracks_content():
    a, b = parse_config(""), parse_config("# comment only\n")
    assert a.config_hash() == b.config_hash()
    assert parse_config("physics:\n  lambda0: 0.25\n").config_hash() != a.config_hash()


def test_overrides_skip_none_and_revalidate():
    cfg = load_config()
    changed = cfg.with_overrides(run={"threads": 8, "out": None})
    assert changed.run["threads"] == 8
    assert changed.run["out"] == cfg.run["out"]
    assert cfg.run["threads"] == 1
    with pytest.raises(ConfigError):
        cfg.with_overrides(run={"threads": 0})
