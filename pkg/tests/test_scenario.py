import json

import numpy as np
import pytest

from skeld.errors import ConfigError
from skeld.grid import Grid
from skeld.io import write_field_csv
from skeld.scenario import OUTPUT_ENV, Scenario


def test_defaults_fill_every_section():
    sc = Scenario({})
    assert sc["experiment"] == "solve-skeleton"
    assert sc["grid"] == {"d": 1, "n": 128}
    assert sc["solver"]["dt"] == 1e-4
    assert sc.build_control() is None
    assert sc.initial().shape == (128,)


@pytest.mark.parametrize("doc,key", [
    ({"bogus": 1}, "bogus"),
    ({"solver": {"dtt": 1e-3}}, "solver.dtt"),
    ({"target": {"profile": {"shape": "x"}}}, "target.profile.shape"),
])
def test_unknown_keys_are_named(doc, key):
    with pytest.raises(ConfigError) as info:
        Scenario(doc)
    assert info.value.key == key


@pytest.mark.parametrize("doc,key", [
    ({"T": "soon"}, "T"),
    ({"grid": {"n": 64.0}}, "grid.n"),
    ({"seed": True}, "seed"),
    ({"experiment": "fly"}, "experiment"),
    ({"grid": {"n": 48}}, "grid.n"),
    ({"solver": {"dt": -1.0}}, "solver.dt"),
    ({"noise": {"eta": 1.0}}, "noise.eta"),
    ({"nonlinearity": {"m": 0.5}}, "nonlinearity.m"),
    ({"sweep": {"K_list": [4, 2]}}, "sweep.K_list"),
    ({"assumptions": {"sample_count": 512}}, "assumptions.sample_count"),
    ({"initial": {"amplitude": 2.0}}, "initial"),
    ({"control": {"kind": "spectral"}}, "control.coefficients"),
    ({"control": {"kind": "spectral", "K": 2, "coefficients": [[1.0, 2.0, 3.0]]}}, "control.coefficients"),
])
def test_invalid_values_name_the_key(doc, key):
    with pytest.raises(ConfigError) as info:
        Scenario(doc)
    assert info.value.key == key


def test_spectral_control_from_coefficients():
    sc = Scenario({"T": 0.1, "grid": {"n": 32},
                   "control": {"kind": "spectral", "K": 2, "coefficients": [[1.0, 0.0], [0.0, 1.0]]}})
    g = sc.build_control()
    np.testing.assert_allclose(g.times, [0.0, 0.05, 0.1])
    np.testing.assert_array_equal(g.coeffs, [[1.0, 0.0], [0.0, 1.0]])


def test_random_control_is_seeded():
    doc = {"grid": {"n": 32}, "control": {"kind": "random-spectral", "K": 3}}
    a = Scenario(dict(doc, seed=5)).build_control()
    b = Scenario(dict(doc, seed=5)).build_control()
    c = Scenario(dict(doc, seed=6)).build_control()
    np.testing.assert_array_equal(a.coeffs, b.coeffs)
    assert not np.array_equal(a.coeffs, c.coeffs)


def test_profiles():
    sc = Scenario({"grid": {"d": 2, "n": 16}, "initial": {"profile": "two-bump"}})
    rho = sc.initial()
    assert rho.shape == (16, 16) and rho.min() >= 0.1
    const = Scenario({"initial": {"profile": "constant", "value": 0.3}}).initial()
    np.testing.assert_array_equal(const, 0.3)


def test_file_profile_is_relative_to_the_scenario(tmp_path):
    grid = Grid(1, 16)
    write_field_csv(tmp_path / "rho.csv", np.linspace(0.5, 1.5, 16), grid)
    cfg = tmp_path / "sc.json"
    cfg.write_text(json.dumps({"grid": {"n": 16}, "initial": {"profile": "file", "path": "rho.csv"}}))
    np.testing.assert_allclose(Scenario.load(cfg).initial(), np.linspace(0.5, 1.5, 16))
    cfg.write_text(json.dumps({"grid": {"n": 32}, "initial": {"profile": "file", "path": "rho.csv"}}))
    with pytest.raises(ConfigError) as info:
        Scenario.load(cfg)
    assert info.value.key == "initial.path"


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        Scenario.load(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        Scenario.load(tmp_path / "bad.json")


def test_output_dir_precedence(tmp_path, monkeypatch):
    sc = Scenario({"output_dir": "runs/x"}, base_dir=tmp_path)
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    assert sc.output_dir() == tmp_path / "runs/x"
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert sc.output_dir() == tmp_path / "env"
    assert sc.output_dir(tmp_path / "cli") == tmp_path / "cli"
