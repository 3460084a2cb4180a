"""Scenario documents: a strict JSON schema with defaults for every knob.

A scenario plus its seed fully determines a run.  Unknown keys, wrong
types and out-of-range values raise :class:`ConfigError` naming the
offending key (dotted path).
"""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvalidNonlinearity
from .grid import ControlField, Grid, SpectralBasis
from .io import read_field_csv, read_spectral_control_csv
from .nonlinearity import NonlinearitySpec
from .skeleton import SolverConfig

EXPERIMENTS = ("solve-skeleton", "simulate-spde", "evaluate-rate", "minimize-action", "gamma-sweep",
               "check-assumptions", "ldp-mc", "criticality-scan")
OUTPUT_ENV = "SKELD_OUTPUT_DIR"

NUM = (int, float)
_ANY_LIST = list

_INITIAL = {
    "profile": ("cosine-bump", str, ("constant", "cosine-bump", "two-bump", "file")),
    "value": (1.0, NUM, None),
    "mean": (1.0, NUM, None),
    "amplitude": (0.5, NUM, None),
    "mode": (1, int, None),
    "centers": ([0.25, 0.75], _ANY_LIST, None),
    "width": (0.05, NUM, None),
    "height": (1.0, NUM, None),
    "background": (0.1, NUM, None),
    "path": (None, str, None),
}

SCHEMA = {
    "experiment": ("solve-skeleton", str, EXPERIMENTS),
    "seed": (0, int, None),
    "output_dir": ("runs/out", str, None),
    "T": (0.05, NUM, None),
    "nonlinearity": {
        "kind": ("power", str, ("power", "table")),
        "m": (1.0, NUM, None),
        "points": (None, _ANY_LIST, None),
    },
    "grid": {
        "d": (1, int, (1, 2)),
        "n": (128, int, None),
    },
    "initial": _INITIAL,
    "control": {
        "kind": ("zero", str, ("zero", "spectral", "random-spectral", "file")),
        "K": (4, int, None),
        "intervals": (10, int, None),
        "amplitude": (1.0, NUM, None),
        "coefficients": (None, _ANY_LIST, None),
        "times": (None, _ANY_LIST, None),
        "path": (None, str, None),
    },
    "solver": {
        "dt": (1e-4, NUM, None),
        "cfl_factor": (0.5, NUM, None),
        "newton_tol": (1e-10, NUM, None),
        "newton_max_iter": (50, int, None),
        "viscosity": (0.0, NUM, None),
        "flux_regularization": (0.0, NUM, None),
        "diffusion_regularization": (0.0, NUM, None),
        "snapshot_stride": (1, int, None),
        "max_halvings": (10, int, None),
    },
    "noise": {
        "K": (4, int, None),
        "epsilon": (0.01, NUM, None),
        "epsilons": (None, _ANY_LIST, None),
        "eta": (0.1, NUM, None),
        "replicas": (64, int, None),
    },
    "optimizer": {
        "mu": ([1e2, 1e3, 1e4], _ANY_LIST, None),
        "max_iter": (200, int, None),
        "gtol": (1e-8, NUM, None),
        "ftol": (1e-12, NUM, None),
        "memory": (10, int, None),
        "max_linesearch": (20, int, None),
        "feasibility_tol": (1e-3, NUM, None),
        "n_steps": (20, int, None),
        "K": (None, int, None),
        "eta": (0.0, NUM, None),
        "starts": (4, int, None),
    },
    "target": {
        "kind": ("deterministic", str, ("deterministic", "perturbed", "profile", "file")),
        "amplitude": (0.05, NUM, None),
        "mode": (1, int, None),
        "path": (None, str, None),
        "profile": _INITIAL,
    },
    "ldp": {
        "epsilons": ([0.008, 0.004, 0.002], _ANY_LIST, None),
        "replicas": (10000, int, None),
        "delta": (0.1, NUM, None),
        "common_random_numbers": (True, bool, None),
    },
    "sweep": {
        "K_list": ([2, 4, 8, 16], _ANY_LIST, None),
    },
    "assumptions": {
        "M": (10.0, NUM, None),
        "delta_grid": ([0.5, 0.2, 0.1, 0.05, 0.02, 0.01], _ANY_LIST, None),
        "sample_count": (4096, int, None),
    },
    "criticality": {
        "m_list": ([1.0, 2.0], _ANY_LIST, None),
        "d_list": ([1, 2], _ANY_LIST, None),
        "pqr": ([[2, 2, 1], [2, 2, 2]], _ANY_LIST, None),
        "etas": ([0.5, 0.25, 0.125], _ANY_LIST, None),
        "n": (256, int, None),
    },
    "output": {
        "snapshot_stride": (0, int, None),
    },
}


def _is_type(value, typ):
    if typ is NUM:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if typ is int:
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, typ)


def _merge(schema, doc, path):
    if not isinstance(doc, dict):
        raise ConfigError(path or "<root>", "expected an object")
    unknown = sorted(set(doc) - set(schema))
    if unknown:
        key = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(key, "unknown key")
    out = {}
    for key, spec in schema.items():
        where = f"{path}.{key}" if path else key
        if isinstance(spec, dict):
            out[key] = _merge(spec, doc.get(key, {}), where)
            continue
        default, typ, choices = spec
        value = doc.get(key, copy.deepcopy(default))
        if value is None:
            if default is not None:
                raise ConfigError(where, "must not be null")
        elif not _is_type(value, typ):
            raise ConfigError(where, f"expected {getattr(typ, '__name__', 'number')}, got {type(value).__name__}")
        if choices is not None and value not in choices:
            raise ConfigError(where, f"must be one of {list(choices)}")
        if typ is NUM and value is not None:
            value = float(value)
        out[key] = value
    return out


def _positive(cfg, *keys):
    for key in keys:
        node = cfg
        parts = key.split(".")
        for p in parts:
            node = node[p]
        if node is not None and not node > 0:
            raise ConfigError(key, "must be positive")


class Scenario:
    """Validated scenario with helpers that build the library objects."""

    def __init__(self, doc, base_dir="."):
        self.base_dir = Path(base_dir)
        self.cfg = _merge(SCHEMA, doc, "")
        self._validate()

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError("<file>", f"{path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON: {exc}") from None
        return cls(doc, path.parent)

    def __getitem__(self, key):
        return self.cfg[key]

    def to_dict(self):
        return copy.deepcopy(self.cfg)

    # -- validation -----------------------------------------------------
    def _validate(self):
        c = self.cfg
        _positive(c, "T", "grid.n", "solver.dt", "noise.K", "noise.replicas", "optimizer.n_steps",
                  "optimizer.max_iter", "ldp.replicas", "ldp.delta", "control.K", "control.intervals",
                  "criticality.n", "assumptions.M", "assumptions.sample_count")
        if c["assumptions"]["sample_count"] < 1000:
            raise ConfigError("assumptions.sample_count", "must be at least 1000")
        try:
            self.grid()
        except ValueError as exc:
            raise ConfigError("grid.n", str(exc)) from None
        if not 0 <= c["seed"] < 2**64:
            raise ConfigError("seed", "must be a 64-bit unsigned integer")
        if c["nonlinearity"]["kind"] == "power" and c["nonlinearity"]["m"] < 1.0:
            raise ConfigError("nonlinearity.m", "must be >= 1")
        if c["nonlinearity"]["kind"] == "table" and not c["nonlinearity"]["points"]:
            raise ConfigError("nonlinearity.points", "tabulated nonlinearity needs sample points")
        try:
            self.nonlinearity()
        except (InvalidNonlinearity, ValueError, TypeError) as exc:
            raise ConfigError("nonlinearity", str(exc)) from None
        try:
            self.solver_config()
        except ValueError as exc:
            raise ConfigError("solver", str(exc)) from None
        if not 0 <= c["noise"]["eta"] < 1:
            raise ConfigError("noise.eta", "must lie in [0, 1)")
        if c["noise"]["epsilon"] < 0:
            raise ConfigError("noise.epsilon", "must be >= 0")
        for key in ("noise.epsilons", "ldp.epsilons"):
            sec, name = key.split(".")
            vals = c[sec][name]
            if vals is not None and (not vals or any(not _is_type(v, NUM) or v < 0 for v in vals)):
                raise ConfigError(key, "must be a nonempty list of nonnegative numbers")
        ks = c["sweep"]["K_list"]
        if not ks or any(not _is_type(k, int) or k < 1 for k in ks) or any(b <= a for a, b in zip(ks, ks[1:])):
            raise ConfigError("sweep.K_list", "must be an increasing list of positive integers")
        if any(not _is_type(m, NUM) or m <= 0 for m in c["optimizer"]["mu"]):
            raise ConfigError("optimizer.mu", "must be a list of positive numbers")
        rho0 = self._profile(c["initial"], "initial")
        if np.any(rho0 < 0) or not np.all(np.isfinite(rho0)):
            raise ConfigError("initial", "initial density must be finite and nonnegative")
        self.build_control()

    # -- builders -------------------------------------------------------
    def nonlinearity(self):
        c = self.cfg["nonlinearity"]
        if c["kind"] == "power":
            return NonlinearitySpec.power(c["m"])
        return NonlinearitySpec.table([tuple(map(float, p)) for p in c["points"]])

    def grid(self):
        return Grid(self.cfg["grid"]["d"], self.cfg["grid"]["n"])

    def solver_config(self):
        return SolverConfig(**self.cfg["solver"])

    def _resolve(self, p):
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    def _profile(self, c, key, grid=None):
        grid = grid or self.grid()
        coords = grid.centers
        if c["profile"] == "constant":
            return np.full(grid.shape, c["value"])
        if c["profile"] == "cosine-bump":
            return c["mean"] + c["amplitude"] * np.prod([np.cos(2 * np.pi * c["mode"] * x) for x in coords], axis=0)
        if c["profile"] == "two-bump":
            out = np.full(grid.shape, c["background"])
            for centre in c["centers"]:
                ctr = np.broadcast_to(np.asarray(centre, dtype=float), (grid.d,))
                r2 = sum(_periodic_dist(x, ctr[a]) ** 2 for a, x in enumerate(coords))
                out = out + c["height"] * np.exp(-r2 / (2 * c["width"] ** 2))
            return out
        if c["path"] is None:
            raise ConfigError(f"{key}.path", "file profile needs a path")
        try:
            values, _, _ = read_field_csv(self._resolve(c["path"]), grid)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"{key}.path", str(exc)) from None
        return values

    def initial(self):
        return self._profile(self.cfg["initial"], "initial")

    def target_profile(self):
        return self._profile(self.cfg["target"]["profile"], "target.profile")

    def build_control(self):
        c, T, grid = self.cfg["control"], self.cfg["T"], self.grid()
        if c["kind"] == "zero":
            return None
        if c["kind"] == "file":
            if c["path"] is None:
                raise ConfigError("control.path", "file control needs a path")
            try:
                return read_spectral_control_csv(self._resolve(c["path"]), grid)
            except (OSError, ValueError) as exc:
                raise ConfigError("control.path", str(exc)) from None
        try:
            basis = SpectralBasis(grid, c["K"])
        except ValueError as exc:
            raise ConfigError("control.K", str(exc)) from None
        if c["kind"] == "random-spectral":
            rs = np.random.default_rng(self.cfg["seed"])
            coeffs = c["amplitude"] * rs.standard_normal((c["intervals"], c["K"]))
            times = np.linspace(0.0, T, c["intervals"] + 1)
        else:
            if c["coefficients"] is None:
                raise ConfigError("control.coefficients", "spectral control needs coefficients")
            coeffs = np.asarray(c["coefficients"], dtype=float)
            if coeffs.ndim != 2 or coeffs.shape[1] != c["K"]:
                raise ConfigError("control.coefficients", f"expected rows of length K={c['K']}")
            times = (np.linspace(0.0, T, coeffs.shape[0] + 1) if c["times"] is None
                     else np.asarray(c["times"], dtype=float))
        try:
            return ControlField(grid, times, coeffs=coeffs, basis=basis)
        except ValueError as exc:
            raise ConfigError("control", str(exc)) from None

    def output_dir(self, override=None):
        if override:
            return Path(override)
        env = os.environ.get(OUTPUT_ENV)
        return Path(env) if env else self._resolve(self.cfg["output_dir"])


def _periodic_dist(x, c):
    d = np.abs(x - c) % 1.0
    return np.minimum(d, 1.0 - d)
