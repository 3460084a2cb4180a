"""CSV formats: field snapshots, spectral controls, diagnostics."""

from __future__ import annotations

import csv
import re
from pathlib import Path

import numpy as np

from .errors import GridMismatch
from .grid import ControlField, Grid, SpectralBasis

_FIELD_MAGIC = re.compile(r"#\s*SKELD v1 d=(\d+) n=(\d+) t=(\S+)\s*$")
_CONTROL_MAGIC = re.compile(r"#\s*SKELD-CONTROL v1 d=(\d+) n=(\d+) K=(\d+) T=(\S+)\s*$")


def _fmt(x):
    return repr(float(x))


def write_field_csv(path, values, grid, t=0.0):
    """One row per cell (indices, value) in row-major order after a ``# SKELD v1`` line."""
    values = np.asarray(values, dtype=float)
    if values.shape != grid.shape:
        raise GridMismatch(f"field shape {values.shape} does not match grid {grid.shape}")
    with open(path, "w", newline="") as fh:
        fh.write(f"# SKELD v1 d={grid.d} n={grid.n} t={_fmt(t)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "value"] if grid.d == 1 else ["i", "j", "value"])
        for idx in np.ndindex(*grid.shape):
            w.writerow([*idx, _fmt(values[idx])])


def read_field_csv(path, grid=None):
    """Returns ``(values, grid, t)``; checks the grid if one is given."""
    with open(path, newline="") as fh:
        first = fh.readline()
        m = _FIELD_MAGIC.match(first.strip())
        if not m:
            raise ValueError(f"{path}: missing '# SKELD v1 d=.. n=.. t=..' header")
        d, n, t = int(m.group(1)), int(m.group(2)), float(m.group(3))
        file_grid = Grid(d, n)
        if grid is not None and grid != file_grid:
            raise GridMismatch(f"{path}: file grid d={d} n={n} differs from {grid}")
        rows = list(csv.reader(fh))
    values = np.full(file_grid.shape, np.nan)
    for row in rows[1:]:
        if not row:
            continue
        idx = tuple(int(v) for v in row[:d])
        values[idx] = float(row[d])
    if np.any(np.isnan(values)):
        raise ValueError(f"{path}: incomplete field ({int(np.isnan(values).sum())} cells missing)")
    return values, file_grid, t


def write_spectral_control_csv(path, g):
    if not g.is_spectral:
        raise ValueError("control is not in spectral form; use project_PK first")
    with open(path, "w", newline="") as fh:
        fh.write(f"# SKELD-CONTROL v1 d={g.grid.d} n={g.grid.n} K={g.basis.K} T={_fmt(g.T)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "k", "coefficient"])
        for j, t in enumerate(g.times[:-1]):
            for k in range(g.basis.K):
                w.writerow([_fmt(t), k + 1, _fmt(g.coeffs[j, k])])


def read_spectral_control_csv(path, grid=None):
    with open(path, newline="") as fh:
        m = _CONTROL_MAGIC.match(fh.readline().strip())
        if not m:
            raise ValueError(f"{path}: missing '# SKELD-CONTROL v1' header")
        d, n, K, T = int(m.group(1)), int(m.group(2)), int(m.group(3)), float(m.group(4))
        rows = list(csv.reader(fh))[1:]
    file_grid = Grid(d, n)
    if grid is not None and grid != file_grid:
        raise GridMismatch(f"{path}: file grid d={d} n={n} differs from {grid}")
    starts = sorted({float(r[0]) for r in rows if r})
    coeffs = np.zeros((len(starts), K))
    pos = {t: i for i, t in enumerate(starts)}
    for r in rows:
        if r:
            coeffs[pos[float(r[0])], int(r[1]) - 1] = float(r[2])
    times = np.array(starts + [T])
    return ControlField(file_grid, times, coeffs=coeffs, basis=SpectralBasis(file_grid, K))


def write_diagnostics_csv(path, traj):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "mass", "entropy", "dissipation_cum", "control_energy_cum", "dt"])
        for row in traj.diagnostics_rows():
            w.writerow([_fmt(v) for v in row])


def read_diagnostics_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]} if rows else {}


def write_snapshots(directory, traj, stride=1):
    """Field CSVs for every ``stride``-th stored node (the last node is always written)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    picks = list(range(0, len(traj.fields), stride))
    if picks[-1] != len(traj.fields) - 1:
        picks.append(len(traj.fields) - 1)
    paths = []
    for i in picks:
        node = traj.field_index[i]
        p = directory / f"field_{node:07d}.csv"
        write_field_csv(p, traj.fields[i], traj.grid, traj.times[node])
        paths.append(p)
    return paths


def write_xy_csv(path, xs, ys, names=("x", "y")):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(names))
        for a, b in zip(xs, ys):
            w.writerow([_fmt(a), _fmt(b)])
