"""Shared constructors for the test modules."""

import numpy as np

from skeld import grid as G
from skeld.grid import ControlField, SpectralBasis
from skeld.skeleton import SolverConfig, solve_skeleton


def band_limited_control(grid, T, seed, K=8, intervals=10, amplitude=2.0):
    """Piecewise-constant control with random coefficients on the first K modes."""
    rs = np.random.default_rng(seed)
    basis = SpectralBasis(grid, K)
    coeffs = amplitude * rs.standard_normal((intervals, K))
    return ControlField(grid, np.linspace(0.0, T, intervals + 1), values=basis.synthesize(coeffs))


def cosine_bump(grid, mean=1.0, amplitude=0.5):
    return mean + amplitude * np.prod([np.cos(2 * np.pi * x) for x in grid.centers], axis=0)


def gradient_form_trajectory(spec, grid, rho0, T=0.02, N=40, sweeps=8):
    """Trajectory driven by g = sigma_up(rho) grad H, found by fixed-point iteration on the path."""
    times = np.linspace(0.0, T, N + 1)
    cfg = SolverConfig(dt=T / N)
    x = grid.centers[0]
    gH = G.grad(0.3 * np.sin(2 * np.pi * x) + 0.1 * np.cos(4 * np.pi * x), grid)
    fields = [rho0] * (N + 1)
    for _ in range(sweeps):
        vals = np.stack([G.upwind_values(spec.sqrt_phi(f), gH, grid) * gH for f in fields[:-1]])
        g = ControlField(grid, times, values=vals)
        tr = solve_skeleton(spec, grid, rho0, g, T, cfg)
        fields = tr.fields
    return tr, g

# criterion number -> PASS/FAIL line, gathered for the terminal summary
ACCEPTANCE = {}
