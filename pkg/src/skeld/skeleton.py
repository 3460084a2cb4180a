"""IMEX finite-volume solver for the controlled skeleton equation.

    d/dt rho = Lap(Phi(rho)) - div(Phi^(1/2)(rho) g)

Each step solves ``rho' - dt Lap(D(rho')) = rho - dt div(F)`` where
``D = Phi^{eta1} + eta2 id`` is treated implicitly by Newton's method and
the flux ``F = sigma(rho) g`` (sigma = Phi^(1/2) or its regularisation)
is explicit and upwinded.  Both terms are in conservation form, so the
discrete mass is preserved to round-off.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_banded
from scipy.sparse.linalg import splu

from . import grid as G
from .errors import GridMismatch, NewtonFailure, NonnegativityFailure, NumericalFailure
from .nonlinearity import (RegularizationParams, RegularizedSqrtPhi, TabulatedSqrtPhi, defect_coeff,
                           entropy_field)

log = logging.getLogger(__name__)

NEG_TOL = 1e-12


@dataclass(frozen=True)
class SolverConfig:
    dt: float = 1e-4
    cfl_factor: float = 0.5
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    viscosity: float = 0.0                  # eta2
    flux_regularization: float = 0.0        # eta3, 0 = bare Phi^(1/2)
    diffusion_regularization: float = 0.0   # eta1, 0 = bare Phi
    snapshot_stride: int = 1
    max_halvings: int = 10

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0 < self.cfl_factor <= 1:
            raise ValueError("cfl_factor must lie in (0, 1]")
        for name in ("viscosity", "flux_regularization", "diffusion_regularization"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.snapshot_stride < 1:
            raise ValueError("snapshot_stride must be >= 1")


@lru_cache(maxsize=64)
def regularized_table(spec, eta):
    """Spline table of Phi^(1/2, eta), shared between solves."""
    return TabulatedSqrtPhi(RegularizedSqrtPhi(spec, RegularizationParams(eta)))


class Model:
    """Discrete operators for one (Phi, grid, config) triple."""

    def __init__(self, spec, grid, config, flux_eta=None):
        self.spec = spec
        self.grid = grid
        self.config = config
        eta3 = config.flux_regularization if flux_eta is None else flux_eta
        self.flux_eta = eta3
        self._flux_reg = regularized_table(spec, eta3) if eta3 > 0 else None
        eta1 = config.diffusion_regularization
        self._diff_reg = regularized_table(spec, eta1) if eta1 > 0 else None
        self._lu_cache = {}

    # -- scalar functions --------------------------------------------------
    def sigma(self, rho):
        if self._flux_reg is not None:
            return self._flux_reg.value(np.maximum(rho, 0.0))
        return self.spec.sqrt_phi(rho)

    def dsigma(self, rho):
        if self._flux_reg is not None:
            return self._flux_reg.deriv(np.maximum(rho, 0.0))
        return self.spec.dsqrt_phi(rho)

    def diffusion(self, rho):
        if self._diff_reg is not None:
            s = self._diff_reg.value(np.maximum(rho, 0.0))
            out = s * s
        else:
            out = self.spec.phi(rho)
        return out + self.config.viscosity * rho

    def ddiffusion(self, rho):
        if self._diff_reg is not None:
            r = np.maximum(rho, 0.0)
            out = 2.0 * self._diff_reg.value(r) * self._diff_reg.deriv(r)
        else:
            out = self.spec.dphi(rho)
        return out + self.config.viscosity

    @property
    def linear_diffusion(self):
        return self._diff_reg is None and self.spec.is_linear

    # -- implicit diffusion ----------------------------------------------
    @cached_property
    def laplacian_matrix(self):
        n, d, h = self.grid.n, self.grid.d, self.grid.h
        one = sp.diags([np.ones(n - 1), -2.0 * np.ones(n), np.ones(n - 1)], [-1, 0, 1], format="lil")
        one[0, n - 1] = 1.0
        one[n - 1, 0] = 1.0
        one = one.tocsr() / h**2
        if d == 1:
            return one
        eye = sp.identity(n, format="csr")
        return (sp.kron(one, eye) + sp.kron(eye, one)).tocsr()

    def jacobian_solve(self, coeff, dt, rhs, transpose=False):
        """Solve (I - dt Lap diag(coeff)) x = rhs (or its transpose); rhs may be (N,) or (N, k)."""
        if self.grid.d == 1:
            return _cyclic_tridiag_solve(coeff, dt / self.grid.h**2, rhs, transpose)
        N = self.grid.size
        key = None
        if self.linear_diffusion:
            key = (dt, float(coeff.flat[0]), transpose)
            lu = self._lu_cache.get(key)
        else:
            lu = None
        if lu is None:
            A = sp.identity(N, format="csc") - dt * (self.laplacian_matrix @ sp.diags(coeff.ravel()))
            lu = splu((A.T if transpose else A).tocsc())
            if key is not None:
                self._lu_cache[key] = lu
        return lu.solve(rhs)

    def implicit_solve(self, b, dt, guess=None):
        """Newton iteration for rho - dt Lap(D(rho)) = b; returns (rho, iterations)."""
        grid, cfg = self.grid, self.config
        vol = grid.cell_volume
        rho = (b if guess is None else guess).copy()
        target_sum = float(np.sum(b))
        for it in range(1, cfg.newton_max_iter + 1):
            R = rho - dt * G.laplacian(self.diffusion(rho), grid) - b
            res = float(np.sum(np.abs(R))) * vol
            if not math.isfinite(res):
                raise NewtonFailure("non-finite Newton residual", iteration=it)
            if res <= cfg.newton_tol and it > 1:
                return rho, it - 1
            coeff = self.ddiffusion(rho)
            delta = self.jacobian_solve(coeff.ravel(), dt, -R.ravel()).reshape(rho.shape)
            rho = rho + delta
            rho += (target_sum - float(np.sum(rho))) / rho.size
            if self.linear_diffusion:
                R = rho - dt * G.laplacian(self.diffusion(rho), grid) - b
                if float(np.sum(np.abs(R))) * vol <= max(cfg.newton_tol, 1e-13 * float(np.sum(np.abs(b))) * vol):
                    return rho, it
        raise NewtonFailure("Newton did not converge", residual=res)

    # -- explicit flux ---------------------------------------------------
    def flux_divergence(self, rho, g):
        return G.div(G.upwind_flux(self.sigma(rho), g, self.grid), self.grid)

    def cfl_dt(self, rho, g):
        """Largest dt keeping the upwind outflow of every cell below cfl * rho."""
        if not np.any(g):
            return math.inf
        s = self.sigma(rho)
        out_rate = np.zeros(self.grid.shape)
        for a in range(self.grid.d):
            ga = g[a]
            out_rate += np.maximum(ga, 0.0) + np.maximum(-np.roll(ga, 1, axis=a), 0.0)
        pos = rho > 1e-12
        with np.errstate(divide="ignore", invalid="ignore"):
            secant = np.where(pos, s / np.where(pos, rho, 1.0), 0.0)
            deriv = np.where(pos, self.dsigma(rho), 0.0)
        lip = np.maximum(secant, np.where(np.isfinite(deriv), deriv, 0.0))
        rate = float(np.max(lip * out_rate))
        if rate <= 0:
            return math.inf
        return self.config.cfl_factor * self.grid.h / rate

    # -- diagnostics -----------------------------------------------------
    def entropy(self, rho):
        return float(np.sum(entropy_field(self.spec, rho))) * self.grid.cell_volume

    def dissipation_rate(self, rho):
        """2 int |grad Phi^(1/2)(rho)|^2 with face differences."""
        gs = G.grad(self.spec.sqrt_phi(rho), self.grid)
        return 2.0 * float(np.sum(gs * gs)) * self.grid.cell_volume


def check_nonnegative(rho, tol=NEG_TOL):
    lo = float(np.min(rho))
    if not lo >= -tol:
        cell = np.unravel_index(int(np.argmin(rho)), rho.shape)
        raise NonnegativityFailure(f"negative density {lo:.3e} in cell {tuple(int(c) for c in cell)}",
                                   cell=tuple(int(c) for c in cell), value=lo)


def _cyclic_tridiag_solve(coeff, c, rhs, transpose=False):
    """Periodic tridiagonal solve for I - c * L diag(coeff) via Sherman-Morrison."""
    n = coeff.size
    coeff = np.asarray(coeff, dtype=float)
    diag = 1.0 + 2.0 * c * coeff
    if not transpose:
        # row i: -c coeff[i-1] x[i-1] + diag[i] x[i] - c coeff[i+1] x[i+1]
        sub = -c * coeff[:-1]           # A[i+1, i] = -c coeff[i]
        sup = -c * coeff[1:]            # A[i, i+1] = -c coeff[i+1]
        corner_top = -c * coeff[n - 1]  # A[0, n-1]
        corner_bot = -c * coeff[0]      # A[n-1, 0]
    else:
        sub = -c * coeff[1:]            # A^T[i+1, i] = A[i, i+1]
        sup = -c * coeff[:-1]           # A^T[i, i+1] = A[i+1, i]
        corner_top = -c * coeff[0]      # A^T[0, n-1] = A[n-1, 0]
        corner_bot = -c * coeff[n - 1]  # A^T[n-1, 0] = A[0, n-1]
        diag = 1.0 + 2.0 * c * coeff
    gamma = -diag[0]
    d = diag.copy()
    d[0] -= gamma
    d[-1] -= corner_bot * corner_top / gamma
    ab = np.zeros((3, n))
    ab[0, 1:] = sup
    ab[1] = d
    ab[2, :-1] = sub
    u = np.zeros(n)
    u[0] = gamma
    u[-1] = corner_bot
    rhs = np.asarray(rhs, dtype=float)
    two_d = rhs.ndim == 2
    R = rhs if two_d else rhs[:, None]
    sol = solve_banded((1, 1), ab, np.column_stack([R, u]), check_finite=False)
    y, z = sol[:, :-1], sol[:, -1]
    vy = y[0] + corner_top / gamma * y[-1]
    vz = z[0] + corner_top / gamma * z[-1]
    x = y - np.outer(z, vy / (1.0 + vz))
    return x if two_d else x[:, 0]


@dataclass
class Trajectory:
    """Time nodes, (strided) fields and per-node diagnostics of a run."""

    spec: object
    grid: G.Grid
    config: SolverConfig
    times: np.ndarray
    fields: list
    field_index: list
    mass: np.ndarray
    entropy: np.ndarray
    dissipation_cum: np.ndarray
    control_energy_cum: np.ndarray
    dt: np.ndarray
    control: G.ControlField | None = None
    flux_eta: float = 0.0
    step_controls: list | None = field(default=None, repr=False)

    @property
    def T(self):
        return float(self.times[-1])

    @property
    def final(self):
        return self.fields[-1]

    @property
    def initial(self):
        return self.fields[0]

    def field_at_node(self, j):
        try:
            return self.fields[self.field_index.index(j)]
        except ValueError:
            raise KeyError(f"node {j} not stored (snapshot_stride={self.config.snapshot_stride})") from None

    def diagnostics_rows(self):
        return [
            (float(t), float(m), float(e), float(dc), float(ce), float(dt))
            for t, m, e, dc, ce, dt in zip(self.times, self.mass, self.entropy, self.dissipation_cum,
                                           self.control_energy_cum, self.dt)
        ]


def _control_array(g, grid):
    if g is None:
        return None
    if g.grid != grid:
        raise GridMismatch("control lives on a different grid")
    return g


def outer_steps(T, dt, breakpoints=()):
    """Nominal step sequence ``[(t_j, dt_j)]`` on [0, T]: steps of ``dt`` cut at control breakpoints.

    The sequence depends only on its arguments, so runs that share
    (T, dt, breakpoints) share their outer time grid.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    stops = sorted({float(b) for b in breakpoints if 0.0 < b < T} | {float(T)})
    steps = []
    t = 0.0
    tiny = 1e-12 * dt
    for stop in stops:
        while stop - t > tiny:
            h = min(dt, stop - t)
            if stop - t - h <= tiny:
                h = stop - t
            steps.append((t, h))
            t = stop if h == stop - t else t + h
    return steps


class _Integrator:
    """Advances one path through the outer step grid.

    A step that violates the CFL bound is split in two; a step that fails
    (Newton or nonnegativity) is split as well, up to ``max_halvings``
    levels.  ``noise`` (optional) supplies Brownian increments, their
    bridge refinements and the explicit stochastic forcing.
    """

    MAX_CFL_SPLITS = 40

    def __init__(self, model, g, noise=None):
        self.model = model
        self.g = g
        self.noise = noise
        self.accepted = []

    def advance(self, rho, t, dt, j, dB, code=1, fails=0, splits=0):
        model, cfg = self.model, self.model.config
        gv = None if self.g is None else self.g.at(t)
        if gv is not None and splits < self.MAX_CFL_SPLITS and dt > model.cfl_dt(rho, gv) * (1 + 1e-12):
            return self._split(rho, t, dt, j, dB, code, fails, splits + 1)
        try:
            extra = None if self.noise is None else self.noise.forcing(rho, dB, dt)
            b = rho if gv is None else rho - dt * model.flux_divergence(rho, gv)
            if extra is not None:
                b = b + extra
            new, _ = model.implicit_solve(b, dt, guess=rho)
            check_nonnegative(new)
        except NumericalFailure as exc:
            if fails >= cfg.max_halvings:
                raise type(exc)(f"step at t={t:.6g} failed after {fails} halvings: {exc}",
                                time=t, **exc.details) from exc
            log.debug("halving dt=%g at t=%g: %s", dt, t, exc)
            return self._split(rho, t, dt, j, dB, code, fails + 1, splits)
        self.accepted.append((t, dt, gv, dB))
        if self.noise is not None:
            self.noise.accept()
        return new

    def _split(self, rho, t, dt, j, dB, code, fails, splits):
        h = 0.5 * dt
        if self.noise is None:
            dB1 = dB2 = None
        else:
            dB1, dB2 = self.noise.bridge(j, code, dB, dt)
        mid = self.advance(rho, t, h, j, dB1, 2 * code, fails, splits)
        self._emit(mid)
        return self.advance(mid, t + h, h, j, dB2, 2 * code + 1, fails, splits)

    def _emit(self, rho):
        # intermediate states of split steps become nodes of the trajectory
        self.pending.append(rho)


def integrate(spec, grid, rho0, g, T, config, flux_eta=None, noise=None, store_controls=False):
    """Shared time loop of the deterministic and stochastic solvers."""
    rho = G.as_values(rho0, grid).astype(float).copy()
    check_nonnegative(rho)
    g = _control_array(g, grid)
    model = Model(spec, grid, config, flux_eta)
    steps = outer_steps(T, config.dt, () if g is None else g.times)
    vol = grid.cell_volume

    times, masses, ents, diss, ctrl, dts = [0.0], [G.mass(rho, grid)], [model.entropy(rho)], [0.0], [0.0], [0.0]
    fields, index = [rho.copy()], [0]
    step_controls = [] if store_controls else None
    if noise is not None:
        noise.bind(model, steps)
    integ = _Integrator(model, g, noise)
    node = 0
    for j, (t0, h) in enumerate(steps):
        dB = None if noise is None else noise.increment(j, h)
        integ.accepted = []
        integ.pending = []
        final = integ.advance(rho, t0, h, j, dB)
        states = integ.pending + [final]
        for (ts, dts_, gv, _), new in zip(integ.accepted, states):
            if gv is not None:
                ctrl.append(ctrl[-1] + 0.5 * dts_ * float(np.sum(gv * gv)) * vol)
                if store_controls:
                    step_controls.append(gv)
            else:
                ctrl.append(ctrl[-1])
            diss.append(diss[-1] + dts_ * model.dissipation_rate(new))
            node += 1
            times.append(ts + dts_)
            masses.append(G.mass(new, grid))
            ents.append(model.entropy(new))
            dts.append(dts_)
            if node % config.snapshot_stride == 0:
                fields.append(new.copy())
                index.append(node)
        rho = final
    if index[-1] != node:
        fields.append(rho.copy())
        index.append(node)
    times[-1] = float(T)
    return Trajectory(spec, grid, config, np.array(times), fields, index, np.array(masses), np.array(ents),
                      np.array(diss), np.array(ctrl), np.array(dts), g, model.flux_eta, step_controls)


def solve_skeleton(spec, grid, rho0, g, T, config=SolverConfig(), flux_eta=None, store_controls=False):
    """Integrate the skeleton equation on [0, T] and return a :class:`Trajectory`.

    ``g`` is a :class:`ControlField` (or ``None`` for the uncontrolled flow).
    Steps never straddle a control breakpoint.  A step that breaks the CFL
    bound, fails in Newton or produces a negative cell is split in two
    (at most ``config.max_halvings`` failure splits).
    """
    return integrate(spec, grid, rho0, g, T, config, flux_eta=flux_eta, store_controls=store_controls)


def entropy_report(traj):
    """Both sides of the entropy-dissipation inequality at the final time."""
    lhs = float(traj.entropy[-1] - traj.entropy[0] + traj.dissipation_cum[-1])
    rhs = float(traj.control_energy_cum[-1])
    return {"lhs": lhs, "rhs": rhs, "margin": rhs - lhs}


def defect_field(spec, rho, grid):
    """Cell-wise 4 Phi/Phi' |grad Phi^(1/2)(rho)|^2 (face gradients averaged to cells)."""
    rho = G.as_values(rho, grid)
    gs = G.grad(spec.sqrt_phi(rho), grid)
    sq = np.sum(G.cell_average(gs * gs, grid), axis=0)
    return defect_coeff(spec, np.maximum(rho, 0.0)) * sq


def contraction_distance(traj1, traj2, rel_tol=1e-3):
    """L1 distance series between two runs sharing grid, control and config.

    Returns ``(distances, violated)``; a violation is any node whose distance
    exceeds the initial distance by more than ``rel_tol`` (relative).
    """
    if traj1.grid != traj2.grid:
        raise GridMismatch("trajectories live on different grids")
    if len(traj1.times) != len(traj2.times) or not np.allclose(traj1.times, traj2.times, rtol=0, atol=1e-14):
        raise GridMismatch("trajectories have different time nodes")
    if traj1.field_index != traj2.field_index:
        raise GridMismatch("trajectories store different snapshots")
    c1, c2 = traj1.control, traj2.control
    if (c1 is None) != (c2 is None) or (c1 is not None and not np.array_equal(c1.grid_values(), c2.grid_values())):
        raise GridMismatch("trajectories were driven by different controls")
    dist = np.array([G.l1(a - b, traj1.grid) for a, b in zip(traj1.fields, traj2.fields)])
    violated = bool(np.any(dist > dist[0] * (1.0 + rel_tol) + 1e-15))
    return dist, violated
