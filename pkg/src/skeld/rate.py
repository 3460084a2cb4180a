"""Rate functionals: control energy, minimal controls, minimum-action paths, Gamma sweeps."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize
from scipy.sparse.linalg import cg

from . import grid as G
from .errors import InfeasibleProblem, NumericalFailure, SolverError
from .skeleton import Model, SolverConfig, Trajectory, solve_skeleton

log = logging.getLogger(__name__)


def control_energy(g):
    """1/2 ||g||^2 in L^2(T^d x [0, T]); spectral controls use coefficient sums."""
    return 0.0 if g is None else g.energy()


@dataclass
class RateEvaluation:
    value: float
    control: G.ControlField
    constraint_residual: float
    feasible: bool
    mu: float | None = None
    iterations: int = 0
    status: str = "ok"
    gap: float | None = None
    history: list = field(default_factory=list, repr=False)   # objective values per penalty stage
    sweep: list = field(default_factory=list, repr=False)

    def to_dict(self):
        return {"J": self.value, "residual": self.constraint_residual, "iterations": self.iterations,
                "feasible": self.feasible, "mu": self.mu, "status": self.status, "gap": self.gap,
                "sweep": self.sweep}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Minimal control of a given path
# ---------------------------------------------------------------------------

def grad_matrix(grid):
    """Sparse forward-difference gradient (cells -> faces), stacked by component."""
    n, d, h = grid.n, grid.d, grid.h
    one = sp.diags([-np.ones(n), np.ones(n - 1)], [0, 1], format="lil")
    one[n - 1, 0] = 1.0
    one = one.tocsr() / h
    if d == 1:
        return one
    eye = sp.identity(n, format="csr")
    return sp.vstack([sp.kron(one, eye), sp.kron(eye, one)]).tocsr()


def _path_residuals(model, traj):
    """r^j = (rho^{j+1} - rho^j)/dt - Lap D(rho^{j+1}) for every step of a fully stored path."""
    grid = traj.grid
    if len(traj.fields) != len(traj.times):
        raise ValueError("minimal-control recovery needs every time node (snapshot_stride = 1)")
    out = []
    for j in range(len(traj.times) - 1):
        dt = traj.times[j + 1] - traj.times[j]
        a, b = traj.fields[j], traj.fields[j + 1]
        out.append((b - a) / dt - G.laplacian(model.diffusion(b), grid))
    return out


def _weighted_poisson(D, w, r, rtol, slice_index):
    A = (D.T @ sp.diags(w) @ D).tocsr()
    diag = A.diagonal()
    M = sp.diags(1.0 / np.where(diag > 0, diag, 1.0))
    rhs = r - r.mean()
    if not np.any(rhs):
        return np.zeros_like(rhs)
    H, info = cg(A, rhs, rtol=rtol, atol=0.0, maxiter=20 * len(rhs), M=M)
    if info != 0:
        raise SolverError(f"CG stagnated on slice {slice_index}", slice=slice_index, info=info)
    return H - H.mean()


def recover_minimal_control(spec, traj, weight_floor=1e-10, rtol=1e-8, feasibility_tol=1e-6, max_sign_iter=20):
    """Smallest control reproducing ``traj`` under the discrete scheme.

    Per step, ``-div(w grad H) = r`` with ``w = sigma_up^2 + floor max sigma^2``
    (sigma taken upwind along grad H, iterated until the upwind pattern is
    stable) and ``g* = sigma_up grad H``.
    """
    grid = traj.grid
    model = Model(spec, grid, traj.config, flux_eta=traj.flux_eta)
    D = grad_matrix(grid)
    N = len(traj.times) - 1
    res = _path_residuals(model, traj)
    values = np.zeros((N, grid.d) + grid.shape)
    resid = 0.0
    vol = grid.cell_volume
    for j in range(N):
        rho = traj.fields[j]
        s = model.sigma(rho)
        r = res[j]
        smax = float(np.max(s * s))
        if smax == 0.0:
            resid += float(traj.times[j + 1] - traj.times[j]) * G.l1(r, grid)
            continue
        floor = weight_floor * smax
        s_face = G.face_average(s, grid)
        pattern = None
        for _ in range(max_sign_iter):
            w = (s_face * s_face).ravel() + floor
            H = _weighted_poisson(D, w, r.ravel(), rtol, j).reshape(grid.shape)
            gH = G.grad(H, grid)
            new_pattern = gH >= 0.0
            s_face = G.upwind_values(s, gH, grid)
            if pattern is not None and np.array_equal(new_pattern, pattern):
                break
            pattern = new_pattern
        g = s_face * gH
        values[j] = g
        dt = traj.times[j + 1] - traj.times[j]
        resid += dt * G.l1(r + G.div(G.upwind_flux(s, g, grid), grid), grid)
    control = G.ControlField(grid, traj.times.copy(), values=values)
    scale = max(traj.mass[0], 1e-300) * traj.T
    feasible = resid <= feasibility_tol * scale
    return RateEvaluation(control.energy(), control, resid, bool(feasible),
                          status="ok" if feasible else "residual_above_tolerance")


# ---------------------------------------------------------------------------
# Minimum action by discrete adjoints
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    mu: tuple = (1e2, 1e3, 1e4)
    max_iter: int = 200
    gtol: float = 1e-8
    ftol: float = 1e-12
    memory: int = 10
    max_linesearch: int = 20
    feasibility_tol: float = 1e-3

    def __post_init__(self):
        if isinstance(self.mu, (int, float)):
            object.__setattr__(self, "mu", (float(self.mu),))
        if not self.mu or any(m <= 0 for m in self.mu):
            raise ValueError("penalty weights must be positive")
        for name in ("max_iter", "gtol", "ftol", "memory", "max_linesearch", "feasibility_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


class ActionProblem:
    """Forward IMEX map on a fixed step grid plus its discrete adjoint.

    Variables are grid controls (N, d, *shape) or, with ``K``, spectral
    coefficients (N, K).  The forward pass never clamps or rejects
    negative cells; it is a smooth map away from upwind switches.
    """

    def __init__(self, spec, grid, rho0, T, n_steps, config=SolverConfig(), K=None, eta=0.0):
        self.spec, self.grid, self.T, self.N = spec, grid, float(T), int(n_steps)
        self.dt = self.T / self.N
        cfg = SolverConfig(**{**config.__dict__, "newton_tol": min(config.newton_tol, 1e-13)})
        self.model = Model(spec, grid, cfg, flux_eta=eta)
        self.rho0 = G.as_values(rho0, grid).astype(float)
        self.basis = G.SpectralBasis(grid, K) if K else None
        self.times = np.linspace(0.0, self.T, self.N + 1)

    @property
    def n_vars(self):
        per = self.basis.K if self.basis else self.grid.d * self.grid.size
        return self.N * per

    def controls(self, x):
        if self.basis is not None:
            return self.basis.synthesize(x.reshape(self.N, self.basis.K))
        return x.reshape((self.N, self.grid.d) + self.grid.shape)

    def control_field(self, x):
        if self.basis is not None:
            return G.ControlField(self.grid, self.times.copy(), coeffs=x.reshape(self.N, self.basis.K).copy(),
                                  basis=self.basis)
        return G.ControlField(self.grid, self.times.copy(), values=self.controls(x).copy())

    def energy(self, x):
        if self.basis is not None:
            return 0.5 * self.dt * float(np.dot(x, x))
        return 0.5 * self.dt * self.grid.cell_volume * float(np.dot(x, x))

    def energy_grad(self, x):
        return self.dt * (x if self.basis is not None else self.grid.cell_volume * x)

    def forward(self, gvals):
        model, dt = self.model, self.dt
        rhos = [self.rho0]
        rho = self.rho0
        for j in range(self.N):
            b = rho - dt * model.flux_divergence(rho, gvals[j])
            rho, _ = model.implicit_solve(b, dt, guess=rho)
            rhos.append(rho)
        return rhos

    def adjoint(self, rhos, gvals, lam_final):
        """Gradient of a terminal functional with d/d rho^N = ``lam_final`` w.r.t. the grid controls."""
        model, grid, dt = self.model, self.grid, self.dt
        lam = lam_final
        out = np.empty_like(gvals)
        for j in range(self.N - 1, -1, -1):
            coeff = model.ddiffusion(rhos[j + 1]).ravel()
            nu = model.jacobian_solve(coeff, dt, lam.ravel(), transpose=True).reshape(grid.shape)
            fbar = dt * G.grad(nu, grid)
            g = gvals[j]
            s_up = G.upwind_values(model.sigma(rhos[j]), g, grid)
            ds_up = G.upwind_values(model.dsigma(rhos[j]), g, grid)
            out[j] = fbar * s_up
            c = ds_up * g * fbar
            back = nu.copy()
            for a in range(grid.d):
                pos = g[a] >= 0.0
                back += np.where(pos, c[a], 0.0) + np.roll(np.where(pos, 0.0, c[a]), 1, axis=a)
            lam = back
        return out

    def to_vars(self, grid_grad):
        if self.basis is not None:
            E = self.basis.matrix
            return np.tensordot(grid_grad, E, axes=(list(range(1, grid_grad.ndim)),
                                                    list(range(1, E.ndim)))).ravel()
        return grid_grad.ravel()


def _terminal_l2(problem, target, mu):
    vol = problem.grid.cell_volume

    def term(rhoN):
        diff = rhoN - target
        return mu * vol * float(np.sum(diff * diff)), 2.0 * mu * vol * diff
    return term


def _terminal_event(problem, reference, delta, mu):
    vol = problem.grid.cell_volume

    def term(rhoN):
        diff = rhoN - reference
        short = delta - vol * float(np.sum(np.abs(diff)))
        if short <= 0:
            return 0.0, np.zeros_like(diff)
        return mu * short * short, -2.0 * mu * short * vol * np.sign(diff)
    return term


def _objective(problem, terminal):
    last = {}

    def fun(x):
        gvals = problem.controls(x)
        try:
            rhos = problem.forward(gvals)
        except NumericalFailure:
            return 1e30, last.get("grad", np.zeros_like(x))
        f_term, lam = terminal(rhos[-1])
        grad = problem.energy_grad(x) + problem.to_vars(problem.adjoint(rhos, gvals, lam))
        last["grad"] = grad
        return problem.energy(x) + f_term, grad
    return fun


def _run_lbfgs(fun, x0, opt):
    history = []

    def cb(xk):
        history.append(float(fun(xk)[0]))

    f0 = float(fun(x0)[0])
    history.append(f0)
    res = minimize(fun, x0, jac=True, method="L-BFGS-B", callback=cb,
                   options={"maxiter": opt.max_iter, "maxcor": opt.memory, "gtol": opt.gtol, "ftol": opt.ftol,
                            "maxls": opt.max_linesearch})
    return res, history


def _check_mass(problem, target):
    m0, m1 = G.mass(problem.rho0, problem.grid), G.mass(target, problem.grid)
    if abs(m0 - m1) > 1e-10 * max(abs(m0), 1.0):
        raise InfeasibleProblem(f"target mass {m1:.12g} differs from initial mass {m0:.12g}")
    if np.any(target < -1e-12) or np.any(problem.rho0 < -1e-12):
        raise InfeasibleProblem("initial datum and target must be nonnegative")


def _feasibility_residual(problem, x):
    """L1 defect of the forward scheme along the optimised path (zero up to Newton tolerance)."""
    model, grid, dt = problem.model, problem.grid, problem.dt
    gvals = problem.controls(x)
    rhos = problem.forward(gvals)
    total = 0.0
    for j in range(problem.N):
        r = (rhos[j + 1] - rhos[j]) / dt - G.laplacian(model.diffusion(rhos[j + 1]), grid)
        total += dt * G.l1(r + model.flux_divergence(rhos[j], gvals[j]), grid)
    return total, rhos


def minimize_action(spec, grid, rho0, target, opt=OptimizerConfig(), K=None, eta=0.0, T=None, n_steps=20,
                    config=SolverConfig(), x0=None):
    """Minimum of 1/2||g||^2 steering ``rho0`` to ``target`` at time T (quadratic penalty sweep).

    ``target`` is a field or a :class:`Trajectory` (its final state and
    horizon are used).  Penalties are swept over ``opt.mu`` with warm
    starts; the reported J belongs to the largest penalty whose L1 endpoint
    gap is below ``opt.feasibility_tol``.
    """
    if isinstance(target, Trajectory):
        T = target.T if T is None else T
        target = target.final
    if T is None:
        raise ValueError("horizon T required when the target is a field")
    problem = ActionProblem(spec, grid, rho0, T, n_steps, config, K, eta)
    target = G.as_values(target, grid).astype(float)
    _check_mass(problem, target)
    x = np.zeros(problem.n_vars) if x0 is None else np.asarray(x0, dtype=float).ravel().copy()
    sweep, history, iters = [], [], 0
    best = None
    for mu in opt.mu:
        res, hist = _run_lbfgs(_objective(problem, _terminal_l2(problem, target, mu)), x, opt)
        x = res.x
        history.append(hist)
        iters += int(res.nit)
        resid, rhos = _feasibility_residual(problem, x)
        gap = G.l1(rhos[-1] - target, grid)
        entry = {"mu": mu, "J": problem.energy(x), "gap": gap, "iterations": int(res.nit),
                 "converged": bool(res.success), "message": str(res.message)}
        sweep.append(entry)
        if gap <= opt.feasibility_tol:
            best = (mu, x.copy(), gap, resid, res.success)
    if best is None:
        mu, xb, gap, resid, ok = opt.mu[-1], x, sweep[-1]["gap"], _feasibility_residual(problem, x)[0], False
        status = "infeasible_gap"
    else:
        mu, xb, gap, resid, ok = best
        status = "ok" if ok else "line_search_stopped"
    feasible = best is not None and resid <= 1e-6 * max(G.mass(problem.rho0, grid), 1e-300) * T
    return RateEvaluation(problem.energy(xb), problem.control_field(xb), resid, bool(feasible), mu, iters,
                          status, gap, history, sweep)


def minimize_event_action(spec, grid, rho0, reference, delta, T, opt=OptimizerConfig(mu=(1e3, 1e4, 1e5)), K=None,
                          eta=0.0, n_steps=20, config=SolverConfig(), starts=4, seed=0, init_scale=0.5):
    """Cheapest control pushing ||rho(T) - reference||_{L1} up to ``delta``.

    The event boundary is imposed by a quadratic penalty on the L1
    shortfall.  ``g = 0`` is a stationary point when the reference is the
    uncontrolled endpoint, so the search starts from ``starts`` random
    controls and keeps the cheapest feasible result.
    """
    problem = ActionProblem(spec, grid, rho0, T, n_steps, config, K, eta)
    reference = G.as_values(reference, grid).astype(float)
    rs = np.random.default_rng(seed)
    results = []
    for _ in range(starts):
        x = init_scale * rs.standard_normal(problem.n_vars)
        sweep, iters, history = [], 0, []
        for mu in opt.mu:
            res, hist = _run_lbfgs(_objective(problem, _terminal_event(problem, reference, delta, mu)), x, opt)
            x = res.x
            iters += int(res.nit)
            history.append(hist)
            rhoN = problem.forward(problem.controls(x))[-1]
            dist = G.l1(rhoN - reference, grid)
            sweep.append({"mu": mu, "J": problem.energy(x), "distance": dist, "iterations": int(res.nit)})
        gap = max(0.0, delta - dist)
        results.append((problem.energy(x), x.copy(), gap, iters, history, sweep))
    feasible = [r for r in results if r[2] <= opt.feasibility_tol * delta]
    pool = feasible or results
    J, x, gap, iters, history, sweep = min(pool, key=lambda r: r[0])
    resid, _ = _feasibility_residual(problem, x)
    return RateEvaluation(J, problem.control_field(x), resid, bool(feasible), opt.mu[-1], iters,
                          "ok" if feasible else "infeasible_gap", gap, history, sweep)


def gradient_check(problem, x, target, mu=1.0, n_dirs=10, step=1e-6, seed=0):
    """Relative errors between adjoint directional derivatives and central differences."""
    fun = _objective(problem, _terminal_l2(problem, target, mu))
    _, grad = fun(x)
    rs = np.random.default_rng(seed)
    errs = []
    for _ in range(n_dirs):
        v = rs.standard_normal(x.size)
        v /= np.linalg.norm(v)
        fd = (fun(x + step * v)[0] - fun(x - step * v)[0]) / (2 * step)
        ad = float(np.dot(grad, v))
        errs.append(abs(fd - ad) / max(abs(ad), abs(fd), 1e-300))
    return np.array(errs)


# ---------------------------------------------------------------------------
# Gamma sweep along the recovery sequence
# ---------------------------------------------------------------------------

@dataclass
class GammaRow:
    K: int
    eta: float
    J_etaK: float
    J_ref: float
    l1_dist: float


def gamma_sweep(spec, grid, rho0, g_ref, K_list, config=SolverConfig(), T=None):
    """Project ``g_ref`` on the first K modes, solve with flux Phi^(1/2, 1/K), compare to the bare run."""
    K_list = list(K_list)
    if any(b <= a for a, b in zip(K_list, K_list[1:])):
        raise ValueError("K_list must be increasing")
    T = g_ref.T if T is None else T
    ref = solve_skeleton(spec, grid, rho0, g_ref, T, config, flux_eta=0.0)
    J = control_energy(g_ref)
    rows = []
    for K in K_list:
        gK = G.project_PK(g_ref, K)
        eta = 1.0 / K
        traj = solve_skeleton(spec, grid, rho0, gK, T, config, flux_eta=eta)
        rows.append(GammaRow(K, eta, control_energy(gK), J, G.l1(traj.final - ref.final, grid)))
    return rows


def write_gamma_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["K", "eta", "J_etaK", "J_ref", "l1_dist"])
        for r in rows:
            w.writerow([r.K, repr(r.eta), repr(r.J_etaK), repr(r.J_ref), repr(r.l1_dist)])


def gamma_monotone(rows):
    Js = [r.J_etaK for r in rows]
    return all(b >= a - 1e-12 * max(1.0, abs(a)) for a, b in zip(Js, Js[1:]))
