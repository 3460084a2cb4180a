"""Euler-Maruyama simulation of the regularised conservative SPDE (Ito form).

    d rho = [Lap Phi(rho) - div(sigma(rho) P_K g) + (eps/2) C(rho)] dt
            - sqrt(eps) sum_k div(sigma(rho) e_k) dB^k,

with ``sigma = Phi^(1/2, eta)`` and ``C`` the Stratonovich-to-Ito drift of
:func:`ito_correction`.  Diffusion is implicit, everything else explicit.
The stochastic flux uses the symmetric geometric mean of ``sigma`` on
faces: an upwind choice would bias the noise by O(h / sqrt(dt)), and the
arithmetic mean lets the noise drain empty cells.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import grid as G
from . import rng
from .errors import NumericalFailure
from .skeleton import NEG_TOL, Model, SolverConfig, integrate, outer_steps

log = logging.getLogger(__name__)

REGIME_WARN = 1.0   # eps K^3 above this triggers a warning
BLOCK = 2048        # replicas per vectorised block


@dataclass(frozen=True)
class NoiseConfig:
    K: int
    epsilon: float
    eta: float = 0.1
    seed: int = 0
    replica_index: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0")
        if not 0 <= self.eta < 1:
            raise ValueError("eta must lie in [0, 1)")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.replica_index < 0:
            raise ValueError("replica_index must be >= 0")

    @property
    def regime(self):
        """eps * K^3; the small-noise theory needs this to vanish."""
        return self.epsilon * self.K**3


def _roll(u, shift, axis, off):
    return np.roll(u, shift, axis=axis + off)


def _div(v, grid, off=0):
    """div for face fields of shape (*batch, d, *shape); ``off`` = number of batch axes."""
    out = 0.0
    for a in range(grid.d):
        va = v[(slice(None),) * off + (a,)]
        out = out + (va - _roll(va, 1, a, off)) / grid.h
    return out


def face_sigma(s, grid, off=0):
    """Geometric mean sqrt(s_i s_j) of the two cells adjacent to each face.

    It vanishes as soon as one neighbour is empty, so the discrete noise
    cannot drain a cell that holds no mass.
    """
    return np.stack([np.sqrt(s * _roll(s, -1, a, off)) for a in range(grid.d)], axis=off)


def _face_sigma_tangent(s, ds, S, v, grid, off=0):
    """Directional derivative of :func:`face_sigma` along the cell field ``v``."""
    comps = []
    for a in range(grid.d):
        Sa = S[(slice(None),) * off + (a,)]
        num = ds * v * _roll(s, -1, a, off) + s * _roll(ds * v, -1, a, off)
        with np.errstate(divide="ignore", invalid="ignore"):
            comps.append(np.where(Sa > 0.0, num / (2.0 * np.where(Sa > 0.0, Sa, 1.0)), 0.0))
    return np.stack(comps, axis=off)


def _correction(s, ds, E, grid, off=0):
    """sum_k D N_k[N_k] for the noise operators N_k(rho) = -div(face_sigma * e_k)."""
    S = face_sigma(s, grid, off)
    out = np.zeros(s.shape)
    for ek in E:
        q = _div(S * ek, grid, off)
        out += _div(_face_sigma_tangent(s, ds, S, q, grid, off) * ek, grid, off)
    return out


def _noise_divergence(s, dB, E, grid, off=0):
    """div(face_sigma * sum_k e_k dB_k); ``dB`` has shape (*batch, K)."""
    S = face_sigma(s, grid, off)
    field_ = np.tensordot(dB, E, axes=([-1], [0]))
    return _div(S * field_, grid, off)


def ito_correction(spec, rho, eta, K, grid=None):
    """Stratonovich-to-Ito drift sum_k div((sigma'(rho) e_k) div(sigma(rho) e_k)), sigma = Phi^(1/2, eta).

    Evaluated as the exact correction of the discrete noise operators
    ``N_k(rho) = -div(face_sigma(rho) e_k)``; the simulator adds ``+eps/2``
    times it.  ``eta = 0`` uses the bare Phi^(1/2).
    """
    if grid is None:
        grid = rho.grid
    values = G.as_values(rho, grid)
    if np.any(values < 0):
        raise ValueError("rho must be nonnegative")
    model = Model(spec, grid, SolverConfig(), flux_eta=eta)
    E = G.SpectralBasis(grid, K).matrix
    return _correction(model.sigma(values), model.dsigma(values), E, grid)


class NoiseTerm:
    """Stochastic forcing plugged into the shared integrator."""

    def __init__(self, noise, basis):
        self.noise = noise
        self.basis = basis
        self.E = basis.matrix
        self.sqrt_eps = math.sqrt(noise.epsilon)
        self.increment_sums = []
        self.correction_norms = []
        self._pending = None

    def bind(self, model, steps):
        self.model = model
        self.grid = model.grid
        self.Z = rng.step_normals(self.noise.seed, self.noise.replica_index, self.noise.K, len(steps))

    def increment(self, j, h):
        return math.sqrt(h) * self.Z[:, j]

    def bridge(self, j, code, dB, dt):
        z = rng.bridge_normals(self.noise.seed, self.noise.replica_index, j, code, self.noise.K)
        return rng.brownian_bridge(dB, dt, z)

    def forcing(self, rho, dB, dt):
        model, grid = self.model, self.grid
        s, ds = model.sigma(rho), model.dsigma(rho)
        corr = _correction(s, ds, self.E, grid)
        self._pending = (float(np.sum(dB)), G.l1(corr, grid))
        if self.noise.epsilon == 0:
            return None
        return -self.sqrt_eps * _noise_divergence(s, dB, self.E, grid) + 0.5 * self.noise.epsilon * dt * corr

    def accept(self):
        s, c = self._pending
        self.increment_sums.append(s)
        self.correction_norms.append(c)


@dataclass
class SpdePath:
    trajectory: object
    noise: NoiseConfig
    increment_sums: np.ndarray
    correction_norms: np.ndarray
    regime: float

    @property
    def digest(self):
        """Checksum over the increments actually used (bitwise reproducibility)."""
        return rng.checksum(self.increment_sums)

    @property
    def final(self):
        return self.trajectory.final


def _prepare_control(g, grid, K):
    if g is None:
        return None, G.SpectralBasis(grid, K)
    basis = G.SpectralBasis(grid, K)
    return G.project_PK(g, K, basis), basis


def simulate_spde(spec, grid, rho0, noise, g=None, T=1.0, config=SolverConfig()):
    """One Euler-Maruyama path; raises :class:`NumericalFailure` if it cannot be completed."""
    if noise.regime > REGIME_WARN:
        warnings.warn(f"eps*K^3 = {noise.regime:.3g} lies outside the small-noise regime", RuntimeWarning,
                      stacklevel=2)
    gK, basis = _prepare_control(g, grid, noise.K)
    term = NoiseTerm(noise, basis)
    traj = integrate(spec, grid, rho0, gK, T, config, flux_eta=noise.eta, noise=term)
    return SpdePath(traj, noise, np.array(term.increment_sums), np.array(term.correction_norms), noise.regime)


def deterministic_endpoint(spec, grid, rho0, K, eta, g=None, T=1.0, config=SolverConfig()):
    """The eps = 0 path of the same discretisation (projected control, flux Phi^(1/2, eta))."""
    gK, _ = _prepare_control(g, grid, K)
    return integrate(spec, grid, rho0, gK, T, config, flux_eta=eta)


# ---------------------------------------------------------------------------
# Vectorised ensembles
# ---------------------------------------------------------------------------

def _bdiv(v, grid):
    return _div(v, grid, off=1)


def _bupwind(s, gv, grid):
    return np.stack([np.where(gv[a] >= 0.0, s, np.roll(s, -1, axis=a + 1)) * gv[a] for a in range(grid.d)],
                    axis=1)


def _bcfl_ok(model, rho, gv, dt):
    grid = model.grid
    out_rate = np.zeros(grid.shape)
    for a in range(grid.d):
        out_rate += np.maximum(gv[a], 0.0) + np.maximum(-np.roll(gv[a], 1, axis=a), 0.0)
    pos = rho > 1e-12
    s = model.sigma(rho)
    with np.errstate(divide="ignore", invalid="ignore"):
        secant = np.where(pos, s / np.where(pos, rho, 1.0), 0.0)
        deriv = np.where(pos, model.dsigma(rho), 0.0)
    lip = np.maximum(secant, np.where(np.isfinite(deriv), deriv, 0.0))
    rate = np.max((lip * out_rate).reshape(rho.shape[0], -1), axis=1)
    return dt * rate <= model.config.cfl_factor * grid.h * (1 + 1e-12)


def _batch_paths(spec, grid, rho0, epsilon, K, eta, seed, replicas, g, T, config):
    """Final states of a block of replicas; returns (finals, needs_fallback mask).

    Only linear diffusion is vectorised; a replica that would need step
    splitting (CFL or positivity) is flagged and later rerun on its own.
    """
    model = Model(spec, grid, config, flux_eta=eta)
    gK, basis = _prepare_control(g, grid, K)
    E = basis.matrix
    steps = outer_steps(T, config.dt, () if gK is None else gK.times)
    R = len(replicas)
    Z = np.stack([rng.step_normals(seed, int(r), K, len(steps)) for r in replicas])
    rho = np.broadcast_to(G.as_values(rho0, grid), (R,) + grid.shape).astype(float).copy()
    ok = np.ones(R, dtype=bool)
    N = grid.size
    coeff = np.full(N, float(model.ddiffusion(np.ones(1))[0]))
    sq = math.sqrt(epsilon)
    for j, (t, h) in enumerate(steps):
        b = rho.copy()
        s = model.sigma(rho)
        if gK is not None:
            gv = gK.at(t)
            ok &= _bcfl_ok(model, rho, gv, h)
            b -= h * _bdiv(_bupwind(s, gv, grid), grid)
        if epsilon > 0:
            dB = math.sqrt(h) * Z[:, :, j]
            b -= sq * _noise_divergence(s, dB, E, grid, off=1)
            b += 0.5 * epsilon * h * _correction(s, model.dsigma(rho), E, grid, off=1)
        x = model.jacobian_solve(coeff, h, b.reshape(R, N).T).T.reshape(rho.shape)
        x += ((b.reshape(R, N).sum(axis=1) - x.reshape(R, N).sum(axis=1)) / N).reshape((R,) + (1,) * grid.d)
        ok &= x.reshape(R, N).min(axis=1) >= -NEG_TOL
        rho = x
    return rho, ~ok


def _scalar_final(args):
    spec, grid, rho0, noise, g, T, config = args
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            path = simulate_spde(spec, grid, rho0, noise, g, T, config)
        return path.final, False
    except NumericalFailure as exc:
        log.info("replica %d rejected: %s", noise.replica_index, exc)
        return None, True


def _block_job(args):
    spec, grid, rho0, epsilon, K, eta, seed, block, g, T, config = args
    model_linear = Model(spec, grid, config, flux_eta=eta).linear_diffusion
    finals = np.empty((len(block),) + grid.shape)
    rejected = np.zeros(len(block), dtype=bool)
    if model_linear:
        batch, redo = _batch_paths(spec, grid, rho0, epsilon, K, eta, seed, block, g, T, config)
        finals[:] = batch
    else:
        redo = np.ones(len(block), dtype=bool)
    for i in np.flatnonzero(redo):
        noise = NoiseConfig(K, epsilon, eta, seed, int(block[i]))
        final, rej = _scalar_final((spec, grid, rho0, noise, g, T, config))
        rejected[i] = rej
        if not rej:
            finals[i] = final
    return finals, rejected, int(np.count_nonzero(redo))


def simulate_ensemble(spec, grid, rho0, epsilon, K, eta, seed, replicas, g=None, T=1.0,
                      config=SolverConfig(), workers=1):
    """Final states of ``replicas`` (an int count or index array) plus a rejection mask.

    Replica ``r`` draws its increments from streams keyed by (seed, r, k), so
    the result does not depend on blocking or on ``workers``.
    """
    idx = np.arange(replicas) if np.isscalar(replicas) else np.asarray(replicas, dtype=int)
    if epsilon * K**3 > REGIME_WARN:
        warnings.warn(f"eps*K^3 = {epsilon * K**3:.3g} lies outside the small-noise regime", RuntimeWarning,
                      stacklevel=2)
    blocks = [idx[i:i + BLOCK] for i in range(0, len(idx), BLOCK)]
    jobs = [(spec, grid, rho0, epsilon, K, eta, seed, b, g, T, config) for b in blocks]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_block_job, jobs))
    else:
        results = [_block_job(j) for j in jobs]
    finals = np.concatenate([r[0] for r in results]) if results else np.empty((0,) + grid.shape)
    rejected = np.concatenate([r[1] for r in results]) if results else np.empty(0, dtype=bool)
    return finals, rejected, sum(r[2] for r in results)


# ---------------------------------------------------------------------------
# Events and probability estimates
# ---------------------------------------------------------------------------

class AlwaysEvent:
    def __call__(self, traj):
        return True

    def final(self, finals, grid, rho0):
        return np.ones(len(finals), dtype=bool)


@dataclass
class MassDeviationEvent:
    tol: float = 1e-6

    def __call__(self, traj):
        return bool(np.max(np.abs(traj.mass - traj.mass[0])) > self.tol)

    def final(self, finals, grid, rho0):
        m0 = G.mass(G.as_values(rho0, grid), grid)
        masses = finals.reshape(len(finals), -1).sum(axis=1) * grid.cell_volume
        return np.abs(masses - m0) > self.tol


@dataclass
class L1DeviationEvent:
    """||rho(T) - reference||_{L^1} >= delta."""

    reference: np.ndarray
    delta: float

    def deviation(self, finals, grid):
        diff = np.abs(finals - self.reference[None]).reshape(len(finals), -1)
        return diff.sum(axis=1) * grid.cell_volume

    def __call__(self, traj):
        return bool(self.deviation(traj.final[None], traj.grid)[0] >= self.delta)

    def final(self, finals, grid, rho0):
        return self.deviation(finals, grid) >= self.delta


def wilson_interval(hits, n, z=1.0):
    """Wilson score interval (low, high) for a binomial proportion."""
    if n <= 0:
        return 0.0, 1.0
    p = hits / n
    den = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return max(0.0, centre - half), min(1.0, centre + half)


@dataclass
class EventRow:
    epsilon: float
    p_hat: float
    rate: float | None          # -eps log p_hat (None when no hits)
    stderr: float               # Wilson (z = 1) half-width of p_hat
    rate_stderr: float | None
    hits: int
    accepted: int
    rejected: int
    upper_bound: float          # Wilson 95% upper limit of p
    fallback: int = 0


@dataclass
class EventEstimate:
    rows: list
    records: list = field(default_factory=list, repr=False)   # (epsilon, replica, hit, l1_dev, rejected)

    def table(self):
        return [(r.epsilon, r.p_hat, r.rate, r.stderr) for r in self.rows]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epsilon", "replica", "event_hit", "l1_deviation", "rejected"])
            for eps, rep, hit, dev, rej in self.records:
                w.writerow([repr(float(eps)), rep, int(hit), "" if dev is None else repr(float(dev)), int(rej)])

    def summary(self):
        return {"rows": [asdict(r) for r in self.rows],
                "rejected_total": int(sum(r.rejected for r in self.rows)),
                "replicas_total": int(sum(r.accepted + r.rejected for r in self.rows))}

    def write_summary(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _row(eps, hits, accepted, rejected, fallback):
    p = hits / accepted if accepted else 0.0
    lo, hi = wilson_interval(hits, accepted, 1.0)
    _, upper = wilson_interval(hits, accepted, 1.96)
    stderr = 0.5 * (hi - lo)
    if hits > 0:
        rate = -eps * math.log(p)
        rate_se = eps * stderr / p
    else:
        rate = rate_se = None
    return EventRow(float(eps), p, rate, stderr, rate_se, int(hits), int(accepted), int(rejected), upper,
                    int(fallback))


def estimate_event_probability(event, epsilons, replicas, common_random_numbers=True, *, spec, grid, rho0,
                               K, eta=0.1, seed=0, T=1.0, g=None, config=SolverConfig(), workers=1,
                               keep_records=True):
    """Monte Carlo frequency of ``event`` for each noise intensity.

    With common random numbers every epsilon reuses the same
    (replica, step, mode) increments; otherwise the seed is offset per
    epsilon.  Rejected paths are excluded from the estimate and counted.
    Events exposing ``final(finals, grid, rho0)`` are evaluated on the
    vectorised ensemble; other predicates receive full trajectories.
    """
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    rows, records = [], []
    ref = deterministic_endpoint(spec, grid, rho0, K, eta, g, T, config).final
    vol = grid.cell_volume
    for i, eps in enumerate(epsilons):
        s = seed if common_random_numbers else (seed + 0x9E3779B97F4A7C15 * (i + 1)) % 2**64
        if hasattr(event, "final"):
            finals, rejected, fallback = simulate_ensemble(spec, grid, rho0, eps, K, eta, s, replicas, g, T,
                                                           config, workers)
            ok = ~rejected
            hit = np.zeros(replicas, dtype=bool)
            hit[ok] = event.final(finals[ok], grid, rho0)
            dev = np.abs(finals - ref[None]).reshape(replicas, -1).sum(axis=1) * vol
        else:
            hit = np.zeros(replicas, dtype=bool)
            rejected = np.zeros(replicas, dtype=bool)
            dev = np.full(replicas, np.nan)
            fallback = replicas
            for r in range(replicas):
                try:
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore", RuntimeWarning)
                        path = simulate_spde(spec, grid, rho0, NoiseConfig(K, eps, eta, s, r), g, T, config)
                except NumericalFailure:
                    rejected[r] = True
                    continue
                hit[r] = bool(event(path.trajectory))
                dev[r] = G.l1(path.final - ref, grid)
        accepted = int(np.count_nonzero(~rejected))
        rows.append(_row(eps, int(np.count_nonzero(hit & ~rejected)), accepted, int(np.count_nonzero(rejected)),
                         fallback))
        if keep_records:
            for r in range(replicas):
                records.append((eps, r, bool(hit[r]), None if rejected[r] else float(dev[r]), bool(rejected[r])))
    return EventEstimate(rows, records)


def mean_deviation(spec, grid, rho0, epsilon, K, eta, seed, replicas, g=None, T=1.0, config=SolverConfig(),
                   workers=1):
    """Ensemble-mean L1 distance to the eps = 0 path, and the rejection count."""
    ref = deterministic_endpoint(spec, grid, rho0, K, eta, g, T, config).final
    finals, rejected, _ = simulate_ensemble(spec, grid, rho0, epsilon, K, eta, seed, replicas, g, T, config,
                                            workers)
    ok = ~rejected
    dev = np.abs(finals[ok] - ref[None]).reshape(int(ok.sum()), -1).sum(axis=1) * grid.cell_volume
    return float(dev.mean()) if dev.size else math.nan, int(np.count_nonzero(rejected))
