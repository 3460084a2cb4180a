"""Periodic grid, staggered finite-volume operators and the spectral basis.

Densities are cell averages.  Vector fields (fluxes, controls, basis
modes) are staggered: component ``a`` of a vector field is stored on the
upper face of each cell in direction ``a``.  With this layout the
discrete divergence telescopes, so total mass is conserved by every flux
update, and ``laplacian = div_centered(grad_centered(u))`` is the compact
second-order stencil.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import GridMismatch, ResolutionError


@dataclass(frozen=True)
class Grid:
    d: int
    n: int

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError("only d in {1, 2} is supported")
        if self.n < 8 or self.n & (self.n - 1):
            raise ValueError("n must be a power of two >= 8")

    @property
    def h(self):
        return 1.0 / self.n

    @property
    def shape(self):
        return (self.n,) * self.d

    @property
    def size(self):
        return self.n**self.d

    @property
    def cell_volume(self):
        return self.h**self.d

    @property
    def max_frequency(self):
        """Largest usable Fourier frequency (aliasing guard n/4)."""
        return self.n // 4

    @cached_property
    def centers(self):
        """Coordinates of cell centres, one array per axis (broadcastable)."""
        x = (np.arange(self.n) + 0.5) * self.h
        if self.d == 1:
            return (x,)
        return tuple(np.meshgrid(x, x, indexing="ij"))

    def face_coords(self, axis):
        """Coordinates of the faces carrying component ``axis``."""
        coords = list(self.centers)
        coords[axis] = coords[axis] + 0.5 * self.h
        return tuple(coords)

    def zeros(self):
        return np.zeros(self.shape)

    def vector_zeros(self):
        return np.zeros((self.d,) + self.shape)


@dataclass
class Field:
    """Cell-averaged scalar field on a grid, optionally stamped with a time."""

    values: np.ndarray
    grid: Grid
    t: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise GridMismatch(f"field of shape {self.values.shape} on grid {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field has non-finite entries")

    @property
    def mass(self):
        return mass(self.values, self.grid)

    def copy(self):
        return Field(self.values.copy(), self.grid, self.t)


def as_values(u, grid=None):
    if isinstance(u, Field):
        if grid is not None and u.grid != grid:
            raise GridMismatch(f"grid {u.grid} differs from {grid}")
        return u.values
    return np.asarray(u, dtype=float)


# ---------------------------------------------------------------------------
# Difference operators
# ---------------------------------------------------------------------------

def grad(u, grid):
    """Cell -> face forward difference (centred at the face)."""
    return np.stack([(np.roll(u, -1, axis=a) - u) / grid.h for a in range(grid.d)])


def div(v, grid):
    """Face -> cell backward difference; cell sums telescope to zero."""
    out = np.zeros(v.shape[1:])
    for a in range(grid.d):
        out += (v[a] - np.roll(v[a], 1, axis=a)) / grid.h
    return out


def div_adjoint(w, grid):
    """Transpose of :func:`div` (cell -> face), equal to ``-grad``."""
    return np.stack([(w - np.roll(w, -1, axis=a)) / grid.h for a in range(grid.d)])


def laplacian(u, grid):
    return div(grad(u, grid), grid)


def face_average(u, grid):
    """Arithmetic mean of the two cells adjacent to each face."""
    return np.stack([0.5 * (u + np.roll(u, -1, axis=a)) for a in range(grid.d)])


def cell_average(v, grid):
    """Average of face values back to cells, component-wise."""
    return np.stack([0.5 * (v[a] + np.roll(v[a], 1, axis=a)) for a in range(grid.d)])


def upwind_values(s, velocity, grid):
    """Cell quantity ``s`` sampled at faces from the upwind side of ``velocity``."""
    return np.stack([np.where(velocity[a] >= 0.0, s, np.roll(s, -1, axis=a)) for a in range(grid.d)])


def upwind_flux(s, velocity, grid):
    return upwind_values(s, velocity, grid) * velocity


def apply_diff_operator(kind, u, grid, advect=None):
    """Dispatch to one of ``grad_centered``, ``div_centered``, ``div_upwind``, ``laplacian``.

    ``div_upwind`` takes the cell quantity to transport as ``u`` and the face
    velocity as ``advect`` and returns ``div(upwind(u) * advect)``.
    """
    u = as_values(u, grid)
    if kind == "grad_centered":
        _expect(u, grid.shape)
        return grad(u, grid)
    if kind == "div_centered":
        _expect(u, (grid.d,) + grid.shape)
        return div(u, grid)
    if kind == "div_upwind":
        if advect is None:
            raise ValueError("div_upwind needs the advecting velocity")
        _expect(u, grid.shape)
        _expect(np.asarray(advect), (grid.d,) + grid.shape)
        return div(upwind_flux(u, np.asarray(advect), grid), grid)
    if kind == "laplacian":
        _expect(u, grid.shape)
        return laplacian(u, grid)
    raise ValueError(f"unknown operator {kind!r}")


def _expect(arr, shape):
    if arr.shape != tuple(shape):
        raise GridMismatch(f"operand of shape {arr.shape}, expected {tuple(shape)}")


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------

def mass(u, grid):
    return float(np.sum(u) * grid.cell_volume)


def l1(u, grid):
    return float(np.sum(np.abs(u)) * grid.cell_volume)


def l2(u, grid):
    return float(math.sqrt(np.sum(np.square(u)) * grid.cell_volume))


def norms_and_mass(u, grid):
    """Discrete L1, L2, mass and (for vector fields) 1/2 |v|^2 integrated."""
    u = as_values(u, grid)
    out = {"l1": l1(u, grid), "l2": l2(u, grid), "mass": None, "control_energy_density": None}
    if u.shape == grid.shape:
        out["mass"] = mass(u, grid)
    else:
        out["control_energy_density"] = 0.5 * float(np.sum(np.square(u)) * grid.cell_volume)
    return out


# ---------------------------------------------------------------------------
# Orthonormal trigonometric basis of L^2(T^d; R^d)
# ---------------------------------------------------------------------------

def _freq(i):
    """1D index -> frequency: 0 -> const, 2j-1 -> sin(2 pi j x), 2j -> cos(2 pi j x)."""
    return (i + 1) // 2


def trig_1d(i, x):
    j = _freq(i)
    if i == 0:
        return np.ones_like(x)
    if i % 2 == 1:
        return math.sqrt(2.0) * np.sin(2.0 * math.pi * j * x)
    return math.sqrt(2.0) * np.cos(2.0 * math.pi * j * x)


def dtrig_1d(i, x):
    j = _freq(i)
    w = 2.0 * math.pi * j
    if i == 0:
        return np.zeros_like(x)
    if i % 2 == 1:
        return math.sqrt(2.0) * w * np.cos(w * x)
    return -math.sqrt(2.0) * w * np.sin(w * x)


@dataclass(frozen=True)
class SpectralBasis:
    """The first ``K`` modes e_1..e_K, sampled on the staggered faces of ``grid``.

    d = 1: e_1 = 1, e_{2j} = sqrt2 sin(2 pi j x), e_{2j+1} = sqrt2 cos(2 pi j x).
    d = 2: products f_i(x) f_j(y) times a unit vector, ordered by total
    frequency, then (i, j), then direction.
    """

    grid: Grid
    K: int
    _modes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        labels = _mode_labels(self.grid.d, self.grid.max_frequency)
        if self.K > len(labels):
            raise ResolutionError(
                f"K={self.K} exceeds the {len(labels)} modes resolvable on n={self.grid.n} (max frequency n/4)")
        object.__setattr__(self, "_modes", tuple(labels[: self.K]))

    @property
    def capacity(self):
        return len(_mode_labels(self.grid.d, self.grid.max_frequency))

    def label(self, k):
        """(1D indices per axis, direction) of mode k (1-based)."""
        return self._modes[k - 1]

    def frequency(self, k):
        idx, _ = self.label(k)
        return max(_freq(i) for i in idx)

    def evaluate(self, k, coords_for_axis):
        """Mode k as a vector field; ``coords_for_axis(a)`` gives sample points for component a."""
        idx, direction = self.label(k)
        out = np.zeros((self.grid.d,) + self.grid.shape)
        coords = coords_for_axis(direction)
        val = np.ones(self.grid.shape)
        for axis, i in enumerate(idx):
            val = val * trig_1d(i, coords[axis])
        out[direction] = val
        return out

    def divergence(self, k, coords):
        """Analytic divergence of mode k at the given coordinates."""
        idx, direction = self.label(k)
        val = np.ones(np.broadcast(*coords).shape)
        for axis, i in enumerate(idx):
            val = val * (dtrig_1d(i, coords[axis]) if axis == direction else trig_1d(i, coords[axis]))
        return val

    @cached_property
    def matrix(self):
        """Array (K, d, *shape) of all modes on the staggered faces."""
        return np.stack([self.evaluate(k, self.grid.face_coords) for k in range(1, self.K + 1)])

    def synthesize(self, coeffs):
        """sum_k c_k e_k for coefficient arrays of shape (..., K)."""
        coeffs = np.asarray(coeffs, dtype=float)
        return np.tensordot(coeffs, self.matrix, axes=([-1], [0]))

    def analyze(self, v):
        """<v, e_k> for face vector fields of shape (..., d, *shape)."""
        v = np.asarray(v, dtype=float)
        nd = self.grid.d + 1
        return np.tensordot(v, self.matrix, axes=(list(range(v.ndim - nd, v.ndim)), list(range(1, nd + 1)))) \
            * self.grid.cell_volume


_LABEL_CACHE = {}


def _mode_labels(d, fmax):
    key = (d, fmax)
    if key not in _LABEL_CACHE:
        idx1 = list(range(2 * fmax + 1))
        if d == 1:
            labels = [((i,), 0) for i in idx1]
        else:
            pairs = [(i, j) for i in idx1 for j in idx1]
            pairs.sort(key=lambda ij: (_freq(ij[0]) + _freq(ij[1]), ij[0], ij[1]))
            labels = [(ij, a) for ij in pairs for a in range(2)]
        _LABEL_CACHE[key] = labels
    return _LABEL_CACHE[key]


def basis_mode(basis, k):
    if not 1 <= k <= basis.K:
        raise ResolutionError(f"mode {k} outside 1..{basis.K}")
    return basis.matrix[k - 1].copy()


# ---------------------------------------------------------------------------
# Controls
# ---------------------------------------------------------------------------

@dataclass
class ControlField:
    """Piecewise-constant-in-time vector field on ``[times[j], times[j+1])``.

    Either ``values`` (shape (N, d, *grid.shape), face-staggered) or
    ``coeffs`` (shape (N, K)) together with ``basis`` must be given.
    """

    grid: Grid
    times: np.ndarray
    values: np.ndarray | None = None
    coeffs: np.ndarray | None = None
    basis: SpectralBasis | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.times.ndim != 1 or len(self.times) < 2 or np.any(np.diff(self.times) <= 0):
            raise ValueError("control time breakpoints must be strictly increasing, at least two")
        n_int = len(self.times) - 1
        if self.values is not None:
            self.values = np.asarray(self.values, dtype=float)
            if self.values.shape != (n_int, self.grid.d) + self.grid.shape:
                raise GridMismatch(f"control values have shape {self.values.shape}")
        elif self.coeffs is not None:
            self.coeffs = np.asarray(self.coeffs, dtype=float)
            if self.basis is None or self.coeffs.shape != (n_int, self.basis.K):
                raise GridMismatch("spectral control needs a basis and coeffs of shape (N, K)")
            if self.basis.grid != self.grid:
                raise GridMismatch("basis grid differs from control grid")
        else:
            raise ValueError("control needs grid values or spectral coefficients")

    # -- constructors ----------------------------------------------------
    @classmethod
    def zero(cls, grid, T):
        return cls(grid, np.array([0.0, T]), values=np.zeros((1, grid.d) + grid.shape))

    @classmethod
    def constant(cls, grid, T, field_values):
        v = np.asarray(field_values, dtype=float)[None]
        return cls(grid, np.array([0.0, T]), values=v)

    @classmethod
    def from_function(cls, grid, times, fn):
        """``fn(t, coords_for_axis) -> (d, *shape)`` evaluated at interval left ends."""
        times = np.asarray(times, dtype=float)
        vals = np.stack([np.asarray(fn(t, grid.face_coords), dtype=float) for t in times[:-1]])
        return cls(grid, times, values=vals)

    # -- queries ---------------------------------------------------------
    @property
    def is_spectral(self):
        return self.coeffs is not None

    @property
    def T(self):
        return float(self.times[-1])

    @property
    def n_intervals(self):
        return len(self.times) - 1

    @property
    def dts(self):
        return np.diff(self.times)

    def interval(self, t):
        j = int(np.searchsorted(self.times, t, side="right")) - 1
        return min(max(j, 0), self.n_intervals - 1)

    def at(self, t):
        """Face vector field active at time ``t``."""
        j = self.interval(t)
        if self.is_spectral:
            return self.basis.synthesize(self.coeffs[j])
        return self.values[j]

    def grid_values(self):
        if self.is_spectral:
            return self.basis.synthesize(self.coeffs)
        return self.values

    def to_grid(self):
        return ControlField(self.grid, self.times.copy(), values=self.grid_values())

    def energy(self):
        """1/2 int_0^T int |g|^2 dx dt."""
        if self.is_spectral:
            per = np.sum(self.coeffs**2, axis=1)
        else:
            per = np.sum(self.values**2, axis=tuple(range(1, self.values.ndim))) * self.grid.cell_volume
        return 0.5 * float(np.dot(per, self.dts))

    def norm_lp_lq(self, p, q):
        """||g||_{L^p([0,T]; L^q(T^d))} with cell-wise Euclidean vector norm."""
        vals = self.grid_values()
        mag = np.sqrt(np.sum(vals**2, axis=1))
        space = (np.sum(mag**q, axis=tuple(range(1, mag.ndim))) * self.grid.cell_volume) ** (1.0 / q)
        return float(np.dot(space**p, self.dts) ** (1.0 / p))


def project_PK(g, K, basis=None):
    """Spectral projection onto e_1..e_K; returns a spectral ControlField."""
    basis = basis if basis is not None and basis.K == K else SpectralBasis(g.grid, K)
    if g.is_spectral:
        c = np.zeros((g.n_intervals, K))
        kk = min(K, g.basis.K)
        c[:, :kk] = g.coeffs[:, :kk]
        if g.basis.grid != basis.grid:
            raise GridMismatch("basis grids differ")
        return ControlField(g.grid, g.times.copy(), coeffs=c, basis=basis)
    return ControlField(g.grid, g.times.copy(), coeffs=basis.analyze(g.values), basis=basis)


# ---------------------------------------------------------------------------
# Scaling (zoom) of controls
# ---------------------------------------------------------------------------

def criticality_exponent(m, d, p, q, r):
    """Exponent E with ||g_tilde|| = eta^E ||g|| in L^p_t L^q_x.

    Zoom rho_tilde(x,t) = lam rho(eta x, tau t) with the diffusion kept fixed
    (tau = eta^2 lam^(m-1)) and lam = eta^(d/r) (L^r norm of the datum kept
    fixed); the control picks up tau / (eta lam^(m/2-1)) and the Jacobians
    eta^(-d/q) tau^(-1/p).
    """
    for name, val in (("p", p), ("q", q), ("r", r), ("m", m)):
        if val < 1:
            raise ValueError(f"{name} must be >= 1")
    log_lam = d / r
    log_tau = 2.0 + (m - 1.0) * log_lam
    return (1.0 - 1.0 / p) * log_tau - 1.0 - d / q - (m / 2.0 - 1.0) * log_lam


def rescale_control(g, eta, m, r, p, q):
    """Zoomed control g_tilde(x,t) = tau/(eta lam^(m/2-1)) g(eta x, tau t).

    The spatial argument is evaluated by exact trigonometric interpolation of
    the face samples; the time breakpoints map to ``times / tau`` and are
    cut at the original horizon T.  Returns ``(g_tilde, measured_ratio)``
    with the ratio of the L^p_t L^q_x norms over T^d x [0, T].
    """
    if not 0.0 < eta <= 1.0:
        raise ValueError("eta must lie in (0, 1]")
    g = g.to_grid() if g.is_spectral else g
    grid = g.grid
    d = grid.d
    lam = eta ** (d / r)
    tau = eta**2 * lam ** (m - 1.0)
    pre = tau / (eta * lam ** (m / 2.0 - 1.0))
    _check_band_limit(g.values, grid)

    if eta == 1.0:
        out = ControlField(grid, g.times.copy(), values=g.values.copy())
        return out, 1.0

    T = g.T
    new_times = g.times / tau
    keep = int(np.searchsorted(new_times, T, side="left"))
    times = np.concatenate([new_times[:keep], [T]])
    vals = np.empty((keep, d) + grid.shape)
    for a in range(d):
        vals[:, a] = _zoom_component(g.values[:keep, a], grid, a, eta)
    out = ControlField(grid, times, values=pre * vals)
    return out, out.norm_lp_lq(p, q) / g.norm_lp_lq(p, q)


def _check_band_limit(values, grid, tol=1e-8):
    axes = tuple(range(values.ndim - grid.d, values.ndim))
    spec = np.fft.fftn(values, axes=axes)
    k = np.fft.fftfreq(grid.n, d=grid.h)
    high = np.zeros(grid.shape, dtype=bool)
    for a in range(grid.d):
        shape = [1] * grid.d
        shape[a] = grid.n
        high |= (np.abs(k) > grid.max_frequency).reshape(shape)
    total = np.sum(np.abs(spec) ** 2)
    if total > 0 and np.sum(np.abs(spec[..., high]) ** 2) > tol * total:
        raise ResolutionError("control carries frequencies above n/4; zoom would alias")


def _zoom_component(vals, grid, component, eta):
    """Evaluate the trig interpolant of face samples at eta * (face coordinates)."""
    n, h = grid.n, grid.h
    k = np.fft.fftfreq(n, d=h)
    out = np.fft.fftn(vals, axes=tuple(range(1, grid.d + 1))) / n**grid.d
    for axis in range(grid.d):
        x0 = (0.5 + (0.5 if axis == component else 0.0)) * h
        x = x0 + np.arange(n) * h
        E = np.exp(2j * math.pi * np.outer(eta * x - x0, k))
        # symmetric Nyquist term keeps the interpolant real
        E[:, n // 2] = np.cos(math.pi * n * (eta * x - x0))
        out = np.moveaxis(np.tensordot(out, E, axes=([axis + 1], [1])), -1, axis + 1)
    return out.real


def concentrated_control(grid, m, r, eta_min, n_intervals=40, T=1.0):
    """Smooth bump supported (numerically) in [0, eta_min]^d x [0, tau_min T].

    Zooming by any eta >= eta_min then keeps the whole support inside the
    domain, so measured norm ratios follow the scaling law exactly.
    """
    d = grid.d
    lam = eta_min ** (d / r)
    tau = eta_min**2 * lam ** (m - 1.0)
    times = np.concatenate([np.linspace(0.0, tau * T, n_intervals + 1), [T]])
    centre, width = eta_min / 2.0, eta_min / 10.0

    def fn(t, coords_for_axis):
        out = np.zeros((d,) + grid.shape)
        bump = np.ones(grid.shape)
        for a, x in enumerate(coords_for_axis(0)):
            bump = bump * np.exp(-((x - centre) ** 2) / (2 * width**2))
        s = (t - tau * T / 2) / (tau * T / 10)
        out[0] = bump * np.exp(-s * s / 2)
        return out

    return ControlField.from_function(grid, times, fn)


def criticality_fit(m, d, p, q, r, etas=(0.5, 0.25, 0.125), n=256):
    """(predicted exponent, fitted slope of log ratio vs log eta, ratios)."""
    etas = np.asarray(etas, dtype=float)
    grid = Grid(d, n)
    g = concentrated_control(grid, m, r, float(etas.min()))
    ratios = np.array([rescale_control(g, float(e), m, r, p, q)[1] for e in etas])
    slope = float(np.polyfit(np.log(etas), np.log(ratios), 1)[0])
    return criticality_exponent(m, d, p, q, r), slope, ratios
