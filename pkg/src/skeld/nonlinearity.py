"""The diffusion nonlinearity Phi and the scalar functions derived from it.

Two kinds are supported: the power law ``Phi(xi) = xi**m`` (closed forms
everywhere) and a tabulated monotone Phi interpolated with PCHIP.  All
vectorised helpers accept numpy arrays; the ``phi_eval``-style public
functions add the domain checks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import integrate
from scipy.interpolate import CubicSpline, PchipInterpolator
from scipy.optimize import brentq
from scipy.special import xlogy

from .errors import DomainError, InvalidNonlinearity, SingularityError

WHICH = ("phi", "dphi", "sqrt_phi", "dsqrt_phi")


@dataclass(frozen=True)
class NonlinearitySpec:
    """Phi as either ``kind="power"`` (exponent ``m``) or ``kind="table"``."""

    kind: str = "power"
    m: float = 1.0
    points: tuple = ()

    def __post_init__(self):
        if self.kind == "power":
            if not (math.isfinite(self.m) and self.m > 0):
                raise InvalidNonlinearity(f"power exponent must be positive, got {self.m}")
        elif self.kind == "table":
            pts = np.asarray(self.points, dtype=float)
            if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
                raise InvalidNonlinearity("table needs at least three (xi, Phi) pairs")
            if pts[0, 0] != 0.0 or pts[0, 1] != 0.0:
                raise InvalidNonlinearity("table must start at (0, 0) since Phi(0) = 0")
            if np.any(np.diff(pts[:, 0]) <= 0):
                raise InvalidNonlinearity("table abscissae must be strictly increasing")
            if np.any(np.diff(pts[:, 1]) <= 0):
                raise InvalidNonlinearity("tabulated Phi is not strictly increasing")
        else:
            raise InvalidNonlinearity(f"unknown nonlinearity kind {self.kind!r}")

    # -- construction ---------------------------------------------------
    @classmethod
    def power(cls, m):
        return cls("power", float(m))

    @classmethod
    def table(cls, points):
        return cls("table", float("nan"), tuple((float(a), float(b)) for a, b in points))

    @classmethod
    def from_config(cls, cfg):
        kind = cfg.get("kind", "power")
        if kind == "power":
            return cls.power(cfg.get("m", 1.0))
        if kind == "table":
            return cls.table(cfg["points"])
        raise InvalidNonlinearity(f"unknown nonlinearity kind {kind!r}")

    def to_config(self):
        if self.kind == "power":
            return {"kind": "power", "m": self.m}
        return {"kind": "table", "points": [list(p) for p in self.points]}

    @property
    def is_power(self):
        return self.kind == "power"

    @property
    def is_linear(self):
        return self.is_power and self.m == 1.0

    @property
    def xi_max(self):
        return math.inf if self.is_power else self.points[-1][0]

    @cached_property
    def _interp(self):
        pts = np.asarray(self.points)
        return PchipInterpolator(pts[:, 0], pts[:, 1], extrapolate=True)

    @cached_property
    def _dinterp(self):
        return self._interp.derivative()

    # -- vectorised evaluation (no domain checks) ------------------------
    # Negative arguments only occur inside Newton iterations; Phi is
    # continued as an odd function there so the residual stays monotone.
    def phi(self, x):
        x = np.asarray(x, dtype=float)
        if self.is_power:
            return np.sign(x) * np.abs(x) ** self.m
        return np.sign(x) * self._table_phi(np.abs(x))

    def dphi(self, x):
        x = np.asarray(x, dtype=float)
        if self.is_power:
            if self.m == 1.0:
                return np.ones_like(x)
            return self.m * np.abs(x) ** (self.m - 1.0)
        return self._table_dphi(np.abs(x))

    def sqrt_phi(self, x):
        x = np.asarray(x, dtype=float)
        xp = np.maximum(x, 0.0)
        if self.is_power:
            return xp ** (0.5 * self.m)
        return np.sqrt(self._table_phi(xp))

    def dsqrt_phi(self, x):
        """Derivative of Phi^(1/2); +inf where it is singular (x = 0, m < 2)."""
        x = np.asarray(x, dtype=float)
        xp = np.maximum(x, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.is_power:
                if self.m == 2.0:
                    return np.ones_like(xp)
                out = 0.5 * self.m * xp ** (0.5 * self.m - 1.0)
            else:
                out = self._table_dphi(xp) / (2.0 * np.sqrt(self._table_phi(xp)))
        return out

    def _table_phi(self, x):
        top_x, top_y = self.points[-1]
        slope = float(self._dinterp(top_x))
        inside = self._interp(np.minimum(x, top_x))
        return np.where(x > top_x, top_y + slope * (x - top_x), inside)

    def _table_dphi(self, x):
        top_x = self.points[-1][0]
        # PCHIP keeps monotone data monotone; clip round-off below zero
        return np.maximum(self._dinterp(np.minimum(x, top_x)), 0.0)

    def __str__(self):
        if self.is_power:
            return f"Phi(xi)=xi^{self.m:g}"
        return f"Phi tabulated on {len(self.points)} points"


def _check_domain(spec, xi):
    xi = np.asarray(xi, dtype=float)
    if np.any(~np.isfinite(xi)) or np.any(xi < 0):
        raise DomainError("argument must be a finite nonnegative real")
    if not spec.is_power and np.any(xi > spec.xi_max):
        raise DomainError(f"argument beyond the tabulated range [0, {spec.xi_max}]")
    return xi


def _scalar_or_array(value, like):
    return float(value) if np.ndim(like) == 0 else value


def phi_eval(spec, which, xi):
    """Evaluate Phi, Phi', Phi^(1/2) or (Phi^(1/2))' at ``xi >= 0``.

    Derivatives at the degenerate point return the one-sided limit when it
    is finite and raise :class:`SingularityError` otherwise.
    """
    if which not in WHICH:
        raise ValueError(f"which must be one of {WHICH}")
    x = _check_domain(spec, xi)
    if which == "phi":
        out = spec.phi(x)
    elif which == "sqrt_phi":
        out = spec.sqrt_phi(x)
    elif which == "dphi":
        out = spec.dphi(x)
    else:
        out = spec.dsqrt_phi(x)
        at0 = x == 0.0
        if np.any(at0):
            if spec.is_power:
                if spec.m < 2.0:
                    raise SingularityError("(Phi^(1/2))' is infinite at 0 for m < 2")
            else:
                if float(spec._dinterp(0.0)) > 0.0:
                    raise SingularityError("(Phi^(1/2))' is infinite at 0 since Phi'(0) > 0")
                second = float(spec._interp.derivative(2)(0.0))
                out = np.where(at0, math.sqrt(max(second, 0.0) / 2.0), out)
    return _scalar_or_array(out, xi)


def entropy_density(spec, xi):
    """Psi_Phi(xi), the antiderivative of log Phi vanishing at 0."""
    x = _check_domain(spec, xi)
    if spec.is_power:
        out = spec.m * (xlogy(x, x) - x)
    else:
        out = np.vectorize(lambda s: _table_entropy(spec, s), otypes=[float])(x)
    return _scalar_or_array(out, xi)


def _table_entropy(spec, s):
    if s == 0.0:
        return 0.0
    knots = [p[0] for p in spec.points if 0.0 < p[0] < s]
    val, _ = integrate.quad(
        lambda t: math.log(float(spec.phi(t))) if t > 0 else 0.0,
        0.0, s, epsabs=1e-10, epsrel=1e-12, limit=200, points=knots or None,
    )
    return val


def entropy_field(spec, rho):
    """Cell-wise Psi_Phi(rho) for a density array (closed form for power law)."""
    rho = np.asarray(rho, dtype=float)
    if spec.is_power:
        r = np.maximum(rho, 0.0)
        return spec.m * (xlogy(r, r) - r)
    return np.vectorize(lambda s: _table_entropy(spec, max(s, 0.0)), otypes=[float])(rho)


def truncate_phi(spec, n, xi):
    """Phi_n(xi) = Phi(min(xi, n)) + Phi'(n) (xi - n)_+ ; C^1 at xi = n."""
    if n < 1:
        raise DomainError("truncation level n must be >= 1")
    x = np.asarray(xi, dtype=float)
    if np.any(x < 0):
        raise DomainError("argument must be nonnegative")
    out = spec.phi(np.minimum(x, n)) + spec.dphi(np.asarray(float(n))) * np.maximum(x - n, 0.0)
    return _scalar_or_array(out, xi)


def theta_functions(spec, which, xi):
    """Theta_{sqrt(Phi')} and Theta_{Phi_n}: antiderivatives vanishing at 0.

    ``theta_sqrt_dphi`` integrates sqrt(Phi'), ``theta_phi`` integrates
    Phi'^2 / Phi.  The latter diverges at 0 when Phi'(0) > 0 (e.g. m = 1).
    """
    x = _check_domain(spec, xi)
    if which == "theta_sqrt_dphi":
        if spec.is_power:
            m = spec.m
            out = 2.0 * math.sqrt(m) / (m + 1.0) * x ** ((m + 1.0) / 2.0)
        else:
            f = lambda t: math.sqrt(float(spec.dphi(t)))
            out = np.vectorize(lambda s: integrate.quad(f, 0.0, s, epsabs=1e-12, limit=200)[0],
                               otypes=[float])(x)
    elif which == "theta_phi":
        if spec.is_power:
            m = spec.m
            if m <= 1.0:
                raise ZeroDivisionError("Theta_{Phi_n} diverges for m <= 1 (Phi'^2/Phi ~ 1/xi)")
            out = m * m / (m - 1.0) * x ** (m - 1.0)
        else:
            if float(spec._dinterp(0.0)) > 0.0:
                raise ZeroDivisionError("Theta_{Phi_n} diverges since Phi'(0) > 0")

            def f(t):
                p = float(spec.phi(t))
                return float(spec.dphi(t)) ** 2 / p if p > 0 else 0.0

            out = np.vectorize(lambda s: integrate.quad(f, 0.0, s, epsabs=1e-12, limit=200)[0],
                               otypes=[float])(x)
    else:
        raise ValueError("which must be 'theta_sqrt_dphi' or 'theta_phi'")
    return _scalar_or_array(out, xi)


def defect_coeff(spec, xi):
    """4 Phi(xi) / Phi'(xi), continuously extended by 0 at xi = 0."""
    x = _check_domain(spec, xi)
    if spec.is_power:
        out = (4.0 / spec.m) * x
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(x > 0, 4.0 * spec.phi(x) / spec.dphi(x), 0.0)
    return _scalar_or_array(out, xi)


# ---------------------------------------------------------------------------
# Regularisation of Phi^(1/2): cap at Phi(1/eta), then mollify with a kernel
# supported on (-eps, 0) so that the value at 0 stays exactly 0.
# ---------------------------------------------------------------------------

_GL_X, _GL_W = leggauss(24)
_GL_X = 0.5 * (_GL_X + 1.0)  # nodes on [0, 1]
_GL_W = 0.5 * _GL_W


def _bspline3(t):
    a = np.abs(t)
    return np.where(a < 1.0, (4.0 - 6.0 * a**2 + 3.0 * a**3) / 6.0,
                    np.where(a < 2.0, (2.0 - a) ** 3 / 6.0, 0.0))


def _dbspline3(t):
    a = np.abs(t)
    s = np.sign(t)
    return s * np.where(a < 1.0, (-12.0 * a + 9.0 * a**2) / 6.0,
                        np.where(a < 2.0, -0.5 * (2.0 - a) ** 2, 0.0))


@dataclass(frozen=True)
class RegularizationParams:
    """eta in (0, 1); the mollifier width defaults to eta**2."""

    eta: float
    epsilon: float | None = None

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise DomainError(f"eta must lie in (0, 1), got {self.eta}")
        if self.epsilon is not None and not 0.0 < self.epsilon < 1.0:
            raise DomainError(f"mollifier width must lie in (0, 1), got {self.epsilon}")

    @property
    def epsilon_eta(self):
        return self.eta**2 if self.epsilon is None else self.epsilon

    def cap_level(self, spec):
        return float(spec.phi(1.0 / self.eta))


@dataclass(frozen=True)
class RegularizedSqrtPhi:
    """Smooth, bounded, nondecreasing approximation of Phi^(1/2).

    ``value``/``deriv`` are vectorised.  The derivative is computed as
    ``-int f(xi+u) kappa'(u) du`` so the integrable singularity of
    (Phi^(1/2))' at 0 never has to be sampled.
    """

    spec: NonlinearitySpec
    params: RegularizationParams
    _cache: dict = field(default_factory=dict, compare=False, hash=False, repr=False)

    @cached_property
    def cap(self):
        return self.params.cap_level(self.spec)

    @cached_property
    def cap_point(self):
        """Smallest s with Phi^(1/2)(s) = cap."""
        if self.spec.is_power:
            return self.cap ** (2.0 / self.spec.m)
        target = self.cap
        hi = max(self.spec.xi_max, 1.0)
        while float(self.spec.sqrt_phi(hi)) < target:
            hi *= 2.0
        return brentq(lambda s: float(self.spec.sqrt_phi(s)) - target, 0.0, hi, xtol=1e-14)

    def _f(self, s):
        return np.where(s <= 0.0, 0.0, np.minimum(self.spec.sqrt_phi(s), self.cap))

    def _integrate(self, xi, kernel):
        eps = self.params.epsilon_eta
        scale = eps / 4.0
        xi = np.asarray(xi, dtype=float)
        flat = np.maximum(xi.ravel(), 0.0)
        u0 = -flat
        uc = self.cap_point - flat
        total = np.zeros_like(flat)
        for j in range(4):
            a = -eps + j * scale
            b = a + scale
            lo = np.clip(u0, a, b)
            mid = np.clip(uc, lo, b)
            # smooth piece [lo, mid]: substitute u = lo + (mid-lo) w^2
            length = mid - lo
            w = _GL_X[None, :]
            u = lo[:, None] + length[:, None] * w**2
            vals = self._f(flat[:, None] + u) * kernel((u + eps / 2.0) / scale)
            total += (vals * 2.0 * w * _GL_W[None, :]).sum(axis=1) * length
            # capped piece [mid, b]: polynomial integrand
            length = b - mid
            u = mid[:, None] + length[:, None] * _GL_X[None, :]
            vals = self.cap * kernel((u + eps / 2.0) / scale)
            total += (vals * _GL_W[None, :]).sum(axis=1) * length
        return total.reshape(xi.shape)

    def value(self, xi):
        scale = self.params.epsilon_eta / 4.0
        out = self._integrate(xi, _bspline3) / scale
        return np.where(np.asarray(xi) <= 0.0, 0.0, out)

    def deriv(self, xi):
        scale = self.params.epsilon_eta / 4.0
        out = -self._integrate(xi, _dbspline3) / scale**2
        return np.where(np.asarray(xi) <= 0.0, 0.0, np.maximum(out, 0.0))


class TabulatedSqrtPhi:
    """Cubic-spline table of a :class:`RegularizedSqrtPhi` for bulk evaluation.

    Knots are uniform (spacing eps/100) across the mollifier scale near 0
    and around the cap point, geometric in between; beyond the cap the function is constant.
    Agreement with the quadrature is checked in the test suite (1e-8).
    """

    def __init__(self, reg, fine=400, coarse=3000):
        eps = reg.params.epsilon_eta
        top = reg.cap_point + 2.0 * eps
        near = np.linspace(0.0, 4.0 * eps, fine + 1)
        knee = max(reg.cap_point - 2.0 * eps, 8.0 * eps)
        far = np.geomspace(4.0 * eps, knee, coarse + 1)[1:]
        cap_band = np.linspace(knee, max(top, knee + 4.0 * eps), fine + 1)[1:]
        knots = np.concatenate([near, far, cap_band])
        self.top = float(knots[-1])
        self.cap = float(reg.value(np.array([self.top]))[0])
        self._value = CubicSpline(knots, reg.value(knots))
        self._deriv = CubicSpline(knots, reg.deriv(knots))

    def value(self, xi):
        x = np.asarray(xi, dtype=float)
        inside = np.clip(x, 0.0, self.top)
        out = self._value(inside)
        return np.where(x <= 0.0, 0.0, np.where(x >= self.top, self.cap, out))

    def deriv(self, xi):
        x = np.asarray(xi, dtype=float)
        out = np.maximum(self._deriv(np.clip(x, 0.0, self.top)), 0.0)
        return np.where((x <= 0.0) | (x >= self.top), 0.0, out)


def regularized_sqrt_phi(spec, params, xi, derivative=False):
    """Phi^(1/2, eta)(xi) (or its derivative) for the cubic B-spline mollifier."""
    x = np.asarray(xi, dtype=float)
    if np.any(x < 0):
        raise DomainError("argument must be nonnegative")
    reg = RegularizedSqrtPhi(spec, params)
    out = reg.deriv(x) if derivative else reg.value(x)
    return _scalar_or_array(out, xi)


# ---------------------------------------------------------------------------
# Sample-based certification of the structural assumptions on Phi.
# ---------------------------------------------------------------------------

@dataclass
class AssumptionCheck:
    name: str
    passed: bool
    constant: float
    sups: list
    grid: list
    witness: tuple | None = None
    note: str = ""

    def to_dict(self):
        return {
            "name": self.name,
            "passed": bool(self.passed),
            "constant": _finite_or_none(self.constant),
            "grid": [float(g) for g in self.grid],
            "sups": [_finite_or_none(s) for s in self.sups],
            "witness": None if self.witness is None else [float(w) for w in self.witness],
            "note": self.note,
        }


def _finite_or_none(x):
    x = float(x)
    return x if math.isfinite(x) else None


@dataclass
class AssumptionReport:
    spec: NonlinearitySpec
    M: float
    delta_grid: list
    sample_count: int
    checks: list

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def __getitem__(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self):
        return {
            "nonlinearity": self.spec.to_config(),
            "M": self.M,
            "delta_grid": list(self.delta_grid),
            "sample_count": self.sample_count,
            "passed": self.passed,
            "checks": [c.to_dict() for c in self.checks],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# Allowed growth of the scale-normalised sup between the coarsest and the
# finest grid point before an estimate is declared unbounded.
FIT_TOLERANCE = 1.05


def _growth_check(name, sups, scales, grid, witnesses, note=""):
    """``sup(g) <= c * scale(g)`` along ``grid``; c is the tightest constant.

    The last grid point is the singular end (smallest delta, largest M).  Pass
    iff the normalised sup there does not exceed the best constant from the
    other points by more than FIT_TOLERANCE.
    """
    sups = np.asarray(sups, dtype=float)
    scales = np.asarray(scales, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = sups / scales
    if not np.all(np.isfinite(ratios)):
        bad = int(np.argmax(~np.isfinite(ratios)))
        return AssumptionCheck(name, False, math.inf, sups.tolist(), list(grid), witnesses[bad], note)
    c = float(ratios.max())
    ref = float(ratios[:-1].max()) if ratios.size > 1 else c
    passed = bool(ratios[-1] <= FIT_TOLERANCE * ref + 1e-300)
    witness = None if passed else witnesses[-1]
    return AssumptionCheck(name, passed, c, sups.tolist(), list(grid), witness, note)


def _sobol(n_dims, count, seed=0):
    from scipy.stats import qmc

    m = max(int(math.ceil(math.log2(count))), 1)
    return qmc.Sobol(d=n_dims, scramble=True, seed=seed).random_base2(m)


def _pairs(spec, lo, hi, delta, count):
    """Quasi-random pairs in [lo, hi]^2 with |xi - xi'| < delta."""
    u = _sobol(2, count)
    xi = lo + (hi - lo) * u[:, 0]
    xip = xi + delta * (2.0 * u[:, 1] - 1.0)
    extra = [lo, hi]
    if not spec.is_power:
        extra += [p[0] for p in spec.points if lo <= p[0] <= hi]
    anchors = np.array(extra)
    offs = delta * np.array([-0.999, -0.5, -0.25, 0.25, 0.5, 0.999])
    xi = np.concatenate([xi, np.repeat(anchors, len(offs)), np.repeat(anchors, len(offs)) + np.tile(offs, len(anchors))])
    xip = np.concatenate([xip, np.repeat(anchors, len(offs)) + np.tile(offs, len(anchors)), np.repeat(anchors, len(offs))])
    keep = (xip >= lo) & (xip <= hi) & (xi >= lo) & (xi <= hi)
    return xi[keep], xip[keep]


def _sup(values, xi, xip):
    values = np.where(np.isfinite(values), values, np.inf)
    i = int(np.argmax(values))
    return float(values[i]), (float(xi[i]), float(xip[i]))


def check_assumptions(spec, M=10.0, delta_grid=(0.5, 0.2, 0.1, 0.05, 0.02, 0.01), sample_count=4096):
    """Certify, on quasi-random samples, the structural assumptions on Phi.

    Every item is reduced to a sup over sampled points; the reported constant
    is the tightest one on the grid and the item passes iff the normalised
    sup does not grow toward the singular end of the grid (see
    ``FIT_TOLERANCE``).  Results are evidence, not proof.
    """
    delta_grid = [float(d) for d in delta_grid]
    if sorted(delta_grid, reverse=True) != delta_grid or not all(0 < d < 1 for d in delta_grid):
        raise ValueError("delta_grid must be sorted descending inside (0, 1)")
    if sample_count < 1000:
        raise ValueError("sample_count must be at least 1000")
    if M <= 1:
        raise ValueError("M must exceed 1")
    if not spec.is_power:
        pts = np.asarray(spec.points)
        if np.any(np.diff(pts[:, 1]) <= 0):
            raise InvalidNonlinearity("tabulated Phi is not monotone")

    M = float(M)
    lo, hi = 1.0 / M, M
    if not spec.is_power:
        hi = min(hi, spec.xi_max)
    checks = []
    sq, dp = spec.sqrt_phi, spec.dphi

    # Phi(0) = 0 and strict monotonicity on a dense sample
    xs = np.concatenate([[0.0], np.sort(_sobol(1, sample_count)[:, 0]) * hi])
    vals = spec.phi(xs)
    steps = np.diff(vals)
    mono = bool(np.all(steps > 0))
    wit = None
    if not mono:
        k = int(np.argmin(steps))
        wit = (float(xs[k]), float(xs[k + 1]))
    checks.append(AssumptionCheck("phi_zero", float(spec.phi(0.0)) == 0.0, 0.0, [float(spec.phi(0.0))], [0.0],
                                  None if float(spec.phi(0.0)) == 0.0 else (0.0, 0.0)))
    checks.append(AssumptionCheck("strictly_increasing", mono, 0.0, [float(steps.min())], [hi], wit))

    # Two delta-moduli on [1/M, M]
    sups1, sups2, w1, w2 = [], [], [], []
    with np.errstate(divide="ignore", invalid="ignore"):
        for d in delta_grid:
            a, b = _pairs(spec, lo, hi, d, sample_count)
            s, w = _sup(np.abs(sq(a) / dp(a) * (sq(a) - sq(b))), a, b)
            sups1.append(s)
            w1.append(w)
            q = sq(a) * sq(b) / (dp(a) * dp(b)) * (np.sqrt(dp(a)) - np.sqrt(dp(b))) ** 2
            s, w = _sup(np.abs(q), a, b)
            sups2.append(s)
            w2.append(w)
    checks.append(_growth_check("delta_modulus_sqrt_phi", sups1, delta_grid, delta_grid, w1))
    checks.append(_growth_check("delta_modulus_dphi", sups2, delta_grid, delta_grid, w2))

    # Two M-growth items on an M-grid
    m_grid = [M / 8.0, M / 4.0, M / 2.0, M]
    m_grid = [x for x in m_grid if x > 1.0] or [M]
    sups3, sups4, w3, w4 = [], [], [], []
    with np.errstate(divide="ignore", invalid="ignore"):
        for Mi in m_grid:
            top = Mi if spec.is_power else min(Mi, spec.xi_max)
            a, b = _pairs(spec, 1.0 / Mi, top, 0.5 / Mi, sample_count)
            s, w = _sup(np.abs(sq(a) * sq(b) / dp(a)), a, b)
            sups3.append(s)
            w3.append(w)
            x = top * _sobol(1, sample_count)[:, 0]
            x = np.concatenate([x, [top]])
            r = np.where(x > 0, spec.phi(x) / dp(x), 0.0)
            s, w = _sup(np.abs(r), x, x)
            sups4.append(s)
            w4.append(w)
    checks.append(_growth_check("M_growth_product", sups3, m_grid, m_grid, w3))
    checks.append(_growth_check("phi_over_dphi_linear", sups4, m_grid, m_grid, w4))

    checks.append(_check_equiv(spec, hi, sample_count))
    checks.append(_check_log(spec, hi, sample_count))
    checks.append(_check_interpolate(spec, hi, sample_count))
    checks.extend(_check_weak_ldp(spec, hi, sample_count))
    return AssumptionReport(spec, M, delta_grid, sample_count, checks)


def _check_equiv(spec, hi, count):
    x = np.concatenate([hi * _sobol(1, count)[:, 0], [hi]])
    x = x[x > 0]
    s = spec.sqrt_phi(x)
    order = np.argsort(x)
    xo, so = x[order], s[order]
    slopes = np.diff(so) / np.diff(xo)
    tol = 1e-9 * max(1.0, float(np.abs(slopes).max()))
    concave = bool(np.all(np.diff(slopes) <= tol))
    convex = bool(np.all(np.diff(slopes) >= -tol))
    with np.errstate(divide="ignore"):
        ratio = s / spec.dphi(x)
    if concave:
        val = ratio**2 / (x + 1.0)
        c = float(val.max())
        ok = bool(np.isfinite(c))
        return AssumptionCheck("equiv_branch", ok, c, [c], [hi], None if ok else (float(x[np.argmax(val)]),) * 2,
                               "concave branch, p=2")
    if convex:
        big = x[x >= 1.0]
        c1 = float((spec.phi(big + 1.0) / spec.phi(big)).max()) if big.size else 0.0
        tail = ratio[x >= 0.5]
        c2 = float(tail.max()) if tail.size else 0.0
        ok = bool(np.isfinite(c1) and np.isfinite(c2))
        return AssumptionCheck("equiv_branch", ok, max(c1, c2), [c1, c2], [hi], None, "convex branch")
    k = int(np.argmax(np.abs(np.diff(slopes))))
    return AssumptionCheck("equiv_branch", False, math.inf, [], [hi], (float(xo[k]), float(xo[k + 2])),
                           "Phi^(1/2) neither concave nor convex on the sample")


def _check_log(spec, hi, count):
    x = np.concatenate([hi * _sobol(1, count)[:, 0], [1.0, hi]])
    x = np.sort(x[x <= hi])
    if spec.is_power:
        ent = entropy_field(spec, x)
    else:
        # cumulative trapezoid of log Phi on the sorted sample
        f = np.log(np.maximum(spec.phi(x), 1e-300))
        ent = np.concatenate([[0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(x))])
        ent = ent + (x[0] * f[0] if x[0] > 0 else 0.0)
    c = float(-ent.min())
    return AssumptionCheck("entropy_lower_bound", bool(np.isfinite(c)), max(c, 0.0), [float(ent.min())], [hi])


def _check_interpolate(spec, hi, count):
    # constant densities: Phi^(1/2)(xi) <= c1 xi^c2 ; fit c2 on a log-log sample
    x = np.geomspace(1e-3, hi, 64)
    y = spec.sqrt_phi(x)
    c2 = float(np.polyfit(np.log(x), np.log(y), 1)[0])
    c1 = float((y / x**c2).max())
    ok = bool(np.isfinite(c1) and c2 > 0)
    return AssumptionCheck("interpolation_constants", ok, c1, [c1, c2], [hi], None, f"fitted exponent {c2:.4g}")


def _check_weak_ldp(spec, hi, count):
    out = []
    d0 = float(spec.dphi(0.0)) if spec.is_power and spec.m >= 1 else float(spec.dphi(1e-12))
    big = np.linspace(1.0, max(hi, 1.0), 257)
    lower = float(np.sqrt(spec.dphi(big)).min())
    ok = bool(np.isfinite(d0) and lower > 0)
    out.append(AssumptionCheck("sqrt_dphi_bounds", ok, max(math.sqrt(max(d0, 0.0)), 1.0 / lower if lower > 0 else math.inf),
                               [math.sqrt(max(d0, 0.0)), lower], [hi]))

    p = spec.m if spec.is_power else 2.0
    u = _sobol(2, count)
    a, b = hi * u[:, 0], hi * u[:, 1]
    if spec.is_power:
        ta, tb = theta_functions(spec, "theta_sqrt_dphi", a), theta_functions(spec, "theta_sqrt_dphi", b)
    else:
        grid = np.linspace(0.0, hi, 2049)
        g = np.sqrt(spec.dphi(grid))
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (g[1:] + g[:-1]) * np.diff(grid))])
        ta, tb = np.interp(a, grid, cum), np.interp(b, grid, cum)
    diff = np.abs(a - b)
    keep = diff > 1e-12
    big_pair = np.maximum(a, b) >= 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        need = np.where(big_pair, diff, diff ** ((p + 1.0) / 2.0))
        ratio = np.abs(ta - tb)[keep] / need[keep]
    k = int(np.argmin(ratio))
    rmin = float(ratio[k])
    ok = bool(rmin > 0 and np.isfinite(rmin))
    out.append(AssumptionCheck("theta_sqrt_dphi_lower", ok, 1.0 / rmin if rmin > 0 else math.inf, [rmin], [hi],
                               None if ok else (float(a[keep][k]), float(b[keep][k])), f"p={p:g}"))

    x = np.linspace(0.0, hi, 513)
    dphi = spec.dphi(x)
    # tabulated Phi is continued linearly, so its derivative is bounded
    if not spec.is_power or spec.m <= 1.0:
        out.append(AssumptionCheck("weak_ldp_growth", True, float(dphi.max()), [float(dphi.max())], [hi], None,
                                   "bounded-derivative branch"))
        return out
    # power-type branch on constant densities: Phi' + Theta_{Phi_n} <= c Phi^theta
    xx = x[x > 0]
    theta_val = theta_functions(spec, "theta_phi", xx)
    th = (spec.m - 1.0) / spec.m
    lhs = spec.dphi(xx) + theta_val
    rhs = spec.phi(xx) ** th
    c = float((lhs / rhs).max())
    ok = bool(np.isfinite(c))
    out.append(AssumptionCheck("weak_ldp_growth", ok, c, [c], [hi], None, f"power branch, theta={th:.4g}"))
    return out
