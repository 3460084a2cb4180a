import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from skeld.errors import DomainError, InvalidNonlinearity, SingularityError
from skeld.nonlinearity import (NonlinearitySpec, RegularizationParams, RegularizedSqrtPhi, TabulatedSqrtPhi,
                                check_assumptions, defect_coeff, entropy_density, phi_eval,
                                regularized_sqrt_phi, theta_functions, truncate_phi)

positive = st.floats(min_value=1e-3, max_value=20.0)
exponents = st.floats(min_value=1.0, max_value=4.0)


@given(m=exponents, x=positive)
def test_power_values_match_closed_form(m, x):
    spec = NonlinearitySpec.power(m)
    assert phi_eval(spec, "phi", x) == pytest.approx(x**m, rel=1e-12)
    assert phi_eval(spec, "dphi", x) == pytest.approx(m * x ** (m - 1), rel=1e-12)
    assert phi_eval(spec, "sqrt_phi", x) == pytest.approx(x ** (m / 2), rel=1e-12)


@given(m=exponents, x=st.floats(min_value=0.05, max_value=5.0))
def test_derivatives_match_central_differences(m, x):
    spec = NonlinearitySpec.power(m)
    h = 1e-6 * x
    for f, df in (("phi", "dphi"), ("sqrt_phi", "dsqrt_phi")):
        fd = (phi_eval(spec, f, x + h) - phi_eval(spec, f, x - h)) / (2 * h)
        assert phi_eval(spec, df, x) == pytest.approx(fd, rel=1e-6)


def test_degenerate_point():
    assert phi_eval(NonlinearitySpec.power(2), "dsqrt_phi", 0.0) == 1.0
    assert phi_eval(NonlinearitySpec.power(3), "dsqrt_phi", 0.0) == 0.0
    with pytest.raises(SingularityError):
        phi_eval(NonlinearitySpec.power(1), "dsqrt_phi", 0.0)
    with pytest.raises(DomainError):
        phi_eval(NonlinearitySpec.power(2), "phi", -0.1)
    with pytest.raises(DomainError):
        phi_eval(NonlinearitySpec.power(2), "phi", math.nan)


def test_invalid_specs():
    with pytest.raises(InvalidNonlinearity):
        NonlinearitySpec.power(-1.0)
    with pytest.raises(InvalidNonlinearity):
        NonlinearitySpec.table([(0, 0), (1, 1), (2, 0.5)])
    with pytest.raises(InvalidNonlinearity):
        NonlinearitySpec.table([(0, 0.1), (1, 1), (2, 3)])
    with pytest.raises(InvalidNonlinearity):
        NonlinearitySpec("cubic")


def test_table_reproduces_power_law():
    xs = np.linspace(0.0, 4.0, 81)
    spec = NonlinearitySpec.table([(x, x**2) for x in xs])
    x = np.linspace(0.01, 3.99, 57)
    np.testing.assert_allclose(spec.phi(x), x**2, atol=1e-3)
    with pytest.raises(DomainError):
        phi_eval(spec, "phi", 5.0)


@pytest.mark.parametrize("m", [1.0, 2.0, 3.5])
def test_entropy_density_is_antiderivative_of_log_phi(m):
    spec = NonlinearitySpec.power(m)
    for s in (0.3, 1.0, 2.7):
        quad, _ = integrate.quad(lambda t: m * math.log(t), 0.0, s)
        assert entropy_density(spec, s) == pytest.approx(quad, rel=1e-9, abs=1e-12)
    assert entropy_density(spec, 0.0) == 0.0


def test_table_entropy_matches_quadrature():
    xs = np.linspace(0.0, 3.0, 31)
    spec = NonlinearitySpec.table([(x, x**2 + x) for x in xs])
    s = 2.2
    quad, _ = integrate.quad(lambda t: math.log(float(spec.phi(t))), 0.0, s, limit=200)
    assert entropy_density(spec, s) == pytest.approx(quad, rel=1e-8)


@pytest.mark.parametrize("m", [1.0, 2.0, 3.0])
def test_theta_sqrt_dphi_closed_form(m):
    spec = NonlinearitySpec.power(m)
    s = 1.7
    quad, _ = integrate.quad(lambda t: math.sqrt(m * t ** (m - 1)), 0.0, s)
    assert theta_functions(spec, "theta_sqrt_dphi", s) == pytest.approx(quad, rel=1e-9)


def test_theta_phi_diverges_for_linear():
    with pytest.raises(ZeroDivisionError):
        theta_functions(NonlinearitySpec.power(1.0), "theta_phi", 1.0)
    m, s = 3.0, 1.3
    quad, _ = integrate.quad(lambda t: (m * t ** (m - 1)) ** 2 / t**m, 0.0, s)
    assert theta_functions(NonlinearitySpec.power(m), "theta_phi", s) == pytest.approx(quad, rel=1e-9)


@given(m=exponents, n=st.integers(1, 6))
def test_truncation_is_c1_at_the_threshold(m, n):
    spec = NonlinearitySpec.power(m)
    h = 1e-7
    left = (truncate_phi(spec, n, n) - truncate_phi(spec, n, n - h)) / h
    right = (truncate_phi(spec, n, n + h) - truncate_phi(spec, n, n)) / h
    assert left == pytest.approx(right, rel=1e-4)
    assert truncate_phi(spec, n, n + 2.0) == pytest.approx(n**m + 2.0 * m * n ** (m - 1), rel=1e-12)


@given(m=exponents, x=positive)
def test_defect_coefficient(m, x):
    spec = NonlinearitySpec.power(m)
    assert defect_coeff(spec, x) == pytest.approx(4 * x**m / (m * x ** (m - 1)), rel=1e-12)
    assert defect_coeff(spec, 0.0) == 0.0


class TestRegularization:
    @pytest.mark.parametrize("m", [1.0, 2.0])
    def test_shape_properties(self, m):
        spec = NonlinearitySpec.power(m)
        params = RegularizationParams(0.1)
        xs = np.linspace(0.0, 15.0, 3001)
        v = regularized_sqrt_phi(spec, params, xs)
        assert v[0] == 0.0
        assert np.all(np.diff(v) >= -1e-12)
        assert v.max() <= params.cap_level(spec) + 1e-12
        assert np.all(regularized_sqrt_phi(spec, params, xs, derivative=True) >= 0.0)

    @pytest.mark.parametrize("m", [1.0, 2.0, 3.0])
    def test_converges_to_sqrt_phi(self, m):
        spec = NonlinearitySpec.power(m)
        xs = np.linspace(0.2, 2.0, 50)
        errs = [np.abs(regularized_sqrt_phi(spec, RegularizationParams(e), xs) - xs ** (m / 2)).max()
                for e in (0.2, 0.1, 0.05)]
        assert errs[0] > errs[1] > errs[2]
        assert errs[2] < 1e-2

    def test_derivative_matches_finite_difference(self):
        reg = RegularizedSqrtPhi(NonlinearitySpec.power(1.5), RegularizationParams(0.2))
        xs = np.array([0.01, 0.1, 0.5, 1.0, 3.0])
        h = 1e-6
        fd = (reg.value(xs + h) - reg.value(xs - h)) / (2 * h)
        np.testing.assert_allclose(reg.deriv(xs), fd, rtol=1e-5, atol=1e-7)

    @pytest.mark.parametrize("m", [1.0, 2.0, 3.0])
    @pytest.mark.parametrize("eta", [0.5, 0.1, 0.01])
    def test_sandwich_with_factor_two(self, m, eta):
        spec = NonlinearitySpec.power(m)
        params = RegularizationParams(eta)
        xs = np.linspace(0.0, 100.0, 20001)
        v = regularized_sqrt_phi(spec, params, xs)
        assert np.all(v >= 0.0)
        assert np.all(v <= 2.0 * spec.sqrt_phi(xs) + 1e-12)
        # the derivative ratio depends only on xi / eps_eta near the origin, so sample on that scale
        eps = eta**2
        inner = np.concatenate([np.linspace(1e-3 * eps, 4 * eps, 4001), xs[xs > 4 * eps]])
        ratio = regularized_sqrt_phi(spec, params, inner, derivative=True) / spec.dsqrt_phi(inner)
        # the mollifier averages the singular slope of sqrt(xi) from the left: empirical constant 2.12
        assert ratio.max() <= (2.125 if m == 1.0 else 2.0)

    def test_invalid_eta(self):
        with pytest.raises(DomainError):
            RegularizationParams(1.5)

    @pytest.mark.parametrize("m,eta", [(1.0, 0.1), (2.0, 0.1), (1.0, 0.25)])
    def test_table_matches_quadrature(self, m, eta):
        reg = RegularizedSqrtPhi(NonlinearitySpec.power(m), RegularizationParams(eta))
        tab = TabulatedSqrtPhi(reg)
        xs = np.concatenate([np.linspace(0.0, 0.05, 401), np.linspace(0.05, 1.5 * reg.cap_point, 2001)])
        assert np.abs(tab.value(xs) - reg.value(xs)).max() < 1e-6
        dmax = np.abs(reg.deriv(xs)).max()
        assert np.abs(tab.deriv(xs) - reg.deriv(xs)).max() < 1e-3 * max(dmax, 1.0)


class TestAssumptions:
    @pytest.mark.parametrize("m", [1.0, 2.0, 3.0])
    def test_power_laws_pass(self, m):
        rep = check_assumptions(NonlinearitySpec.power(m), sample_count=2048)
        assert rep.passed
        assert all(math.isfinite(c.constant) for c in rep.checks)

    def test_jump_table_fails_with_witness(self):
        spec = NonlinearitySpec.table([(0, 0), (0.5, 0.5), (0.5 + 1e-6, 2.0), (3, 4)])
        rep = check_assumptions(spec, sample_count=2048)
        assert not rep.passed
        failed = [c for c in rep.checks if not c.passed]
        assert any(c.witness is not None for c in failed)

    def test_report_json_is_stable(self):
        a = check_assumptions(NonlinearitySpec.power(2.0), sample_count=1024).to_json()
        b = check_assumptions(NonlinearitySpec.power(2.0), sample_count=1024).to_json()
        assert a == b
        assert '"passed": true' in a

    def test_argument_validation(self):
        with pytest.raises(ValueError):
            check_assumptions(NonlinearitySpec.power(2.0), sample_count=10)
        with pytest.raises(ValueError):
            check_assumptions(NonlinearitySpec.power(2.0), M=0.5)
        with pytest.raises(ValueError):
            check_assumptions(NonlinearitySpec.power(2.0), delta_grid=(0.1, 0.5))
