import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import band_limited_control, cosine_bump
from skeld import grid as G
from skeld.errors import GridMismatch, NewtonFailure, NonnegativityFailure
from skeld.grid import ControlField, Grid
from skeld.nonlinearity import NonlinearitySpec, theta_functions
from skeld.skeleton import (Model, SolverConfig, _cyclic_tridiag_solve, contraction_distance, defect_field,
                            entropy_report, outer_steps, solve_skeleton)


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(dt=0.0)
    with pytest.raises(ValueError):
        SolverConfig(cfl_factor=2.0)
    with pytest.raises(ValueError):
        SolverConfig(viscosity=-1.0)


@pytest.mark.parametrize("transpose", [False, True])
def test_cyclic_tridiagonal_solver_matches_dense(transpose):
    rs = np.random.default_rng(0)
    n, c = 16, 0.7
    coeff = rs.uniform(0.1, 2.0, n)
    L = -2 * np.eye(n) + np.eye(n, k=1) + np.eye(n, k=-1)
    L[0, -1] = L[-1, 0] = 1
    A = np.eye(n) - c * L @ np.diag(coeff)
    rhs = rs.standard_normal((n, 3))
    dense = np.linalg.solve(A.T if transpose else A, rhs)
    np.testing.assert_allclose(_cyclic_tridiag_solve(coeff, c, rhs, transpose), dense, atol=1e-12)


def test_outer_steps_respect_breakpoints():
    steps = outer_steps(1.0, 0.3, [0.0, 0.5, 1.0])
    ends = np.cumsum([h for _, h in steps])
    assert ends[-1] == pytest.approx(1.0)
    assert any(abs(e - 0.5) < 1e-14 for e in ends)
    assert all(h <= 0.3 + 1e-15 for _, h in steps)


def test_heat_mode_decay():
    grid = Grid(1, 128)
    x = grid.centers[0]
    rho0 = 1 + 0.5 * np.cos(2 * np.pi * x)
    tr = solve_skeleton(NonlinearitySpec.power(1), grid, rho0, None, 0.02, SolverConfig(dt=1e-5))
    amp = 2 * np.mean((tr.final - 1) * np.cos(2 * np.pi * x)) / 0.5
    assert amp == pytest.approx(np.exp(-4 * np.pi**2 * 0.02), rel=5e-3)


def test_constant_state_is_steady_under_constant_control(power_spec):
    grid = Grid(2, 16)
    g = ControlField.constant(grid, 0.1, np.stack([np.full(grid.shape, 0.7), np.full(grid.shape, -0.3)]))
    tr = solve_skeleton(power_spec, grid, np.full(grid.shape, 1.3), g, 0.1, SolverConfig(dt=1e-2))
    np.testing.assert_allclose(tr.final, 1.3, atol=1e-13)


@pytest.mark.parametrize("d,n", [(1, 64), (2, 16)])
def test_mass_conserved_to_round_off(power_spec, d, n):
    grid = Grid(d, n)
    g = band_limited_control(grid, 0.02, seed=4, K=6, intervals=4)
    tr = solve_skeleton(power_spec, grid, cosine_bump(grid), g, 0.02, SolverConfig(dt=1e-3))
    assert np.max(np.abs(tr.mass - tr.mass[0])) <= 1e-12 * tr.mass[0]
    assert min(f.min() for f in tr.fields) >= 0.0


def test_compact_support_stays_nonnegative():
    grid = Grid(1, 64)
    x = grid.centers[0]
    rho0 = np.maximum(np.cos(2 * np.pi * x), 0.0) ** 2
    g = band_limited_control(grid, 0.02, seed=9, K=4, intervals=4, amplitude=3.0)
    tr = solve_skeleton(NonlinearitySpec.power(2), grid, rho0, g, 0.02, SolverConfig(dt=1e-3))
    assert min(f.min() for f in tr.fields) >= -1e-14
    assert abs(tr.mass[-1] - tr.mass[0]) <= 1e-12 * tr.mass[0]


def test_negative_initial_data_rejected():
    grid = Grid(1, 16)
    with pytest.raises(NonnegativityFailure):
        solve_skeleton(NonlinearitySpec.power(2), grid, np.full(16, -0.1), None, 0.01)


def test_newton_failure_after_halvings_exhausted():
    grid = Grid(1, 64)
    cfg = SolverConfig(dt=1e-2, newton_max_iter=1, newton_tol=1e-15, max_halvings=0)
    with pytest.raises(NewtonFailure):
        solve_skeleton(NonlinearitySpec.power(3), grid, cosine_bump(grid), None, 0.01, cfg)


def test_strong_control_triggers_step_splitting():
    grid = Grid(1, 64)
    g = band_limited_control(grid, 0.01, seed=1, K=4, intervals=1, amplitude=50.0)
    tr = solve_skeleton(NonlinearitySpec.power(2), grid, cosine_bump(grid), g, 0.01, SolverConfig(dt=5e-3))
    assert len(tr.times) > 3
    assert tr.dt[1:].min() < 5e-3


def test_snapshot_stride_and_lookup():
    grid = Grid(1, 32)
    tr = solve_skeleton(NonlinearitySpec.power(2), grid, cosine_bump(grid), None, 0.01,
                        SolverConfig(dt=1e-3, snapshot_stride=4))
    assert tr.field_index == [0, 4, 8, 10]
    np.testing.assert_array_equal(tr.field_at_node(8), tr.fields[2])
    with pytest.raises(KeyError):
        tr.field_at_node(3)


def test_entropy_balance_without_control():
    """With g = 0 the entropy decreases at twice the recorded dissipation rate."""
    grid = Grid(1, 128)
    tr = solve_skeleton(NonlinearitySpec.power(2), grid, cosine_bump(grid), None, 0.01, SolverConfig(dt=1e-5))
    drop = tr.entropy[0] - tr.entropy[-1]
    assert drop == pytest.approx(2 * tr.dissipation_cum[-1], rel=1e-2)


@settings(max_examples=6, deadline=None)
@given(m=st.sampled_from([1.0, 2.0, 3.0]), seed=st.integers(0, 1000))
def test_entropy_inequality_holds(m, seed):
    grid = Grid(1, 64)
    tr = solve_skeleton(NonlinearitySpec.power(m), grid, cosine_bump(grid), band_limited_control(grid, 0.01, seed),
                        0.01, SolverConfig(dt=grid.h**2 / 4, snapshot_stride=10**6))
    rep = entropy_report(tr)
    assert rep["margin"] >= -0.05 * rep["rhs"] - 1e-6


@pytest.mark.parametrize("m", [1.0, 2.0, 3.0])
def test_defect_equals_gradient_of_theta(m):
    spec = NonlinearitySpec.power(m)
    errs = []
    for n in (64, 128, 256):
        grid = Grid(1, n)
        x = grid.centers[0]
        rho = 1 + 0.5 * np.sin(2 * np.pi * x)
        exact = m * rho ** (m - 1) * (np.pi * np.cos(2 * np.pi * x)) ** 2
        theta = theta_functions(spec, "theta_sqrt_dphi", rho)
        via_theta = np.sum(G.cell_average(G.grad(theta, grid) ** 2, grid), axis=0)
        d = defect_field(spec, rho, grid)
        assert np.abs(d - via_theta).max() < 10.0 / n**2 * np.abs(exact).max()
        errs.append(np.abs(d - exact).max())
    assert errs[1] < errs[0] / 3 and errs[2] < errs[1] / 3


@pytest.fixture(scope="module")
def setup():
    spec = NonlinearitySpec.power(2)
    grid = Grid(1, 64)
    g = band_limited_control(grid, 0.02, 3, K=6, amplitude=1.0)
    rho0 = cosine_bump(grid)
    ref = solve_skeleton(spec, grid, rho0, g, 0.02, SolverConfig(dt=2e-4)).final
    return spec, grid, g, rho0, ref


class TestRegularizedConsistency:
    """Regularised problems converge to the bare skeleton as the parameters vanish."""

    def test_viscosity(self, setup):
        spec, grid, g, rho0, ref = setup
        d = [G.l1(solve_skeleton(spec, grid, rho0, g, 0.02, SolverConfig(dt=2e-4, viscosity=v)).final - ref, grid)
             for v in (1e-2, 1e-3, 1e-4)]
        assert d[0] > d[1] > d[2]

    def test_flux_regularization(self, setup):
        spec, grid, g, rho0, ref = setup
        d = [G.l1(solve_skeleton(spec, grid, rho0, g, 0.02, SolverConfig(dt=2e-4), flux_eta=e).final - ref, grid)
             for e in (0.1, 0.01)]
        assert d[0] > d[1]

    def test_diffusion_regularization(self, setup):
        spec, grid, g, rho0, ref = setup
        cfgs = [SolverConfig(dt=2e-4, diffusion_regularization=e) for e in (0.1, 0.01)]
        d = [G.l1(solve_skeleton(spec, grid, rho0, g, 0.02, c).final - ref, grid) for c in cfgs]
        assert d[0] > d[1]


def test_contraction_for_random_pairs():
    spec = NonlinearitySpec.power(2)
    grid = Grid(1, 64)
    g = band_limited_control(grid, 0.02, 1, amplitude=3.0)
    cfg = SolverConfig(dt=1e-3)
    rs = np.random.default_rng(7)
    for _ in range(3):
        a, b = np.abs(1 + 0.5 * rs.standard_normal((2, 64)))
        dist, violated = contraction_distance(solve_skeleton(spec, grid, a, g, 0.02, cfg),
                                              solve_skeleton(spec, grid, b, g, 0.02, cfg))
        assert not violated
        assert dist[-1] <= dist[0]


def test_contraction_requires_shared_control():
    spec = NonlinearitySpec.power(2)
    grid = Grid(1, 32)
    cfg = SolverConfig(dt=1e-3)
    t1 = solve_skeleton(spec, grid, cosine_bump(grid), band_limited_control(grid, 0.01, 1), 0.01, cfg)
    t2 = solve_skeleton(spec, grid, cosine_bump(grid), band_limited_control(grid, 0.01, 2), 0.01, cfg)
    with pytest.raises(GridMismatch):
        contraction_distance(t1, t2)


def test_model_cfl_bound_is_infinite_without_control():
    model = Model(NonlinearitySpec.power(2), Grid(1, 16), SolverConfig())
    assert model.cfl_dt(np.ones(16), np.zeros((1, 16))) == np.inf
