import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from skeld import rng


def test_streams_are_reproducible_and_distinct():
    a = rng.step_normals(5, 3, 4, 100)
    b = rng.step_normals(5, 3, 4, 100)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, rng.step_normals(5, 4, 4, 100))
    assert not np.array_equal(a, rng.step_normals(6, 3, 4, 100))


def test_modes_do_not_depend_on_truncation():
    small = rng.step_normals(1, 0, 3, 50)
    large = rng.step_normals(1, 0, 8, 50)
    np.testing.assert_array_equal(small, large[:3])


def test_normals_pass_a_ks_test():
    z = rng.step_normals(11, 7, 1, 20000)[0]
    assert stats.kstest(z, "norm").pvalue > 1e-3


def test_independence_across_modes():
    z = rng.step_normals(2, 0, 2, 20000)
    assert abs(np.corrcoef(z)[0, 1]) < 0.03


def test_key_validation():
    with pytest.raises(ValueError):
        rng.mode_stream(-1, 0, 1)
    with pytest.raises(ValueError):
        rng.mode_stream(0, 2**33, 1)


@given(dt=st.floats(1e-6, 1.0), seed=st.integers(0, 2**32))
def test_bridge_halves_sum_to_increment(dt, seed):
    dB = np.random.default_rng(seed).normal(0, np.sqrt(dt), 3)
    z = rng.bridge_normals(seed, 0, 4, 1, 3)
    first, second = rng.brownian_bridge(dB, dt, z)
    np.testing.assert_allclose(first + second, dB, atol=1e-15)


def test_bridge_has_correct_conditional_variance():
    dt = 0.5
    z = np.array([rng.bridge_normals(0, 0, s, 1, 1)[0] for s in range(5000)])
    first, _ = rng.brownian_bridge(np.zeros(5000), dt, z)
    # Var(B_{dt/2} | B_dt = 0) = dt / 4
    assert np.var(first) == pytest.approx(dt / 4, rel=0.06)


def test_bridge_draws_depend_on_position():
    assert not np.array_equal(rng.bridge_normals(0, 0, 3, 2, 4), rng.bridge_normals(0, 0, 3, 3, 4))
    np.testing.assert_array_equal(rng.bridge_normals(0, 0, 3, 2, 4), rng.bridge_normals(0, 0, 3, 2, 4))


def test_checksum():
    assert rng.checksum(np.arange(4.0)) == rng.checksum(np.arange(4.0))
    assert rng.checksum(np.arange(4.0)) != rng.checksum(np.arange(1.0, 5.0))
