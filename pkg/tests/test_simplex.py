import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bullseye.errors import InputError
from bullseye.oracle import exhaustive_simplex_min
from bullseye.simplex import (check_simplex, coefficient_entropy, combination_objective, optimize_coefficients,
                              project_to_simplex)


def kkt_projection(v):
    """Bisection on the threshold: sum(max(v - theta, 0)) = 1."""
    lo, hi = v.min() - 1.0, v.max()
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.maximum(v - mid, 0).sum() > 1.0:
            lo = mid
        else:
            hi = mid
    return np.maximum(v - 0.5 * (lo + hi), 0)


vectors = arrays(np.float64, st.integers(1, 16), elements=st.floats(-50, 50))


@given(vectors)
@settings(max_examples=200, deadline=None)
def test_projection_is_on_simplex(v):
    c = project_to_simplex(v)
    assert np.all(c >= 0)
    assert abs(c.sum() - 1) < 1e-9


@given(vectors)
@settings(max_examples=200, deadline=None)
def test_projection_matches_threshold_oracle(v):
    np.testing.assert_allclose(project_to_simplex(v), kkt_projection(v), atol=1e-8)


def test_projection_fixes_simplex_points():
    c = np.array([0.2, 0.3, 0.5])
    np.testing.assert_allclose(project_to_simplex(c), c)


def test_projection_rejects_bad_input():
    for bad in ([], [np.nan, 1.0], [[1.0, 2.0]]):
        with pytest.raises(InputError):
            project_to_simplex(bad)


def test_optimizer_matches_grid(rng):
    for _ in range(50):
        k = rng.integers(2, 4)
        P = rng.normal(size=(k, 4))
        t = rng.normal(size=4)
        c = optimize_coefficients(t, P, max_steps=2000, tolerance=1e-14)
        best, _ = exhaustive_simplex_min(t, P, 100)
        assert combination_objective(t, P, c) <= best + 1e-9


def test_optimizer_recovers_interior_combination(rng):
    P = rng.normal(size=(3, 5))
    c_true = np.array([0.5, 0.3, 0.2])
    c = optimize_coefficients(c_true @ P, P, max_steps=5000, tolerance=0)
    np.testing.assert_allclose(c, c_true, atol=1e-6)


def test_optimizer_never_worse_than_uniform_or_init(rng):
    P = rng.normal(size=(5, 3))
    t = rng.normal(size=3)
    init = np.array([0.0, 0.0, 0.0, 0.0, 1.0])
    c = optimize_coefficients(t, P, max_steps=1, init=init)
    assert combination_objective(t, P, c) <= min(combination_objective(t, P, init),
                                                  combination_objective(t, P, np.full(5, 0.2))) + 1e-12


def test_optimizer_edge_cases(rng):
    np.testing.assert_array_equal(optimize_coefficients([1.0, 2.0], [[3.0, 4.0]]), [1.0])
    with pytest.raises(InputError):
        optimize_coefficients(np.ones(3), np.ones((2, 4)))
    # all poisons equal: any simplex vector is optimal, result must still be valid
    check_simplex(optimize_coefficients(np.ones(3), np.ones((4, 3))))


def test_entropy_values():
    assert coefficient_entropy(np.full(5, 0.2)) == pytest.approx(2.3219, abs=1e-4)
    assert coefficient_entropy([1.0, 0.0, 0.0]) == 0.0
    assert coefficient_entropy([0.5, 0.5]) == pytest.approx(1.0)
    with pytest.raises(InputError):
        coefficient_entropy([0.7, 0.7])
