import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import approx_fprime

from gab.transforms import PositiveThenSimplex, SimplexTransform, stick_forward, stick_inverse

vec = st.lists(st.floats(-8, 8, allow_nan=False), min_size=1, max_size=6).map(np.array)


@settings(max_examples=80, deadline=None)
@given(z=vec)
def test_forward_lands_in_simplex(z):
    x, _ = stick_forward(z)
    assert (x > 0).all() and x.sum() < 1


@settings(max_examples=80, deadline=None)
@given(z=vec)
def test_round_trip(z):
    x, _ = stick_forward(z)
    np.testing.assert_allclose(stick_inverse(x), z, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(z=vec)
def test_jacobian_matches_differences(z):
    _, J = stick_forward(z)
    for j in range(z.size):
        num = approx_fprime(z, lambda w: stick_forward(w)[0][j], 1e-7)
        np.testing.assert_allclose(J[j], num, atol=1e-6)


def test_positive_block():
    tr = PositiveThenSimplex(3)
    x, J = tr.forward(np.array([0.5, 0.0, 1.0]))
    assert x[0] == np.exp(0.5) and J[0, 0] == x[0]
    np.testing.assert_allclose(tr.inverse(x), [0.5, 0.0, 1.0])
    assert SimplexTransform(2).k == 2


def test_inverse_rejects_outside():
    import pytest

    with pytest.raises(ValueError):
        stick_inverse([0.7, 0.5])
    with pytest.raises(ValueError):
        stick_inverse([-0.1])
