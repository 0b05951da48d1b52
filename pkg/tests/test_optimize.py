import numpy as np
import pytest

from gliosynth.errors import InvalidInputError
from gliosynth.optimize import BoundedTransform, least_squares_bounded


class TestBoundedTransform:
    def test_roundtrip_interior_point(self):
        tf = BoundedTransform([0.0, -1.0, 2.0], [1.0, 1.0, 2.0])
        x = np.array([0.3, 0.5, 2.0])
        z = tf.to_unconstrained(x)
        back = tf.to_bounded(z)
        np.testing.assert_allclose(back[:2], x[:2], rtol=1e-12)
        assert back[2] == 2.0  # fixed parameter passes through

    def test_malformed_bounds(self):
        with pytest.raises(InvalidInputError):
            BoundedTransform([1.0], [0.0])


def test_linear_least_squares_exact():
    # residuals (x0 - 3, x1 + 2): unique minimum at (3, -2)
    def resid(x):
        return np.array([x[0] - 3.0, x[1] + 2.0])

    x, res = least_squares_bounded(resid, [0.5, 0.0], [-10, -10], [10, 10])
    np.testing.assert_allclose(x, [3.0, -2.0], atol=1e-8)
    assert res.converged


def test_rosenbrock_style_fit():
    def resid(x):
        return np.array([10 * (x[1] - x[0] ** 2), 1 - x[0]])

    x, res = least_squares_bounded(resid, [-1.0, 1.0], [-5, -5], [5, 5])
    np.testing.assert_allclose(x, [1.0, 1.0], atol=1e-6)


def test_solution_respects_bounds():
    # unconstrained optimum at 5, box caps at 2
    def resid(x):
        return np.array([x[0] - 5.0])

    x, res = least_squares_bounded(resid, [1.0], [0.0], [2.0])
    assert x[0] <= 2.0 + 1e-12
    assert x[0] == pytest.approx(2.0, abs=1e-6)


def test_underdetermined_system_still_returns():
    # one residual, three parameters: damped steps must stay solvable
    def resid(x):
        return np.array([x.sum() - 1.0])

    x, res = least_squares_bounded(resid, [0.0, 0.0, 0.0],
                                   [-5, -5, -5], [5, 5, 5])
    assert abs(x.sum() - 1.0) < 1e-8


def test_exponential_recovery():
    t = np.linspace(0, 10, 12)
    y = 2.5 * np.exp(0.31 * t)

    def resid(x):
        return x[0] * np.exp(x[1] * t) - y

    x, res = least_squares_bounded(resid, [1.0, 0.1], [0.1, 0.0], [10.0, 1.0])
    np.testing.assert_allclose(x, [2.5, 0.31], rtol=1e-6)
    assert res.converged
    assert res.n_iterations <= 500
