import numpy as np
import pytest

from polyfeedback import openloop as ol
from polyfeedback.reduction import ReducedModel
from polyfeedback.riccati import solve_care


def _model(A, N, B, C):
    r = A.shape[0]
    return ReducedModel(A=A, N=N, B=B, C=C, V=np.eye(r), W=np.eye(r), sigma=np.ones(r))


@pytest.fixture
def bilinear(rng):
    r, m = 4, 2
    A = rng.standard_normal((r, r)) - 3 * np.eye(r)
    N = [0.3 * rng.standard_normal((r, r)) for _ in range(m)]
    return _model(A, N, rng.standard_normal((r, m)), rng.standard_normal((2, r)))


def test_params_validation():
    with pytest.raises(ValueError):
        ol.ArmijoParams(theta=1.5)
    with pytest.raises(ValueError):
        ol.ArmijoParams(delta=0.0)
    assert ol.ArmijoParams(T=2.0, nodes=3).t.tolist() == [0.0, 1.0, 2.0]


def test_trapezoid_weights():
    w = ol.trapezoid_weights(np.linspace(0, 1, 5))
    assert np.allclose(w, [0.125, 0.25, 0.25, 0.25, 0.125])


def test_gradient_directional_derivatives(bilinear, rng):
    t = np.linspace(0, 3, 121)
    y0 = rng.standard_normal(4)
    prob = ol.DiscreteProblem(bilinear, y0, 1e-2, t)
    u = 0.5 * rng.standard_normal((t.size, 2))
    J, g = prob.cost_and_gradient(u)
    for _ in range(5):
        v = rng.standard_normal(u.shape)
        h = 1e-6
        fd = (prob.cost(u + h * v) - prob.cost(u - h * v)) / (2 * h)
        assert prob.inner(g, v) == pytest.approx(fd, rel=1e-6, abs=1e-10)


def test_gradient_helper(bilinear):
    t = np.linspace(0, 1, 11)
    u = np.zeros((11, 2))
    g = ol.gradient(bilinear, u, 1.0, np.ones(4), t)
    assert g.shape == (11, 2)
    with pytest.raises(ValueError):
        ol.gradient(bilinear, u, 1.0, np.ones(4))


def test_nonuniform_grid_rejected(bilinear):
    with pytest.raises(ValueError):
        ol.DiscreteProblem(bilinear, np.ones(4), 1.0, np.array([0.0, 1.0, 3.0]))


def test_zero_state_is_optimal(bilinear):
    params = ol.ArmijoParams(T=2.0, nodes=21)
    it = ol.optimize(bilinear, np.zeros(4), params, 1e-3)
    assert it.converged and it.iterations == 0 and it.cost == 0.0


def test_monotone_descent(bilinear, rng):
    params = ol.ArmijoParams(T=3.0, nodes=61, delta=1e-5, C=50.0)
    it = ol.optimize(bilinear, rng.standard_normal(4), params, 1e-2)
    costs = [h[0] for h in it.history]
    assert all(b <= a for a, b in zip(costs, costs[1:]))
    assert it.converged and it.grad_norm <= 1e-5


def test_linear_quadratic_value():
    # no bilinearity: the optimal cost over a long horizon is y0^T Pi y0 / 2
    A = np.array([[-1.0, 0.5], [0.0, -2.0]])
    B = np.array([[1.0], [1.0]])
    C = np.eye(2)
    red = _model(A, [np.zeros((2, 2))], B, C)
    beta = 0.5
    y0 = np.array([1.0, -0.5])
    params = ol.ArmijoParams(T=20.0, nodes=2001, delta=1e-6, C=5.0)
    it = ol.optimize(red, y0, params, beta)
    ref = 0.5 * y0 @ solve_care(A, B, C, beta).Pi @ y0
    assert it.cost == pytest.approx(ref, abs=1e-4)


def test_blowup_gives_infinite_cost():
    red = _model(np.array([[1.0]]), [np.zeros((1, 1))], np.ones((1, 1)), np.ones((1, 1)))
    prob = ol.DiscreteProblem(red, np.ones(1), 1.0, np.linspace(0, 40, 401))
    assert prob.cost(np.zeros((401, 1))) == float("inf")


def test_control_csv_roundtrip(tmp_path, bilinear):
    params = ol.ArmijoParams(T=1.0, nodes=11, delta=1e-3)
    it = ol.optimize(bilinear, np.ones(4), params, 1e-1)
    ol.write_control_csv(it, tmp_path / "u.csv")
    t, u = ol.read_control_csv(tmp_path / "u.csv")
    assert np.array_equal(t, it.t) and np.array_equal(u, it.u)
