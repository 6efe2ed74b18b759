import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from polyfeedback import reduction as rd
from polyfeedback.projection import ProjectedModel


def _stable(rng, n, shift=1.0):
    A = rng.standard_normal((n, n)) / np.sqrt(n)
    return A - (np.linalg.eigvals(A).real.max() + shift) * np.eye(n)


@pytest.mark.parametrize("n", [1, 2, 7, 65, 150])
def test_lyapunov_against_scipy(rng, n):
    A = _stable(rng, n)
    Q = rng.standard_normal((n, n))
    Q = Q @ Q.T
    X = rd.solve_lyapunov(A, Q)
    ref = sla.solve_continuous_lyapunov(A, -Q)
    assert np.allclose(X, ref, rtol=1e-9, atol=1e-12 * np.abs(ref).max())
    assert rd.lyapunov_residual(A, X, Q) < 1e-12


def test_lyapunov_scalar():
    assert rd.solve_lyapunov([[-1.0]], [[1.0]])[0, 0] == pytest.approx(0.5)


@settings(max_examples=20, deadline=None)
@given(st.integers(60, 140), st.integers(0, 2**31))
def test_blocked_sylvester_with_complex_pairs(n, seed):
    # rotation blocks force 2x2 diagonal blocks, some of them at split points
    rng = np.random.default_rng(seed)
    A = _stable(rng, n, 0.5) + 3.0 * np.kron(np.eye(n // 2 + 1), [[0, 1], [-1, 0]])[:n, :n]
    T, Z = sla.schur(A, output="real")
    C = rng.standard_normal((n, n))
    X = rd.solve_triangular_sylvester(T, T, C)
    assert np.abs(T @ X + X @ T.T - C).max() < 1e-9 * np.abs(C).max()


def test_not_hurwitz():
    with pytest.raises(rd.NotHurwitzError):
        rd.LyapunovSolver(np.eye(3))


def _toy(rng, n=6, m=1, scale=0.2):
    A = _stable(rng, n)
    N = [scale * rng.standard_normal((n, n)) for _ in range(m)]
    B = rng.standard_normal((n, m))
    C = rng.standard_normal((2, n))
    eye = np.eye(n + 1)
    return ProjectedModel(A, N, B, C, eye, eye, 1.0)


def test_gramian_linear_case_single_iteration(rng):
    proj = _toy(rng, scale=0.0)
    res = rd.gramian_fixed_point(proj, "reach")
    assert res.iterations == 1
    assert np.allclose(res.X, rd.solve_lyapunov(proj.A, proj.B @ proj.B.T))


def test_generalized_gramian_residual(rng):
    proj = _toy(rng)
    pair = rd.gramians(proj, eps=1e-12)
    X, Y = pair.X, pair.Y
    R = proj.A @ X + X @ proj.A.T + sum(N @ X @ N.T for N in proj.N) + proj.B @ proj.B.T
    assert np.linalg.norm(R) <= 1e-11 * np.linalg.norm(proj.B @ proj.B.T)
    R = proj.A.T @ Y + Y @ proj.A + sum(N.T @ Y @ N for N in proj.N) + proj.C.T @ proj.C
    assert np.linalg.norm(R) <= 1e-11 * np.linalg.norm(proj.C.T @ proj.C)
    assert np.linalg.eigvalsh(X).min() > -1e-12


def test_fixed_point_divergence_raises(rng):
    proj = _toy(rng, scale=5.0)
    with pytest.raises(rd.FixedPointError) as err:
        rd.gramian_fixed_point(proj, "reach", max_iter=30)
    assert len(err.value.history) > 0


def test_balance_truncation_properties(rng):
    proj = _toy(rng)
    pair = rd.gramians(proj, eps=1e-13)
    red = rd.balance_truncate(pair.X, pair.Y, proj, r=4)
    assert np.allclose(red.W.T @ red.V, np.eye(4), atol=1e-8)
    # balanced gramians are diagonal with the Hankel-type singular values
    assert np.allclose(red.W.T @ pair.X @ red.W, np.diag(red.sigma[:4]), atol=1e-8 * red.sigma[0])
    assert np.allclose(red.V.T @ pair.Y @ red.V, np.diag(red.sigma[:4]), atol=1e-8 * red.sigma[0])


def test_select_order():
    sigma = np.array([1.0, 0.1, 1e-3, 1e-5, 1e-7])
    assert rd.select_order(sigma, 1e-2) == 2
    assert rd.select_order(sigma, 1e-6) == 4
    assert rd.select_order(sigma, 1e-9) == 5


def test_truncation_argument_errors(rng):
    proj = _toy(rng)
    pair = rd.gramians(proj)
    with pytest.raises(ValueError):
        rd.balance_truncate(pair.X, pair.Y, proj)
    with pytest.raises(rd.ReductionError):
        rd.balance_truncate(np.zeros((6, 6)), pair.Y, proj, r=2)


def test_psd_factor_clips(rng):
    X = np.diag([2.0, 1.0, -1e-14])
    S = rd.psd_factor(X)
    assert np.allclose(S.T @ S, np.diag([2.0, 1.0, 0.0]))


def test_singular_value_decay_1d(pipeline):
    red = pipeline.reduced(9)
    rel = red.sigma / red.sigma[0]
    assert np.all(np.diff(rel[:30]) <= 0)
    assert rd.select_order(red.sigma, 1e-3) in range(7, 12)


def test_save_singular_values(tmp_path):
    rd.save_singular_values(np.array([2.0, 1.0]), tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "index,sigma,relative"
