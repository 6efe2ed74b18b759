"""Bilinear balanced truncation.

Reachability and observability Gramians solve generalized Lyapunov equations

    A X + X A^T + sum_j N_j X N_j^T + B B^T = 0
    A^T Y + Y A + sum_j N_j^T Y N_j + C^T C = 0

and are computed by the fixed-point iteration that moves the bilinear terms
to the right-hand side.  Every step is a standard Lyapunov solve with the
same coefficient matrix, so the real Schur form is computed once and reused
(Bartels-Stewart).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack

from .projection import ProjectedModel

log = logging.getLogger(__name__)


class ReductionError(RuntimeError):
    pass


class NotHurwitzError(ReductionError):
    pass


class FixedPointError(ReductionError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


def _quasi_triangular_eigvals(T: np.ndarray) -> np.ndarray:
    n = T.shape[0]
    out = []
    i = 0
    while i < n:
        if i + 1 < n and T[i + 1, i] != 0.0:
            out.extend(np.linalg.eigvals(T[i:i + 2, i:i + 2]))
            i += 2
        else:
            out.append(T[i, i])
            i += 1
    return np.asarray(out)


BLOCK = 64


def _split(T: np.ndarray) -> int:
    """Split point near the middle that does not cut a 2x2 diagonal block."""
    k = T.shape[0] // 2
    if T[k, k - 1] != 0.0:
        k += 1
    return k


def solve_triangular_sylvester(T1: np.ndarray, T2: np.ndarray, C: np.ndarray) -> np.ndarray:
    """``X`` with ``T1 X + X T2^T = C`` for upper quasi-triangular ``T1, T2``.

    Recursive blocking: the larger factor is halved, one half is solved
    recursively and its contribution is removed from the other half with a
    matrix product, so almost all work runs in level-3 BLAS.  Small blocks go
    to LAPACK ``trsyl``.
    """
    m, n = C.shape
    if m <= BLOCK and n <= BLOCK:
        Y, scale, info = lapack.dtrsyl(T1, T2, C, trana="N", tranb="T", isgn=1)
        if info < 0:
            raise ReductionError(f"trsyl failed with info={info}")
        return Y / scale
    if m >= n:
        k = _split(T1)
        X2 = solve_triangular_sylvester(T1[k:, k:], T2, C[k:])
        X1 = solve_triangular_sylvester(T1[:k, :k], T2, C[:k] - T1[:k, k:] @ X2)
        return np.vstack([X1, X2])
    k = _split(T2)
    X2 = solve_triangular_sylvester(T1, T2[k:, k:], C[:, k:])
    X1 = solve_triangular_sylvester(T1, T2[:k, :k], C[:, :k] - X2 @ T2[:k, k:].T)
    return np.hstack([X1, X2])


class LyapunovSolver:
    """Solves ``A X + X A^T + Q = 0`` for many ``Q`` with one Schur form."""

    def __init__(self, A: np.ndarray, check_stable: bool = True):
        A = np.asarray(A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("A must be square")
        self.A = A
        self.T, self.Z = sla.schur(A, output="real")
        self.eigvals = _quasi_triangular_eigvals(self.T)
        if check_stable and self.eigvals.size and np.max(self.eigvals.real) >= 0:
            raise NotHurwitzError(f"A is not Hurwitz (max real part "
                                  f"{np.max(self.eigvals.real):.3e})")

    def solve(self, Q: np.ndarray) -> np.ndarray:
        Z, T = self.Z, self.T
        Qt = Z.T @ Q @ Z
        Y = solve_triangular_sylvester(T, T, -Qt)
        X = Z @ Y @ Z.T
        return 0.5 * (X + X.T)


def lyapunov_residual(A, X, Q) -> float:
    AX = A @ X
    return float(np.linalg.norm(AX + AX.T + Q) / max(np.linalg.norm(Q), np.finfo(float).tiny))


def solve_lyapunov(A, Q) -> np.ndarray:
    """``X`` with ``A X + X A^T + Q = 0`` (``A`` Hurwitz, ``Q`` symmetric)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    return LyapunovSolver(A).solve(Q)


@dataclass
class GramianResult:
    X: np.ndarray
    iterations: int
    residual: float
    history: list[float] = field(default_factory=list)


def generalized_gramian(A, N, Q, eps=1e-6, max_iter=200) -> GramianResult:
    """Fixed-point solution of ``A X + X A^T + sum N X N^T + Q = 0``."""
    solver = LyapunovSolver(A)
    qnorm = np.linalg.norm(Q)
    if qnorm == 0.0:
        return GramianResult(np.zeros_like(Q), 1, 0.0, [0.0])
    rhs = Q
    history = []
    for it in range(1, max_iter + 1):
        X = solver.solve(rhs)
        S = sum((Nj @ X @ Nj.T for Nj in N), np.zeros_like(Q))
        AX = A @ X
        res = float(np.linalg.norm(AX + AX.T + S + Q) / qnorm)
        history.append(res)
        log.debug("gramian fixed point: iteration %d residual %.3e", it, res)
        if res <= eps:
            return GramianResult(X, it, res, history)
        if not np.isfinite(res):
            break
        rhs = Q + S
    raise FixedPointError(f"Gramian fixed point did not reach {eps:.1e} in {max_iter} "
                          f"iterations (last residual {history[-1]:.3e})", history)


def gramian_fixed_point(proj: ProjectedModel, side: str, eps: float = 1e-6,
                        max_iter: int = 200) -> GramianResult:
    if side == "reach":
        return generalized_gramian(proj.A, proj.N, proj.B @ proj.B.T, eps, max_iter)
    if side == "observe":
        return generalized_gramian(proj.A.T, [Nj.T for Nj in proj.N], proj.C.T @ proj.C,
                                   eps, max_iter)
    raise ValueError(f"side must be 'reach' or 'observe', got {side!r}")


@dataclass
class GramianPair:
    reach: GramianResult
    observe: GramianResult

    @property
    def X(self):
        return self.reach.X

    @property
    def Y(self):
        return self.observe.X


def gramians(proj: ProjectedModel, eps: float = 1e-6, max_iter: int = 200) -> GramianPair:
    return GramianPair(gramian_fixed_point(proj, "reach", eps, max_iter),
                       gramian_fixed_point(proj, "observe", eps, max_iter))


@dataclass
class ReducedModel:
    A: np.ndarray
    N: list[np.ndarray]
    B: np.ndarray
    C: np.ndarray
    V: np.ndarray
    W: np.ndarray
    sigma: np.ndarray
    y0: np.ndarray | None = None

    @property
    def r(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return len(self.N)

    def rhs(self, y, u):
        out = self.A @ y + self.B @ u
        for j, Nj in enumerate(self.N):
            out = out + u[j] * (Nj @ y)
        return out

    def reduce_state(self, yt: np.ndarray) -> np.ndarray:
        return self.W.T @ yt


def psd_factor(X: np.ndarray) -> np.ndarray:
    """``S`` with ``S^T S = X``; negative eigenvalues are clipped to zero."""
    lam, U = np.linalg.eigh(0.5 * (X + X.T))
    return np.sqrt(np.clip(lam, 0.0, None))[:, None] * U.T


def select_order(sigma: np.ndarray, threshold: float) -> int:
    """Smallest ``r`` with ``sigma[r] / sigma[0] < threshold`` (0-based)."""
    rel = sigma / sigma[0]
    below = np.nonzero(rel < threshold)[0]
    return int(below[0]) if below.size else sigma.size


def balance_truncate(X, Y, proj: ProjectedModel, r: int | None = None,
                     threshold: float | None = None, y0=None) -> ReducedModel:
    """Petrov-Galerkin reduction in balanced coordinates.

    Exactly one of ``r`` (order) and ``threshold`` (relative singular value
    cut-off) must be given.
    """
    if (r is None) == (threshold is None):
        raise ValueError("give exactly one of r and threshold")
    if r is not None and r == proj.dim:
        # nothing is truncated; the balancing similarity would only add
        # round-off from the tiny singular values, so keep the coordinates
        sigma = np.linalg.svd(psd_factor(X) @ psd_factor(Y).T, compute_uv=False)
        eye = np.eye(r)
        return ReducedModel(proj.A.copy(), [Nj.copy() for Nj in proj.N], proj.B.copy(),
                            proj.C.copy(), eye, eye, sigma, None if y0 is None else y0.copy())
    SX, SY = psd_factor(X), psd_factor(Y)
    U, sigma, Vh = np.linalg.svd(SX @ SY.T)
    if threshold is not None:
        r = select_order(sigma, threshold)
    rank = int(np.sum(sigma > sigma[0] * sigma.size * np.finfo(float).eps)) if sigma[0] > 0 else 0
    if r < 1 or r > rank:
        raise ReductionError(f"requested order {r} exceeds numerical rank {rank}")
    if sigma[r - 1] <= 0.0:
        raise ReductionError("zero singular value in the retained block")
    s = sigma[:r] ** -0.5
    V = SX.T @ U[:, :r] * s
    W = SY.T @ Vh[:r].T * s
    A = W.T @ proj.A @ V
    N = [W.T @ Nj @ V for Nj in proj.N]
    B = W.T @ proj.B
    C = proj.C @ V
    y0r = None if y0 is None else W.T @ y0
    return ReducedModel(A, N, B, C, V, W, sigma, y0r)


def reduce_model(proj: ProjectedModel, r=None, threshold=None, eps=1e-6, max_iter=200,
                 y0=None, pair: GramianPair | None = None) -> tuple[ReducedModel, GramianPair]:
    pair = pair or gramians(proj, eps, max_iter)
    return balance_truncate(pair.X, pair.Y, proj, r=r, threshold=threshold, y0=y0), pair


def save_singular_values(sigma: np.ndarray, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    idx = np.arange(1, sigma.size + 1)
    np.savetxt(path, np.column_stack([idx, sigma, sigma / sigma[0]]), delimiter=",",
               header="index,sigma,relative", comments="", fmt=["%d", "%.17g", "%.17g"])
