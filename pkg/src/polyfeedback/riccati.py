"""Algebraic Riccati equation of the reduced problem.

    A^T P + P A - (1/beta) P B B^T P + C^T C = 0

Solved by the invariant-subspace method on the Hamiltonian matrix (ordered
real Schur form) followed by Newton-Kleinman refinement steps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .reduction import LyapunovSolver


class RiccatiError(RuntimeError):
    pass


@dataclass
class RiccatiSolution:
    Pi: np.ndarray
    A_cl: np.ndarray
    beta: float
    residual: float
    B: np.ndarray

    @property
    def gain(self) -> np.ndarray:
        """``K`` with ``u = -K y`` for the linear feedback."""
        return self.B.T @ self.Pi / self.beta

    def T2(self, z1, z2) -> float:
        return float(z1 @ self.Pi @ z2)


def care_residual(A, B, C, beta, P) -> float:
    """Relative Frobenius residual (relative to ``||C^T C||``)."""
    CtC = C.T @ C
    PB = P @ B
    res = A.T @ P + P @ A - PB @ PB.T / beta + CtC
    return float(np.linalg.norm(res) / max(np.linalg.norm(CtC), np.finfo(float).tiny))


def _hamiltonian_solution(A, G, Q):
    n = A.shape[0]
    H = np.block([[A, -G], [-Q, -A.T]])
    scale = max(np.linalg.norm(H, 1), 1.0)
    T, U, sdim = sla.schur(H, output="real", sort="lhp")
    ev = sla.eigvals(T)
    if np.min(np.abs(ev.real)) <= 1e-13 * scale or sdim != n:
        raise RiccatiError("Hamiltonian matrix has eigenvalues on the imaginary axis")
    U11, U21 = U[:n, :n], U[n:, :n]
    if np.linalg.cond(U11) > 1e12:
        raise RiccatiError("stable invariant subspace is not a graph (pair not stabilizable)")
    P = np.linalg.solve(U11.T, U21.T).T
    return 0.5 * (P + P.T)


def solve_care(A, B, C, beta: float, newton_steps: int = 8, tol: float = 1e-13) -> RiccatiSolution:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    C = np.asarray(C, dtype=float).reshape(-1, A.shape[0])
    if beta <= 0:
        raise ValueError("beta must be positive")
    Q = C.T @ C
    P = _hamiltonian_solution(A, B @ B.T / beta, Q)
    best, best_res = P, care_residual(A, B, C, beta, P)
    for _ in range(newton_steps):
        if best_res <= tol:
            break
        K = B.T @ P / beta
        Ak = A - B @ K
        try:
            P = LyapunovSolver(Ak.T).solve(Q + beta * K.T @ K)
        except RuntimeError:
            break
        res = care_residual(A, B, C, beta, P)
        if not res < best_res:
            break
        best, best_res = P, res
    A_cl = A - B @ (B.T @ best) / beta
    if np.max(np.linalg.eigvals(A_cl).real) >= 0:
        raise RiccatiError("closed-loop matrix is not Hurwitz")
    return RiccatiSolution(best, A_cl, float(beta), best_res, B)
