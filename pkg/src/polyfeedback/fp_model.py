"""Finite-difference bilinear model of the controlled Fokker-Planck equation.

The grid is cell-centered on a box in one or two dimensions.  The generator
``A`` is obtained as the transpose of a discretization of the backward
operator ``nu*Lap(phi) - grad(G).grad(phi)`` with reflecting (ghost cell)
boundaries and upwinded advection; the control operators ``N_j`` discretize
``div(rho grad(alpha_j))`` in conservative flux form with zero boundary flux.
Both constructions keep the column sums of ``A`` and ``N_j`` at zero, so the
discrete mass ``hbar * sum(y)`` is an invariant of the dynamics.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .potentials import PotentialSpec

log = logging.getLogger(__name__)


class ModelError(RuntimeError):
    pass


class ConvergenceError(ModelError):
    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


@dataclass(frozen=True)
class Grid:
    bounds: tuple[tuple[float, float], ...]
    counts: tuple[int, ...]

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple((b - a) / c for (a, b), c in zip(self.bounds, self.counts))

    @property
    def hbar(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def n(self) -> int:
        return int(np.prod(self.counts))

    @property
    def volume(self) -> float:
        return float(np.prod([b - a for a, b in self.bounds]))

    def axis_centers(self, axis: int) -> np.ndarray:
        (a, _), c, h = self.bounds[axis], self.counts[axis], self.spacing[axis]
        return a + (np.arange(c) + 0.5) * h

    @property
    def points(self) -> np.ndarray:
        """Cell centers, shape ``(n, d)``, C order over the axes."""
        mesh = np.meshgrid(*[self.axis_centers(i) for i in range(self.dim)], indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


def build_grid(bounds: Sequence[Sequence[float]], counts: Sequence[int]) -> Grid:
    """Cell-centered grid on a box.

    >>> build_grid([(-6, 6)], [3]).axis_centers(0)
    array([-4.,  0.,  4.])
    """
    bounds = tuple((float(a), float(b)) for a, b in bounds)
    counts = tuple(int(c) for c in counts)
    if len(bounds) != len(counts) or len(counts) not in (1, 2):
        raise ValueError("bounds and counts must describe a 1D or 2D box")
    for (a, b), c in zip(bounds, counts):
        if not b > a:
            raise ValueError(f"degenerate interval ({a}, {b})")
        if c < 3:
            raise ValueError(f"need at least 3 cells per axis, got {c}")
    return Grid(bounds, counts)


@dataclass
class BilinearModel:
    """``y' = A y + sum_j (N_j y + B_j) u_j`` with ``y = rho - rho_inf``."""

    A: sp.csr_matrix
    N: list[sp.csr_matrix]
    B: np.ndarray
    rho_inf: np.ndarray
    grid: Grid
    nu: float
    potential: PotentialSpec | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return len(self.N)

    @property
    def hbar(self) -> float:
        return self.grid.hbar

    def mass(self, y: np.ndarray) -> float:
        return self.hbar * float(np.sum(y))

    def rhs(self, y: np.ndarray, u: np.ndarray) -> np.ndarray:
        out = self.A @ y
        for j, Nj in enumerate(self.N):
            out = out + u[j] * (Nj @ y + self.B[:, j])
        return out


def _faces(grid: Grid, axis: int):
    """Index pairs ``(p, q)`` of neighbouring cells along ``axis`` and the
    coordinates of the face between them."""
    idx = np.arange(grid.n).reshape(grid.counts)
    lo = np.take(idx, np.arange(grid.counts[axis] - 1), axis=axis).ravel()
    hi = np.take(idx, np.arange(1, grid.counts[axis]), axis=axis).ravel()
    pts = grid.points
    face = pts[lo].copy()
    face[:, axis] += 0.5 * grid.spacing[axis]
    return lo, hi, face


def _with_zero_column_sums(rows, cols, vals, n):
    """Assemble ``M`` from off-diagonal triplets plus a diagonal chosen so
    that every column of ``M`` sums to zero."""
    M = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsc()
    M.sum_duplicates()
    diag = -np.asarray(M.sum(axis=0)).ravel()
    return (M + sp.diags(diag)).tocsr()


def _generator(grid: Grid, pot: PotentialSpec, nu: float) -> sp.csr_matrix:
    """Discrete ``A`` (transpose of the backward operator)."""
    rows, cols, vals = [], [], []
    for axis in range(grid.dim):
        h = grid.spacing[axis]
        p, q, face = _faces(grid, axis)
        drift = -pot.grad_G(face)[:, axis]
        # backward operator row p couples to q with nu/h^2 + max(b, 0)/h and
        # row q couples to p with nu/h^2 + max(-b, 0)/h; A holds the transpose
        rows += [q, p]
        cols += [p, q]
        vals += [nu / h**2 + np.maximum(drift, 0.0) / h,
                 nu / h**2 + np.maximum(-drift, 0.0) / h]
    return _with_zero_column_sums(np.concatenate(rows), np.concatenate(cols),
                                  np.concatenate(vals), grid.n)


def _control_operator(grid: Grid, pot: PotentialSpec, j: int) -> sp.csr_matrix:
    """Discrete ``rho -> div(rho grad(alpha_j))`` from face fluxes."""
    rows, cols, vals = [], [], []
    for axis in range(grid.dim):
        h = grid.spacing[axis]
        p, q, face = _faces(grid, axis)
        g = pot.grad_alpha(j, face)[:, axis] / (2 * h)
        # flux F = g (rho_p + rho_q) leaves q and enters p
        rows += [p, p, q, q]
        cols += [p, q, p, q]
        vals += [g, g, -g, -g]
    N = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(grid.n, grid.n)).tocsr()
    N.sum_duplicates()
    N.eliminate_zeros()
    return N


def stationary_density(A, hbar: float, tol: float = 1e-12, max_iter: int = 500) -> np.ndarray:
    """Null vector of ``A`` by inverse iteration, scaled so ``hbar*sum = 1``.

    The shift sits a hair to the right of zero so that the factorization
    exists even though ``A`` is singular.
    """
    A = sp.csc_matrix(A, dtype=float)
    n = A.shape[0]
    shift = 1e-10 * max(spla.norm(A, np.inf), 1.0)
    lu = spla.splu((A - shift * sp.identity(n, format="csc")).tocsc())
    x = np.full(n, 1.0 / (hbar * n))
    diff = np.inf
    for it in range(1, max_iter + 1):
        z = lu.solve(x)
        z /= hbar * z.sum()
        diff = float(np.max(np.abs(z - x)))
        x = z
        if diff < tol:
            log.debug("inverse iteration converged in %d steps", it)
            break
    else:
        raise ConvergenceError(f"inverse iteration did not converge in {max_iter} steps "
                               f"(last change {diff:.3e})", residual=diff)
    return x


def assemble_model(grid: Grid, pot: PotentialSpec, nu: float) -> BilinearModel:
    if grid.dim != pot.dim:
        raise ValueError(f"grid is {grid.dim}D but potential is {pot.dim}D")
    if nu <= 0:
        raise ValueError("diffusion coefficient must be positive")
    A = _generator(grid, pot, nu)
    N = [_control_operator(grid, pot, j) for j in range(pot.m)]
    rho = stationary_density(A, grid.hbar)
    if np.any(rho <= 0):
        raise ModelError(f"stationary density has non-positive entries (min {rho.min():.3e})")
    B = np.column_stack([Nj @ rho for Nj in N]) if N else np.zeros((grid.n, 0))
    return BilinearModel(A, N, B, rho, grid, float(nu), pot)


def initial_condition(kind: str, grid: Grid, rho_inf: np.ndarray, *, center=None,
                      width=None, seed=None, amplitude=None) -> np.ndarray:
    """Normalized initial density ``rho0`` (``hbar * sum(rho0) == 1``).

    ``kind`` is ``"uniform"``, ``"gaussian"`` (needs ``center`` and ``width``)
    or ``"random_perturbation"`` (needs ``seed`` and ``amplitude``; relative
    perturbation of ``rho_inf``, clipped at zero).
    """
    if kind == "uniform":
        rho0 = np.ones(grid.n)
    elif kind == "gaussian":
        if width is None or width <= 0:
            raise ValueError("gaussian initial condition needs width > 0")
        c = np.atleast_1d(np.asarray(center, dtype=float))
        if c.shape != (grid.dim,) or any(not (a < ci < b) for ci, (a, b) in zip(c, grid.bounds)):
            raise ValueError(f"center {center} outside the domain")
        d = grid.points - c
        rho0 = np.exp(-np.sum(d * d, axis=1) / (2 * width**2))
    elif kind == "random_perturbation":
        if seed is None or amplitude is None:
            raise ValueError("random perturbation needs seed and amplitude")
        rng = np.random.Generator(np.random.Philox(int(seed)))
        rho0 = np.maximum(rho_inf * (1.0 + amplitude * rng.standard_normal(grid.n)), 0.0)
    else:
        raise ValueError(f"unknown initial condition kind {kind!r}")
    return rho0 / (grid.hbar * rho0.sum())


def l2_distance(grid: Grid, a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(grid.hbar * np.sum((a - b) ** 2)))


def calibrate_gaussian_width(grid, rho_inf, center, target, lo=0.05, hi=6.0) -> float:
    """Width of a Gaussian initial density at ``L2`` distance ``target`` from
    ``rho_inf``; the distance decreases monotonically with the width over the
    bracket for the potentials shipped here."""
    from scipy.optimize import brentq

    def f(w):
        rho0 = initial_condition("gaussian", grid, rho_inf, center=center, width=w)
        return l2_distance(grid, rho0, rho_inf) - target

    return brentq(f, lo, hi, xtol=1e-12)


def export_model(model: BilinearModel, directory) -> None:
    """Matrix Market files for ``A`` and ``N_j``; CSV for ``B`` and ``rho_inf``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    scipy.io.mmwrite(d / "A.mtx", model.A)
    for j, Nj in enumerate(model.N):
        scipy.io.mmwrite(d / f"N{j + 1}.mtx", Nj)
    np.savetxt(d / "B.csv", model.B, delimiter=",")
    np.savetxt(d / "rho_inf.csv", model.rho_inf, delimiter=",")
