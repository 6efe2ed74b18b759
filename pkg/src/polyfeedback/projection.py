"""Restriction of the discretized system to the mass-zero subspace.

With ``R = [[I, rho[:-1]], [-1^T, rho[-1]]]`` the state transformation
``R^{-1} y`` splits off the (conserved) mass in its last component.  The
first ``n-1`` components carry the dynamics, and ``C = sqrt(hbar) R Q`` maps
them back to an output whose Euclidean norm is the discrete L2 norm.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp

from .fp_model import BilinearModel


class ProjectionError(RuntimeError):
    pass


def transform_matrices(rho: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed forms of ``R`` and ``R^{-1}`` (no numerical inversion).

    ``rho`` is expected to satisfy ``sum(rho) = 1`` in the scaling used by
    the caller (``hbar`` already folded in).
    """
    n = rho.size
    R = np.eye(n)
    R[-1, :-1] = -1.0
    R[:, -1] = rho
    Rinv = np.eye(n)
    Rinv[-1, :] = 1.0
    Rinv[:-1, :] -= rho[:-1, None]
    return R, Rinv


@dataclass
class ProjectedModel:
    A: np.ndarray
    N: list[np.ndarray]
    B: np.ndarray
    C: np.ndarray
    R: np.ndarray
    Rinv: np.ndarray
    hbar: float
    residuals: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return len(self.N)

    def project_state(self, y: np.ndarray) -> np.ndarray:
        """``Q^T R^{-1} y``."""
        return (self.Rinv @ y)[:-1]

    def lift(self, yt: np.ndarray) -> np.ndarray:
        """``R Q yt`` (mass-zero vector in the original coordinates)."""
        return self.R[:, :-1] @ yt

    def output(self, yt: np.ndarray) -> np.ndarray:
        return self.C @ yt


def project(model: BilinearModel, rtol: float = 1e-10) -> ProjectedModel:
    """Transform ``model`` and extract the blocks acting on the mass-zero part.

    ``R`` is built from ``hbar * rho_inf`` so that the last row of ``R^{-1}``
    is the plain column sum and ``R`` is the exact inverse of its closed form.
    """
    hbar = model.hbar
    R, Rinv = transform_matrices(hbar * model.rho_inf)
    # R^{-1} M R evaluated as (R^{-1} (M R)); M is sparse
    def conj(M):
        return Rinv @ np.asarray(sp.csr_matrix(M) @ R)

    At = conj(model.A)
    Nt = [conj(Nj) for Nj in model.N]
    Bt = Rinv @ model.B
    scale = max(float(np.abs(At).max()), 1.0)
    res = {
        "A_last_row": float(np.abs(At[-1, :]).max()),
        "A_last_col": float(np.abs(At[:-1, -1]).max()),
        "N_last_row": max((float(np.abs(N[-1, :]).max()) for N in Nt), default=0.0),
        "B_last_row": float(np.abs(Bt[-1, :]).max()) if Bt.size else 0.0,
    }
    worst = max(res.values())
    if worst > rtol * scale:
        raise ProjectionError(f"zero-block residual {worst:.3e} exceeds {rtol:.0e}*||A||; "
                              "mass conservation of the model is broken")
    C = np.sqrt(hbar) * R[:, :-1]
    return ProjectedModel(At[:-1, :-1].copy(), [N[:-1, :-1].copy() for N in Nt],
                          Bt[:-1, :].copy(), C, R, Rinv, hbar, res)


def export_projected(proj: ProjectedModel, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    scipy.io.mmwrite(d / "A_proj.mtx", proj.A)
    for j, Nj in enumerate(proj.N):
        scipy.io.mmwrite(d / f"N{j + 1}_proj.mtx", Nj)
    scipy.io.mmwrite(d / "B_proj.mtx", proj.B)
