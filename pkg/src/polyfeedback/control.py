"""Closed-loop simulation with polynomial feedback, replay on the full model
and evaluation of the quadratic cost

    J = 1/2 int_0^T |output|^2 dt + beta/2 int_0^T |u|^2 dt.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.integrate import simpson, solve_ivp
from scipy.interpolate import CubicSpline

from .fp_model import BilinearModel
from .reduction import ReducedModel
from .tensors import FeedbackLaw

log = logging.getLogger(__name__)

RTOL = 1e-8
ATOL = 1e-10
DIVERGENCE_FACTOR = 1e6
DEFAULT_SAMPLES = 2001
# a limit y* of the closed loop counts as nontrivial above this fraction of |y0|
NONTRIVIAL_FRACTION = 1e-3
# y(T) counts as captured by y* within this relative distance
CAPTURE_TOL = 1e-2


class SimulationError(RuntimeError):
    pass


@dataclass
class Trajectory:
    """Uniformly sampled solution on ``[0, t[-1]]``.

    ``output_sq`` holds ``|output(t)|^2``.  ``diverged`` marks a closed loop
    whose infinite-horizon cost is unbounded: the state blew up (samples then
    stop at the last time reached), or it is not approaching the origin at
    the end of the horizon.
    """

    t: np.ndarray
    y: np.ndarray
    u: np.ndarray
    output_sq: np.ndarray
    diverged: bool = False
    horizon: float = float("nan")
    message: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def final_norm(self) -> float:
        return float(np.linalg.norm(self.y[-1]))

    @property
    def integrand(self) -> np.ndarray:
        return 0.5 * self.output_sq

    def control_spline(self) -> CubicSpline:
        return CubicSpline(self.t, self.u, axis=0)


def eval_feedback(law: FeedbackLaw, y: np.ndarray) -> np.ndarray:
    """``u_j(y) = -1/beta sum_k 1/(k-1)! T_k(N_j y + B_j, y, ..., y)``."""
    return law(np.asarray(y, dtype=float))


def _divergence_event(limit):
    def event(t, y):
        return limit - np.linalg.norm(y)
    event.terminal = True
    event.direction = -1
    return event


def _sample_times(T: float, samples: int) -> np.ndarray:
    return np.linspace(0.0, T, samples)


def nontrivial_limit(f, jac, y, y0_norm, max_iter: int = 50):
    """Newton iteration on ``f = 0`` started at ``y``.

    Returns the limit when it is a stable equilibrium away from the origin
    that ``y`` already sits close to, otherwise ``None``.
    """
    z = np.array(y, dtype=float)
    for _ in range(max_iter):
        try:
            dz = np.linalg.solve(jac(0.0, z), -f(0.0, z))
        except np.linalg.LinAlgError:
            return None
        z += dz
        if not np.all(np.isfinite(z)):
            return None
        if np.linalg.norm(dz) <= 1e-12 * max(np.linalg.norm(z), np.finfo(float).tiny):
            break
    else:
        return None
    nz = np.linalg.norm(z)
    if nz <= NONTRIVIAL_FRACTION * y0_norm or np.linalg.norm(y - z) > CAPTURE_TOL * nz:
        return None
    if np.linalg.eigvals(jac(0.0, z)).real.max() >= 0:
        return None
    return z


def simulate_closed_loop(red: ReducedModel, law: FeedbackLaw, y0: np.ndarray, T: float,
                         rtol: float = RTOL, atol: float = ATOL,
                         samples: int = DEFAULT_SAMPLES) -> Trajectory:
    """Integrate the reduced closed loop with the stiff BDF method.

    A run is flagged as divergent when ``|y|`` exceeds ``1e6 |y0|``, the
    integrator gives up with a step-size failure, the final state has not
    decayed below ``|y0|``, or the final state has been captured by a stable
    nonzero equilibrium of the closed loop.  In the last two cases the cost
    over ``(0, inf)`` is infinite even though the samples stay bounded.
    """
    if not T > 0:
        raise ValueError("horizon must be positive")
    y0 = np.asarray(y0, dtype=float)
    A, N, B, C = red.A, red.N, red.B, red.C
    ts = _sample_times(T, samples)
    if not np.any(y0):
        m = red.m
        return Trajectory(ts, np.zeros((ts.size, y0.size)), np.zeros((ts.size, m)),
                          np.zeros(ts.size), False, T)

    def f(t, y):
        u = law(y)
        out = A @ y + B @ u
        for j, Nj in enumerate(N):
            out += u[j] * (Nj @ y)
        return out

    def jac(t, y):
        u = law(y)
        du = law.jacobian(y)
        J = A.copy()
        for j, Nj in enumerate(N):
            J += u[j] * Nj + np.outer(Nj @ y + B[:, j], du[j])
        return J

    limit = DIVERGENCE_FACTOR * np.linalg.norm(y0)
    sol = solve_ivp(f, (0.0, T), y0, method="BDF", jac=jac, rtol=rtol, atol=atol,
                    dense_output=True, events=_divergence_event(limit))
    diverged = False
    t_end = T
    if sol.status == 1:
        diverged, t_end = True, float(sol.t[-1])
        msg = f"state norm exceeded {DIVERGENCE_FACTOR:.0e} |y0| at t={t_end:.4g}"
    elif sol.status == -1:
        if "step size" not in sol.message.lower():
            raise SimulationError(sol.message)
        diverged, t_end = True, float(sol.t[-1])
        msg = f"step size underflow at t={t_end:.4g}"
    else:
        msg = ""
    if diverged:
        ts = ts[ts <= t_end]
    Y = sol.sol(ts).T if ts.size > 1 else y0[None, :]
    limit_state = None
    if not diverged:
        y0_norm = np.linalg.norm(y0)
        if np.linalg.norm(Y[-1]) >= y0_norm:
            diverged, msg = True, "state did not decay over the horizon"
        else:
            limit_state = nontrivial_limit(f, jac, Y[-1], y0_norm)
            if limit_state is not None:
                diverged = True
                msg = (f"attracted by a nonzero steady state "
                       f"(|y*| = {np.linalg.norm(limit_state) / y0_norm:.3g} |y0|)")
    if diverged:
        log.info("closed loop does not converge: %s", msg)
    U = np.array([law(y) for y in Y])
    out = np.einsum("ij,tj->ti", C, Y)
    traj = Trajectory(ts, Y, U, np.sum(out * out, axis=1), diverged, T, msg)
    traj.extra["nfev"] = int(sol.nfev)
    if limit_state is not None:
        traj.extra["steady_state"] = limit_state
    return traj


def replay_full(model: BilinearModel, control: Trajectory | Callable, y0: np.ndarray, T: float,
                rtol: float = RTOL, atol: float = ATOL,
                samples: int = DEFAULT_SAMPLES, mass_tol: float = 1e-9) -> Trajectory:
    """Drive the full model with a given open-loop control.

    ``control`` is a sampled trajectory (its ``u`` is interpolated by cubic
    splines) or a callable ``t -> u``.
    """
    if isinstance(control, Trajectory):
        if control.t[0] > 0 or control.t[-1] < T * (1 - 1e-12):
            raise SimulationError(f"control samples cover [{control.t[0]}, {control.t[-1]}], "
                                  f"need [0, {T}]")
        ufun = control.control_spline()
    else:
        ufun = control
    A = sp.csr_matrix(model.A)
    N = [sp.csr_matrix(Nj) for Nj in model.N]
    B = model.B
    y0 = np.asarray(y0, dtype=float)

    def f(t, y):
        u = np.atleast_1d(ufun(t))
        out = A @ y + B @ u
        for j, Nj in enumerate(N):
            out += u[j] * (Nj @ y)
        return out

    def jac(t, y):
        u = np.atleast_1d(ufun(t))
        J = A.copy()
        for j, Nj in enumerate(N):
            J = J + u[j] * Nj
        return J.tocsc()

    sol = solve_ivp(f, (0.0, T), y0, method="BDF", jac=jac, rtol=rtol, atol=atol,
                    dense_output=True)
    if sol.status != 0:
        raise SimulationError(f"full replay failed: {sol.message}")
    ts = _sample_times(T, samples)
    Y = sol.sol(ts).T
    U = np.atleast_2d(np.array([np.atleast_1d(ufun(t)) for t in ts]))
    mass = model.hbar * Y.sum(axis=1)
    drift = float(np.max(np.abs(mass - model.hbar * y0.sum())))
    if drift > mass_tol:
        log.warning("mass drift %.2e during replay", drift)
    out_sq = model.hbar * np.sum(Y * Y, axis=1)
    traj = Trajectory(ts, Y, U, out_sq, False, T)
    traj.extra["mass_drift"] = drift
    return traj


def cost(traj: Trajectory, beta: float, output: np.ndarray | Callable | None = None) -> float:
    """Composite Simpson evaluation of the quadratic cost (``inf`` when the
    trajectory diverged).  ``output`` overrides the stored output, as a
    matrix or a callable applied to every state sample."""
    if traj.diverged:
        return float("inf")
    if output is None:
        out_sq = traj.output_sq
    else:
        Z = traj.y @ output.T if isinstance(output, np.ndarray) else np.array([output(y) for y in traj.y])
        out_sq = np.sum(np.atleast_2d(Z.T).T ** 2, axis=1)
    integrand = 0.5 * out_sq + 0.5 * beta * np.sum(traj.u ** 2, axis=1)
    return float(simpson(integrand, x=traj.t))


def control_distance(t: np.ndarray, u1: np.ndarray, u2: np.ndarray) -> float:
    """``|u1 - u2|_{L2(0,T)}`` for samples on a common uniform grid."""
    d = np.atleast_2d(np.asarray(u1) - np.asarray(u2))
    if d.shape[0] != t.size:
        d = d.T
    return float(np.sqrt(simpson(np.sum(d * d, axis=1), x=t)))


def write_trajectory_csv(traj: Trajectory, path, states: bool = False) -> None:
    """Columns ``t, u_1..u_m, output_sq, integrand`` (and the states on
    request); values written with ``repr`` precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    m = traj.u.shape[1]
    header = ["t"] + [f"u{j + 1}" for j in range(m)] + ["output_sq", "integrand"]
    if states:
        header += [f"y{i + 1}" for i in range(traj.y.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, t in enumerate(traj.t):
            row = [t, *traj.u[i], traj.output_sq[i], traj.integrand[i]]
            if states:
                row += list(traj.y[i])
            w.writerow([repr(float(v)) for v in row])
