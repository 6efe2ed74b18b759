"""Open-loop benchmark control by steepest descent with Armijo steps.

The control is piecewise linear on a uniform grid ``t_0 < ... < t_M``.  The
state is advanced with the Crank-Nicolson scheme

    (I - dt/2 M_{n+1}) y_{n+1} = (I + dt/2 M_n) y_n + dt/2 B (u_n + u_{n+1}),
    M_n = A + sum_j u_{n,j} N_j,

and the cost is the trapezoidal sum of the running cost.  The gradient is
the exact derivative of this discrete cost (discrete adjoint), expressed in
the inner product ``<u, v> = sum_n omega_n u_n . v_n`` with trapezoidal
weights ``omega_n``, which is the discrete ``L2(0, T)`` product.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .reduction import ReducedModel

log = logging.getLogger(__name__)


class OptimizationError(RuntimeError):
    pass


class StateBlowUp(OptimizationError):
    pass


@dataclass(frozen=True)
class ArmijoParams:
    C: float = 500.0
    theta: float = 0.7
    sigma: float = 0.05
    delta: float = 3e-4
    T: float = 20.0
    max_iter: int = 2000
    max_backtracks: int = 60
    nodes: int = 2000

    def __post_init__(self):
        if not 0 < self.theta < 1:
            raise ValueError("theta must lie in (0, 1)")
        if not 0 < self.sigma < 1:
            raise ValueError("sigma must lie in (0, 1)")
        if not self.delta > 0 or not self.C > 0 or not self.T > 0:
            raise ValueError("C, delta and T must be positive")
        if self.nodes < 2:
            raise ValueError("need at least two time nodes")

    @property
    def t(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.nodes)


@dataclass
class ControlIterate:
    t: np.ndarray
    u: np.ndarray
    cost: float
    grad_norm: float
    iterations: int = 0
    converged: bool = False
    history: list = field(default_factory=list)


def trapezoid_weights(t: np.ndarray) -> np.ndarray:
    dt = np.diff(t)
    w = np.zeros_like(t)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    return w


class DiscreteProblem:
    """Crank-Nicolson discretization of the reduced optimal control problem."""

    def __init__(self, red: ReducedModel, y0: np.ndarray, beta: float, t: np.ndarray,
                 blowup: float = 1e8):
        self.A, self.N, self.B, self.C = red.A, np.array(red.N), red.B, red.C
        self.y0 = np.asarray(y0, dtype=float)
        self.beta = float(beta)
        self.t = np.asarray(t, dtype=float)
        dt = np.diff(self.t)
        if not np.allclose(dt, dt[0], rtol=1e-10, atol=0):
            raise ValueError("time grid must be uniform")
        self.dt = float(dt[0])
        self.w = trapezoid_weights(self.t)
        self.CtC = self.C.T @ self.C
        self.r = self.A.shape[0]
        self.blowup = blowup * max(np.linalg.norm(self.y0), 1e-300)

    def _operators(self, u):
        M = self.A[None] + np.einsum("nj,jab->nab", u, self.N)
        eye = np.eye(self.r)[None]
        return eye - 0.5 * self.dt * M, eye + 0.5 * self.dt * M

    def states(self, u: np.ndarray):
        u = np.asarray(u, dtype=float).reshape(self.t.size, -1)
        Lm, Lp = self._operators(u)
        Bu = u @ self.B.T
        Y = np.empty((self.t.size, self.r))
        Y[0] = self.y0
        h = 0.5 * self.dt
        for n in range(self.t.size - 1):
            rhs = Lp[n] @ Y[n] + h * (Bu[n] + Bu[n + 1])
            Y[n + 1] = np.linalg.solve(Lm[n + 1], rhs)
            if not np.all(np.isfinite(Y[n + 1])) or np.linalg.norm(Y[n + 1]) > self.blowup:
                raise StateBlowUp(f"state blew up at t={self.t[n + 1]:.4g}")
        return Y, Lm, Lp

    def cost(self, u: np.ndarray) -> float:
        u = np.asarray(u, dtype=float).reshape(self.t.size, -1)
        try:
            Y = self.states(u)[0]
        except StateBlowUp:
            return float("inf")
        return self._cost(Y, u)

    def _cost(self, Y, u) -> float:
        out = Y @ self.C.T
        run = 0.5 * np.sum(out * out, axis=1) + 0.5 * self.beta * np.sum(u * u, axis=1)
        return float(self.w @ run)

    def cost_and_gradient(self, u: np.ndarray):
        """Cost and its gradient in the weighted ``L2`` inner product."""
        u = np.asarray(u, dtype=float).reshape(self.t.size, -1)
        Y, Lm, Lp = self.states(u)
        J = self._cost(Y, u)
        nt = self.t.size
        lam = np.zeros((nt, self.r))
        # Lagrange multipliers of the step equations; lam[n] belongs to the
        # equation producing y_n (n >= 1)
        lam[-1] = -np.linalg.solve(Lm[-1].T, self.w[-1] * (self.CtC @ Y[-1]))
        for n in range(nt - 2, 0, -1):
            rhs = Lp[n].T @ lam[n + 1] - self.w[n] * (self.CtC @ Y[n])
            lam[n] = np.linalg.solve(Lm[n].T, rhs)
        s = lam.copy()
        s[:-1] += lam[1:]
        # (N_j y_n + B_j) . s_n for every node and channel
        NyB = np.einsum("jab,nb->nja", self.N, Y) + self.B.T[None]
        g = self.w[:, None] * self.beta * u - 0.5 * self.dt * np.einsum("nja,na->nj", NyB, s)
        return J, g / self.w[:, None]

    def norm(self, g: np.ndarray) -> float:
        return float(np.sqrt(self.w @ np.sum(g * g, axis=1)))

    def inner(self, g: np.ndarray, v: np.ndarray) -> float:
        return float(self.w @ np.sum(g * v, axis=1))


def gradient(red: ReducedModel, u: ControlIterate | np.ndarray, beta: float, y0,
             t: np.ndarray | None = None) -> np.ndarray:
    """Gradient of the discrete cost at ``u`` (samples on ``t``)."""
    if isinstance(u, ControlIterate):
        t, u = u.t, u.u
    if t is None:
        raise ValueError("time grid required for raw control samples")
    return DiscreteProblem(red, y0, beta, t).cost_and_gradient(u)[1]


def optimize(red: ReducedModel, y0: np.ndarray, params: ArmijoParams, beta: float,
             u_init: np.ndarray | None = None) -> ControlIterate:
    """Steepest descent with Armijo backtracking from ``u_init`` (zero if
    omitted).  Stops when the ``L2(0, T)`` gradient norm drops below
    ``params.delta``."""
    t = params.t
    prob = DiscreteProblem(red, y0, beta, t)
    u = np.zeros((t.size, red.m)) if u_init is None else np.array(u_init, dtype=float).reshape(t.size, -1)
    J, g = prob.cost_and_gradient(u)
    gn = prob.norm(g)
    history = [(J, gn)]
    for it in range(params.max_iter):
        if gn <= params.delta:
            return ControlIterate(t, u, J, gn, it, True, history)
        step = params.C
        for _ in range(params.max_backtracks + 1):
            trial = u - step * g
            Jt = prob.cost(trial)
            if Jt <= J - params.sigma * step * gn * gn:
                break
            step *= params.theta
        else:
            raise OptimizationError(f"Armijo backtracking failed at iteration {it} "
                                    f"(J={J:.6g}, |grad|={gn:.3e})")
        u = trial
        J, g = prob.cost_and_gradient(u)
        gn = prob.norm(g)
        history.append((J, gn))
        log.debug("iteration %d: J=%.10g |grad|=%.3e step=%.3g", it + 1, J, gn, step)
    converged = gn <= params.delta
    if not converged:
        warnings.warn(f"optimizer stopped after {params.max_iter} iterations with "
                      f"|grad|={gn:.3e} > {params.delta:.1e}", RuntimeWarning)
    return ControlIterate(t, u, J, gn, params.max_iter, converged, history)


def write_control_csv(it: ControlIterate, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"u{j + 1}" for j in range(it.u.shape[1])])
        for t, row in zip(it.t, it.u):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def read_control_csv(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1:]
