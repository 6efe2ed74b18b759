"""Multilinear forms and the generalized Lyapunov equations for T_3, ..., T_p.

A multilinear form of order ``k`` on ``R^r`` is stored as a dense ndarray of
shape ``(r,)*k``; ``T(z1, ..., zk) = sum T[a1..ak] z1[a1] ... zk[ak]``.
``T_2`` is the Riccati matrix itself.

For ``k >= 3`` the form ``T_k`` solves

    sum_i T_k(z1, ..., A_cl z_i, ..., zk) = 1/(2 beta) sum_j R_jk(z1, ..., zk)

i.e. ``Ak vec(T_k) = rhs`` with the Kronecker sum ``Ak`` of ``A_cl^T``.  As
``A_cl`` is Hurwitz, ``Ak^{-1} = -int_0^inf kron_i exp(t A_cl^T) dt``; an
exponential-sum quadrature of ``1/x`` turns this into ``2l+1`` mode-wise
products with matrix exponentials.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

DEFAULT_NODES = 50
DIRECT_SIZE_LIMIT = 10**5
TAIL_TOLERANCES = (1e-9, 1e-10, 1e-11, 1e-12, 1e-13)


class TensorError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# multilinear algebra
# --------------------------------------------------------------------------

def evaluate(T: np.ndarray, *zs) -> float:
    """``T(z1, ..., zk)``."""
    if len(zs) != T.ndim:
        raise ValueError(f"order {T.ndim} form needs {T.ndim} arguments, got {len(zs)}")
    X = T
    for z in reversed(zs):
        X = X @ z
    return float(X)


def contract_tail(T: np.ndarray, y: np.ndarray, times: int) -> np.ndarray:
    """Contract the last ``times`` slots of ``T`` with ``y``."""
    X = T
    for _ in range(times):
        X = X @ y
    return X


def apply_mode(T: np.ndarray, M: np.ndarray, axis: int) -> np.ndarray:
    """Form ``z -> T(..., M z_axis, ...)``, i.e. ``M^T`` applied along ``axis``."""
    return np.moveaxis(np.tensordot(T, M, axes=([axis], [0])), -1, axis)


def apply_all_modes(T: np.ndarray, E: np.ndarray) -> np.ndarray:
    """``(E kron ... kron E) vec(T)`` as a tensor."""
    X = T
    for _ in range(T.ndim):
        # contracts the leading axis and appends the result axis at the end
        X = np.tensordot(X, E, axes=([0], [1]))
    return X


def symmetrize(T: np.ndarray) -> np.ndarray:
    """Average over all index permutations.

    Built up axis by axis: the symmetrizer on ``m`` slots is the average of
    the transpositions ``(i m)`` applied after the symmetrizer on ``m-1``
    slots, so the cost is ``O(k^2 r^k)`` instead of ``O(k! r^k)``.
    """
    X = np.asarray(T, dtype=float)
    for m in range(2, X.ndim + 1):
        acc = X.copy()
        for i in range(m - 1):
            acc += np.swapaxes(X, i, m - 1)
        X = acc / m
    return X


def symmetry_defect(T: np.ndarray) -> float:
    """Largest relative change of ``T`` under a transposition of two slots."""
    scale = max(float(np.abs(T).max()), np.finfo(float).tiny)
    worst = 0.0
    for i, j in itertools.combinations(range(T.ndim), 2):
        worst = max(worst, float(np.abs(T - np.swapaxes(T, i, j)).max()) / scale)
    return worst


def shuffles(i: int, j: int):
    """Permutations ``s`` of ``range(i+j)`` increasing on the first ``i`` and on
    the last ``j`` positions."""
    n = i + j
    for first in itertools.combinations(range(n), i):
        rest = [q for q in range(n) if q not in first]
        yield tuple(first) + tuple(rest)


def sym_product(S: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Shuffle-average of ``S (x) T``.

    ``result(z_1..z_n) = mean_s (S (x) T)(z_s(1), ..., z_s(n))`` over the
    ``binom(n, i)`` shuffles ``s`` of an order-``i`` and an order-``j`` form.
    """
    S = np.asarray(S, dtype=float)
    T = np.asarray(T, dtype=float)
    if S.ndim and T.ndim and S.shape[0] != T.shape[0]:
        raise ValueError(f"dimension mismatch: {S.shape[0]} vs {T.shape[0]}")
    outer = np.multiply.outer(S, T)
    acc = np.zeros_like(outer)
    count = 0
    for s in shuffles(S.ndim, T.ndim):
        acc += outer.transpose(np.argsort(s))
        count += 1
    return acc / count


def rhs_term_count(k: int) -> int:
    return (k - 1) + sum(math.comb(k, i) for i in range(2, k - 1))


def assemble_rhs(k: int, tensors: Mapping[int, np.ndarray], N: np.ndarray,
                 b: np.ndarray) -> np.ndarray:
    """``R_{j,k}`` for one input channel with operator ``N`` and column ``b``."""
    if k < 3:
        raise ValueError("right-hand sides exist for k >= 3")
    missing = [i for i in range(2, k) if i not in tensors]
    if missing:
        raise TensorError(f"missing lower-order tensors {missing}")
    C = {i: np.tensordot(b, tensors[i + 1], axes=([0], [0])) for i in range(1, k - 1)}
    G = {}
    for i in range(2, k):
        acc = apply_mode(tensors[i], N, 0)
        for ell in range(1, i):
            acc += apply_mode(tensors[i], N, ell)
        G[i] = acc / i
    R = 2 * k * (k - 1) * sym_product(C[1], G[k - 1])
    terms = k - 1
    for i in range(2, k - 1):
        left = C[i] + i * G[i]
        right = C[k - i] + (k - i) * G[k - i]
        R += math.comb(k, i) * sym_product(left, right)
        terms += math.comb(k, i)
    log.debug("assembled R_%d from %d terms", k, terms)
    return R


def total_rhs(k: int, tensors: Mapping[int, np.ndarray], N, B, beta: float) -> np.ndarray:
    """``1/(2 beta) sum_j R_{j,k}``."""
    acc = sum(assemble_rhs(k, tensors, Nj, B[:, j]) for j, Nj in enumerate(N))
    return acc / (2.0 * beta)


# --------------------------------------------------------------------------
# quadrature
# --------------------------------------------------------------------------

@dataclass
class QuadratureRule:
    """``1/x ~ sum_i w_i exp(-t_i x)`` for ``|x|`` in ``interval`` and
    ``|arg x| <= angle``."""

    l: int
    nodes: np.ndarray
    weights: np.ndarray
    interval: tuple[float, float]
    angle: float = 0.0
    max_error: float = float("nan")

    def __call__(self, x):
        x = np.asarray(x)
        return np.exp(-np.multiply.outer(x, self.nodes)) @ self.weights


def exp_sum_rule(l: int, lo: float, hi: float, angle: float = 0.0,
                 tol: float = 1e-10) -> QuadratureRule:
    """Trapezoidal rule for ``1/x = int exp(s) exp(-x exp(s)) ds`` on ``2l+1``
    points.

    The ``s``-range is cut where both tails drop below ``tol`` (relative) for
    ``lo <= |x| <= hi`` and ``|arg x| <= angle``.
    """
    if not 0 < lo <= hi:
        raise TensorError(f"spectral bounds must be positive, got [{lo}, {hi}]")
    if not 0 <= angle < 0.5 * math.pi:
        raise TensorError(f"spectral sector angle {angle:.3f} outside [0, pi/2)")
    smin = math.log(tol * lo / hi)
    smax = math.log(math.log(1.0 / tol) / math.cos(angle))
    s = np.linspace(smin, smax, 2 * l + 1)
    h = s[1] - s[0]
    nodes = np.exp(s) / lo
    weights = h * np.exp(s) / lo
    return QuadratureRule(l, nodes, weights, (lo, hi), angle)


def sweep_error(rule: QuadratureRule, npts: int = 2000, nangles: int = 9) -> float:
    """Largest relative error of the rule over its interval (and sector)."""
    x = np.geomspace(*rule.interval, npts)
    if rule.angle > 0:
        x = np.multiply.outer(x, np.exp(1j * np.linspace(0.0, rule.angle, nangles))).ravel()
    worst = 0.0
    for chunk in np.array_split(x, max(1, x.size // 2000)):
        worst = max(worst, float(np.max(np.abs(rule(chunk) * chunk - 1.0))))
    return worst


def spectral_bounds(A_cl: np.ndarray) -> tuple[float, float, float]:
    """Smallest real part, largest modulus and largest argument of the
    spectrum of ``-A_cl``."""
    ev = -np.linalg.eigvals(A_cl)
    return float(np.min(ev.real)), float(np.max(np.abs(ev))), float(np.max(np.abs(np.angle(ev))))


def build_quadrature(l: int, A_cl: np.ndarray, k: int = 2, accuracy: float = 1e-8) -> QuadratureRule:
    """Rule covering the spectrum of the order-``k`` Kronecker sum of ``-A_cl``."""
    lam_min, lam_max, angle = spectral_bounds(A_cl)
    if lam_min <= 0:
        raise TensorError("closed-loop matrix is not Hurwitz")
    # the tail cut-off trades truncation against node spacing; keep the best
    rule = None
    for tol in TAIL_TOLERANCES:
        cand = exp_sum_rule(l, lam_min, k * lam_max, angle, tol)
        cand.max_error = sweep_error(cand)
        if rule is None or cand.max_error < rule.max_error:
            rule = cand
    if rule.max_error > accuracy:
        raise TensorError(f"quadrature with l={l} reaches only {rule.max_error:.2e} relative "
                          f"accuracy on [{lam_min:.3g}, {k * lam_max:.3g}] (sector angle "
                          f"{angle:.2f}); increase l")
    return rule


# --------------------------------------------------------------------------
# tensor Lyapunov solves
# --------------------------------------------------------------------------

def kron_sum_apply(A_cl: np.ndarray, T: np.ndarray) -> np.ndarray:
    """``Ak vec(T)``: ``sum_i T(.., A_cl z_i, ..)``."""
    out = np.zeros_like(T)
    for i in range(T.ndim):
        out += apply_mode(T, A_cl, i)
    return out


def tensor_residual(A_cl, T, rhs) -> float:
    return float(np.linalg.norm(kron_sum_apply(A_cl, T) - rhs) /
                 max(np.linalg.norm(rhs), np.finfo(float).tiny))


def solve_gen_lyapunov(A_cl: np.ndarray, rhs: np.ndarray, rule: QuadratureRule | None = None,
                       tol: float = 1e-6, symmetric: bool = True) -> np.ndarray:
    """Solve ``Ak vec(T) = vec(rhs)`` with the exponential-sum inverse."""
    k = rhs.ndim
    if rule is None:
        rule = build_quadrature(DEFAULT_NODES, A_cl, k)
    At = A_cl.T
    T = np.zeros_like(rhs, dtype=float)
    # fixed summation order for reproducibility
    for t, w in zip(rule.nodes, rule.weights):
        T -= w * apply_all_modes(rhs, sla.expm(t * At))
    if symmetric:
        T = symmetrize(T)
    res = tensor_residual(A_cl, T, rhs)
    if res > tol:
        raise TensorError(f"tensor equation residual {res:.2e} above {tol:.0e}; increase l")
    return T


def kron_sum_matrix(A_cl: np.ndarray, k: int) -> sp.csr_matrix:
    """Sparse ``sum_i I (x) .. (x) A_cl^T (x) .. (x) I`` (row-major vec)."""
    r = A_cl.shape[0]
    At = sp.csr_matrix(A_cl.T)
    out = sp.csr_matrix((r**k, r**k))
    for i in range(k):
        out = out + sp.kron(sp.kron(sp.identity(r**i), At), sp.identity(r**(k - i - 1)))
    return out.tocsc()


def solve_gen_lyapunov_direct(A_cl: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Direct sparse LU solve of the full Kronecker system (small instances)."""
    r, k = A_cl.shape[0], rhs.ndim
    if r**k > DIRECT_SIZE_LIMIT:
        raise TensorError(f"r^k = {r**k} exceeds the direct-solve limit {DIRECT_SIZE_LIMIT}")
    M = kron_sum_matrix(A_cl, k)
    x = spla.spsolve(M, rhs.reshape(-1))
    return np.asarray(x).reshape(rhs.shape)


# --------------------------------------------------------------------------
# feedback law
# --------------------------------------------------------------------------

@dataclass
class FeedbackLaw:
    """``u_j(y) = -1/beta sum_k 1/(k-1)! T_k(N_j y + B_j, y, ..., y)``."""

    beta: float
    tensors: dict[int, np.ndarray]
    N: list[np.ndarray]
    B: np.ndarray
    info: dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return max(self.tensors)

    @property
    def r(self) -> int:
        return self.tensors[2].shape[0]

    def truncate(self, p: int) -> "FeedbackLaw":
        if p < 2 or p > self.p:
            raise ValueError(f"degree {p} not available (have 2..{self.p})")
        return FeedbackLaw(self.beta, {k: T for k, T in self.tensors.items() if k <= p},
                           self.N, self.B, dict(self.info))

    def value_gradient(self, y: np.ndarray) -> np.ndarray:
        """Gradient of ``V_p`` at ``y``."""
        g = np.zeros(self.r)
        for k, T in self.tensors.items():
            g += contract_tail(T, y, k - 1) / math.factorial(k - 1)
        return g

    def value_hessian(self, y: np.ndarray) -> np.ndarray:
        H = np.zeros((self.r, self.r))
        for k, T in self.tensors.items():
            H += contract_tail(T, y, k - 2) / math.factorial(k - 2)
        return H

    def value(self, y: np.ndarray) -> float:
        """``V_p(y) = sum_k T_k(y, ..., y) / k!``."""
        return float(sum(contract_tail(T, y, k) / math.factorial(k)
                         for k, T in self.tensors.items()))

    def __call__(self, y: np.ndarray) -> np.ndarray:
        g = self.value_gradient(y)
        return np.array([-(Nj @ y + self.B[:, j]) @ g for j, Nj in enumerate(self.N)]) / self.beta

    def jacobian(self, y: np.ndarray) -> np.ndarray:
        """``du/dy``, shape ``(m, r)``."""
        g = self.value_gradient(y)
        H = self.value_hessian(y)
        rows = [Nj.T @ g + H @ (Nj @ y + self.B[:, j]) for j, Nj in enumerate(self.N)]
        return -np.array(rows) / self.beta


def feedback_tensors(red, ric, p: int, l: int = DEFAULT_NODES) -> FeedbackLaw:
    """Riccati matrix plus ``T_3 .. T_p`` for the reduced model ``red``."""
    if p < 2:
        raise ValueError("degree must be at least 2")
    tensors = {2: np.array(ric.Pi, dtype=float)}
    info = {"residuals": {}, "quadrature_error": {}}
    for k in range(3, p + 1):
        rhs = total_rhs(k, tensors, red.N, red.B, ric.beta)
        rule = build_quadrature(l, ric.A_cl, k)
        T = solve_gen_lyapunov(ric.A_cl, rhs, rule)
        tensors[k] = T
        info["residuals"][k] = tensor_residual(ric.A_cl, T, rhs)
        info["quadrature_error"][k] = rule.max_error
        log.info("T_%d: residual %.2e, quadrature error %.2e", k, info["residuals"][k],
                 rule.max_error)
    return FeedbackLaw(ric.beta, tensors, list(red.N), np.array(red.B), info)


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

_MAGIC = b"PFTENSOR"


def save_tensor(T: np.ndarray, path, meta: dict | None = None) -> None:
    """Binary layout: 8-byte magic, int64 ``k``, int64 ``r``, then ``r^k``
    little-endian float64 values in row-major order.  A JSON sidecar
    ``<path>.json`` carries ``k``, ``r`` and any extra metadata."""
    path = Path(path)
    T = np.ascontiguousarray(T, dtype="<f8")
    k, r = T.ndim, (T.shape[0] if T.ndim else 0)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.array([k, r], dtype="<i8").tobytes())
        fh.write(T.tobytes(order="C"))
    side = {"k": k, "r": r, "dtype": "float64", "order": "row-major"}
    side.update(meta or {})
    Path(str(path) + ".json").write_text(json.dumps(side, indent=2))


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise TensorError(f"{path} is not a tensor file")
    k, r = np.frombuffer(raw[8:24], dtype="<i8")
    data = np.frombuffer(raw[24:], dtype="<f8")
    if data.size != r**k:
        raise TensorError(f"payload has {data.size} values, expected {r}^{k}")
    return data.reshape((int(r),) * int(k)).copy()
