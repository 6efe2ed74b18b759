"""Ground potentials and control shape functions.

A :class:`PotentialSpec` bundles an analytic ground potential ``G`` (a sum of
polynomial and Gaussian terms) with the control shape functions ``alpha_j``.
Shape functions are linear ramps along one axis, flattened near the boundary
by quintic (C2) Hermite blends so that their normal derivative vanishes on
the boundary of the box.

The JSON layout accepted by :func:`load_potential` is::

    {
      "dim": 1,
      "potential": [
        {"type": "polynomial", "coefficients": [c0, c1, ...]},           # 1D
        {"type": "polynomial", "powers": [[i, j], ...],
         "coefficients": [...]},                                          # 2D
        {"type": "gaussian", "amplitude": a, "center": [..], "width": w}
      ],
      "shapes": [
        {"type": "ramp", "axis": 0, "slope": 0.0833,
         "inner": [-5.8, 5.8], "outer": [-5.9, 5.9], "plateau": [-0.5, 0.5]}
      ]
    }

``plateau`` is optional; it defaults to ``slope * outer``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.polynomial import polynomial as npoly


class PotentialError(ValueError):
    pass


# --------------------------------------------------------------------------
# potential terms
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PolynomialTerm:
    """Sum of monomials ``c * x1**i1 * ... * xd**id``."""

    powers: tuple[tuple[int, ...], ...]
    coefficients: tuple[float, ...]

    @classmethod
    def from_1d(cls, coefficients: Sequence[float]) -> "PolynomialTerm":
        return cls(tuple((k,) for k in range(len(coefficients))),
                   tuple(float(c) for c in coefficients))

    @property
    def dim(self) -> int:
        return len(self.powers[0])

    def value(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros(x.shape[0])
        for pw, c in zip(self.powers, self.coefficients):
            out += c * np.prod(x ** np.asarray(pw), axis=1)
        return out

    def gradient(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros_like(x, dtype=float)
        for pw, c in zip(self.powers, self.coefficients):
            pw = np.asarray(pw)
            for ax in range(x.shape[1]):
                if pw[ax] == 0:
                    continue
                dp = pw.copy()
                dp[ax] -= 1
                out[:, ax] += c * pw[ax] * np.prod(x ** dp, axis=1)
        return out

    def to_dict(self) -> dict:
        if self.dim == 1:
            return {"type": "polynomial", "coefficients": list(self.coefficients)}
        return {"type": "polynomial", "powers": [list(p) for p in self.powers],
                "coefficients": list(self.coefficients)}


@dataclass(frozen=True)
class GaussianTerm:
    """``amplitude * exp(-|x - center|^2 / (2 width^2))``."""

    amplitude: float
    center: tuple[float, ...]
    width: float

    @property
    def dim(self) -> int:
        return len(self.center)

    def value(self, x: np.ndarray) -> np.ndarray:
        d = x - np.asarray(self.center)
        return self.amplitude * np.exp(-np.sum(d * d, axis=1) / (2 * self.width ** 2))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        d = x - np.asarray(self.center)
        v = self.value(x)
        return -(d / self.width ** 2) * v[:, None]

    def to_dict(self) -> dict:
        return {"type": "gaussian", "amplitude": self.amplitude,
                "center": list(self.center), "width": self.width}


# --------------------------------------------------------------------------
# shape functions
# --------------------------------------------------------------------------

def _quintic_hermite(x0, x1, left, right):
    """Coefficients (in ``t = x - x0``) of the quintic matching value, first
    and second derivative at both ends."""
    h = x1 - x0
    M = np.array([
        [1, 0, 0, 0, 0, 0],
        [0, 1, 0, 0, 0, 0],
        [0, 0, 2, 0, 0, 0],
        [1, h, h**2, h**3, h**4, h**5],
        [0, 1, 2*h, 3*h**2, 4*h**3, 5*h**4],
        [0, 0, 2, 6*h, 12*h**2, 20*h**3],
    ], dtype=float)
    return np.linalg.solve(M, np.r_[left, right])


@dataclass(frozen=True)
class RampShape:
    """``alpha(x) = slope * x[axis]`` on ``inner``, constant outside ``outer``.

    On ``[outer[0], inner[0]]`` and ``[inner[1], outer[1]]`` the ramp is joined
    to the plateaus by C2 quintic Hermite blends.
    """

    axis: int
    slope: float
    inner: tuple[float, float]
    outer: tuple[float, float]
    plateau: tuple[float, float] | None = None

    def __post_init__(self):
        a0, b0 = self.outer
        a, b = self.inner
        if not (a0 < a < b < b0):
            raise PotentialError(f"ramp intervals must satisfy outer[0] < inner[0] < "
                                 f"inner[1] < outer[1], got {self.outer}, {self.inner}")

    @property
    def plateaus(self) -> tuple[float, float]:
        if self.plateau is not None:
            return self.plateau
        return (self.slope * self.outer[0], self.slope * self.outer[1])

    def _blends(self):
        (a0, b0), (a, b), (v0, v1), s = self.outer, self.inner, self.plateaus, self.slope
        lo = _quintic_hermite(a0, a, [v0, 0.0, 0.0], [s * a, s, 0.0])
        hi = _quintic_hermite(b, b0, [s * b, s, 0.0], [v1, 0.0, 0.0])
        return lo, hi

    def _eval(self, x: np.ndarray, deriv: int) -> np.ndarray:
        (a0, b0), (a, b), (v0, v1), s = self.outer, self.inner, self.plateaus, self.slope
        lo, hi = self._blends()
        lo = npoly.polyder(lo, deriv) if deriv else lo
        hi = npoly.polyder(hi, deriv) if deriv else hi
        if deriv == 0:
            out = np.where(x <= a0, v0, np.where(x >= b0, v1, s * x))
        else:
            out = np.where((x > a) & (x < b), s if deriv == 1 else 0.0, 0.0)
            out = np.asarray(out, dtype=float)
        m = (x > a0) & (x < a)
        out = np.where(m, npoly.polyval(x - a0, lo), out)
        m = (x > b) & (x < b0)
        out = np.where(m, npoly.polyval(x - b, hi), out)
        return out

    def value(self, x: np.ndarray) -> np.ndarray:
        return self._eval(x[:, self.axis], 0)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        g = np.zeros_like(x, dtype=float)
        g[:, self.axis] = self._eval(x[:, self.axis], 1)
        return g

    def to_dict(self) -> dict:
        d = {"type": "ramp", "axis": self.axis, "slope": self.slope,
             "inner": list(self.inner), "outer": list(self.outer)}
        if self.plateau is not None:
            d["plateau"] = list(self.plateau)
        return d


# --------------------------------------------------------------------------
# spec
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PotentialSpec:
    dim: int
    terms: tuple = ()
    shapes: tuple = ()
    name: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise PotentialError(f"dim must be 1 or 2, got {self.dim}")
        for t in self.terms:
            if t.dim != self.dim:
                raise PotentialError("potential term dimension does not match spec")
        for s in self.shapes:
            if not 0 <= s.axis < self.dim:
                raise PotentialError(f"shape axis {s.axis} out of range")

    @property
    def m(self) -> int:
        return len(self.shapes)

    @staticmethod
    def _points(x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x[:, None] if x.ndim == 1 else x

    def G(self, x) -> np.ndarray:
        x = self._points(x)
        return sum((t.value(x) for t in self.terms), np.zeros(x.shape[0]))

    def grad_G(self, x) -> np.ndarray:
        x = self._points(x)
        return sum((t.gradient(x) for t in self.terms), np.zeros_like(x))

    def alpha(self, j: int, x) -> np.ndarray:
        return self.shapes[j].value(self._points(x))

    def grad_alpha(self, j: int, x) -> np.ndarray:
        return self.shapes[j].gradient(self._points(x))

    def to_dict(self) -> dict:
        return {"dim": self.dim, "name": self.name,
                "potential": [t.to_dict() for t in self.terms],
                "shapes": [s.to_dict() for s in self.shapes]}


def potential_from_dict(d: dict) -> PotentialSpec:
    try:
        dim = int(d["dim"])
        terms = []
        for t in d.get("potential", []):
            kind = t["type"]
            if kind == "polynomial":
                if "powers" in t:
                    terms.append(PolynomialTerm(tuple(tuple(int(i) for i in p) for p in t["powers"]),
                                                tuple(float(c) for c in t["coefficients"])))
                else:
                    terms.append(PolynomialTerm.from_1d(t["coefficients"]))
            elif kind == "gaussian":
                terms.append(GaussianTerm(float(t["amplitude"]),
                                          tuple(float(c) for c in t["center"]),
                                          float(t["width"])))
            else:
                raise PotentialError(f"unknown potential term type {kind!r}")
        shapes = []
        for s in d.get("shapes", []):
            if s.get("type", "ramp") != "ramp":
                raise PotentialError(f"unknown shape type {s['type']!r}")
            plateau = s.get("plateau")
            shapes.append(RampShape(int(s["axis"]), float(s["slope"]),
                                    tuple(s["inner"]), tuple(s["outer"]),
                                    tuple(plateau) if plateau is not None else None))
    except (KeyError, TypeError) as exc:
        raise PotentialError(f"malformed potential spec: {exc}") from exc
    return PotentialSpec(dim, tuple(terms), tuple(shapes), name=d.get("name", ""))


def load_potential(path) -> PotentialSpec:
    return potential_from_dict(json.loads(Path(path).read_text()))


def save_potential(spec: PotentialSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2))


# --------------------------------------------------------------------------
# calibrated potentials
# --------------------------------------------------------------------------

# stationary points of the 1D ground potential in increasing order
# x1 < x4 < x2 < x5 < x3 (minima x1, x2, x3; maxima x4, x5)
TRIPLE_WELL_POINTS = (-3.85, -2.24, -0.12, 2.43, 3.78)
TRIPLE_WELL_BARRIER = 1.11          # G(x4) - G(x2), barrier towards x1

# G'(x) = scale * (1 + shape x^2) * prod(x - x_i); scale frozen from
# calibrate_triple_well()
TRIPLE_WELL_SHAPE = 0.0
TRIPLE_WELL_SCALE = 0.015037681020729846


def _triple_well_coefficients(scale: float, shape: float) -> np.ndarray:
    dp = npoly.polymul(npoly.polyfromroots(TRIPLE_WELL_POINTS) * scale, [1.0, 0.0, shape])
    g = npoly.polyint(dp)
    g[0] -= npoly.polyval(TRIPLE_WELL_POINTS[2], g)
    return g


def calibrate_triple_well(barrier=TRIPLE_WELL_BARRIER, shape=0.0) -> float:
    """Scale of ``G'`` such that the barrier ``G(x4) - G(x2)`` hits its target."""
    g1 = _triple_well_coefficients(1.0, shape)
    x2, x4 = TRIPLE_WELL_POINTS[2], TRIPLE_WELL_POINTS[1]
    # G is linear in the scale
    return barrier / (npoly.polyval(x4, g1) - npoly.polyval(x2, g1))


def alpha_1d() -> RampShape:
    return RampShape(axis=0, slope=1.0 / 12, inner=(-5.8, 5.8), outer=(-5.9, 5.9),
                     plateau=(-0.5, 0.5))


def triple_well_1d() -> PotentialSpec:
    """Calibrated 1D triple-well potential on (-6, 6) with one ramp control."""
    coef = _triple_well_coefficients(TRIPLE_WELL_SCALE, TRIPLE_WELL_SHAPE)
    return PotentialSpec(1, (PolynomialTerm.from_1d(coef),), (alpha_1d(),),
                         name="triple-well-1d")


# 2D: separable double wells g1(x1) + g2(x2) with g_i'(x) = c_i (x-a)(x-m)(x-b).
# Minima sit at the products of the 1D minima, approximating
# x_A=(2.48,-3.77), x_B=(-2.86,-3.75), x_C=(-2.88,2.52), x_D=(2.42,2.51).
FOUR_WELL_TARGETS = ((2.48, -3.77), (-2.86, -3.75), (-2.88, 2.52), (2.42, 2.51))
_FOUR_WELL_AXES = (
    # (left min, barrier, right min, scale)
    (-2.87, -0.40, 2.45, 0.11),
    (-3.76, -0.45, 2.515, 0.09),
)


def _double_well(a, m, b, c):
    g = npoly.polyint(npoly.polyfromroots([a, m, b]) * c)
    g[0] -= npoly.polyval(m, g)
    return g


def four_well_2d() -> PotentialSpec:
    powers, coefs = [], []
    for ax, params in enumerate(_FOUR_WELL_AXES):
        g = _double_well(*params)
        for k, c in enumerate(g):
            if k == 0 or c == 0.0:
                continue
            pw = [0, 0]
            pw[ax] = k
            powers.append(tuple(pw))
            coefs.append(float(c))
    shapes = (
        RampShape(axis=0, slope=1.0 / 12, inner=(-5.8, 5.8), outer=(-6.0, 6.0),
                  plateau=(-0.5, 0.5)),
        RampShape(axis=1, slope=1.0 / 12, inner=(-6.3, 5.3), outer=(-6.5, 5.5),
                  plateau=(-6.4 / 12, 5.4 / 12)),
    )
    return PotentialSpec(2, (PolynomialTerm(tuple(powers), tuple(coefs)),), shapes,
                         name="four-well-2d")


def four_well_minima() -> list[tuple[float, float]]:
    """Local minimizers of :func:`four_well_2d` (products of the 1D minima)."""
    left = [p[0] for p in _FOUR_WELL_AXES]
    right = [p[2] for p in _FOUR_WELL_AXES]
    return [(right[0], left[1]), (left[0], left[1]), (left[0], right[1]), (right[0], right[1])]
