"""B-spline bases on uniform grids and learnable univariate edge functions.

An edge function is

    phi(x) = w_b * silu(x) + w_s * sum_i c_i B_{i,k}(x)

on a grid ``[a, b]`` split into ``G`` equal intervals.  Outside ``[a, b]`` the
whole edge continues along its boundary tangent, so every edge is C^1 on the
real line and its value, slope and curvature stay finite for any input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import DegreeError

__all__ = [
    "SplineGrid",
    "UnivariateEdge",
    "base_node",
    "basis_node",
    "bspline_basis",
    "bspline_basis_derivative",
    "edge_eval",
    "edge_eval_derivative",
    "edge_value",
    "fit_coefficients",
    "silu",
]


@dataclass(frozen=True)
class SplineGrid:
    """Uniform knot grid on ``[a, b]`` with ``G`` intervals and degree ``k``."""

    a: float
    b: float
    G: int
    k: int

    def __post_init__(self):
        if not self.a < self.b:
            raise ValueError(f"empty domain [{self.a}, {self.b}]")
        if self.G < 1 or self.k < 0:
            raise ValueError(f"need G >= 1 and k >= 0, got G={self.G}, k={self.k}")

    @classmethod
    def from_range(cls, lo, hi, G, k, pad=0.1, min_width=1e-3):
        """Grid covering ``[lo, hi]`` widened by ``pad`` of its width on each side."""
        lo, hi = float(lo), float(hi)
        width = max(hi - lo, min_width)
        mid = 0.5 * (lo + hi)
        return cls(mid - 0.5 * width - pad * width, mid + 0.5 * width + pad * width, G, k)

    @property
    def h(self):
        return (self.b - self.a) / self.G

    @property
    def n_basis(self):
        return self.G + self.k

    @property
    def knots(self):
        return self.a + self.h * np.arange(-self.k, self.G + self.k + 1, dtype=np.float64)


def _cox_de_boor(x, t, k, degree):
    """Degree-``degree`` bases over knots ``t`` at in-domain points ``x``.

    ``t`` has trailing axis of knots and broadcasts against ``x[..., None]``.
    The last domain interval is closed on the right.
    """
    xe = x[..., None]
    K = t.shape[-1]
    B = ((xe >= t[..., :-1]) & (xe < t[..., 1:])).astype(np.float64)
    last = K - 2 - k
    at_end = np.broadcast_to(xe == t[..., K - 1 - k : K - k], B.shape[:-1] + (1,))[..., 0]
    if np.any(at_end):
        B[at_end] = 0.0
        B[at_end, last] = 1.0
    for d in range(1, degree + 1):
        m = K - 1 - d
        left = (xe - t[..., :m]) / (t[..., d : d + m] - t[..., :m])
        right = (t[..., d + 1 : d + 1 + m] - xe) / (t[..., d + 1 : d + 1 + m] - t[..., 1 : 1 + m])
        B = left * B[..., :m] + right * B[..., 1 : m + 1]
    return B


def _derivative(x, t, k, order):
    """``order``-th derivative of the degree-``k`` bases (in-domain ``x``)."""
    if order > k:
        shape = np.broadcast_shapes(x[..., None].shape, t.shape)
        return np.zeros(shape[:-1] + (t.shape[-1] - 1 - k,))
    B = _cox_de_boor(x, t, k, k - order)
    K = t.shape[-1]
    for d in range(k - order + 1, k + 1):
        m = K - 1 - d
        B = d * (
            B[..., :m] / (t[..., d : d + m] - t[..., :m])
            - B[..., 1 : m + 1] / (t[..., d + 1 : d + 1 + m] - t[..., 1 : 1 + m])
        )
    return B


def _features(x, t, k, order):
    """Extended basis (or its derivative) at arbitrary ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        return _features(x[None], t, k, order)[0]
    lo, hi = t[..., k], t[..., -1 - k]
    xc = np.clip(x, lo, hi)
    outside = x != xc
    if order == 0:
        v = _derivative(xc, t, k, 0)
        if np.any(outside):
            v = v + (x - xc)[..., None] * _derivative(xc, t, k, 1)
        return v
    v = _derivative(xc, t, k, order)
    if order >= 2 and np.any(outside):
        v = np.where(outside[..., None], 0.0, v)
    return v


def bspline_basis(x, grid):
    """Basis values ``B_{i,k}(x)``, shape ``x.shape + (G + k,)``.

    Inside ``[a, b]`` this is the Cox-de Boor recursion; outside, each basis
    follows its tangent at the nearest boundary.
    """
    return _features(x, grid.knots, grid.k, 0)


def bspline_basis_derivative(x, grid, order=1):
    if grid.k == 0:
        raise DegreeError("degree-0 bases are piecewise constant; no derivative")
    return _features(x, grid.knots, grid.k, order)


def silu(x, order=0):
    x = np.asarray(x, dtype=np.float64)
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    if order == 0:
        return x * s
    if order == 1:
        return s * (1.0 + x * (1.0 - s))
    if order == 2:
        return s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
    if order == 3:
        ds = s * (1.0 - s)
        return ds * ((1.0 - 2.0 * s) * (2.0 + x * (1.0 - 2.0 * s)) + (1.0 - 2.0 * s) - 2.0 * x * ds)
    raise ValueError(f"unsupported derivative order {order}")


def _base_features(x, lo, hi, order):
    x = np.asarray(x, dtype=np.float64)
    xc = np.clip(x, lo, hi)
    outside = x != xc
    if order == 0:
        return silu(xc) + (x - xc) * silu(xc, 1)
    if order == 1:
        return silu(xc, 1)
    return np.where(outside, 0.0, silu(x, order))


class _BasisOp(dc.Op):
    name = "bspline"

    def __init__(self, knots, k, order):
        self.knots = np.asarray(knots, dtype=np.float64)
        self.k = k
        self.order = order

    def compute(self, x):
        return _features(x, self.knots, self.k, self.order)

    def vjp(self, g, out, x):
        return (np.sum(g * _features(x, self.knots, self.k, self.order + 1), axis=-1),)


class _BaseOp(dc.Op):
    name = "silu"

    def __init__(self, lo, hi, order):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        self.order = order

    def compute(self, x):
        return _base_features(x, self.lo, self.hi, self.order)

    def vjp(self, g, out, x):
        return (g * _base_features(x, self.lo, self.hi, self.order + 1),)


def basis_node(x, knots, k, order=0):
    """Graph node of extended basis values (``order`` = derivative order).

    ``knots`` is one knot vector, or one row per trailing input dimension of
    ``x``; the output gains a trailing axis of length ``G + k``.
    """
    return dc.Node(_BasisOp(knots, k, order), [dc.as_node(x)])


def base_node(x, lo, hi, order=0):
    """Graph node of the extended silu base term (or its derivative)."""
    return dc.Node(_BaseOp(lo, hi, order), [dc.as_node(x)])


@dataclass
class UnivariateEdge:
    """One learnable univariate function on a spline grid."""

    grid: SplineGrid
    coef: np.ndarray
    w_b: float = 1.0
    w_s: float = 1.0

    def __post_init__(self):
        self.coef = np.asarray(self.coef, dtype=np.float64)
        if self.coef.shape != (self.grid.n_basis,):
            raise ValueError(f"need {self.grid.n_basis} coefficients, got {self.coef.shape}")

    @classmethod
    def random(cls, grid, rng):
        std = 0.1 / np.sqrt(grid.n_basis)
        return cls(grid, rng.normal(0.0, std, grid.n_basis))


def _edge_expr(edge, x, order):
    g = edge.grid
    spline = dc.sum(basis_node(x, g.knots, g.k, order) * edge.coef, axis=-1)
    return edge.w_b * base_node(x, g.a, g.b, order) + edge.w_s * spline


def edge_eval(edge, x):
    """Graph node for ``phi(x)``."""
    return _edge_expr(edge, x, 0)


def edge_eval_derivative(edge, x):
    """Graph node for ``phi'(x)``."""
    return _edge_expr(edge, x, 1)


def edge_value(edge, x, order=0):
    """Plain numpy evaluation of ``phi`` (or a derivative) at ``x``."""
    g = edge.grid
    spline = _features(x, g.knots, g.k, order) @ edge.coef
    return edge.w_b * _base_features(x, g.a, g.b, order) + edge.w_s * spline


def fit_coefficients(grid, x, y):
    """Least-squares spline coefficients reproducing samples ``y(x)``."""
    A = bspline_basis(np.asarray(x, dtype=np.float64), grid)
    coef, *_ = np.linalg.lstsq(A, np.asarray(y, dtype=np.float64), rcond=None)
    return coef
