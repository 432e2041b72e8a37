"""Radial finite-difference substrate.

Radial functions on R^N are sampled at r_j = j*dr, j = 1..m, with
dr = r_max/(m+1).  The axis r = 0 and the outer node r = r_max are not
unknowns: the axis carries no flux (u'(0) = 0) and u(r_max) = 0.

The discrete Laplacian is written in flux form,

    (Lap u)_j = [A_{j+1/2} (u_{j+1} - u_j) - A_{j-1/2} (u_j - u_{j-1})] / (g_j dr^2)

with node weights g_j = j^(N-1) and face weights
A_{k+1/2} = 2N * sum_{i<=k} i^(N-1) / (2k+1).  These face weights make the
stencil exact on r^2 at every node (the axis cell included), keep it second
order on smooth even profiles, and make it exactly symmetric in the weighted
inner product sum_j u_j v_j g_j.  For N = 3 the face weights reduce to
k(k+1), i.e. the usual w = r*u scheme.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
import math

import numpy as np

__all__ = [
    "RadialGrid",
    "RadialField",
    "PairState",
    "GridMismatchError",
    "sphere_area",
    "critical_exponent",
    "check_exponent",
    "nonlinearity",
    "nonlinearity_prime",
    "nonlinearity_second",
    "potential",
    "laplacian_apply",
    "inner_product",
    "l2_norm_sq",
    "h1_norm_sq",
    "pair_norm_sq",
    "pair_norm",
    "dirichlet_form",
    "energy",
    "static_action",
]


class GridMismatchError(ValueError):
    """Two fields that must share a grid do not."""


def sphere_area(dim: int) -> float:
    """Area of the unit sphere S^{dim-1} in R^dim."""
    return 2.0 * math.pi ** (dim / 2.0) / math.gamma(dim / 2.0)


def critical_exponent(dim: int) -> float:
    """Energy-critical power p*(N); infinite for N <= 2."""
    if dim <= 2:
        return math.inf
    return (dim + 2.0) / (dim - 2.0)


def check_exponent(p: float, dim: int) -> None:
    if not 2.0 < p < critical_exponent(dim):
        raise ValueError(
            f"exponent p={p} outside the subcritical range 2 < p < p*(N)={critical_exponent(dim)}"
        )


@dataclass(frozen=True)
class RadialGrid:
    """Uniform radial mesh for radial functions on R^dim."""

    dim: int = 3
    r_max: float = 40.0
    m: int = 4096

    def __post_init__(self):
        if not 2 <= self.dim <= 5:
            raise ValueError(f"dim must satisfy 2 <= dim <= 5, got {self.dim}")
        if self.m < 16:
            raise ValueError(f"need m >= 16 interior points, got {self.m}")
        if not self.r_max > 0:
            raise ValueError(f"r_max must be positive, got {self.r_max}")

    @property
    def dr(self) -> float:
        return self.r_max / (self.m + 1)

    @cached_property
    def r(self) -> np.ndarray:
        r = self.dr * np.arange(1, self.m + 1, dtype=float)
        r.flags.writeable = False
        return r

    @cached_property
    def node_weights(self) -> np.ndarray:
        """g_j = j^(N-1)."""
        g = np.arange(1, self.m + 1, dtype=float) ** (self.dim - 1)
        g.flags.writeable = False
        return g

    @cached_property
    def face_weights(self) -> np.ndarray:
        """A_{k+1/2} for k = 0..m (A_{1/2} = 0 at the axis)."""
        k = np.arange(0, self.m + 1, dtype=float)
        sums = np.concatenate(([0.0], np.cumsum(np.arange(1, self.m + 1, dtype=float) ** (self.dim - 1))))
        a = 2.0 * self.dim * sums / (2.0 * k + 1.0)
        a.flags.writeable = False
        return a

    @cached_property
    def quad_weights(self) -> np.ndarray:
        """omega_{N-1} r_j^{N-1} dr, the quadrature weights of <.,.>."""
        w = sphere_area(self.dim) * self.dr**self.dim * self.node_weights
        w.flags.writeable = False
        return w

    @cached_property
    def laplacian_bands(self) -> tuple[np.ndarray, np.ndarray]:
        """(diag, offdiag) of the symmetrized -Lap, S = W^{1/2} (-Lap) W^{-1/2}.

        W = diag(g_j).  S is symmetric tridiagonal; its spectrum is that of
        -Lap and u = W^{-1/2} s maps eigenvectors back.
        """
        dr2 = self.dr**2
        a = self.face_weights
        g = self.node_weights
        diag = (a[1:] + a[:-1]) / (g * dr2)
        off = -a[1:-1] / (np.sqrt(g[:-1] * g[1:]) * dr2)
        diag.flags.writeable = False
        off.flags.writeable = False
        return diag, off

    @cached_property
    def _stencil(self) -> tuple[np.ndarray, np.ndarray]:
        # outward / inward coefficients of Lap in the original frame
        dr2 = self.dr**2
        a = self.face_weights
        g = self.node_weights
        return a[1:] / (g * dr2), a[:-1] / (g * dr2)

    def lap(self, u: np.ndarray) -> np.ndarray:
        """Discrete Laplacian on a raw value array (hot path)."""
        cp, cm = self._stencil
        out = -(cp + cm) * u
        out[:-1] += cp[:-1] * u[1:]
        out[1:] += cm[1:] * u[:-1]
        return out

    def dot(self, u: np.ndarray, v: np.ndarray) -> float:
        return float(np.dot(self.quad_weights, u * v))  # exactly symmetric in (u, v)

    def grad_sq(self, u: np.ndarray) -> float:
        """Weighted sum of squared one-sided differences, the discrete int |u'|^2."""
        diffs = np.diff(u, prepend=u[0], append=0.0)
        return float(
            sphere_area(self.dim) * self.dr ** (self.dim - 2) * np.dot(self.face_weights, diffs**2)
        )

    def field(self, values) -> "RadialField":
        return RadialField(self, values)

    def sample(self, func) -> "RadialField":
        return RadialField(self, func(self.r))

    def zeros(self) -> "RadialField":
        return RadialField(self, np.zeros(self.m))

    def axis_value(self, u: np.ndarray) -> float:
        """Even quadratic extrapolation of u to r = 0."""
        return float((4.0 * u[0] - u[1]) / 3.0)


@dataclass(frozen=True, eq=False)
class RadialField:
    """Samples u(r_j) of a radial profile."""

    grid: RadialGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.shape != (self.grid.m,):
            raise ValueError(f"field has shape {vals.shape}, grid expects ({self.grid.m},)")
        if not np.all(np.isfinite(vals)):
            raise ValueError("field contains non-finite values")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    def _coerce(self, other):
        if isinstance(other, RadialField):
            if other.grid != self.grid:
                raise GridMismatchError("fields live on different grids")
            return other.values
        return other

    def __add__(self, other):
        return RadialField(self.grid, self.values + self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return RadialField(self.grid, self.values - self._coerce(other))

    def __rsub__(self, other):
        return RadialField(self.grid, self._coerce(other) - self.values)

    def __mul__(self, other):
        return RadialField(self.grid, self.values * self._coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return RadialField(self.grid, self.values / scalar)

    def __neg__(self):
        return RadialField(self.grid, -self.values)

    def __len__(self):
        return self.grid.m

    @property
    def r(self) -> np.ndarray:
        return self.grid.r


@dataclass(frozen=True, eq=False)
class PairState:
    """Phase-space point (u, du/dt)."""

    position: RadialField
    velocity: RadialField

    def __post_init__(self):
        if self.position.grid != self.velocity.grid:
            raise GridMismatchError("position and velocity live on different grids")

    @classmethod
    def from_arrays(cls, grid: RadialGrid, u, v=None) -> "PairState":
        if v is None:
            v = np.zeros(grid.m)
        return cls(RadialField(grid, u), RadialField(grid, v))

    @property
    def grid(self) -> RadialGrid:
        return self.position.grid

    def __add__(self, other: "PairState") -> "PairState":
        return PairState(self.position + other.position, self.velocity + other.velocity)

    def __sub__(self, other: "PairState") -> "PairState":
        return PairState(self.position - other.position, self.velocity - other.velocity)

    def __mul__(self, scalar: float) -> "PairState":
        return PairState(self.position * scalar, self.velocity * scalar)

    __rmul__ = __mul__


# --- nonlinearity f(u) = |u|^{p-1} u and its derivatives ---------------------


def nonlinearity(u, p: float):
    return np.abs(u) ** (p - 1.0) * u


def nonlinearity_prime(u, p: float):
    return p * np.abs(u) ** (p - 1.0)


def nonlinearity_second(u, p: float):
    return p * (p - 1.0) * np.abs(u) ** (p - 2.0) * np.sign(u)


def potential(u, p: float):
    """F(u) = |u|^{p+1}/(p+1)."""
    return np.abs(u) ** (p + 1.0) / (p + 1.0)


# --- public operations ---------------------------------------------------------


def laplacian_apply(f: RadialField) -> RadialField:
    """Discrete radial Laplacian u'' + (N-1)/r u' with u'(0)=0, u(r_max)=0."""
    return RadialField(f.grid, f.grid.lap(f.values))


def inner_product(f: RadialField, g: RadialField) -> float:
    """<f, g> = omega_{N-1} sum_j f_j g_j r_j^{N-1} dr."""
    if f.grid != g.grid:
        raise GridMismatchError("inner product of fields on different grids")
    return f.grid.dot(f.values, g.values)


def l2_norm_sq(f: RadialField) -> float:
    return inner_product(f, f)


def dirichlet_form(f: RadialField) -> float:
    """Discrete int |grad f|^2; equals <-Lap f, f> exactly."""
    return f.grid.grad_sq(f.values)


def h1_norm_sq(f: RadialField) -> float:
    return dirichlet_form(f) + l2_norm_sq(f)


def pair_norm_sq(s: PairState) -> float:
    return h1_norm_sq(s.position) + l2_norm_sq(s.velocity)


def pair_norm(s: PairState) -> float:
    return math.sqrt(pair_norm_sq(s))


def energy(s: PairState, p: float) -> float:
    """E(u, v) = 1/2 int {|grad u|^2 + u^2 + v^2 - 2 F(u)}."""
    grid = s.grid
    u = s.position.values
    v = s.velocity.values
    quad = grid.grad_sq(u) + grid.dot(u, u) + grid.dot(v, v)
    return 0.5 * quad - float(np.dot(grid.quad_weights, potential(u, p)))


def static_action(q: RadialField, p: float) -> float:
    """W(q) = 1/2 int {|grad q|^2 + q^2 - 2 F(q)}."""
    return energy(PairState(q, q.grid.zeros()), p)
