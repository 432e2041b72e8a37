"""Spectrum of the linearized operator L_q = -Lap + 1 - f'(q) on radial functions.

L_q is assembled as a symmetric tridiagonal matrix in the similarity frame
s = W^{1/2} u (W = diag(r_j^{N-1}) up to a constant), so the symmetric
tridiagonal eigensolver applies and eigenvectors map back through
u = W^{-1/2} s.  Normalization is in the weighted L^2 product of the grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
import logging
import math
from typing import Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.sparse import diags
from scipy.sparse.linalg import LinearOperator, lobpcg

from .grid import (
    RadialField,
    RadialGrid,
    inner_product,
    nonlinearity_prime,
    nonlinearity_second,
)

logger = logging.getLogger(__name__)

__all__ = [
    "SymTridiag",
    "SpectralData",
    "SpectralError",
    "assemble_operator",
    "assemble_Lq",
    "eigen_decompose",
    "classify",
    "mode_constants",
    "coercivity_check",
    "cancellation_defects",
    "spectral_summary",
]


class SpectralError(RuntimeError):
    pass


@dataclass(frozen=True)
class SymTridiag:
    """Symmetric tridiagonal operator in the s = W^{1/2} u frame."""

    grid: RadialGrid
    diag: np.ndarray
    off: np.ndarray

    @property
    def scale(self) -> np.ndarray:
        """W^{1/2}, mapping u-frame vectors to the symmetric frame."""
        return np.sqrt(self.grid.quad_weights)

    def matvec(self, s: np.ndarray) -> np.ndarray:
        """Product with a vector, or column by column with an (m, k) block."""
        d, e = (self.diag, self.off) if s.ndim == 1 else (self.diag[:, None], self.off[:, None])
        out = d * s
        out[:-1] += e * s[1:]
        out[1:] += e * s[:-1]
        return out

    def apply(self, u: np.ndarray) -> np.ndarray:
        """Action on a u-frame vector."""
        w = self.scale
        return self.matvec(w * u) / w

    def asymmetry(self) -> float:
        """max |A - A^T| of the assembled sparse matrix."""
        S = self.sparse()
        diff = abs(S - S.T)
        return float(diff.max()) if diff.nnz else 0.0

    def solve(self, rhs_u: np.ndarray) -> np.ndarray:
        """Solve A u = rhs in the u frame (banded LU with pivoting)."""
        w = self.scale
        ab = np.zeros((3, self.diag.size))
        ab[0, 1:] = self.off
        ab[1] = self.diag
        ab[2, :-1] = self.off
        return linalg.solve_banded((1, 1), ab, w * rhs_u) / w

    def sparse(self):
        return diags([self.off, self.diag, self.off], [-1, 0, 1], format="csr")


def assemble_operator(grid: RadialGrid, potential_values: np.ndarray) -> SymTridiag:
    """-Lap + V as a symmetric tridiagonal matrix."""
    d, e = grid.laplacian_bands
    return SymTridiag(grid, d + np.asarray(potential_values, dtype=float), e.copy())


def assemble_Lq(q, p: Optional[float] = None) -> SymTridiag:
    """L_q = -Lap + 1 - p|q|^{p-1}.

    ``q`` is a BoundState, or a RadialField together with ``p``.
    """
    profile, p = _profile_and_p(q, p)
    return assemble_operator(profile.grid, 1.0 - nonlinearity_prime(profile.values, p))


def _profile_and_p(q, p):
    if isinstance(q, RadialField):
        if p is None:
            raise TypeError("p is required when passing a bare RadialField")
        return q, p
    return q.profile, q.p if p is None else p


def eigen_decompose(A: SymTridiag, k_lowest: int) -> tuple[np.ndarray, list[RadialField]]:
    """k lowest eigenpairs; eigenvectors returned in the u frame, L^2-normalized."""
    k = min(int(k_lowest), A.diag.size)
    if k < 1:
        raise ValueError("k_lowest must be >= 1")
    try:
        vals, vecs = linalg.eigh_tridiagonal(
            A.diag, A.off, select="i", select_range=(0, k - 1), lapack_driver="stebz"
        )
    except linalg.LinAlgError as exc:
        raise SpectralError(f"tridiagonal eigensolver failed: {exc}") from exc
    w = A.scale
    modes = []
    for i in range(k):
        u = vecs[:, i] / w
        u /= math.sqrt(A.grid.dot(u, u))
        # fix sign: positive on the axis
        if u[0] < 0:
            u = -u
        modes.append(RadialField(A.grid, u))
    return vals, modes


def mode_constants(alpha: float, lambda_sq) -> dict[str, np.ndarray]:
    """zeta^{+-} = alpha +- sqrt(alpha^2 + lambda^2), nu^{+-} = -alpha +- sqrt(...)."""
    lam2 = np.atleast_1d(np.asarray(lambda_sq, dtype=float))
    root = np.sqrt(alpha**2 + lam2)
    return {
        "zeta_plus": alpha + root,
        "zeta_minus": alpha - root,
        "nu_plus": -alpha + root,
        "nu_minus": -alpha - root,
    }


@dataclass
class SpectralData:
    lambda_sq: np.ndarray
    modes: list[RadialField]
    kernel: list[RadialField]
    kernel_values: np.ndarray
    positive_min: float
    alpha: float
    kernel_tol: float
    zeta_plus: np.ndarray = field(init=False)
    zeta_minus: np.ndarray = field(init=False)
    nu_plus: np.ndarray = field(init=False)
    nu_minus: np.ndarray = field(init=False)

    def __post_init__(self):
        c = mode_constants(self.alpha, self.lambda_sq) if len(self.lambda_sq) else {
            k: np.zeros(0) for k in ("zeta_plus", "zeta_minus", "nu_plus", "nu_minus")
        }
        self.zeta_plus = c["zeta_plus"]
        self.zeta_minus = c["zeta_minus"]
        self.nu_plus = c["nu_plus"]
        self.nu_minus = c["nu_minus"]

    @property
    def K(self) -> int:
        return len(self.lambda_sq)

    @property
    def negative(self) -> list[tuple[float, RadialField]]:
        return list(zip(self.lambda_sq.tolist(), self.modes))

    def slowest_stable_rate(self) -> float:
        """Largest real part among the stable linear exponents (a negative number).

        Positive eigenvalues mu >= positive_min of L_q give exponents
        -alpha +- sqrt(alpha^2 - mu); negative ones give nu_k^-.
        """
        mu = self.positive_min
        if mu < self.alpha**2:
            rate = -self.alpha + math.sqrt(self.alpha**2 - mu)
        else:
            rate = -self.alpha
        if self.K:
            rate = max(rate, float(np.max(self.nu_minus)))
        return rate

    def to_json(self) -> dict:
        return {
            "lambda_sq": self.lambda_sq.tolist(),
            "zeta_plus": self.zeta_plus.tolist(),
            "zeta_minus": self.zeta_minus.tolist(),
            "nu_plus": self.nu_plus.tolist(),
            "nu_minus": self.nu_minus.tolist(),
            "kernel_dim": len(self.kernel),
            "positive_min": self.positive_min,
        }


def classify(q, alpha: float, kernel_tol: float = 1e-4, n_eig: int = 12, p=None) -> SpectralData:
    """Split the low spectrum of L_q into negative / kernel / positive parts."""
    if kernel_tol <= 0:
        raise ValueError("kernel_tol must be positive")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    A = assemble_Lq(q, p)
    k = n_eig
    while True:
        vals, modes = eigen_decompose(A, k)
        if vals[-1] > kernel_tol or k >= A.diag.size:
            break
        k *= 2
    neg = vals < -kernel_tol
    ker = np.abs(vals) <= kernel_tol
    pos = vals > kernel_tol
    positive_min = float(vals[pos][0]) if np.any(pos) else math.inf
    return SpectralData(
        lambda_sq=-vals[neg],
        modes=[m for m, f in zip(modes, neg) if f],
        kernel=[m for m, f in zip(modes, ker) if f],
        kernel_values=vals[ker],
        positive_min=positive_min,
        alpha=float(alpha),
        kernel_tol=float(kernel_tol),
    )


def coercivity_check(q, data: Optional[SpectralData] = None, deflate: Optional[Sequence[RadialField]] = None,
                     p=None, tol: float = 1e-9, maxiter: int = 500) -> float:
    """Smallest eigenvalue of L_q on the L^2-orthogonal complement of the deflated modes.

    By default the deflated set is {Y_k} together with the kernel candidates in
    ``data``; pass ``deflate=[]`` to deflate nothing.  Solved by LOBPCG with
    orthogonality constraints and a shifted tridiagonal preconditioner
    (A - lambda_min + 1/2)^{-1}.
    """
    A = assemble_Lq(q, p)
    if deflate is None:
        deflate = [] if data is None else list(data.modes) + list(data.kernel)
    w = A.scale
    n = A.diag.size
    Y = None
    if deflate:
        Y = np.column_stack([w * f.values for f in deflate])
        Y, _ = np.linalg.qr(Y)
    # shift the preconditioner just above the bottom of the spectrum: A + shift >= 1/2
    low = linalg.eigh_tridiagonal(A.diag, A.off, eigvals_only=True, select="i", select_range=(0, 0))[0]
    shift = 0.5 - float(low)
    ab = np.zeros((2, n))
    ab[0, 1:] = A.off
    ab[1] = A.diag + shift
    chol = linalg.cholesky_banded(ab)
    M = LinearOperator((n, n), matvec=lambda x: linalg.cho_solve_banded((chol, False), x), dtype=float)
    op = LinearOperator((n, n), matvec=A.matvec, dtype=float)
    rng = np.random.default_rng(0)
    X = rng.standard_normal((n, 1))
    vals, _ = lobpcg(op, X, M=M, Y=Y, largest=False, tol=tol, maxiter=maxiter)
    return float(vals[0])


def cancellation_defects(q, data: SpectralData, p=None) -> list[float]:
    """<f''(q) psi_1 psi_2, psi_3> over triples of radial kernel candidates.

    The geometric kernel is trivial for radial functions, so this is empty
    unless the grid produced kernel candidates.
    """
    profile, p = _profile_and_p(q, p)
    fpp = nonlinearity_second(profile.values, p)
    out = []
    ker = data.kernel
    for i, a in enumerate(ker):
        for j, b in enumerate(ker[i:], start=i):
            for c in ker[j:]:
                out.append(inner_product(RadialField(profile.grid, fpp * a.values * b.values), c))
    return out


def spectral_summary(data: SpectralData) -> str:
    return json.dumps(data.to_json(), indent=2)
