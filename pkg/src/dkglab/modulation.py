"""Modulation coordinates and Lyapunov functionals along PDE trajectories.

Near a bound state q a phase-space point is written

    (u, u_t) = (q, 0) + (a phi, b phi) + remainder,

where phi is an optional degenerate direction (absent for real radial bound
states, whose radial kernel is empty).  The remainder is projected on the
vectors Z_k^+- = (zeta_k^+- Y_k, Y_k), which diagonalize the linear flow in
the unstable directions:  d/dt a_k^+- = nu_k^+- a_k^+- at linear order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.sparse.linalg import LinearOperator, eigsh

from .fitting import RateFit, rate_fit
from .grid import (
    PairState,
    RadialField,
    energy,
    h1_norm_sq,
    inner_product,
    nonlinearity,
    pair_norm,
    pair_norm_sq,
    potential,
)
from .reduced import lyapunov_values
from .spectrum import SpectralData, assemble_Lq

__all__ = [
    "ModulationCoords",
    "ModulationWindowError",
    "ModulationTrace",
    "ModeResidual",
    "ExpansionReport",
    "CoercivityReport",
    "default_mu",
    "mode_amplitudes",
    "compose",
    "dressing",
    "decompose",
    "potential_remainder",
    "energy_functional",
    "trace",
    "mode_ode_residual",
    "energy_expansion_check",
    "random_perturbation",
    "coercivity_ratios",
    "coercivity_suite",
    "quadratic_sandwich_bounds",
    "rate_fit",
    "RateFit",
    "write_trace_csv",
]


class ModulationWindowError(ValueError):
    def __init__(self, distance: float, window: float):
        super().__init__(f"outside modulation window: distance {distance:.4g} >= {window:.4g}")
        self.distance = distance
        self.window = window


def default_mu(alpha: float) -> float:
    return 0.5 * min(1.0, alpha)


def _check_mu(mu: float, alpha: float) -> None:
    if not 0 < mu < min(1.0, alpha):
        raise ValueError(f"mu must satisfy 0 < mu < min(1, alpha) = {min(1.0, alpha)}, got {mu}")


@dataclass
class ModulationCoords:
    a: float
    b: float
    a_plus: np.ndarray
    a_minus: np.ndarray
    remainder: PairState
    n_total: float
    s_damped: float
    a_unstable: float
    e_func: float
    f_func: float
    r1: float
    r2: float
    mu: float
    distance: float = 0.0

    def row(self, t: float, h1_error: Optional[float] = None) -> dict:
        return {
            "t": t, "a": self.a, "b": self.b, "a_plus": self.a_plus, "a_minus": self.a_minus,
            "n_total": self.n_total, "s_damped": self.s_damped, "a_unstable": self.a_unstable,
            "e_func": self.e_func, "f_func": self.f_func, "r1": self.r1, "r2": self.r2,
            "h1_error": h1_error,
        }


def mode_amplitudes(remainder: PairState, spec: SpectralData) -> tuple[np.ndarray, np.ndarray]:
    """a_k^+- = zeta_k^+- <phi_1, Y_k> + <phi_2, Y_k>."""
    c1 = np.array([inner_product(remainder.position, Y) for Y in spec.modes])
    c2 = np.array([inner_product(remainder.velocity, Y) for Y in spec.modes])
    if not spec.K:
        return np.zeros(0), np.zeros(0)
    return spec.zeta_plus * c1 + c2, spec.zeta_minus * c1 + c2


def compose(q, spec: SpectralData, a_plus=None, a_minus=None, extra: Optional[PairState] = None,
            phi: Optional[RadialField] = None, a: float = 0.0, b: float = 0.0) -> PairState:
    """Build (q,0) + (a phi, b phi) + mode part + extra.

    The mode part lies in span{(Y_k,0), (0,Y_k)} and has the requested
    a_k^+-; ``extra`` should be orthogonal to every Y_k (and to phi).
    """
    profile = getattr(q, "profile", q)
    grid = profile.grid
    K = spec.K
    ap = np.zeros(K) if a_plus is None else np.asarray(a_plus, dtype=float)
    am = np.zeros(K) if a_minus is None else np.asarray(a_minus, dtype=float)
    u = profile.values.copy()
    v = np.zeros(grid.m)
    for k, Y in enumerate(spec.modes):
        x = (ap[k] - am[k]) / (spec.zeta_plus[k] - spec.zeta_minus[k])
        y = ap[k] - spec.zeta_plus[k] * x
        u += x * Y.values
        v += y * Y.values
    if phi is not None:
        u += a * phi.values
        v += b * phi.values
    if extra is not None:
        u += extra.position.values
        v += extra.velocity.values
    return PairState(RadialField(grid, u), RadialField(grid, v))


def dressing(spec: SpectralData, frak) -> PairState:
    """sum_k frak_k/((zeta_k^+)^2 + 1) (zeta_k^+ Y_k, Y_k); its a_k^+ equals frak_k."""
    grid = spec.modes[0].grid
    u = np.zeros(grid.m)
    v = np.zeros(grid.m)
    for k, Y in enumerate(spec.modes):
        z = spec.zeta_plus[k]
        c = float(frak[k]) / (z * z + 1.0)
        u += c * z * Y.values
        v += c * Y.values
    return PairState(RadialField(grid, u), RadialField(grid, v))


def potential_remainder(Q: np.ndarray, phi: np.ndarray, p: float) -> np.ndarray:
    """F(Q + phi) - F(Q) - f(Q) phi, evaluated without cancellation for |phi| << |Q|."""
    u = Q + phi
    out = potential(u, p) - potential(Q, p) - nonlinearity(Q, p) * phi
    same = (Q * u > 0) & (np.abs(phi) < 0.5 * np.abs(Q))
    if np.any(same):
        Qs = Q[same]
        t = phi[same] / Qs
        # (1+t)^{p+1} - 1 - (p+1) t, with expm1 handling the leading cancellation
        g = np.expm1((p + 1.0) * np.log1p(t)) - (p + 1.0) * t
        small = np.abs(t) < 1e-3
        if np.any(small):
            ts = t[small]
            c2 = (p + 1.0) * p / 2.0
            c3 = c2 * (p - 1.0) / 3.0
            c4 = c3 * (p - 2.0) / 4.0
            g[small] = ts * ts * (c2 + ts * (c3 + ts * c4))
        out[same] = np.abs(Qs) ** (p + 1.0) / (p + 1.0) * g
    return out


def energy_functional(remainder: PairState, background: RadialField, mu: float, alpha: float, p: float) -> float:
    """int {|grad phi_1|^2 + (1 - rho mu) phi_1^2 + (phi_2 + mu phi_1)^2}
    - 2 int {F(Q + phi_1) - F(Q) - f(Q) phi_1},  rho = 2 alpha - mu.

    ``background`` is Q = q + a phi (just q without a degenerate direction).
    """
    _check_mu(mu, alpha)
    grid = background.grid
    f1 = remainder.position.values
    f2 = remainder.velocity.values
    rho = 2.0 * alpha - mu
    quad = grid.grad_sq(f1) + (1.0 - rho * mu) * grid.dot(f1, f1) + grid.dot(f2 + mu * f1, f2 + mu * f1)
    rem = float(np.dot(grid.quad_weights, potential_remainder(background.values, f1, p)))
    return quad - 2.0 * rem


def decompose(s: PairState, q, spec: SpectralData, phi: Optional[RadialField] = None,
              mu: Optional[float] = None, window: float = 0.5, p: Optional[float] = None) -> ModulationCoords:
    """Modulation coordinates of s relative to the bound state q."""
    profile = getattr(q, "profile", q)
    p = getattr(q, "p", None) if p is None else p
    if p is None:
        raise TypeError("p is required when q is a bare RadialField")
    alpha = spec.alpha
    mu = default_mu(alpha) if mu is None else mu
    grid = profile.grid
    d1 = s.position.values - profile.values
    d2 = s.velocity.values.copy()
    dist = math.sqrt(grid.grad_sq(d1) + grid.dot(d1, d1) + grid.dot(d2, d2))
    if not dist < window:
        raise ModulationWindowError(dist, window)
    a = b = 0.0
    Q = profile
    if phi is not None:
        nrm = grid.dot(phi.values, phi.values)
        a = grid.dot(d1, phi.values) / nrm
        b = grid.dot(d2, phi.values) / nrm
        d1 = d1 - a * phi.values
        d2 = d2 - b * phi.values
        Q = profile + a * phi
    rem = PairState(RadialField(grid, d1), RadialField(grid, d2))
    ap, am = mode_amplitudes(rem, spec)
    lv = lyapunov_values(a, b, alpha, am, ap)
    e = energy_functional(rem, Q, mu, alpha, p)
    n = pair_norm(rem) + abs(b)
    return ModulationCoords(
        a=a, b=b, a_plus=ap, a_minus=am, remainder=rem, n_total=n,
        s_damped=float(lv["s_damped"]), a_unstable=float(lv["a_unstable"]),
        e_func=e, f_func=e + float(lv["s_damped"]) / mu,
        r1=float(lv["r1"]), r2=float(lv["r2"]), mu=mu, distance=dist,
    )


# --- traces ---------------------------------------------------------------------------------


@dataclass
class ModulationTrace:
    times: np.ndarray
    coords: list
    h1_error: Optional[np.ndarray] = None

    def series(self, name: str) -> np.ndarray:
        return np.array([getattr(c, name) for c in self.coords])

    def rows(self):
        for i, (t, c) in enumerate(zip(self.times, self.coords)):
            yield c.row(t, None if self.h1_error is None else self.h1_error[i])


def trace(tr, q, spec: SpectralData, phi=None, mu=None, window: float = 0.5) -> ModulationTrace:
    profile = getattr(q, "profile", q)
    coords = [decompose(s, q, spec, phi=phi, mu=mu, window=window) for s in tr.states]
    err = np.array([math.sqrt(h1_norm_sq(s.position - profile)) for s in tr.states])
    return ModulationTrace(np.asarray(tr.times), coords, err)


def write_trace_csv(path, rows, K: int) -> Path:
    """ModulationTrace schema; None entries are written as empty cells."""
    path = Path(path)
    cols = (["t", "a", "b"] + [f"a_plus_{k + 1}" for k in range(K)] + [f"a_minus_{k + 1}" for k in range(K)]
            + ["n_total", "s_damped", "a_unstable", "e_func", "f_func", "r1", "r2", "h1_error"])

    def fmt(x):
        return "" if x is None else f"{float(x):.17g}"

    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        for r in rows:
            line = [fmt(r["t"]), fmt(r["a"]), fmt(r["b"])]
            line += [fmt(x) for x in r["a_plus"]] + [fmt(x) for x in r["a_minus"]]
            line += [fmt(r[c]) for c in ("n_total", "s_damped", "a_unstable", "e_func", "f_func", "r1", "r2",
                                         "h1_error")]
            wr.writerow(line)
    return path


# --- mode equations -------------------------------------------------------------------------


@dataclass
class ModeResidual:
    times: np.ndarray
    amp_plus: np.ndarray
    amp_minus: np.ndarray
    res_plus: np.ndarray
    res_minus: np.ndarray
    envelope: np.ndarray  # N^2 + a^2 at the interior samples
    C: float

    def relative(self, sign: str = "+", k: int = 0) -> float:
        """max |residual| / max |amplitude| over the interior samples."""
        res = self.res_plus if sign == "+" else self.res_minus
        amp = self.amp_plus if sign == "+" else self.amp_minus
        top = float(np.max(np.abs(amp[k])))
        return float(np.max(np.abs(res[k]))) / top if top > 0 else 0.0


def mode_ode_residual(tr, q, spec: SpectralData, phi=None, window: float = 0.5) -> ModeResidual:
    """Central differences of a_k^+- minus nu_k^+- a_k^+-, with the envelope C (N^2 + a^2)."""
    t = np.asarray(tr.times, dtype=float)
    if t.size < 3:
        raise ValueError("need at least 3 snapshots")
    h = np.diff(t)
    if np.max(np.abs(h - h[0])) > 1e-9 * max(1.0, abs(h[0])):
        raise ValueError("mode_ode_residual needs uniformly sampled snapshots")
    coords = [decompose(s, q, spec, phi=phi, window=window) for s in tr.states]
    ap = np.array([c.a_plus for c in coords]).T
    am = np.array([c.a_minus for c in coords]).T
    nn = np.array([c.n_total for c in coords])
    aa = np.array([c.a for c in coords])
    dt = h[0]
    dap = (ap[:, 2:] - ap[:, :-2]) / (2 * dt)
    dam = (am[:, 2:] - am[:, :-2]) / (2 * dt)
    rp = dap - spec.nu_plus[:, None] * ap[:, 1:-1]
    rm = dam - spec.nu_minus[:, None] * am[:, 1:-1]
    env = nn[1:-1] ** 2 + aa[1:-1] ** 2
    worst = np.max(np.abs(np.vstack([rp, rm])), axis=0) if spec.K else np.zeros_like(env)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(env > 0, worst / env, 0.0)
    return ModeResidual(t[1:-1], ap[:, 1:-1], am[:, 1:-1], rp, rm, env, float(np.max(ratio)) if ratio.size else 0.0)


# --- energy expansion -----------------------------------------------------------------------


@dataclass
class ExpansionReport:
    eps: np.ndarray
    delta_energy: np.ndarray
    quadratic_ratios: np.ndarray
    quadratic_extrapolated: float
    quadratic_predicted: float
    cubic_fit: float

    def to_json(self) -> dict:
        return {
            "eps": self.eps.tolist(),
            "delta_energy": self.delta_energy.tolist(),
            "quadratic_extrapolated": self.quadratic_extrapolated,
            "quadratic_predicted": self.quadratic_predicted,
            "cubic_fit": self.cubic_fit,
        }


def energy_expansion_check(q, psi: Optional[RadialField] = None, chi: Optional[RadialField] = None,
                           eps: Sequence[float] = (4e-2, 2e-2, 1e-2, 5e-3)) -> ExpansionReport:
    """Expand E(q + eps psi, eps chi) - E(q, 0) in eps.

    The quadratic coefficient is estimated from Delta E / eps^2 by Richardson
    extrapolation (first-order error in eps) and compared with
    1/2 (<L_q psi, psi> + ||chi||^2).  The cubic coefficient comes from a
    least-squares fit of Delta E = c2 eps^2 + c3 eps^3 + c4 eps^4.
    """
    profile = q.profile
    grid = profile.grid
    p = q.p
    psi = grid.zeros() if psi is None else psi
    chi = grid.zeros() if chi is None else chi
    e0 = energy(PairState(profile, grid.zeros()), p)
    eps = np.asarray(eps, dtype=float)
    dE = np.array([energy(PairState(profile + e * psi, e * chi), p) - e0 for e in eps])
    ratios = dE / eps**2
    L = assemble_Lq(q)
    pred = 0.5 * (grid.dot(L.apply(psi.values), psi.values) + grid.dot(chi.values, chi.values))
    if eps.size >= 2:
        # successive Richardson steps, assuming eps halves between entries
        rich = ratios.copy()
        for level in range(1, min(3, eps.size)):
            fac = 2.0**level
            rich = (fac * rich[1:] - rich[:-1]) / (fac - 1.0)
        extrap = float(rich[-1])
    else:
        extrap = float(ratios[0])
    if eps.size >= 3:
        A = np.vstack([eps**2, eps**3, eps**4]).T
        coef, *_ = np.linalg.lstsq(A, dE, rcond=None)
        cubic = float(coef[1])
    else:
        cubic = math.nan
    return ExpansionReport(eps, dE, ratios, extrap, float(pred), cubic)


# --- coercivity sandwich ----------------------------------------------------------------------


def random_perturbation(grid, spec: SpectralData, rng: np.random.Generator, amplitude: float,
                        n_bumps: int = 4) -> PairState:
    """Smooth random remainder: Gaussian bumps plus mode components, scaled to norm ``amplitude``."""
    r = grid.r

    def bumps():
        out = np.zeros(grid.m)
        for _ in range(n_bumps):
            c = rng.uniform(0.0, 8.0)
            w = rng.uniform(0.3, 3.0)
            out += rng.standard_normal() * np.exp(-((r - c) / w) ** 2)
        return out

    u = bumps()
    v = bumps()
    for Y in spec.modes:
        u += rng.standard_normal() * Y.values
        v += rng.standard_normal() * Y.values
    s = PairState(RadialField(grid, u), RadialField(grid, v))
    return s * (amplitude / pair_norm(s))


def coercivity_ratios(q, spec: SpectralData, remainders: Sequence[PairState], mu: Optional[float] = None):
    """(F + A/mu) / N^2 for each remainder around (q, 0)."""
    alpha = spec.alpha
    mu = default_mu(alpha) if mu is None else mu
    out = []
    for rem in remainders:
        s = PairState(q.profile + rem.position, rem.velocity)
        c = decompose(s, q, spec, mu=mu, window=math.inf)
        out.append((c.f_func + c.a_unstable / mu) / c.n_total**2)
    return np.array(out)


def quadratic_sandwich_bounds(q, spec: SpectralData, mu: Optional[float] = None, tol: float = 1e-10) -> tuple:
    """Extreme values of (F + A/mu) / N^2 over all small remainders, to quadratic order.

    With b = 0 the ratio tends, as the amplitude goes to zero, to the
    Rayleigh quotient of the quadratic part Q of F + A/mu against the energy
    Gram form G = ||.||^2.  Both are assembled in the symmetric frame
    s = W^{1/2} phi:

        G = diag(S + I, I),
        Q = [[S + (1 - rho mu + mu^2) I - f'(q), mu I], [mu I, I]]
            + (1/mu) sum_k sum_{+-} c_k^{+-} (c_k^{+-})^T,  c = (zeta y_k, y_k),

    with S the symmetrized -Lap and y_k = W^{1/2} Y_k.  The extreme
    eigenvalues of U^{-T} Q U^{-1} (S + I = U^T U) come from Lanczos.
    Returns (lambda_min, lambda_max).
    """
    alpha = spec.alpha
    mu = default_mu(alpha) if mu is None else mu
    _check_mu(mu, alpha)
    profile = q.profile
    grid = profile.grid
    m = grid.m
    d, e = grid.laplacian_bands
    rho = 2.0 * alpha - mu
    w = np.sqrt(grid.quad_weights)
    ab = np.zeros((2, m))
    ab[0, 1:] = e
    ab[1] = d + 1.0
    chol = linalg.cholesky_banded(ab)
    lower = np.zeros((2, m))  # U^T in lower banded storage
    lower[0] = chol[1]
    lower[1, :-1] = chol[0, 1:]
    fp = q.p * np.abs(profile.values) ** (q.p - 1.0)
    d11 = d + (1.0 - rho * mu + mu * mu) - fp
    vecs = []
    for k, Y in enumerate(spec.modes):
        y = w * Y.values
        for z in (spec.zeta_plus[k], spec.zeta_minus[k]):
            vecs.append(np.concatenate([z * y, y]))
    C = np.column_stack(vecs) if vecs else np.zeros((2 * m, 0))

    def Qmul(z):
        x1, x2 = z[:m], z[m:]
        t = d11 * x1
        t[:-1] += e * x1[1:]
        t[1:] += e * x1[:-1]
        out = np.concatenate([t + mu * x2, mu * x1 + x2])
        if C.shape[1]:
            out += C @ (C.T @ z) / mu
        return out

    def op(z):
        z = np.asarray(z).ravel()
        y1 = linalg.solve_banded((0, 1), chol, z[:m])
        v = Qmul(np.concatenate([y1, z[m:]]))
        return np.concatenate([linalg.solve_banded((1, 0), lower, v[:m]), v[m:]])

    A = LinearOperator((2 * m, 2 * m), matvec=op, dtype=float)
    v0 = np.ones(2 * m)  # fixed start vector: ARPACK's default is random
    lo = eigsh(A, k=1, which="SA", tol=tol, v0=v0, return_eigenvectors=False)[0]
    hi = eigsh(A, k=1, which="LA", tol=tol, v0=v0, return_eigenvectors=False)[0]
    return float(lo), float(hi)


@dataclass
class CoercivityReport:
    C0: float
    ratios: np.ndarray
    quadratic_bounds: tuple
    mu: float
    amplitude_max: float
    upper_bound_ok: bool

    @property
    def lower_ok(self) -> bool:
        return bool(np.all(self.ratios >= 1.0 / self.C0))

    @property
    def upper_ok(self) -> bool:
        return bool(np.all(self.ratios <= self.C0))

    @property
    def passed(self) -> bool:
        return self.lower_ok and self.upper_ok

    @property
    def tight_constant(self) -> float:
        """Smallest C0 that would certify the sandwich on this suite."""
        return float(max(np.max(self.ratios), 1.0 / np.min(self.ratios)))

    def to_json(self) -> dict:
        return {
            "C0": self.C0,
            "tight_constant": self.tight_constant,
            "quadratic_bounds": list(self.quadratic_bounds),
            "ratio_min": float(np.min(self.ratios)),
            "ratio_max": float(np.max(self.ratios)),
            "samples": int(self.ratios.size),
            "amplitude_max": self.amplitude_max,
            "mu": self.mu,
            "passed": self.passed,
            "energy_upper_bound_ok": self.upper_bound_ok,
        }


def coercivity_suite(q, spec: SpectralData, rng: np.random.Generator, n_samples: int = 1000,
                     amplitude: float = 1e-2, mu: Optional[float] = None, margin: float = 1.25) -> CoercivityReport:
    """Certify C0^{-1} N^2 <= F + A/mu <= C0 N^2 on random remainders.

    C0 is fixed before sampling: ``margin`` times the quadratic-order
    constant max(lambda_max, 1/lambda_min) of quadratic_sandwich_bounds; the
    margin absorbs the cubic terms at the sampled amplitudes.  Norms are
    drawn log-uniformly in [amplitude/100, amplitude].  The energy upper
    bound E <= ||phi||^2 / mu is checked on every sample too.
    """
    alpha = spec.alpha
    mu = default_mu(alpha) if mu is None else mu
    grid = q.profile.grid
    lo, hi = quadratic_sandwich_bounds(q, spec, mu)
    C0 = margin * max(hi, 1.0 / lo)
    amps = amplitude * 10.0 ** rng.uniform(-2.0, 0.0, size=n_samples)
    tests = [random_perturbation(grid, spec, rng, a) for a in amps]
    ratios = coercivity_ratios(q, spec, tests, mu)
    upper = all(
        energy_functional(rem, q.profile, mu, alpha, q.p) <= pair_norm_sq(rem) / mu for rem in tests
    )
    return CoercivityReport(C0, ratios, (lo, hi), mu, amplitude, upper)
