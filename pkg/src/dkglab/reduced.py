"""Leading-order modulation ODEs near a degenerate bound state.

State (a, b, ell, beta, a_minus, a_plus) evolves by

    a' = b,  b' = -2 alpha b - 2 alpha a^2,
    ell' = -2 alpha ell,  beta' = -2 alpha beta,
    a_k^-' = nu_k^- a_k^-,  a_k^+' = nu_k^+ a_k^+,

plus optional polynomial couplings whose size respects the error envelopes
of the modulation estimates.  The module also provides the Lyapunov
quantities R1, R2, S, A and the shooting construction over the unstable
amplitudes that selects a trajectory decaying like 1/t.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
import logging
import math
import re
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from .fitting import rate_fit

logger = logging.getLogger(__name__)

__all__ = [
    "ReducedState",
    "ReducedParams",
    "Coupling",
    "EnvelopeError",
    "UnstableEscape",
    "TransversalityError",
    "ReducedTrajectory",
    "ShootResult",
    "rhs",
    "lyapunov",
    "lyapunov_values",
    "n_total",
    "integrate",
    "lyapunov_identity_defects",
    "bootstrap_bounds",
    "bootstrap_margins",
    "theorem3_shoot",
]


class EnvelopeError(ValueError):
    """A coupling term is not bounded by the declared error envelope."""


class UnstableEscape(RuntimeError):
    def __init__(self, time: float, sign: int, variable: str):
        super().__init__(f"unstable escape at t={time:.6g}: {variable} -> {'+' if sign > 0 else '-'}inf")
        self.time = time
        self.sign = sign
        self.variable = variable


class TransversalityError(RuntimeError):
    """Both ends of a shooting bracket exit with the same sign."""


# --- state and parameters --------------------------------------------------------


_VAR = re.compile(r"^(a|b|ell|beta|a_minus|a_plus)(?:\[(\d+)\])?$")


@dataclass
class ReducedState:
    a: float = 0.0
    b: float = 0.0
    ell: np.ndarray = field(default_factory=lambda: np.zeros(0))
    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    a_minus: np.ndarray = field(default_factory=lambda: np.zeros(0))
    a_plus: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.a = float(self.a)
        self.b = float(self.b)
        for name in ("ell", "beta", "a_minus", "a_plus"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if not np.all(np.isfinite(self.to_vector())):
            raise ValueError("reduced state has non-finite entries")

    def to_vector(self) -> np.ndarray:
        return np.concatenate(([self.a, self.b], self.ell, self.beta, self.a_minus, self.a_plus))

    @classmethod
    def from_vector(cls, y, params: "ReducedParams") -> "ReducedState":
        sl = params.slices
        y = np.asarray(y, dtype=float)
        return cls(y[0], y[1], y[sl["ell"]], y[sl["beta"]], y[sl["a_minus"]], y[sl["a_plus"]])

    @classmethod
    def zeros(cls, params: "ReducedParams") -> "ReducedState":
        return cls.from_vector(np.zeros(params.size), params)


@dataclass(frozen=True)
class Coupling:
    """Perturbation term ``coefficient * prod(var**power)`` added to ``target``'s derivative.

    Variables are named ``a``, ``b``, ``ell[i]``, ``beta[i]``, ``a_minus[k]``,
    ``a_plus[k]`` (indices from 0).
    """

    target: str
    coefficient: float
    powers: dict

    def to_dict(self) -> dict:
        return {"target": self.target, "coefficient": self.coefficient, "powers": dict(self.powers)}


def _parse_var(name: str) -> tuple[str, int]:
    m = _VAR.match(name.strip())
    if not m:
        raise EnvelopeError(f"unknown reduced variable {name!r}")
    return m.group(1), int(m.group(2) or 0)


@dataclass(frozen=True)
class ReducedParams:
    alpha: float
    nu_plus: tuple
    nu_minus: tuple
    couplings: tuple = ()
    p_bar: float = 3.0
    n_ell: int = 0
    n_beta: int = 0
    envelope_constant: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "nu_plus", tuple(float(x) for x in np.atleast_1d(self.nu_plus)))
        object.__setattr__(self, "nu_minus", tuple(float(x) for x in np.atleast_1d(self.nu_minus)))
        object.__setattr__(self, "couplings", tuple(
            c if isinstance(c, Coupling) else Coupling(**c) for c in self.couplings))
        errors = []
        if not self.alpha > 0:
            errors.append(f"alpha must be > 0, got {self.alpha}")
        if len(self.nu_plus) != len(self.nu_minus):
            errors.append("nu_plus and nu_minus must have the same length")
        if any(not x > 0 for x in self.nu_plus):
            errors.append("every nu_plus must be > 0")
        if any(not x < 0 for x in self.nu_minus):
            errors.append("every nu_minus must be < 0")
        if not self.p_bar > 2:
            errors.append(f"p_bar must be > 2, got {self.p_bar}")
        if self.n_ell < 0 or self.n_beta < 0:
            errors.append("n_ell, n_beta must be >= 0")
        if errors:
            raise ValueError("; ".join(errors))
        for c in self.couplings:
            self._check_coupling(c)

    @classmethod
    def from_lambda(cls, alpha: float, lambda_sq, **kw) -> "ReducedParams":
        lam2 = np.atleast_1d(np.asarray(lambda_sq, dtype=float))
        root = np.sqrt(alpha**2 + lam2)
        return cls(alpha, tuple(-alpha + root), tuple(-alpha - root), **kw)

    @property
    def K(self) -> int:
        return len(self.nu_plus)

    @property
    def size(self) -> int:
        return 2 + self.n_ell + self.n_beta + 2 * self.K

    @property
    def slices(self) -> dict:
        i = 2
        out = {}
        for name, n in (("ell", self.n_ell), ("beta", self.n_beta), ("a_minus", self.K), ("a_plus", self.K)):
            out[name] = slice(i, i + n)
            i += n
        return out

    def index(self, name: str) -> int:
        base, k = _parse_var(name)
        if base == "a":
            return 0
        if base == "b":
            return 1
        sl = self.slices[base]
        if not 0 <= k < sl.stop - sl.start:
            raise EnvelopeError(f"index out of range in {name!r}")
        return sl.start + k

    def _check_coupling(self, c: Coupling) -> None:
        """Reject terms that are not O(envelope) for the target's modulation estimate.

        a:            N^2 + |a| N
        b, ell, beta: N^2 + |a| N + |a|^p_bar
        a_k^+-:       N^2 + a^2
        Here N collects b, ell, beta and the mode amplitudes.
        """
        if not math.isfinite(c.coefficient) or abs(c.coefficient) > self.envelope_constant:
            raise EnvelopeError(
                f"coupling coefficient {c.coefficient} exceeds envelope constant {self.envelope_constant}")
        tgt, _ = _parse_var(c.target)
        self.index(c.target)
        deg_a = 0
        deg_n = 0
        for name, pw in c.powers.items():
            self.index(name)
            if int(pw) != pw or pw < 0:
                raise EnvelopeError(f"powers must be nonnegative integers, got {name}^{pw}")
            if _parse_var(name)[0] == "a":
                deg_a += int(pw)
            else:
                deg_n += int(pw)
        if tgt in ("a_minus", "a_plus"):
            ok = deg_a + deg_n >= 2
            env = "N^2 + a^2"
        else:
            ok = deg_n >= 2 or (deg_n >= 1 and deg_a >= 1)
            env = "N^2 + |a|N"
            if tgt != "a":
                ok = ok or (deg_n == 0 and deg_a >= self.p_bar)
                env += " + |a|^p_bar"
        if not ok:
            raise EnvelopeError(f"term {c.powers} in d/dt {c.target} is not bounded by {env}")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "nu_plus": list(self.nu_plus),
            "nu_minus": list(self.nu_minus),
            "couplings": [c.to_dict() for c in self.couplings],
            "p_bar": self.p_bar,
            "n_ell": self.n_ell,
            "n_beta": self.n_beta,
        }


class _Field:
    """Vector field on raw state vectors; accepts shape (n,) or (n, M) for stacked runs."""

    def __init__(self, params: ReducedParams):
        self.params = params
        sl = params.slices
        self.damped = np.r_[sl["ell"], sl["beta"]]
        self.minus = sl["a_minus"]
        self.plus = sl["a_plus"]
        self.nu_m = np.asarray(params.nu_minus)
        self.nu_p = np.asarray(params.nu_plus)
        self.terms = [
            (params.index(c.target), c.coefficient, [(params.index(v), int(pw)) for v, pw in c.powers.items()])
            for c in params.couplings
        ]

    def __call__(self, t, y):
        al = self.params.alpha
        dy = np.empty_like(y)
        a = y[0]
        b = y[1]
        dy[0] = b
        dy[1] = -2.0 * al * b - 2.0 * al * a * a
        dy[self.damped] = -2.0 * al * y[self.damped]
        nm = self.nu_m if y.ndim == 1 else self.nu_m[:, None]
        npl = self.nu_p if y.ndim == 1 else self.nu_p[:, None]
        dy[self.minus] = nm * y[self.minus]
        dy[self.plus] = npl * y[self.plus]
        for tgt, coef, mono in self.terms:
            term = coef
            for i, pw in mono:
                term = term * y[i] ** pw
            dy[tgt] += term
        return dy


def rhs(s: ReducedState, params: ReducedParams) -> ReducedState:
    """Time derivative of the reduced state."""
    return ReducedState.from_vector(_Field(params)(0.0, s.to_vector()), params)


# --- Lyapunov quantities -----------------------------------------------------------


def lyapunov_values(a, b, alpha: float, a_minus=(), a_plus=(), ell=(), beta=()) -> dict:
    """R1, R2, S, A from raw amplitudes (shared with the PDE analyzer).

    a and b may be arrays; the vector blocks are then 2-D with time last.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)

    def sq(x):
        x = np.asarray(x, dtype=float)
        if x.size == 0:
            return np.zeros_like(a)
        return np.sum(x * x, axis=0)

    return {
        "r1": a + b / (2.0 * alpha),
        "r2": (2.0 * alpha / 3.0) * a**3 + a * b**2 / (2.0 * alpha) + a**2 * b,
        "s_damped": sq(ell) + sq(beta) + sq(a_minus) + b**2,
        "a_unstable": sq(a_plus),
    }


def lyapunov(s: ReducedState, params: ReducedParams) -> dict:
    out = lyapunov_values(s.a, s.b, params.alpha, s.a_minus, s.a_plus, s.ell, s.beta)
    return {k: float(v) for k, v in out.items()}


def _split(Y: np.ndarray, params: ReducedParams):
    sl = params.slices
    return Y[0], Y[1], Y[sl["ell"]], Y[sl["beta"]], Y[sl["a_minus"]], Y[sl["a_plus"]]


def n_total(Y: np.ndarray, params: ReducedParams) -> np.ndarray:
    """N = |ell| + |beta| + |b| + (sum of squared mode amplitudes)^(1/2).

    The mode amplitudes stand in for the remainder norm, which the reduced
    model does not carry.
    """
    a, b, ell, beta, am, ap = _split(Y, params)

    def norm(x):
        return np.sqrt(np.sum(x * x, axis=0)) if x.shape[0] else np.zeros_like(b)

    return norm(ell) + norm(beta) + np.abs(b) + np.sqrt(np.sum(am * am, axis=0) + np.sum(ap * ap, axis=0))


# --- integration ---------------------------------------------------------------------


@dataclass
class ReducedTrajectory:
    t: np.ndarray
    y: np.ndarray  # shape (size, len(t))
    params: ReducedParams
    escaped: bool = False
    escape_time: Optional[float] = None
    escape_sign: int = 0
    escape_variable: Optional[str] = None
    sol: object = None

    @property
    def a(self):
        return self.y[0]

    @property
    def b(self):
        return self.y[1]

    def block(self, name: str) -> np.ndarray:
        return self.y[self.params.slices[name]]

    def state(self, i: int) -> ReducedState:
        return ReducedState.from_vector(self.y[:, i], self.params)

    def lyapunov(self) -> dict:
        a, b, ell, beta, am, ap = _split(self.y, self.params)
        return lyapunov_values(a, b, self.params.alpha, am, ap, ell, beta)

    def n_total(self) -> np.ndarray:
        return n_total(self.y, self.params)

    def rows(self):
        """Rows of the modulation-trace schema; PDE-only columns are None."""
        lv = self.lyapunov()
        nt = self.n_total()
        ap = self.block("a_plus")
        am = self.block("a_minus")
        for i, t in enumerate(self.t):
            yield {
                "t": t, "a": self.a[i], "b": self.b[i],
                "a_plus": ap[:, i], "a_minus": am[:, i],
                "n_total": nt[i], "s_damped": lv["s_damped"][i], "a_unstable": lv["a_unstable"][i],
                "e_func": None, "f_func": None, "r1": lv["r1"][i], "r2": lv["r2"][i], "h1_error": None,
            }


def _variable_name(params: ReducedParams, i: int) -> str:
    if i == 0:
        return "a"
    if i == 1:
        return "b"
    for name, sl in params.slices.items():
        if sl.start <= i < sl.stop:
            return f"{name}[{i - sl.start}]"
    return f"y[{i}]"


def integrate(
    s0: ReducedState,
    params: ReducedParams,
    t_end: float,
    tol: float = 1e-10,
    t_eval: Optional[Sequence[float]] = None,
    escape_bound: float = 1e6,
    raise_on_escape: bool = True,
    atol: Optional[float] = None,
    dense: bool = False,
) -> ReducedTrajectory:
    """Adaptive DOP853 integration with local error control at ``tol``.

    Escape (any component beyond ``escape_bound`` or step-size collapse)
    raises UnstableEscape unless ``raise_on_escape`` is False, in which case
    the partial trajectory is returned with the escape recorded.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    y0 = s0.to_vector()
    if y0.size != params.size:
        raise ValueError(f"state has size {y0.size}, params expect {params.size}")
    f = _Field(params)

    def big(t, y):
        return escape_bound - np.max(np.abs(y))

    big.terminal = True
    atol = tol * 1e-6 if atol is None else atol
    sol = solve_ivp(f, (0.0, t_end), y0, method="DOP853", rtol=tol, atol=atol,
                    t_eval=t_eval, events=big, dense_output=dense)
    tr = ReducedTrajectory(sol.t, sol.y, params, sol=sol.sol if dense else None)
    hit = sol.status == 1 and len(sol.t_events[0]) > 0
    if sol.status == -1 or hit:
        y_last = sol.y_events[0][0] if hit else sol.y[:, -1]
        t_last = float(sol.t_events[0][0]) if hit else float(sol.t[-1] if sol.t.size else 0.0)
        i = int(np.argmax(np.abs(y_last)))
        tr.escaped = True
        tr.escape_time = t_last
        tr.escape_sign = int(np.sign(y_last[i]))
        tr.escape_variable = _variable_name(params, i)
        if raise_on_escape:
            raise UnstableEscape(t_last, tr.escape_sign, tr.escape_variable)
    return tr


def lyapunov_identity_defects(tr: ReducedTrajectory, n_nodes: int = 8) -> dict:
    """Interval-averaged defects of the R1 and R2 identities on the unperturbed flow.

    On each sampling interval [t_i, t_{i+1}] of length h this evaluates

        (R1(t_{i+1}) - R1(t_i))/h + (1/h) int a^2 dt
        (R2(t_{i+1}) - R2(t_i))/h + (1/h) int (2 alpha a^4 - b^3/(2 alpha) + 2 a^3 b) dt

    with Gauss-Legendre quadrature on the dense output.  Differencing the
    samples would amplify interpolation noise by 1/h; the integrated form
    measures the identity at the integrator's own accuracy.
    """
    if tr.sol is None:
        raise ValueError("trajectory needs dense output (integrate(..., dense=True))")
    alpha = tr.params.alpha
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    t0, t1 = tr.t[:-1], tr.t[1:]
    h = t1 - t0
    tq = (0.5 * (t1 - t0)[:, None] * x[None, :] + 0.5 * (t1 + t0)[:, None]).ravel()
    yq = tr.sol(tq)
    aq = yq[0].reshape(h.size, n_nodes)
    bq = yq[1].reshape(h.size, n_nodes)
    mean = lambda g: 0.5 * (g @ w)
    lv = tr.lyapunov()
    d1 = np.diff(lv["r1"]) / h + mean(aq**2)
    d2 = np.diff(lv["r2"]) / h + mean(2 * alpha * aq**4 - bq**3 / (2 * alpha) + 2 * aq**3 * bq)
    return {"r1": float(np.max(np.abs(d1))), "r2": float(np.max(np.abs(d2)))}


# --- bootstrap and shooting ---------------------------------------------------------


def bootstrap_bounds(t, delta: float, p_bar: float) -> dict:
    """Right-hand sides of the bootstrap bounds at tau = t + 1/delta."""
    tau = np.asarray(t, dtype=float) + 1.0 / delta
    return {
        "a": tau ** (-8.0 / 7.0) + tau ** (-p_bar / 2.0),
        "n_total": tau ** (-5.0 / 4.0),
        "a_unstable": tau ** (-3.0),
    }


def bootstrap_margins(t, Y, params: ReducedParams, delta: float) -> dict:
    """Pointwise relative margins 1 - lhs/rhs of each bootstrap bound."""
    t = np.asarray(t, dtype=float)
    bounds = bootstrap_bounds(t, delta, params.p_bar)
    tau = t + 1.0 / delta
    ap = Y[params.slices["a_plus"]]
    lhs = {
        "a": np.abs(Y[0] - 1.0 / tau),
        "n_total": n_total(Y, params),
        "a_unstable": np.sum(ap * ap, axis=0),
    }
    return {k: 1.0 - lhs[k] / bounds[k] for k in bounds}


@dataclass
class ShootResult:
    delta: float
    a_plus_initial: np.ndarray
    trajectory: ReducedTrajectory
    survival_time: float
    t_max: float
    bootstrap_margins: dict
    restarts: list
    fitted_rate: Optional[float]
    bracket: list

    @property
    def survived(self) -> bool:
        return self.survival_time >= self.t_max

    def to_json(self) -> dict:
        return {
            "delta": self.delta,
            "a_plus_initial": [float(x) for x in self.a_plus_initial],
            "survival_time": self.survival_time,
            "t_max": self.t_max,
            "bootstrap_margins": {k: float(v) for k, v in self.bootstrap_margins.items()},
            "fitted_rate": self.fitted_rate,
            "restarts": len(self.restarts),
            "max_restart_jump": max((r["relative_jump"] for r in self.restarts), default=0.0),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


class _Shooter:
    """Integrates from a given state until the unstable bootstrap bound is hit."""

    def __init__(self, params: ReducedParams, delta: float, tol: float):
        self.params = params
        self.delta = delta
        self.tol = tol
        self.field = _Field(params)
        self.plus = params.slices["a_plus"]

    def exit_level(self, t):
        return (t + 1.0 / self.delta) ** (-3.0)

    def run(self, t0: float, y0: np.ndarray, t1: float, t_eval=None):
        """Returns (solution, exited, exit_time, exit_y)."""
        ap0 = y0[self.plus]
        if np.dot(ap0, ap0) >= self.exit_level(t0):
            return None, True, t0, y0

        def leave(t, y):
            ap = y[self.plus]
            return self.exit_level(t) - np.dot(ap, ap)

        leave.terminal = True
        leave.direction = -1
        sol = solve_ivp(self.field, (t0, t1), y0, method="DOP853", rtol=self.tol,
                        atol=self.tol * 1e-12, events=leave, t_eval=t_eval)
        if sol.status == -1:
            raise UnstableEscape(float(sol.t[-1]), 0, "integration failure")
        if sol.status == 1:
            return sol, True, float(sol.t_events[0][0]), sol.y_events[0][0]
        return sol, False, t1, sol.y[:, -1]

    def exit_sign(self, t0, y0, t1, k=0):
        _, exited, _, y = self.run(t0, y0, t1)
        if not exited:
            return 0
        return int(np.sign(y[self.plus][k]))


def _bisect_sign(fn, lo: float, hi: float, s_lo: int, s_hi: int, max_iter: int = 200):
    """Bisection on the exit sign until the bracket stops shrinking in floating point."""
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        s = fn(mid)
        if s == 0:
            return mid, (lo, hi)
        if s == s_lo:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi), (lo, hi)


def theorem3_shoot(
    delta: float,
    params: ReducedParams,
    t_max: Optional[float] = None,
    tol: float = 1e-12,
    bracket: Optional[Sequence[float]] = None,
    restart_every: float = 20.0,
    window: float = 30.0,
    t_eval: Optional[Sequence[float]] = None,
    fit_window: tuple = (1e2, 1e4),
) -> ShootResult:
    """Select unstable initial amplitudes whose trajectory stays in the bootstrap regime.

    Initial state: a = delta, b = 0, a^+ = frak_a in the ball of radius
    delta^{3/2}, all other components 0.  Exit happens when
    A(t) = sum (a_k^+)^2 reaches (t + 1/delta)^{-3}.

    K = 1: bisection on the exit sign of a_1^+ gives frak_a to the precision
    of floating point, which keeps the trajectory trapped only for a time of
    order log(1/eps)/nu^+.  The trajectory is then continued to t_max by
    restarts: every ``restart_every`` time units the current a_1^+ is
    re-selected inside the current bootstrap ball by Brent's method on the
    signed exit value over the next ``window`` time units.  Each restart's
    jump in a_1^+ is recorded relative to the ball radius.

    K = 2: nested bisection (outer on frak_a_2 by the exit sign of a_2^+, inner
    on frak_a_1 by the exit sign of a_1^+), without restarts.
    """
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    K = params.K
    if K not in (1, 2):
        raise ValueError("shooting supports K in {1, 2}")
    t_max = 1e3 / delta if t_max is None else float(t_max)
    radius = delta**1.5
    sh = _Shooter(params, delta, tol)
    sl = params.slices

    def initial(ap):
        y = np.zeros(params.size)
        y[0] = delta
        y[sl["a_plus"]] = ap
        return y

    horizon = min(t_max, window)
    if K == 1:
        lo, hi = (-radius, radius) if bracket is None else map(float, bracket)
        s_lo = sh.exit_sign(0.0, initial([lo]), t_max)
        s_hi = sh.exit_sign(0.0, initial([hi]), t_max)
        if s_lo == s_hi or s_lo == 0 or s_hi == 0:
            raise TransversalityError(
                f"transversality bracket failure: exit signs {s_lo:+d}, {s_hi:+d} on [{lo:.3g}, {hi:.3g}]")
        frak, br = _bisect_sign(lambda x: sh.exit_sign(0.0, initial([x]), t_max), lo, hi, s_lo, s_hi)
        frak = np.array([frak])
    else:
        if bracket is not None:
            raise ValueError("custom brackets are supported for K = 1 only")

        def inner(x2):
            r1 = math.sqrt(max(radius**2 - x2**2, 0.0))
            f = lambda x1: sh.exit_sign(0.0, initial([x1, x2]), horizon, k=0)
            s_lo, s_hi = f(-r1), f(r1)
            if s_lo == s_hi:
                raise TransversalityError(f"transversality bracket failure on a_1 at a_2={x2:.3g}")
            x1, _ = _bisect_sign(f, -r1, r1, s_lo, s_hi)
            return x1

        def outer_sign(x2):
            x1 = inner(x2)
            return sh.exit_sign(0.0, initial([x1, x2]), horizon, k=1)

        lo, hi = -radius * (1 - 1e-12), radius * (1 - 1e-12)
        s_lo, s_hi = outer_sign(lo), outer_sign(hi)
        if s_lo == s_hi:
            raise TransversalityError("transversality bracket failure on a_2")
        x2, br = _bisect_sign(outer_sign, lo, hi, s_lo, s_hi, max_iter=60)
        frak = np.array([inner(x2), x2])

    # assemble the surviving trajectory with restarts
    if t_eval is None:
        t_eval = np.unique(np.concatenate((np.linspace(0, min(t_max, 100.0), 1001),
                                           np.geomspace(min(100.0, t_max), t_max, 2001))))
    t_eval = np.asarray(t_eval, dtype=float)
    ts, ys, restarts = [], [], []
    t0, y0 = 0.0, initial(frak)
    survival = t_max
    while t0 < t_max:
        t1 = min(t0 + restart_every, t_max)
        if t0 > 0 and K == 1:
            old = y0[sl["a_plus"]][0]
            y0 = _reselect(sh, t0, y0, min(t0 + window, t_max), old)
            ball = (t0 + 1.0 / delta) ** -1.5
            jump = float(y0[sl["a_plus"]][0] - old)
            restarts.append({"t": t0, "jump": jump, "relative_jump": abs(jump) / ball})
        sel = t_eval[(t_eval >= t0) & (t_eval < t1)]
        sol, exited, t_exit, y_exit = sh.run(t0, y0, t1, t_eval=np.append(sel, t1))
        if sol is None:
            ts.append([t0])
            ys.append(y0[:, None])
        else:
            # the segment end is re-sampled (possibly after a jump) by the next segment
            keep = slice(None) if exited or t1 >= t_max else slice(0, -1)
            ts.append(sol.t[keep])
            ys.append(sol.y[:, keep])
        if exited:
            ts.append([t_exit])
            ys.append(y_exit[:, None])
            survival = t_exit
            break
        t0, y0 = t1, y_exit
        if K == 2 and t0 >= horizon:
            survival = t0
            ts.append([t0])
            ys.append(y0[:, None])
            break
    t = np.concatenate(ts)
    Y = np.concatenate(ys, axis=1)
    traj = ReducedTrajectory(t, Y, params)
    margins = {k: float(np.min(v)) if v.size else math.nan
               for k, v in bootstrap_margins(t, Y, params, delta).items()}
    rate = None
    m = (t >= fit_window[0]) & (t <= fit_window[1])
    if np.count_nonzero(m) >= 10:
        norm = np.sqrt(np.sum(Y[:, m] ** 2, axis=0))
        rate = rate_fit(t[m], norm, "algebraic").rate
    return ShootResult(delta, frak, traj, float(survival), t_max, margins, restarts, rate, list(br))


def _reselect(sh: _Shooter, t0: float, y0: np.ndarray, t1: float, guess: float,
              accept: float = 0.05, max_iter: int = 25) -> np.ndarray:
    """Re-choose a_1^+ at time t0 so the trajectory stays trapped up to t1.

    In the trapped regime a deviation d of a_1^+ from the selecting value
    grows like d e^{nu^+ (t - t0)}.  A run that exits at t_e with sign s
    therefore puts the selecting value near x - s sqrt(A_exit) e^{-nu^+ (t_e - t0)},
    and a run that stays inside with end value a_1^+(t1) near
    x - a_1^+(t1) e^{-nu^+ (t1 - t0)}.  These updates are iterated until the
    end value is below ``accept`` times the bootstrap radius at t1; Brent's
    method on the signed exit value is the fallback.
    """
    k = sh.plus.start
    nu = sh.params.nu_plus[0]
    ball = (t0 + 1.0 / sh.delta) ** -1.5
    level1 = (t1 + 1.0 / sh.delta) ** -1.5

    def shot(x):
        y = y0.copy()
        y[k] = x
        _, exited, te, ye = sh.run(t0, y, t1)
        return exited, te, ye[k]

    x = guess
    for _ in range(max_iter):
        exited, te, end = shot(x)
        if exited:
            dx = math.copysign(math.sqrt(sh.exit_level(te)) * math.exp(-nu * (te - t0)), end)
        else:
            if abs(end) <= accept * level1:
                y = y0.copy()
                y[k] = x
                return y
            dx = end * math.exp(-nu * (t1 - t0))
        if abs(dx) <= 4 * np.finfo(float).eps * max(abs(x), ball * 1e-300):
            break
        x = min(max(x - dx, -ball), ball)

    def g(x):
        exited, _, end = shot(x)
        if exited:
            return 1.0 if end > 0 else -1.0
        return end / level1

    lo, hi = -ball, ball
    if g(lo) * g(hi) > 0:
        raise TransversalityError(f"transversality bracket failure at restart t={t0:.6g}")
    x = brentq(g, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=400)
    y = y0.copy()
    y[k] = x
    return y
