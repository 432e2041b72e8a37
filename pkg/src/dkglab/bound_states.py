"""Radial bound states of -Lap q + q - |q|^{p-1} q = 0.

Profiles are found by shooting in q(0) and then polished by Newton's method
on the discrete system of :mod:`dkglab.grid`.

Shooting classification.  With a focusing nonlinearity the radial ODE is a
particle in the double well -q^2/2 + F(q) with friction (N-1)/r, so shots
never run off to infinity: a shot either turns back toward a well before
reaching zero again (undershoot) or crosses zero once more (overshoot).  A
k-node bound state sits at the transition between shots that turn back after
k crossings and shots that make a (k+1)-th crossing.
"""

from __future__ import annotations

from dataclasses import dataclass
import logging
import math
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp

from .grid import (
    RadialField,
    RadialGrid,
    check_exponent,
    dirichlet_form,
    l2_norm_sq,
    nonlinearity,
    potential,
    static_action,
)
from .spectrum import assemble_Lq

logger = logging.getLogger(__name__)

__all__ = [
    "ShootingError",
    "BoundStateError",
    "ShootingRecord",
    "BoundState",
    "shoot",
    "find_bound_state",
    "bracket_origin_value",
    "refine_on_grid",
    "pairing_identity_check",
    "count_nodes",
    "tail_slope",
]


class ShootingError(RuntimeError):
    """The radial ODE integrator gave up (step-size underflow or similar)."""


class BoundStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class ShootingRecord:
    u0: float
    r: np.ndarray
    q: np.ndarray
    dq: np.ndarray
    nodes: int
    escape: int
    turned_back: bool
    r_stop: float

    @property
    def status(self) -> str:
        if self.escape == 0:
            return "decay"
        return "escape+" if self.escape > 0 else "escape-"


def _start_radius(u0: float, p: float) -> float:
    return 1e-4 / max(1.0, abs(u0) ** ((p - 1.0) / 2.0))


def shoot(p: float, dim: int, u0: float, r_max: float, *, max_crossings: Optional[int] = None,
          rtol: float = 1e-12, atol: float = 1e-14, chunk: float = 2.0, dense: bool = False) -> ShootingRecord:
    """Integrate q'' + (N-1)/r q' = q - |q|^{p-1} q from q(0) = u0, q'(0) = 0.

    Stops at the first turn-back (a local minimum of |q| with |q| < 1), after
    ``max_crossings`` zero crossings, or at ``r_max``.  ``escape`` is the sign of
    q where the shot leaves the neighbourhood of zero, 0 if it stays small up
    to r_max.
    """
    if u0 < 0:
        raise ValueError("u0 must be nonnegative")
    if u0 == 0.0:
        r = np.array([0.0, r_max])
        z = np.zeros(2)
        return ShootingRecord(0.0, r, z, z, 0, 0, False, r_max)

    n1 = dim - 1.0

    def rhs(r, y):
        q, dq = y
        return [dq, q - abs(q) ** (p - 1.0) * q - n1 / r * dq]

    def crossing(r, y):
        return y[0]

    def extremum(r, y):
        return y[1]

    crossing.terminal = False
    extremum.terminal = False

    r0 = min(_start_radius(u0, p), 0.5 * r_max)
    c = (u0 - abs(u0) ** (p - 1.0) * u0) / dim
    y = np.array([u0 + 0.5 * c * r0**2, c * r0])
    rs, qs, dqs = [0.0, r0], [u0, y[0]], [0.0, y[1]]
    crossings = 0
    turned = False
    r_now = r0
    r_stop = r_max
    done = False
    while r_now < r_max and not done:
        r_end = min(r_now + chunk, r_max)
        sol = solve_ivp(rhs, (r_now, r_end), y, method="DOP853", rtol=rtol, atol=atol,
                        events=(crossing, extremum), dense_output=dense)
        if sol.status == -1:
            raise ShootingError(f"shooting integrator failed at r={r_now:.6g}: {sol.message}")
        # merge events in radius order, skipping ones sitting on the chunk start
        events = [(rr, 0, yy) for rr, yy in zip(sol.t_events[0], sol.y_events[0])]
        events += [(rr, 1, yy) for rr, yy in zip(sol.t_events[1], sol.y_events[1])]
        events.sort(key=lambda e: e[0])
        for rr, kind, yy in events:
            if rr <= r_now + 1e-12:
                continue
            if kind == 0:
                crossings += 1
                if max_crossings is not None and crossings >= max_crossings:
                    r_stop, done = rr, True
            elif abs(yy[0]) < 1.0:
                turned, r_stop, done = True, rr, True
            if done:
                keep = sol.t < rr
                rs.extend(sol.t[keep][1:])
                qs.extend(sol.y[0][keep][1:])
                dqs.extend(sol.y[1][keep][1:])
                rs.append(rr)
                qs.append(yy[0])
                dqs.append(yy[1])
                break
        if not done:
            rs.extend(sol.t[1:])
            qs.extend(sol.y[0][1:])
            dqs.extend(sol.y[1][1:])
            y = sol.y[:, -1]
            r_now = sol.t[-1]
    r_arr, q_arr, dq_arr = np.array(rs), np.array(qs), np.array(dqs)
    if turned:
        escape = 1 if q_arr[-1] > 0 else -1
    elif done:
        # stopped right at a crossing: leaving with the sign of the new lobe
        escape = 1 if dq_arr[-1] > 0 else -1
    else:
        escape = 0 if abs(q_arr[-1]) < 1e-6 else (1 if q_arr[-1] > 0 else -1)
    return ShootingRecord(float(u0), r_arr, q_arr, dq_arr, crossings, escape, turned, float(r_stop))


def bracket_origin_value(p: float, dim: int, nodes: int, r_max: float, *, u0_max: float = 1e3,
                         rel_width: float = 1e-14, scan_factor: float = 1.15):
    """Bisect q(0) between shots with <= nodes and > nodes crossings.

    Returns (lo, hi, record_lo) with record_lo the undershooting shot.
    """
    def over(u0):
        rec = shoot(p, dim, u0, r_max, max_crossings=nodes + 1)
        return rec.nodes > nodes, rec

    lo = 1.0 + 1e-3
    is_over, rec_lo = over(lo)
    if is_over:
        raise BoundStateError("no bound state bracket: smallest trial value already overshoots")
    hi = None
    u = lo
    while u < u0_max:
        u = min(u * scan_factor, u0_max)
        is_over, rec = over(u)
        if is_over:
            hi = u
            break
        lo, rec_lo = u, rec
    if hi is None:
        raise BoundStateError(f"no bound state bracket for nodes={nodes} within u0 in (0, {u0_max}]")
    while hi - lo > rel_width * hi:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        is_over, rec = over(mid)
        if is_over:
            hi = mid
        else:
            lo, rec_lo = mid, rec
    return lo, hi, rec_lo


def count_nodes(values: np.ndarray, rel_floor: float = 1e-8) -> int:
    """Sign changes, ignoring entries below rel_floor * max|q|."""
    v = np.asarray(values)
    big = v[np.abs(v) > rel_floor * np.max(np.abs(v))] if v.size else v
    if big.size < 2:
        return 0
    return int(np.count_nonzero(np.sign(big[1:]) != np.sign(big[:-1])))


def _initial_guess(rec: ShootingRecord, grid: RadialGrid, dim: int) -> np.ndarray:
    # trust the undershooting shot until |q| bottoms out, then continue with
    # the free decay e^{-r} r^{-(N-1)/2}
    r, q = rec.r, rec.q
    small = np.abs(q) < 1e-7 * abs(rec.u0)
    cut = int(np.argmax(small)) if np.any(small) else len(r) - 1
    r_cut = r[cut]
    vals = np.interp(grid.r, r[: cut + 1], q[: cut + 1])
    tail = grid.r > r_cut
    if np.any(tail):
        vals[tail] = q[cut] * np.exp(-(grid.r[tail] - r_cut)) * (r_cut / grid.r[tail]) ** ((dim - 1) / 2.0)
    return vals


def _residual(grid: RadialGrid, q: np.ndarray, p: float) -> np.ndarray:
    return -grid.lap(q) + q - nonlinearity(q, p)


def refine_on_grid(grid: RadialGrid, guess: np.ndarray, p: float, *, max_iter: int = 50,
                   tol: Optional[float] = None) -> tuple[np.ndarray, float, int]:
    """Damped Newton on the discrete bound-state equation.

    Returns (profile values, sup-norm residual, iterations).
    """
    q = np.array(guess, dtype=float)
    res = _residual(grid, q, p)
    norm = float(np.max(np.abs(res)))
    if tol is None:
        tol = 1e-8 * (1.0 + float(np.max(np.abs(q))))
    polish = 0
    for it in range(1, max_iter + 1):
        J = assemble_Lq(RadialField(grid, q), p)
        step = J.solve(-res)
        lam = 1.0
        while True:
            trial = q + lam * step
            res_t = _residual(grid, trial, p)
            norm_t = float(np.max(np.abs(res_t)))
            if norm_t < norm or lam < 1e-9:
                break
            lam *= 0.5
        if norm_t >= norm and norm <= tol:
            # at the rounding floor
            break
        q, res, norm = trial, res_t, norm_t
        if norm <= tol:
            polish += 1
            if polish >= 3 or float(np.max(np.abs(lam * step))) < 1e-14 * float(np.max(np.abs(q))):
                break
    else:
        if norm > tol:
            raise BoundStateError(f"refinement failed: residual {norm:.3e} after {max_iter} Newton iterations")
    if norm > tol:
        raise BoundStateError(f"refinement failed: residual {norm:.3e} (tolerance {tol:.3e})")
    return q, norm, it


@dataclass(frozen=True, eq=False)
class BoundState:
    """A refined radial bound state on a grid.

    ``origin_value`` is q(0) from the shooting bisection (continuum accurate);
    ``grid_origin_value`` is the even extrapolation of the grid profile to
    r = 0 and carries the O(dr^2) error of the discretization.
    """

    profile: RadialField
    p: float
    dim: int
    nodes: int
    origin_value: float
    residual_norm: float
    grid_origin_value: float
    newton_iterations: int = 0

    @property
    def grid(self) -> RadialGrid:
        return self.profile.grid

    @property
    def action(self) -> float:
        """W(q), the static energy."""
        return static_action(self.profile, self.p)

    def summary(self) -> dict:
        return {
            "dim": self.dim,
            "p": self.p,
            "nodes": self.nodes,
            "origin_value": self.origin_value,
            "grid_origin_value": self.grid_origin_value,
            "residual_norm": self.residual_norm,
            "action": self.action,
            "pairing_defect": pairing_identity_check(self),
            "m": self.grid.m,
            "r_max": self.grid.r_max,
        }


def find_bound_state(p: float, dim: int, nodes: int, grid: RadialGrid, *, u0_max: float = 1e3,
                     shoot_r_max: Optional[float] = None) -> BoundState:
    """Radial bound state with ``nodes`` sign changes (0 for the ground state)."""
    if nodes < 0:
        raise ValueError("nodes must be >= 0")
    check_exponent(p, dim)
    if grid.dim != dim:
        raise ValueError(f"grid dimension {grid.dim} != requested dim {dim}")
    r_shoot = grid.r_max if shoot_r_max is None else shoot_r_max
    lo, hi, rec = bracket_origin_value(p, dim, nodes, r_shoot, u0_max=u0_max)
    guess = _initial_guess(rec, grid, dim)
    values, res, iters = refine_on_grid(grid, guess, p)
    found = count_nodes(values)
    if found != nodes:
        raise BoundStateError(f"refinement failed: Newton converged to a {found}-node profile, wanted {nodes}")
    if values[0] < 0:
        values = -values
    logger.info("bound state N=%d p=%g nodes=%d q(0)=%.12g residual=%.2e (%d Newton steps)",
                dim, p, nodes, 0.5 * (lo + hi), res, iters)
    return BoundState(
        profile=RadialField(grid, values),
        p=float(p),
        dim=int(dim),
        nodes=nodes,
        origin_value=0.5 * (lo + hi),
        residual_norm=res,
        grid_origin_value=grid.axis_value(values),
        newton_iterations=iters,
    )


def pairing_identity_check(q) -> float:
    """|int(|grad q|^2 + q^2) - int|q|^{p+1}| / int|q|^{p+1}; 0 for the zero profile."""
    profile = q.profile
    p = q.p
    lhs = dirichlet_form(profile) + l2_norm_sq(profile)
    rhs = (p + 1.0) * float(np.dot(profile.grid.quad_weights, potential(profile.values, p)))
    if rhs == 0.0:
        return 0.0
    return abs(lhs - rhs) / rhs


def tail_slope(q, window=(0.5, 0.75)) -> float:
    """Least-squares slope of log|q| against r on [w0 r_max, w1 r_max]."""
    grid = q.grid
    r = grid.r
    vals = np.abs(q.profile.values)
    mask = (r >= window[0] * grid.r_max) & (r <= window[1] * grid.r_max) & (vals > 0)
    if np.count_nonzero(mask) < 2:
        return math.nan
    return float(np.polyfit(r[mask], np.log(vals[mask]), 1)[0])
