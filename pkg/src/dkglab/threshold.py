"""Threshold shooting between blow-up and decay near the ground state.

Initial data are (q + eta + c Y_1, 0), where eta is a fixed smooth bump
orthogonalized against Y_1 (so it lives in the stable directions) and c
tunes the unstable component.  For c above the threshold the solution
blows up; below it the solution falls off q towards zero.  Each trial is
evolved until its distance to (q, 0) exceeds an exit level; the sign of
a_1^+ at exit classifies it.  Bisection on that sign converges to the
stable set of q, and the limiting trajectory is trapped near q for a time
that grows like log(1/width)/nu_1^+.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math
from typing import Optional, Sequence

import numpy as np

from .evolution import BlowUpError, EvolutionConfig, evolve
from .fitting import RateFit, rate_fit
from .grid import PairState, RadialField, h1_norm_sq, l2_norm_sq

logger = logging.getLogger(__name__)

__all__ = ["BracketFailure", "Trial", "ThresholdResult", "ThresholdShooter"]


class BracketFailure(RuntimeError):
    pass


@dataclass
class Trial:
    c: float
    sign: int
    t_exit: Optional[float]
    times: np.ndarray
    distance: np.ndarray


@dataclass
class ThresholdResult:
    c_star: float
    bracket: tuple
    width: float
    bisections: int
    trapped: Trial
    t_min: float
    fit: RateFit
    predicted_rate: float
    nu_plus: float
    depth_offsets: list
    departure_times: list
    departure_slope: float
    endpoint_flags: dict = field(default_factory=dict)

    @property
    def trapped_window(self) -> float:
        """Time spent within the exit distance by the bisection-limit trajectory."""
        return self.trapped.t_exit if self.trapped.t_exit is not None else float(self.trapped.times[-1])

    @property
    def rate_error(self) -> float:
        return abs(self.fit.rate - self.predicted_rate) / abs(self.predicted_rate)

    @property
    def depth_slope_error(self) -> float:
        return abs(self.departure_slope * self.nu_plus - 1.0)

    def to_json(self) -> dict:
        return {
            "c_star": self.c_star,
            "bracket": list(self.bracket),
            "bracket_width": self.width,
            "bisections": self.bisections,
            "t_min": self.t_min,
            "trapped_window": self.trapped_window,
            "fit": self.fit.to_json(),
            "fitted_rate": self.fit.rate,
            "predicted_rate": self.predicted_rate,
            "rate_error": self.rate_error,
            "nu_plus": self.nu_plus,
            "depth_offsets": list(self.depth_offsets),
            "departure_times": list(self.departure_times),
            "departure_slope": self.departure_slope,
            "predicted_departure_slope": 1.0 / self.nu_plus,
            "endpoint_flags": dict(self.endpoint_flags),
        }


class ThresholdShooter:
    def __init__(self, q, spec, alpha: float, dt: float = 1e-3, sample_every: int = 20,
                 eta_amplitude: float = 0.02, eta_width: float = 0.5, exit_distance: float = 0.3,
                 min_exit_time: float = 0.5, t_end: float = 30.0):
        if spec.K != 1:
            raise ValueError(f"threshold shooting needs exactly one unstable mode, got K={spec.K}")
        self.q = q
        self.spec = spec
        self.grid = q.profile.grid
        self.Y = spec.modes[0].values
        self.zeta = float(spec.zeta_plus[0])
        self.cfg = EvolutionConfig(alpha, q.p, dt, t_end, sample_every=sample_every)
        r = self.grid.r
        eta = eta_amplitude * np.exp(-((r / eta_width) ** 2))
        self.eta = eta - self.grid.dot(eta, self.Y) * self.Y
        self.exit_distance = exit_distance
        self.min_exit_time = min_exit_time

    def initial(self, c: float) -> PairState:
        u = self.q.profile.values + self.eta + c * self.Y
        return PairState(RadialField(self.grid, u), self.grid.zeros())

    def distance(self, s: PairState) -> float:
        d = s.position - self.q.profile
        return math.sqrt(h1_norm_sq(d)) + math.sqrt(l2_norm_sq(s.velocity))

    def trial(self, c: float) -> Trial:
        ts, ds = [], []
        last = {"ap": 0.0}
        g = self.grid

        def obs(t, s):
            ts.append(t)
            ds.append(self.distance(s))
            phi = s.position.values - self.q.profile.values
            last["ap"] = self.zeta * g.dot(phi, self.Y) + g.dot(s.velocity.values, self.Y)
            return ds[-1] > self.exit_distance and t > self.min_exit_time

        try:
            tr = evolve(self.initial(c), self.cfg, [obs], background=self.q.profile)
            exited = tr.stopped_early
        except BlowUpError:
            exited = True
        return Trial(c, int(np.sign(last["ap"])), ts[-1] if exited else None, np.array(ts), np.array(ds))

    def endpoint_flag(self, c: float, zero_fraction: float = 0.05) -> str:
        """Full run from c: 'blow-up', 'decay-to-zero' or 'undetermined'."""
        ref = math.sqrt(h1_norm_sq(self.q.profile))

        def near_zero(t, s):
            return math.sqrt(h1_norm_sq(s.position)) < zero_fraction * ref

        try:
            tr = evolve(self.initial(c), self.cfg, [near_zero], background=self.q.profile)
        except BlowUpError:
            return "blow-up"
        return "decay-to-zero" if tr.stopped_early else "undetermined"

    def search(self, bracket: Sequence[float] = (-0.05, 0.05), width: float = 1e-10,
               fit_start: float = 1.0, depth_offsets: Sequence[float] = (1e-4, 1e-6, 1e-8),
               check_endpoints: bool = True) -> ThresholdResult:
        lo, hi = float(bracket[0]), float(bracket[1])
        t_lo, t_hi = self.trial(lo), self.trial(hi)
        if t_lo.sign == t_hi.sign:
            raise BracketFailure(
                f"bracket failure: both endpoints c={lo:g} and c={hi:g} exit with sign {t_lo.sign:+d}")
        s_hi = t_hi.sign
        n = 0
        while hi - lo > width:
            mid = 0.5 * (lo + hi)
            if self.trial(mid).sign == s_hi:
                hi = mid
            else:
                lo = mid
            n += 1
        c_star = 0.5 * (lo + hi)
        logger.info("threshold c*=%.12g after %d bisections (width %.2g)", c_star, n, hi - lo)
        star = self.trial(c_star)
        i_min = int(np.argmin(star.distance))
        t_min = float(star.times[i_min])
        nu = float(self.spec.nu_plus[0])
        # stop the fit one decade of unstable growth before the minimum
        t_stop = t_min - math.log(10.0) / nu
        sel = (star.times >= fit_start) & (star.times <= t_stop)
        fit = rate_fit(star.times[sel], star.distance[sel], "exponential")
        deps = []
        for off in depth_offsets:
            tr = self.trial(c_star + off)
            deps.append(tr.t_exit if tr.t_exit is not None else math.inf)
        x = np.log(1.0 / np.asarray(depth_offsets, dtype=float))
        slope = float(np.polyfit(x, np.asarray(deps), 1)[0]) if np.all(np.isfinite(deps)) else math.nan
        flags = {}
        if check_endpoints:
            flags = {"lower": self.endpoint_flag(float(bracket[0])), "upper": self.endpoint_flag(float(bracket[1]))}
        return ThresholdResult(
            c_star=c_star, bracket=(float(bracket[0]), float(bracket[1])), width=hi - lo, bisections=n,
            trapped=star, t_min=t_min, fit=fit, predicted_rate=self.spec.slowest_stable_rate(), nu_plus=nu,
            depth_offsets=list(depth_offsets), departure_times=deps, departure_slope=slope,
            endpoint_flags=flags,
        )
