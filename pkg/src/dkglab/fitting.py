"""Least-squares rate fits for decay series."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["RateFit", "rate_fit"]


@dataclass(frozen=True)
class RateFit:
    kind: str
    rate: float
    intercept: float
    r_squared: float
    window: tuple

    def to_json(self) -> dict:
        return {"kind": self.kind, "rate": self.rate, "r_squared": self.r_squared,
                "window": list(self.window)}


def rate_fit(t, values, kind: str = "exponential", min_samples: int = 10, t_shift: float = 0.0) -> RateFit:
    """Fit log(value) against t (exponential) or log(t + t_shift) (algebraic).

    Returns the slope as ``rate`` and the R^2 of the linear fit.  The shift
    lets a law (t + t0)^(-k) be fitted exactly; with the default 0 such a
    law shows a slope -k t/(t + t0) biased towards zero on finite windows.
    """
    t = np.asarray(t, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.shape != v.shape or t.ndim != 1:
        raise ValueError("t and values must be 1-D arrays of equal length")
    if t.size < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {t.size}")
    if np.any(~np.isfinite(v)) or np.any(v <= 0):
        raise ValueError("rate_fit needs strictly positive values")
    if kind == "exponential":
        x = t
    elif kind == "algebraic":
        if np.any(t + t_shift <= 0):
            raise ValueError("algebraic fit needs t + t_shift > 0")
        x = np.log(t + t_shift)
    else:
        raise ValueError(f"unknown fit kind {kind!r}")
    y = np.log(v)
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + icpt)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(kind, float(slope), float(icpt), r2, (float(t[0]), float(t[-1])))
