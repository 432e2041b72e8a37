import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dkglab.fitting import rate_fit


def test_exponential_synthetic():
    t = np.linspace(0, 20, 200)
    fit = rate_fit(t, np.exp(-0.3 * t))
    assert fit.rate == pytest.approx(-0.3, abs=1e-6)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-12)
    assert fit.to_json() == {"kind": "exponential", "rate": fit.rate, "r_squared": fit.r_squared,
                             "window": [0.0, 20.0]}


def test_algebraic_shifted_law():
    t = np.geomspace(100, 1000, 100)
    fit = rate_fit(t, 1.0 / (t + 10.0), "algebraic", t_shift=10.0)
    assert fit.rate == pytest.approx(-1.0, abs=1e-3)


def test_algebraic_unshifted_fit_is_biased():
    # against log t the law 1/(t + 10) has local slope -t/(t + 10), which is
    # between -0.99 and -0.91 on [100, 1000]; the fit lands in that range
    t = np.geomspace(100, 1000, 100)
    fit = rate_fit(t, 1.0 / (t + 10.0), "algebraic")
    assert -0.99 < fit.rate < -0.91
    assert abs(fit.rate + 1.0) > 1e-3


def test_fit_errors():
    t = np.arange(20.0)
    with pytest.raises(ValueError, match="positive"):
        rate_fit(t, -np.ones(20))
    with pytest.raises(ValueError, match="positive"):
        rate_fit(t, np.zeros(20))
    with pytest.raises(ValueError, match="samples"):
        rate_fit(t[:5], np.ones(5))
    with pytest.raises(ValueError):
        rate_fit(t, np.ones(20), "power")
    with pytest.raises(ValueError):
        rate_fit(t, np.ones(20), "algebraic")  # log(0)


@settings(max_examples=100, deadline=None)
@given(rate=st.floats(-5, 5), c=st.floats(1e-6, 1e6))
def test_exponential_recovers_rate(rate, c):
    t = np.linspace(0, 3, 50)
    assert rate_fit(t, c * np.exp(rate * t)).rate == pytest.approx(rate, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(k=st.floats(-3, 3), t0=st.floats(0, 50))
def test_algebraic_recovers_exponent(k, t0):
    t = np.geomspace(1, 1e4, 60)
    assert rate_fit(t, (t + t0) ** k, "algebraic", t_shift=t0).rate == pytest.approx(k, abs=1e-9)
