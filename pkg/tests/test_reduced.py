import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dkglab.fitting import rate_fit
from dkglab.reduced import (
    Coupling,
    EnvelopeError,
    ReducedParams,
    ReducedState,
    TransversalityError,
    UnstableEscape,
    _Shooter,
    bootstrap_bounds,
    integrate,
    lyapunov,
    lyapunov_identity_defects,
    lyapunov_values,
    n_total,
    rhs,
    theorem3_shoot,
)

PLAIN = ReducedParams(1.0, (1.0,), (-3.0,))
QUAD = ReducedParams(1.0, (1.0,), (-3.0,), couplings=[Coupling("a_plus[0]", 0.1, {"a": 2})])


@pytest.fixture(scope="module")
def survivor():
    return theorem3_shoot(0.1, QUAD)


# --- vector field ------------------------------------------------------------------------


def test_zero_state_zero_derivative():
    p = ReducedParams(0.7, (1.0, 2.0), (-2.4, -3.4), n_ell=3, n_beta=3)
    d = rhs(ReducedState.zeros(p), p)
    assert np.all(d.to_vector() == 0.0)


def test_b_dot_arithmetic():
    d = rhs(ReducedState(1.0, 0.0, a_minus=[0.0], a_plus=[0.0]), PLAIN)
    assert d.a == 0.0 and d.b == -2.0


def test_leading_system_components():
    p = ReducedParams(0.5, (0.6,), (-1.6,), n_ell=2, n_beta=1)
    s = ReducedState(0.3, -0.2, ell=[1.0, 2.0], beta=[3.0], a_minus=[0.5], a_plus=[0.25])
    d = rhs(s, p)
    assert d.a == -0.2
    assert d.b == pytest.approx(-2 * 0.5 * -0.2 - 2 * 0.5 * 0.09, rel=1e-15)
    assert np.array_equal(d.ell, [-1.0, -2.0]) and np.array_equal(d.beta, [-3.0])
    assert d.a_minus[0] == -0.8 and d.a_plus[0] == 0.15


def test_coupling_adds_monomial():
    d = rhs(ReducedState(0.2, 0.0, a_minus=[0.0], a_plus=[0.0]), QUAD)
    assert d.a_plus[0] == pytest.approx(0.1 * 0.04, rel=1e-15)


@settings(max_examples=100, deadline=None)
@given(a=st.floats(-10, 10), b=st.floats(-10, 10), alpha=st.floats(0.05, 5))
def test_r1_derivative_is_minus_a_sq(a, b, alpha):
    p = ReducedParams(alpha, (1.0,), (-1.0,))
    d = rhs(ReducedState(a, b, a_minus=[0.0], a_plus=[0.0]), p)
    r1_dot = d.a + d.b / (2 * alpha)
    assert abs(r1_dot + a * a) <= 1e-12 * (a * a + abs(b) + 1)


def test_r2_identity_symbolic():
    sp = pytest.importorskip("sympy")
    a, b, al = sp.symbols("a b alpha", positive=True)
    R2 = 2 * al / 3 * a**3 + a * b**2 / (2 * al) + a**2 * b
    adot, bdot = b, -2 * al * b - 2 * al * a**2
    R2dot = sp.diff(R2, a) * adot + sp.diff(R2, b) * bdot
    assert sp.simplify(R2dot + 2 * al * a**4 - (b**3 / (2 * al) - 2 * a**3 * b)) == 0
    # and the implemented formula is the same polynomial
    vals = {a: 0.37, b: -0.21, al: 0.8}
    got = lyapunov_values(0.37, -0.21, 0.8)["r2"]
    assert got == pytest.approx(float(R2.subs(vals)), rel=1e-14)


def test_lyapunov_definitions():
    p = ReducedParams(0.5, (0.6, 0.7), (-1.6, -1.7), n_ell=2, n_beta=1)
    z = lyapunov(ReducedState.zeros(p), p)
    assert z == {"r1": 0.0, "r2": 0.0, "s_damped": 0.0, "a_unstable": 0.0}
    s = ReducedState(0.3, -0.2, ell=[1.0, 2.0], beta=[3.0], a_minus=[0.5, 0.1], a_plus=[0.25, 0.5])
    v = lyapunov(s, p)
    assert v["r1"] == pytest.approx(0.3 - 0.2, rel=1e-15)
    assert v["r2"] == pytest.approx(2 * 0.5 / 3 * 0.027 + 0.3 * 0.04 + 0.09 * -0.2, rel=1e-14)
    assert v["s_damped"] == pytest.approx(1 + 4 + 9 + 0.25 + 0.01 + 0.04, rel=1e-15)
    assert v["a_unstable"] == pytest.approx(0.0625 + 0.25, rel=1e-15)


# --- parameters and envelopes -----------------------------------------------------------------


def test_params_validation():
    with pytest.raises(ValueError, match="alpha"):
        ReducedParams(0.0, (1.0,), (-1.0,))
    with pytest.raises(ValueError, match="nu_plus"):
        ReducedParams(1.0, (-1.0,), (-1.0,))
    with pytest.raises(ValueError, match="nu_minus"):
        ReducedParams(1.0, (1.0,), (1.0,))
    with pytest.raises(ValueError, match="p_bar"):
        ReducedParams(1.0, (1.0,), (-1.0,), p_bar=2.0)


def test_from_lambda_mode_constants():
    p = ReducedParams.from_lambda(1.0, [3.0])
    assert p.nu_plus == (1.0,) and p.nu_minus == (-3.0,)


@pytest.mark.parametrize("coupling, match", [
    (Coupling("a", 1.0, {"a": 2}), "not bounded"),         # a^2 is not in N^2 + |a|N
    (Coupling("b", 1.0, {"a": 2}), "not bounded"),         # below |a|^p_bar for p_bar = 3
    (Coupling("a_plus[0]", 1.0, {"a": 1}), "not bounded"),   # linear
    (Coupling("b", 1e3, {"b": 2}), "envelope constant"),
    (Coupling("b", 1.0, {"b": 1.5}), "nonnegative integers"),
    (Coupling("z", 1.0, {"b": 2}), "unknown reduced variable"),
    (Coupling("a_plus[3]", 1.0, {"b": 2}), "out of range"),
])
def test_envelope_rejection(coupling, match):
    with pytest.raises(EnvelopeError, match=match):
        ReducedParams(1.0, (1.0,), (-3.0,), couplings=[coupling])


def test_envelope_accepts_lemma_shapes():
    ok = [
        Coupling("a", 1.0, {"b": 2}),
        Coupling("a", -1.0, {"a": 1, "a_minus[0]": 1}),
        Coupling("b", 1.0, {"a": 3}),
        Coupling("a_minus[0]", 2.0, {"a": 2}),
        Coupling("a_plus[0]", 0.5, {"b": 1, "a_plus[0]": 1}),
        {"target": "b", "coefficient": 0.3, "powers": {"a": 1, "b": 1}},
    ]
    p = ReducedParams(1.0, (1.0,), (-3.0,), couplings=ok)
    assert len(p.couplings) == 6 and all(isinstance(c, Coupling) for c in p.couplings)


# --- integration ----------------------------------------------------------------------------


def test_degenerate_decay_like_one_over_t():
    t = np.geomspace(1.0, 1e4, 400)
    tr = integrate(ReducedState(0.1, 0.0, a_minus=[0.0], a_plus=[0.0]), PLAIN, 1e4, tol=1e-12,
                   t_eval=np.r_[0.0, t])
    assert np.max(np.abs((tr.t + 10.0) * tr.a - 1.0)) <= 0.05


def test_negative_degenerate_amplitude_escapes():
    with pytest.raises(UnstableEscape) as info:
        integrate(ReducedState(-0.1, 0.0, a_minus=[0.0], a_plus=[0.0]), PLAIN, 1e4)
    # near blow-up b = a' outgrows a, so either may trip the bound first
    assert info.value.sign == -1 and info.value.variable in ("a", "b")
    assert 0 < info.value.time < 1e4
    tr = integrate(ReducedState(-0.1, 0.0, a_minus=[0.0], a_plus=[0.0]), PLAIN, 1e4, raise_on_escape=False)
    assert tr.a[-1] < -1e2 and np.all(np.diff(tr.a) < 0)


def test_escape_recorded_without_raising():
    tr = integrate(ReducedState(0.0, 0.0, a_minus=[0.0], a_plus=[1e-3]), PLAIN, 100.0, raise_on_escape=False)
    assert tr.escaped and tr.escape_sign == 1 and tr.escape_variable == "a_plus[0]"
    # a_plus = 1e-3 e^t reaches 1e6 at t = ln(1e9)
    assert tr.escape_time == pytest.approx(math.log(1e9), rel=1e-6)


def test_pure_stable_mode_is_exponential():
    t = np.linspace(0, 5, 51)
    tr = integrate(ReducedState(0.0, 0.0, a_minus=[1e-3], a_plus=[0.0]), PLAIN, 5.0, tol=1e-10, t_eval=t)
    exact = 1e-3 * np.exp(-3.0 * t)
    assert np.all(np.abs(tr.block("a_minus")[0] - exact) <= 1e-10 * 1e-3 + 1e-9 * exact)
    assert np.all(tr.a == 0) and np.all(tr.block("a_plus") == 0)


def test_integrate_rejects_bad_input():
    with pytest.raises(ValueError):
        integrate(ReducedState(0.1, 0.0, a_minus=[0.0], a_plus=[0.0]), PLAIN, 1.0, tol=0.0)
    with pytest.raises(ValueError, match="size"):
        integrate(ReducedState(0.1, 0.0), PLAIN, 1.0)
    with pytest.raises(ValueError):
        ReducedState(math.nan, 0.0)


def test_lyapunov_identities_by_finite_differences():
    s0 = ReducedState(0.1, 0.05, a_minus=[0.0], a_plus=[0.0])
    tr = integrate(s0, PLAIN, 50.0, tol=1e-12, dense=True)
    h = 1e-3
    tc = np.linspace(1.0, 49.0, 200)
    lp = lyapunov_values(*tr.sol(tc + h)[:2], 1.0)
    lm = lyapunov_values(*tr.sol(tc - h)[:2], 1.0)
    a, b = tr.sol(tc)[:2]
    d1 = (lp["r1"] - lm["r1"]) / (2 * h) + a**2
    d2 = (lp["r2"] - lm["r2"]) / (2 * h) + 2 * a**4 - (b**3 / 2 - 2 * a**3 * b)
    assert np.max(np.abs(d1)) <= 1e-8
    assert np.max(np.abs(d2)) <= 1e-8


def test_integrated_identity_defects_need_dense_output():
    tr = integrate(ReducedState(0.1, 0.0, a_minus=[0.0], a_plus=[0.0]), PLAIN, 1.0)
    with pytest.raises(ValueError, match="dense"):
        lyapunov_identity_defects(tr)


def _fitted_constant(params, s0, t_end, quantity):
    """Smallest C with lhs <= C * rhs on the sampled trajectory, using exact derivatives."""
    tr = integrate(s0, params, t_end, tol=1e-11, t_eval=np.linspace(0, t_end, 2001))
    Cs = []
    for i in range(tr.t.size):
        s = tr.state(i)
        d = rhs(s, params)
        N = float(n_total(tr.y[:, i], params))
        a = s.a
        if quantity == "S":
            S = lyapunov(s, params)["s_damped"]
            S_dot = 2 * (np.dot(s.ell, d.ell) + np.dot(s.beta, d.beta) + np.dot(s.a_minus, d.a_minus) + s.b * d.b)
            lhs, env = S_dot + params.alpha * S, N**3 + a * a * N
        elif quantity == "R2":
            R2_dot = (2 * params.alpha * a * a + s.b**2 / (2 * params.alpha) + 2 * a * s.b) * d.a \
                + (a * s.b / params.alpha + a * a) * d.b
            lhs, env = R2_dot + params.alpha * a**4, N**3
        else:  # A: distance from the linear growth law
            A = lyapunov(s, params)["a_unstable"]
            A_dot = 2 * float(np.dot(s.a_plus, d.a_plus))
            nu = np.asarray(params.nu_plus)
            lo, hi = 2 * nu.min() * A, 2 * nu.max() * A
            lhs, env = max(lo - A_dot, A_dot - hi), N**3 + a * a * N
        if env > 0:
            Cs.append(lhs / env)
    return max(Cs)


PERTURBED = ReducedParams(1.0, (1.0, 1.5), (-3.0, -3.5), n_ell=1, couplings=[
    Coupling("b", 0.5, {"a": 1, "b": 1}),
    Coupling("a_plus[0]", 0.1, {"a": 2}),
    Coupling("a_plus[1]", -0.2, {"a": 1, "a_minus[0]": 1}),
    Coupling("a_minus[0]", 0.3, {"a": 2}),
])


@pytest.mark.parametrize("quantity", ["S", "R2", "A"])
def test_inequality_constants_uniform_in_amplitude(quantity):
    # one constant per parameter set must serve every amplitude
    Cs = []
    for eps in (0.05, 0.025, 0.0125):
        s0 = ReducedState(eps, 0.5 * eps, ell=[0.3 * eps], a_minus=[0.4 * eps, 0.2 * eps],
                          a_plus=[0.1 * eps**1.5, -0.1 * eps**1.5])
        Cs.append(_fitted_constant(PERTURBED, s0, 5.0, quantity))
    assert all(math.isfinite(c) for c in Cs)
    assert max(Cs) <= 1.0


# --- shooting -------------------------------------------------------------------------------


def test_decoupled_shot_selects_zero():
    res = theorem3_shoot(0.1, PLAIN, t_max=1e3)
    assert res.a_plus_initial[0] == 0.0
    assert res.survived
    tr = res.trajectory
    assert tr.t[-1] * tr.a[-1] == pytest.approx(1.0, rel=0.02)


def test_coupled_shot_survives_with_margins(survivor):
    res = survivor
    delta = 0.1
    ap = res.a_plus_initial[0]
    assert ap != 0.0 and abs(ap) <= delta**1.5
    assert res.survived and res.survival_time == pytest.approx(1e4)
    assert all(v >= 0.1 for v in res.bootstrap_margins.values())
    # bracket endpoints exit with opposite signs
    sh = _Shooter(QUAD, delta, 1e-12)
    y = np.zeros(QUAD.size)
    y[0] = delta
    signs = []
    for x in (-delta**1.5, delta**1.5):
        y[3] = x
        signs.append(sh.exit_sign(0.0, y, 1e4))
    assert signs == [-1, 1]
    lo, hi = res.bracket
    assert lo <= ap <= hi and hi - lo <= 1e-15


def test_coupled_shot_rate_and_asymptotics(survivor):
    tr = survivor.trajectory
    m = (tr.t >= 1e2) & (tr.t <= 1e4)
    norm = np.sqrt(np.sum(tr.y[:, m] ** 2, axis=0))
    rate = rate_fit(tr.t[m], norm, "algebraic").rate
    assert rate == pytest.approx(survivor.fitted_rate, rel=1e-12)
    assert abs(rate + 1.0) <= 0.05
    assert abs(tr.t[-1] * tr.a[-1] - 1.0) <= 0.05


def test_asymptotic_sharpness(survivor):
    tr = survivor.trajectory
    sups = []
    for T in (1e2, 1e3):
        m = (tr.t >= T) & (tr.t <= 10 * T)
        sups.append(np.max(np.abs(tr.t[m] * tr.a[m] - 1.0)))
    assert sups[1] < 0.5 * sups[0]


def test_restart_jumps_small(survivor):
    assert survivor.restarts
    assert max(r["relative_jump"] for r in survivor.restarts) <= 0.05


def test_exit_map_monotone():
    delta = 0.1
    sh = _Shooter(QUAD, delta, 1e-12)
    y = np.zeros(QUAD.size)
    y[0] = delta
    signs = []
    for x in np.linspace(-delta**1.5, delta**1.5, 41):
        y[3] = x
        signs.append(sh.exit_sign(0.0, y, 200.0))
    assert 0 not in signs
    assert np.count_nonzero(np.diff(signs)) == 1 and signs[0] == -1


def test_shoot_report_schema(survivor):
    d = json.loads(survivor.dumps())
    assert {"delta", "a_plus_initial", "survival_time", "bootstrap_margins", "fitted_rate"} <= set(d)
    assert set(d["bootstrap_margins"]) == {"a", "n_total", "a_unstable"}


def test_bootstrap_bounds_formula():
    b = bootstrap_bounds(np.array([0.0]), 0.1, 3.0)
    assert b["a"][0] == pytest.approx(10 ** (-8 / 7) + 10 ** -1.5, rel=1e-15)
    assert b["n_total"][0] == pytest.approx(10 ** -1.25, rel=1e-15)
    assert b["a_unstable"][0] == pytest.approx(1e-3, rel=1e-15)


def test_transversality_failure():
    # both ends of a one-sided bracket exit upward
    with pytest.raises(TransversalityError, match="transversality bracket failure"):
        theorem3_shoot(0.1, QUAD, t_max=100.0, bracket=(1e-3, 2e-3))


def test_shoot_argument_errors():
    with pytest.raises(ValueError):
        theorem3_shoot(1.5, PLAIN)
    with pytest.raises(ValueError):
        theorem3_shoot(0.1, ReducedParams(1.0, (1.0, 1.0, 1.0), (-3.0, -3.0, -3.0)))


def test_two_mode_nested_shot():
    p = ReducedParams(1.0, (1.0, 1.5), (-3.0, -3.5), couplings=[
        Coupling("a_plus[0]", 0.1, {"a": 2}), Coupling("a_plus[1]", -0.1, {"a": 2})])
    res = theorem3_shoot(0.1, p, t_max=15.0)
    ap = res.a_plus_initial
    assert np.linalg.norm(ap) <= 0.1**1.5
    assert ap[0] < 0 < ap[1]
    assert res.survival_time == 15.0
