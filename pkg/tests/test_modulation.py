import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dkglab.evolution import EvolutionConfig, evolve
from dkglab.experiments import make_rng
from dkglab.grid import PairState, RadialField, h1_norm_sq, inner_product, pair_norm, pair_norm_sq
from dkglab.modulation import (
    ModulationWindowError,
    coercivity_ratios,
    coercivity_suite,
    compose,
    decompose,
    default_mu,
    dressing,
    energy_expansion_check,
    energy_functional,
    mode_amplitudes,
    mode_ode_residual,
    potential_remainder,
    quadratic_sandwich_bounds,
    random_perturbation,
    trace,
    write_trace_csv,
)
from dkglab.reduced import ReducedParams, ReducedState, lyapunov


def _at_rest(q):
    return PairState(q.profile, q.grid.zeros())


def _bump(q, sp, amplitude, width=0.5):
    g = q.grid
    Y = sp.modes[0].values
    eta = np.exp(-((g.r / width) ** 2))
    eta -= g.dot(eta, Y) * Y
    eta *= amplitude / math.sqrt(h1_norm_sq(RadialField(g, eta)))
    return PairState(q.profile + RadialField(g, eta), g.zeros())


def test_default_mu():
    assert default_mu(0.5) == 0.25
    assert default_mu(3.0) == 0.5


def test_at_rest_all_zero(ground2048, spec2048):
    c = decompose(_at_rest(ground2048), ground2048, spec2048)
    assert c.a == c.b == 0.0
    assert np.all(c.a_plus == 0) and np.all(c.a_minus == 0)
    for name in ("n_total", "s_damped", "a_unstable", "e_func", "f_func", "r1", "r2", "distance"):
        assert getattr(c, name) == 0.0


def test_dressing_recovers_frak_exactly(ground2048, spec2048):
    for frak in (1e-3, -2.5e-4, 0.03):
        s = dressing(spec2048, [frak])
        s = PairState(ground2048.profile + s.position, s.velocity)
        c = decompose(s, ground2048, spec2048)
        assert c.a_plus[0] == pytest.approx(frak, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(ap=st.floats(-1e-2, 1e-2), am=st.floats(-1e-2, 1e-2))
def test_compose_decompose_round_trip(ground2048, spec2048, ap, am):
    s = compose(ground2048, spec2048, [ap], [am])
    c = decompose(s, ground2048, spec2048)
    assert abs(c.a_plus[0] - ap) <= 1e-10
    assert abs(c.a_minus[0] - am) <= 1e-10


def test_round_trip_with_degenerate_direction(ground2048, spec2048):
    q, sp = ground2048, spec2048
    g = q.grid
    Y = sp.modes[0].values
    phi = np.exp(-(((g.r - 3.0) / 1.0) ** 2))
    phi -= g.dot(phi, Y) * Y
    phi = RadialField(g, phi)
    extra_u = g.sample(lambda r: r * np.exp(-r))
    extra_u = extra_u - (g.dot(extra_u.values, Y) * sp.modes[0])
    extra_u = extra_u - (g.dot(extra_u.values, phi.values) / g.dot(phi.values, phi.values)) * phi
    extra = PairState(1e-3 * extra_u, g.zeros())
    s = compose(q, sp, [2e-3], [-1e-3], extra=extra, phi=phi, a=4e-3, b=-3e-3)
    c = decompose(s, q, sp, phi=phi)
    assert c.a == pytest.approx(4e-3, abs=1e-12)
    assert c.b == pytest.approx(-3e-3, abs=1e-12)
    assert c.a_plus[0] == pytest.approx(2e-3, abs=1e-12)
    assert c.a_minus[0] == pytest.approx(-1e-3, abs=1e-12)
    # remainder is orthogonal to phi in both components
    assert abs(inner_product(c.remainder.position, phi)) <= 1e-14
    assert abs(inner_product(c.remainder.velocity, phi)) <= 1e-14
    assert c.n_total == pytest.approx(pair_norm(c.remainder) + abs(c.b), rel=1e-14)


def test_coordinate_definitions(ground2048, spec2048):
    q, sp = ground2048, spec2048
    rng = make_rng(7)
    rem = random_perturbation(q.grid, sp, rng, 1e-3)
    s = PairState(q.profile + rem.position, rem.velocity)
    c = decompose(s, q, sp)
    zp, zm = sp.zeta_plus[0], sp.zeta_minus[0]
    Y = sp.modes[0]
    c1, c2 = inner_product(rem.position, Y), inner_product(rem.velocity, Y)
    assert c.a_plus[0] == pytest.approx(zp * c1 + c2, rel=1e-12)
    assert c.a_minus[0] == pytest.approx(zm * c1 + c2, rel=1e-12)
    assert c.s_damped == pytest.approx(c.a_minus[0] ** 2 + c.b**2, rel=1e-14)
    assert c.a_unstable == pytest.approx(c.a_plus[0] ** 2, rel=1e-14)
    assert c.f_func == pytest.approx(c.e_func + c.s_damped / c.mu, rel=1e-14)


def test_outside_window(ground2048, spec2048):
    q = ground2048
    s = PairState(1.2 * q.profile, q.grid.zeros())
    with pytest.raises(ModulationWindowError, match="outside modulation window") as info:
        decompose(s, q, spec2048, window=0.5)
    assert info.value.distance == pytest.approx(0.2 * math.sqrt(h1_norm_sq(q.profile)), rel=1e-12)


def test_energy_functional_zero_remainder(ground2048):
    g = ground2048.grid
    assert energy_functional(PairState(g.zeros(), g.zeros()), ground2048.profile, 0.25, 0.5, 3.0) == 0.0


def test_energy_functional_mu_constraint(ground2048):
    g = ground2048.grid
    z = PairState(g.zeros(), g.zeros())
    for mu in (0.0, 0.5, 0.7):
        with pytest.raises(ValueError, match="mu must satisfy"):
            energy_functional(z, ground2048.profile, mu, 0.5, 3.0)


def test_energy_functional_stable_mode_quadratic_limit(ground2048, spec2048):
    """E(eps Y_1, 0)/eps^2 tends to <L Y, Y> + (mu^2 - rho mu) ... extrapolated in eps."""
    q, sp = ground2048, spec2048
    g = q.grid
    Y = sp.modes[0]
    mu, alpha = 0.25, 0.5
    rho = 2 * alpha - mu
    eps = np.array([4e-2, 2e-2, 1e-2, 5e-3])
    ratios = np.array([energy_functional(PairState(e * Y, g.zeros()), q.profile, mu, alpha, 3.0) / e**2
                       for e in eps])
    # leading error is linear in eps: one Richardson step
    rich = 2 * ratios[1:] - ratios[:-1]
    limit = -sp.lambda_sq[0] - rho * mu + mu**2
    assert abs(rich[-1] - limit) <= 1e-4 * abs(limit)
    assert abs(rich[-1] - limit) < abs(ratios[-1] - limit)


def test_energy_functional_upper_bound_random(ground2048, spec2048):
    q, sp = ground2048, spec2048
    rng = make_rng(3)
    mu = default_mu(0.5)
    for amp in (1e-4, 1e-3, 1e-2):
        for _ in range(20):
            rem = random_perturbation(q.grid, sp, rng, amp)
            assert energy_functional(rem, q.profile, mu, 0.5, 3.0) <= pair_norm_sq(rem) / mu


@settings(max_examples=100, deadline=None)
@given(Q=st.floats(-5, 5), phi=st.floats(-2, 2), p=st.floats(2.01, 4.9))
def test_potential_remainder(Q, phi, p):
    got = potential_remainder(np.array([Q]), np.array([phi]), p)[0]
    F = lambda u: abs(u) ** (p + 1) / (p + 1)
    ref = F(Q + phi) - F(Q) - math.copysign(abs(Q) ** p, Q) * phi
    scale = F(Q) + F(Q + phi) + abs(Q) ** p * abs(phi) + 1e-300
    assert abs(got - ref) <= 1e-12 * scale
    assert got >= -1e-12 * scale  # F is convex


def test_potential_remainder_small_increment():
    got = potential_remainder(np.array([2.0]), np.array([1e-9]), 3.0)[0]
    assert got == pytest.approx(0.5 * 3 * 4.0 * 1e-18, rel=1e-8)


# --- energy expansion ---------------------------------------------------------------


def test_expansion_zero_perturbation(ground2048):
    rep = energy_expansion_check(ground2048)
    assert np.all(rep.delta_energy == 0.0)


def test_expansion_along_unstable_mode(ground2048, spec2048):
    rep = energy_expansion_check(ground2048, psi=spec2048.modes[0])
    target = -spec2048.lambda_sq[0] / 2
    assert rep.quadratic_predicted == pytest.approx(target, rel=1e-8)
    assert rep.quadratic_extrapolated == pytest.approx(target, rel=1e-6)


def test_expansion_kinetic(ground2048, spec2048):
    rep = energy_expansion_check(ground2048, chi=spec2048.modes[0])
    assert rep.quadratic_extrapolated == pytest.approx(0.5, rel=1e-9)
    assert rep.quadratic_predicted == pytest.approx(0.5, rel=1e-12)


# --- traces and mode residuals --------------------------------------------------------


def test_mode_residual_linear_run(ground_p22, spec_p22):
    q, sp = ground_p22, spec_p22
    Y, nu = sp.modes[0], float(sp.nu_minus[0])
    eps = 1e-6
    tr = evolve(PairState(q.profile + eps * Y, eps * nu * Y), EvolutionConfig(0.5, q.p, 1e-3, 2.0, sample_every=10),
                background=q.profile)
    res = mode_ode_residual(tr, q, sp)
    assert res.relative("-") <= 0.01


def test_mode_residual_stationary(ground2048, spec2048):
    q = ground2048
    tr = evolve(_at_rest(q), EvolutionConfig(0.5, 3.0, 1e-3, 0.2, sample_every=10), background=q.profile)
    res = mode_ode_residual(tr, q, spec2048)
    assert np.max(np.abs(res.res_plus)) <= 1e-10
    assert np.max(np.abs(res.res_minus)) <= 1e-10


def test_mode_residual_constant_stable_under_halving(ground2048, spec2048):
    Cs = []
    for amp in (1e-2, 5e-3):
        tr = evolve(_bump(ground2048, spec2048, amp), EvolutionConfig(0.5, 3.0, 1e-3, 1.0, sample_every=10),
                    background=ground2048.profile)
        res = mode_ode_residual(tr, ground2048, spec2048)
        assert np.all(np.abs(np.vstack([res.res_plus, res.res_minus])) <= res.C * res.envelope * (1 + 1e-12))
        Cs.append(res.C)
    assert 0.5 < Cs[0] / Cs[1] < 2.0


def test_mode_residual_needs_three_uniform_snapshots(ground2048, spec2048):
    q = ground2048
    tr = evolve(_at_rest(q), EvolutionConfig(0.5, 3.0, 1e-3, 0.01, sample_every=10), background=q.profile)
    with pytest.raises(ValueError, match="at least 3"):
        mode_ode_residual(tr, q, spec2048)
    tr = evolve(_at_rest(q), EvolutionConfig(0.5, 3.0, 1e-3, 0.05, sample_every=10), background=q.profile)
    tr.times = np.array([0.0, 0.01, 0.03, 0.04, 0.045, 0.05])
    with pytest.raises(ValueError, match="uniform"):
        mode_ode_residual(tr, q, spec2048)


def test_trace_pointwise_bounds_and_csv(tmp_path, ground2048, spec2048):
    q, sp = ground2048, spec2048
    tr = evolve(_bump(q, sp, 1e-3), EvolutionConfig(0.5, 3.0, 1e-3, 2.0, sample_every=50), background=q.profile)
    mt = trace(tr, q, sp)
    for c in mt.coords:
        assert c.f_func + c.a_unstable / c.mu >= 0
        assert c.e_func <= pair_norm_sq(c.remainder) / c.mu
    path = write_trace_csv(tmp_path / "m.csv", mt.rows(), sp.K)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["t", "a", "b", "a_plus_1", "a_minus_1", "n_total", "s_damped", "a_unstable",
                       "e_func", "f_func", "r1", "r2", "h1_error"]
    assert len(rows) == len(tr) + 1
    assert float(rows[-1][5]) == mt.coords[-1].n_total
    assert float(rows[-1][-1]) == mt.h1_error[-1]


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-1e-2, 1e-2), b=st.floats(-1e-2, 1e-2), ap=st.floats(-1e-2, 1e-2), am=st.floats(-1e-2, 1e-2))
def test_lyapunov_quantities_match_reduced_model(ground2048, spec2048, a, b, ap, am):
    q, sp = ground2048, spec2048
    g = q.grid
    Y = sp.modes[0].values
    phi = np.exp(-(((g.r - 3.0) / 1.0) ** 2))
    phi -= g.dot(phi, Y) * Y
    phi = RadialField(g, phi / math.sqrt(g.dot(phi, phi)))
    s = compose(q, sp, [ap], [am], phi=phi, a=a, b=b)
    c = decompose(s, q, sp, phi=phi)
    params = ReducedParams(0.5, tuple(sp.nu_plus), tuple(sp.nu_minus))
    ref = lyapunov(ReducedState(c.a, c.b, a_minus=c.a_minus, a_plus=c.a_plus), params)
    assert c.r1 == ref["r1"] and c.r2 == ref["r2"]
    assert c.s_damped == ref["s_damped"] and c.a_unstable == ref["a_unstable"]


# --- coercivity ---------------------------------------------------------------------------


def test_quadratic_bounds_positive_and_converged(ground2048, spec2048, ground4096, spec4096):
    lo, hi = quadratic_sandwich_bounds(ground2048, spec2048)
    lo4, hi4 = quadratic_sandwich_bounds(ground4096, spec4096)
    assert 0 < lo < 1 < hi
    assert lo4 == pytest.approx(lo, rel=1e-2)
    assert hi4 == pytest.approx(hi, rel=1e-2)


def test_small_amplitude_ratios_inside_quadratic_bounds(ground2048, spec2048):
    lo, hi = quadratic_sandwich_bounds(ground2048, spec2048)
    rng = make_rng(11)
    rems = [random_perturbation(ground2048.grid, spec2048, rng, 1e-5) for _ in range(50)]
    r = coercivity_ratios(ground2048, spec2048, rems)
    assert np.all(r >= lo * (1 - 1e-3)) and np.all(r <= hi * (1 + 1e-3))


def test_coercivity_suite_small(ground2048, spec2048):
    rep = coercivity_suite(ground2048, spec2048, make_rng(20240601), n_samples=200)
    assert rep.passed and rep.upper_bound_ok
    assert rep.tight_constant <= rep.C0
    d = rep.to_json()
    assert d["samples"] == 200 and d["passed"] is True


def test_mode_amplitudes_without_modes(ground2048, spec2048):
    from dataclasses import replace

    empty = replace(spec2048, lambda_sq=np.zeros(0), modes=[])
    ap, am = mode_amplitudes(_at_rest(ground2048), empty)
    assert ap.size == am.size == 0
