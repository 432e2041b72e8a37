from types import SimpleNamespace

import numpy as np
import pytest

from dkglab.bound_states import (
    BoundStateError,
    bracket_origin_value,
    count_nodes,
    find_bound_state,
    pairing_identity_check,
    refine_on_grid,
    shoot,
    tail_slope,
)
from dkglab.grid import RadialGrid
from oracles import shooting_origin_value


@pytest.fixture(scope="module")
def oracle_ground():
    return shooting_origin_value(3.0, 3, 0)


@pytest.fixture(scope="module")
def oracle_excited():
    return shooting_origin_value(3.0, 3, 1)


def test_shoot_zero_is_trivial():
    rec = shoot(3.0, 3, 0.0, 40.0)
    assert np.all(rec.q == 0.0)
    assert rec.nodes == 0
    assert rec.status == "decay"


def test_shoot_rejects_negative_start():
    with pytest.raises(ValueError):
        shoot(3.0, 3, -1.0, 40.0)


# Focusing double well: friction makes an undershoot fall back into the positive
# well without reaching zero, while an overshoot crosses into the negative well.


def test_shoot_below_threshold_stays_positive(oracle_ground):
    rec = shoot(3.0, 3, oracle_ground * (1 - 1e-3), 40.0)
    assert rec.nodes == 0
    assert np.all(rec.q[:-1] > 0)
    assert rec.escape == 1
    assert rec.turned_back


def test_shoot_above_threshold_crosses_and_escapes_negative(oracle_ground):
    rec = shoot(3.0, 3, oracle_ground * (1 + 1e-3), 40.0)
    assert rec.nodes == 1
    assert rec.escape == -1


def test_shoot_classification_brackets_oracle(oracle_ground):
    lo, hi, _ = bracket_origin_value(3.0, 3, 0, 40.0)
    assert lo <= oracle_ground * (1 + 1e-9) and hi >= oracle_ground * (1 - 1e-9)


def test_ground_state_matches_oracle(ground4096, oracle_ground):
    q = ground4096
    assert q.nodes == 0
    assert q.origin_value == pytest.approx(oracle_ground, rel=1e-6)
    assert np.all(q.profile.values > 0)


def test_excited_state_matches_oracle(excited2048, ground2048, oracle_excited):
    q = excited2048
    assert q.nodes == 1
    assert count_nodes(q.profile.values) == 1
    assert q.origin_value == pytest.approx(oracle_excited, rel=1e-6)
    assert q.origin_value > ground2048.origin_value


@pytest.mark.parametrize("which", ["ground2048", "excited2048"])
def test_bound_state_invariants(which, request):
    q = request.getfixturevalue(which)
    top = float(np.max(np.abs(q.profile.values)))
    assert q.residual_norm <= 1e-8 * (1 + top)
    assert -1.3 <= tail_slope(q) <= -0.7
    assert pairing_identity_check(q) <= 1e-6


def test_pairing_zero_profile_guard():
    g = RadialGrid(3, 40.0, 64)
    assert pairing_identity_check(SimpleNamespace(profile=g.zeros(), p=3.0)) == 0.0


def test_action_ordering(ground2048, excited2048):
    assert ground2048.action < excited2048.action


def test_grid_origin_value_second_order(oracle_ground):
    errs = []
    for m in (1024, 2048):
        q = find_bound_state(3.0, 3, 0, RadialGrid(3, 40.0, m))
        errs.append(q.grid_origin_value - oracle_ground)
    dr = 40.0 / 2049
    assert abs(errs[1]) <= 20 * dr**2
    assert 3.5 < errs[0] / errs[1] < 4.5


def test_origin_value_continuous_in_p():
    # q0(0) grows with p on (2, 5); midpoints must interleave the coarse sweep
    ps = np.linspace(2.2, 4.6, 13)
    u0 = np.array([0.5 * sum(bracket_origin_value(p, 3, 0, 25.0)[:2]) for p in ps])
    assert np.all(np.diff(u0) > 0)
    coarse, mid = u0[::2], u0[1::2]
    assert np.all((coarse[:-1] < mid) & (mid < coarse[1:]))
    # no jumps: consecutive increments change by a bounded factor
    inc = np.diff(coarse)
    assert np.all(inc[1:] / inc[:-1] < 4.0)


def test_bracket_failure_message():
    with pytest.raises(BoundStateError, match="no bound state bracket"):
        bracket_origin_value(3.0, 3, 0, 40.0, u0_max=2.0)


def test_refinement_failure_message():
    g = RadialGrid(3, 40.0, 256)
    with pytest.raises(BoundStateError, match="refinement failed"):
        refine_on_grid(g, 3.0 * np.exp(-g.r), 3.0, max_iter=1)


def test_invalid_requests():
    g = RadialGrid(3, 40.0, 64)
    with pytest.raises(ValueError):
        find_bound_state(5.0, 3, 0, g)  # energy critical
    with pytest.raises(ValueError):
        find_bound_state(3.0, 3, -1, g)
    with pytest.raises(ValueError):
        find_bound_state(3.0, 2, 0, g)  # grid dimension mismatch


def test_non_integer_exponent_profile():
    q = find_bound_state(2.5, 3, 0, RadialGrid(3, 40.0, 1024))
    assert q.residual_norm <= 1e-8 * (1 + q.origin_value)
    assert q.origin_value == pytest.approx(shooting_origin_value(2.5, 3, 0, h=1e-4, width=1e-10), rel=1e-6)
