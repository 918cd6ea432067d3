import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relaynet.analysis import (envelope_bound, envelope_f, fixed_point_iterate, hd_derived,
                               hd_rate, hd_stability_predicate, hd_upper_sequence,
                               hd_variance_recursion, info_rate_halfduplex, sqrt_recursion,
                               timeshare_upper_sequence)
from relaynet.bounds import halfduplex_objective, halfduplex_sufficient, twohop_rates
from relaynet.model import HalfDuplex, TwoHop

seeds = st.integers(0, 2 ** 32 - 1)
EXAMPLE = HalfDuplex(10, 10, 1, [1], [1], 1, beta=0.5, relay_powers=[10])
FIXED = (1 + math.sqrt(3)) ** 2


def random_hd(rng, min_ps=0.5):
    L = int(rng.integers(0, 4))
    topo = HalfDuplex(rng.uniform(min_ps, 20), rng.uniform(0, 20), rng.uniform(0, 2),
                      rng.uniform(0, 2, L), rng.uniform(0.1, 5, L), rng.uniform(0.1, 5),
                      beta=rng.uniform(0.05, 1))
    P = rng.dirichlet(np.ones(L)) * topo.relay_budget if L else np.zeros(0)
    return topo, P


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_derived_constants(seed):
    topo, P = random_hd(np.random.default_rng(seed))
    d = hd_derived(topo, topo.beta, P)
    assert 0 < d.k <= 1
    assert 0 < d.f_inf <= 1
    assert d.m_consistent
    assert d.f_inf == pytest.approx(d.N_tilde / (d.M_tilde + d.N_tilde), rel=1e-14)


def test_example_constants():
    d = hd_derived(EXAMPLE, 0.5, [10])
    assert d.k == pytest.approx(1 / 11)
    assert d.k2 == pytest.approx(math.sqrt(10))
    assert d.N_tilde == pytest.approx(20 / 11 + 1)
    assert d.M_tilde == pytest.approx((math.sqrt(10) + math.sqrt(10 / 11) * math.sqrt(20 / 11)) ** 2)


def test_recursion_dead_plant():
    for form in ("lmmse", "paper"):
        a = hd_variance_recursion(EXAMPLE, 0.5, [10], 0.0, 0.7, 3.0, 50, form)
        np.testing.assert_allclose(a[1:], 0.7, rtol=0, atol=0)


def test_phase1_fixed_point():
    d = hd_derived(EXAMPLE, 0.5, [10])
    res = fixed_point_iterate(lambda a: 1.5 ** 2 * d.k * a + 1, 1.0)
    assert res.converged and res.value == pytest.approx(1 / (1 - 2.25 / 11), abs=1e-10)
    assert res.value == pytest.approx(1.2571, abs=1e-4)


def test_initialization_step():
    a = hd_variance_recursion(EXAMPLE, 0.5, [10], 1.5, 1.0, 2.0, 2)
    assert a[1] == pytest.approx(1.5 ** 2 * 1 * 2.0 / 10 + 1)
    a = hd_variance_recursion(TwoHop.symmetric(2, 10, 5), 1, [5, 5], 1.5, 1.0, 2.0, 2)
    assert a[1] == pytest.approx(1.5 ** 2 * 2.0 + 1)


def test_recursion_limit_cycle_example():
    # frozen values of the two phase-2 forms at the example parameters
    lm = hd_variance_recursion(EXAMPLE, 0.5, [10], 1.5, 1.0, 1.0, 2000, "lmmse")
    pp = hd_variance_recursion(EXAMPLE, 0.5, [10], 1.5, 1.0, 1.0, 2000, "paper")
    # two-phase limit cycle: (after phase 2, after phase 1)
    np.testing.assert_allclose(lm[-2:], [1.6577706, 1.33908944], rtol=1e-7)
    np.testing.assert_allclose(pp[-2:], [1.57388175, 1.32193036], rtol=1e-7)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_forms_agree_without_plant_noise(seed):
    rng = np.random.default_rng(seed)
    topo, P = random_hd(rng)
    lam = rng.uniform(0.5, 3)
    a = hd_variance_recursion(topo, topo.beta, P, lam, 0.0, 1.0, 40, "lmmse")
    b = hd_variance_recursion(topo, topo.beta, P, lam, 0.0, 1.0, 40, "paper")
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-300)


def test_divergence_above_predicate():
    d = hd_derived(EXAMPLE, 0.5, [10])
    lam = 1.05 / (d.k * d.f_inf) ** 0.25
    assert not hd_stability_predicate(d, lam)
    a = hd_variance_recursion(EXAMPLE, 0.5, [10], lam, 1.0, 1.0, 4000, "paper")
    odd = a[1::2]
    assert odd[-1] > 1e6 and np.all(np.diff(odd[5:]) > 0)


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_variance_floor(seed):
    rng = np.random.default_rng(seed)
    topo, P = random_hd(rng)
    nw = rng.uniform(0.1, 3)
    for form in ("lmmse", "paper"):
        a = hd_variance_recursion(topo, topo.beta, P, rng.uniform(0, 3), nw, 1.0, 60, form)
        assert np.all(a[1:] >= nw * (1 - 1e-12))


def test_predicate_strict_and_zero_power():
    d = hd_derived(EXAMPLE, 0.5, [10])
    unit = dataclasses.replace(d, k=1.0, f_inf=1.0)
    assert not hd_stability_predicate(unit, 1.0)
    dead = hd_derived(HalfDuplex(0, 10, 1, [1], [1], 1, beta=0.5, relay_powers=[10]), 0.5, [10])
    assert not hd_stability_predicate(dead, 1.01)


def test_predicate_example_forms_agree():
    d = hd_derived(EXAMPLE, 0.5, [10])
    assert hd_stability_predicate(d, 1.5) == (math.log2(1.5) < hd_rate(d))
    assert hd_stability_predicate(d, 1.5)


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_predicate_equivalence(seed):
    rng = np.random.default_rng(seed)
    topo, P = random_hd(rng)
    d = hd_derived(topo, topo.beta, P)
    rate = info_rate_halfduplex(topo, topo.beta, P)
    lam = 2 ** (rate * rng.uniform(0.5, 1.5))
    if abs(math.log2(lam) - rate) < 1e-9:
        return
    assert hd_stability_predicate(d, lam) == (math.log2(lam) < rate)


def test_envelope_trivial_b():
    fit = envelope_bound(2.0, 0.0, 1.0, 3.0, 0.5)
    assert fit.m == 0
    assert envelope_f(2.0, 0.0, 1.0, 3.0, 7.0) == pytest.approx(fit.f_inf, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_envelope_grid_verification(seed):
    rng = np.random.default_rng(seed)
    a, b, c, d = rng.uniform(0, 5, 4) * (rng.uniform(size=4) > 0.1)
    x0 = rng.uniform(0.01, 5)
    fit = envelope_bound(a, b, c, d, x0)
    x = np.geomspace(x0, x0 * 1e8, 10_000)
    f = envelope_f(a, b, c, d, x)
    assert np.all(f <= fit.bound(x) + 1e-12)
    if d > 0 or a == 0:
        assert abs(envelope_f(a, b, c, d, 1e9) - fit.f_inf) < 1e-6


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_upper_sequence_majorizes_envelope_recursion(seed):
    rng = np.random.default_rng(seed)
    topo, P = random_hd(rng)
    d = hd_derived(topo, topo.beta, P)
    nw = rng.uniform(0.1, 3)
    lam = rng.uniform(0.3, 1.5) / (d.k * d.f_inf) ** 0.25
    fit = envelope_bound(d.N_tilde, nw * d.k1 / lam ** 2, d.k2, d.k1 * d.k, nw)
    a = hd_variance_recursion(topo, topo.beta, P, lam, nw, rng.uniform(0.1, 5), 80, "paper")
    odd = a[1::2]
    up = hd_upper_sequence(d, fit, lam, nw, odd[0], odd.size - 1)
    ok = np.isfinite(up)
    assert np.all(odd[ok] <= up[ok] * (1 + 1e-12))


def test_info_rate_example():
    assert info_rate_halfduplex(EXAMPLE, 0.5, [10]) == pytest.approx(1.615765046, abs=1e-9)
    zero = HalfDuplex(0, 10, 1, [1], [1], 1, beta=0.5)
    assert info_rate_halfduplex(zero, 0.5, [10]) == 0


def test_info_rate_twohop():
    topo = TwoHop.symmetric(10, 10, 5)
    assert info_rate_halfduplex(topo, 1, topo.relay_powers) == pytest.approx(
        twohop_rates(10, 5, 1, 1, 1, 10)[1], abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_info_rate_equals_objective(seed):
    topo, P = random_hd(np.random.default_rng(seed))
    obj = halfduplex_objective(topo, topo.beta, P) / 4
    assert abs(info_rate_halfduplex(topo, topo.beta, P) - obj) < 1e-12


def test_fixed_point_examples():
    T = lambda x: 0.5 * x + math.sqrt(x) + 1
    up = fixed_point_iterate(T, 0.0, record=True)
    down = fixed_point_iterate(T, 100.0, record=True)
    for res, sign in ((up, 1), (down, -1)):
        assert res.converged and res.value == pytest.approx(FIXED, abs=1e-9)
        assert np.all(sign * np.diff(res.trajectory) >= 0)
    assert up.direction == "increasing" and down.direction == "decreasing"
    same = fixed_point_iterate(lambda x: x, 3.0)
    assert same.converged and same.value == 3.0 and same.iterations == 1
    div = fixed_point_iterate(lambda x: 2 * x + 1, 1.0)
    assert not div.converged


def test_fixed_point_cap():
    res = fixed_point_iterate(lambda x: x + 1, 0.0, max_iter=50)
    assert not res.converged and res.iterations == 50


def test_sqrt_recursion_examples():
    r = sqrt_recursion(0.5, 1, 1, 0.0, 200)
    assert r.converges and r.limit == pytest.approx(FIXED) and r.trajectory[-1] == pytest.approx(FIXED)
    assert not sqrt_recursion(1.0, 1, 1, 1.0, 50).converges
    g = sqrt_recursion(0.25, 0, 3, 1.0, 200)
    assert g.limit == pytest.approx(4.0) and g.trajectory[-1] == pytest.approx(4.0)


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_sqrt_recursion_verdict(seed):
    rng = np.random.default_rng(seed)
    k1 = rng.uniform(0, 2)
    k2, k3, a0 = rng.uniform(0.01, 3, 3)
    r = sqrt_recursion(k1, k2, k3, a0, 3000)
    assert r.converges == (k1 < 1)
    if k1 < 0.9:
        assert r.trajectory[-1] == pytest.approx(r.limit, rel=1e-8)
    elif k1 > 1.01:
        assert r.trajectory[-1] > 1e6


def test_timeshare_majorant_scalar_case():
    # with the second mode silent the majorant reduces to the first-mode recursion
    seq = timeshare_upper_sequence(2.0, -2.0, 3.0, 1.0, 0.0, 5.0, np.zeros(6))
    c = 2.0 ** -6
    expect = [5.0]
    for _ in range(5):
        expect.append(16 * c * expect[-1] + 5.0)
    np.testing.assert_allclose(seq, expect)
