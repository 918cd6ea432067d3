import math

import numpy as np
import pytest

from relaynet.analysis import hd_variance_recursion, timeshare_upper_sequence
from relaynet.bounds import cascade_sufficient, parallel_necessary, parallel_sufficient
from relaynet.mc import run_trials
from relaynet.model import Cascade, HalfDuplex, Parallel, PlantModel, TimeShare, TwoHop
from relaynet.schemes import (SchemePairingError, cascade_rho2, make_scheme, scheme_threshold,
                              timeshare_schedule, trace_rows)

EXAMPLE = HalfDuplex(10, 10, 1, [1], [1], 1, beta=0.5, relay_powers=[10])
TWO = HalfDuplex(10, 10, 0.8, [1, 0.5], [1, 2], 1, beta=0.6, relay_powers=[4, 6])


def run(scheme, steps, trials, seed=0, x0=None, zero=False):
    """Drive a scheme directly and return the list of states."""
    rng = np.random.default_rng(seed)
    n = scheme.plant.n
    if x0 is None:
        x0 = rng.standard_normal((trials, n)) if n > 1 else rng.standard_normal(trials)
    st = scheme.initial(x0)
    out = []
    for _ in range(steps):
        z = np.zeros((trials, scheme.channels)) if zero else rng.standard_normal((trials, scheme.channels))
        st = scheme.step(st, z)
        out.append(st)
    return out


# ------------------------------------------------------------ half-duplex

def test_sk_zero_noise_matches_recursion():
    sch = make_scheme("sk_halfduplex", PlantModel.scalar(1.5, 1.0, 1.0), EXAMPLE)
    states = run(sch, 1000, 1, x0=np.ones(1), zero=True)
    alpha = np.array([s.alpha for s in states])
    ref = hd_variance_recursion(EXAMPLE, 0.5, [10], 1.5, 1.0, 1.0, 1000, "lmmse")[1:]
    assert np.max(np.abs(alpha - ref)) < 1e-12


def test_sk_phase1_deterministic_residual():
    sch = make_scheme("sk_halfduplex", PlantModel.scalar(1.5, 0.0, 1.0), EXAMPLE)
    states = run(sch, 2, 1, x0=np.array([2.0]), zero=True)
    x1 = states[0].x
    # with no noise the phase-1 estimate leaves lam * x * Nd/(2h^2 beta Ps + Nd)
    assert states[1].x[0] == pytest.approx(1.5 * x1[0] / 11, rel=1e-14)


def test_sk_dead_plant():
    sch = make_scheme("sk_halfduplex", PlantModel.scalar(0.0, 1.0, 1.0), EXAMPLE)
    rng = np.random.default_rng(3)
    st = sch.initial(rng.standard_normal(4))
    for _ in range(6):
        z = rng.standard_normal((4, sch.channels))
        st = sch.step(st, z)
        np.testing.assert_array_equal(st.x, z[:, 0])
        assert st.alpha == 1.0


def test_sk_phases_alternate():
    sch = make_scheme("sk_halfduplex", PlantModel.scalar(1.5), EXAMPLE)
    phases = [s.phase for s in run(sch, 7, 2)]
    assert phases == ["phase1", "phase2", "phase1", "phase2", "phase1", "phase2", "phase1"]


def test_sk_innovation_identity():
    sch = make_scheme("sk_halfduplex", PlantModel.scalar(1.5), TWO)
    rng = np.random.default_rng(5)
    st = sch.initial(rng.standard_normal(8))
    for t in range(6):
        z = rng.standard_normal((8, sch.channels))
        nxt = sch.step(st, z)
        if nxt.innovation is not None:
            r = TWO.direct_gain * nxt.sent + nxt.relay_sent @ TWO.relay_gains + z[:, 1]
            np.testing.assert_allclose(nxt.innovation.innovation, r - nxt.innovation.predicted,
                                       rtol=0, atol=1e-13)
        st = nxt


def _power(values):
    return float(np.mean(np.asarray(values) ** 2, axis=0).mean()) if np.ndim(values) == 1 else \
        np.mean(np.asarray(values) ** 2, axis=0)


def test_sk_power_contract():
    R = 100_000
    sch = make_scheme("sk_halfduplex", PlantModel.scalar(1.5), TWO)
    states = run(sch, 5, R, seed=11)
    assert _power(states[0].sent) == pytest.approx(10, rel=0.02)             # Ps
    for s in (states[1], states[3]):
        assert _power(s.sent) == pytest.approx(2 * 0.6 * 10, rel=0.02)        # 2 beta Ps
    for s in (states[2], states[4]):
        assert _power(s.sent) == pytest.approx(2 * 0.4 * 10, rel=0.02)        # 2(1-beta) Ps
        np.testing.assert_allclose(_power(s.relay_sent), [8, 12], rtol=0.02)  # 2 Pr_i


def test_sk_innovation_whiteness():
    R, steps = 25_000, 40
    sch = make_scheme("sk_halfduplex", PlantModel.scalar(1.5), TWO)
    innov = [s.innovation.innovation for s in run(sch, steps, R, seed=2) if s.innovation is not None]
    I = np.array(innov[2:])
    I /= I.std(axis=1, keepdims=True)
    lag1 = np.mean(I[1:] * I[:-1])
    assert abs(lag1) < 0.02


# ---------------------------------------------------------------- cascade

def test_cascade_power_contract():
    R = 100_000
    topo = Cascade(10, 10, [1, 2, 1])
    sch = make_scheme("linear_cascade", PlantModel.scalar(1.2), topo)
    P = sch.params["powers"]
    states = run(sch, 3, R, seed=4)
    assert _power(states[0].sent) == pytest.approx(3 * 10, rel=0.02)
    for j in (1, 2):
        assert _power(states[j].sent) == pytest.approx(3 * P[j - 1], rel=0.02)
    assert np.all(states[0].u == 0) and np.all(states[1].u == 0)


def test_cascade_zero_relay_power():
    topo = Cascade(10, 0, [1, 1])
    sch = make_scheme("linear_cascade", PlantModel.scalar(1.3, 0.5, 2.0), topo, powers=[0.0])
    states = run(sch, 2, 3)
    assert states[-1].alpha == pytest.approx(1.3 ** 4 * 2.0 + 0.5 * (1 + 1.3 ** 2))


def test_cascade_point_to_point_threshold():
    sch = make_scheme("linear_cascade", PlantModel.scalar(1.5), Cascade(10, 0, [1]))
    assert scheme_threshold(sch) == pytest.approx(0.5 * math.log2(11))


def test_cascade_scheme_beats_printed_sufficient():
    topo = Cascade(10, 10, [1, 1])
    sch = make_scheme("linear_cascade", PlantModel.scalar(1.5), topo)
    rho2 = cascade_rho2(topo, sch.params["powers"])
    assert rho2 == pytest.approx(20 / 21 * 20 / 21)
    assert scheme_threshold(sch) >= cascade_sufficient(topo)[0]


# --------------------------------------------------------------- parallel

def test_parallel_power_contract():
    R = 100_000
    topo = Parallel(10, 10, [1, 2], [1, 0.5])
    sch = make_scheme("linear_parallel", PlantModel.scalar(1.2), topo)
    states = run(sch, 2, R, seed=8)
    assert _power(states[0].sent) == pytest.approx(20, rel=0.02)
    np.testing.assert_allclose(_power(states[1].relay_sent), 2 * sch.params["powers"], rtol=0.02)


def test_parallel_threshold_matches_bounds():
    topo = Parallel(10, 10, [1, 1], [1, 1], relay_powers=[5, 5])
    sch = make_scheme("linear_parallel", PlantModel.scalar(1.5), topo)
    assert scheme_threshold(sch) == pytest.approx(parallel_sufficient(topo)[0], abs=1e-14)
    tight = Parallel(10, 10, [1, 2], [0, 0])
    sch = make_scheme("linear_parallel", PlantModel.scalar(1.5), tight)
    assert scheme_threshold(sch) == pytest.approx(parallel_necessary(tight), abs=1e-12)


# -------------------------------------------------------------- timeshare

def test_timeshare_schedule_fractions():
    s = timeshare_schedule(PlantModel(np.diag([2.0, 4.0]), np.eye(2), 1, 1))
    assert np.bincount(s).tolist() == [4, 8]
    s = timeshare_schedule(PlantModel(np.diag([2.0, 2.0]), np.eye(2), 1, 1))
    assert s.tolist() == [0, 1] * 6


def test_timeshare_pairing_errors():
    full = PlantModel([[2.0, 0.0], [1.0, 2.0]], np.eye(2), 1, 1)
    with pytest.raises(SchemePairingError):
        make_scheme("timeshare", full, TimeShare(3))
    thin = PlantModel([[2.0, 1.0], [0.0, 2.0]], [[0.0], [1.0]], 1, 1)
    with pytest.raises(SchemePairingError):
        make_scheme("timeshare", thin, TimeShare(3))
    with pytest.raises(SchemePairingError):
        make_scheme("timeshare", PlantModel.scalar(2.0), Cascade(1, 1, [1]))


def test_scalar_scheme_pairing_errors():
    with pytest.raises(SchemePairingError):
        make_scheme("sk_halfduplex", PlantModel.scalar(2.0), Cascade(1, 1, [1]))
    with pytest.raises(SchemePairingError):
        make_scheme("linear_cascade", PlantModel(np.diag([2.0, 2.0]), np.eye(2), 1, 1), Cascade(1, 1, [1]))
    with pytest.raises(SchemePairingError):
        make_scheme("magic", PlantModel.scalar(2.0), Cascade(1, 1, [1]))


def test_timeshare_second_mode_recursion():
    lam1, lam2, C = 1.5, 1.8, 3.0
    plant = PlantModel([[lam1, 1.0], [0.0, lam2]], np.eye(2), 1.0, 1.0)
    sch = make_scheme("timeshare", plant, TimeShare(C), mode="frame")
    covs = [s.cov[1, 1] for s in run(sch, 10, 2, zero=True)]
    v = 1.0
    for got in covs:
        v = lam2 ** 4 * 2 ** (-2 * C) * v + (lam2 ** 2 + 1)
        assert got == pytest.approx(v, rel=1e-12)


def test_timeshare_cauchy_schwarz_majorant():
    lam1, lam2, C = 1.6, 1.7, 2.5
    plant = PlantModel([[lam1, 1.0], [0.0, lam2]], np.eye(2), 1.0, 1.0)
    sch = make_scheme("timeshare", plant, TimeShare(C), mode="frame")
    R = 40_000
    states = run(sch, 30, R, seed=9)
    x0 = np.random.default_rng(9).standard_normal((R, 2))
    e1 = np.r_[np.mean(x0[:, 0] ** 2), [np.mean(s.x[:, 0] ** 2) for s in states]]
    e2 = np.r_[np.mean(x0[:, 1] ** 2), [np.mean(s.x[:, 1] ** 2) for s in states]]
    se = np.r_[0, [np.std(s.x[:, 0] ** 2) / math.sqrt(R) for s in states]]
    up = timeshare_upper_sequence(lam1, lam2, C, 1.0, 1.0, e1[0], e2)
    assert np.all(e1 <= up + 4 * se)
    # the analytic covariance obeys the same bound exactly
    a1 = np.r_[1.0, [s.cov[0, 0] for s in states]]
    a2 = np.r_[1.0, [s.cov[1, 1] for s in states]]
    assert np.all(a1 <= timeshare_upper_sequence(lam1, lam2, C, 1.0, 1.0, 1.0, a2) * (1 + 1e-12))


# ----------------------------------------------- noisy moments vs analytic

CASES = {
    "sk": ("sk_halfduplex", PlantModel.scalar(1.5), EXAMPLE, {}),
    "sk_two_relays": ("sk_halfduplex", PlantModel.scalar(1.6), TWO, {}),
    "cascade": ("linear_cascade", PlantModel.scalar(1.3), Cascade(10, 10, [1, 1]), {}),
    "parallel": ("linear_parallel", PlantModel.scalar(1.4), Parallel(10, 10, [1, 1], [1, 1]), {}),
    "timeshare_slot": ("timeshare", PlantModel([[1.6, 1.0], [0.0, 1.7]], np.eye(2), 1.0, 1.0),
                       TimeShare(2.5), {}),
    "timeshare_frame": ("timeshare", PlantModel([[1.6, 1.0], [0.0, 1.7]], np.eye(2), 1.0, 1.0),
                        TimeShare(2.5), {"mode": "frame"}),
}


@pytest.mark.parametrize("case", sorted(CASES))
def test_noisy_moments_match_analytic(case):
    name, plant, topo, kw = CASES[case]
    sch = make_scheme(name, plant, topo, **kw)
    tr = run_trials(sch, horizon=600, trials=8000, seed=1, checkpoints=50)
    tail = slice(tr.moments.size // 2, None)
    emp, ana = tr.moments[tail].mean(), tr.analytic[tail].mean()
    assert tr.verdict == "Stable"
    assert emp == pytest.approx(ana, rel=0.05)


def test_trace_rows_deterministic():
    sch = make_scheme("sk_halfduplex", PlantModel.scalar(1.5), EXAMPLE)
    a = trace_rows(sch, 20, seed=4)
    assert a == trace_rows(sch, 20, seed=4)
    assert len(a) == 20 and len(a[0]) == 6
    assert [r[0] for r in a] == list(range(1, 21))
