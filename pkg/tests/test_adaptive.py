import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from csmaca.adaptive import (Constant, ControllerConfig, Harmonic, Reciprocal, ode_iterate,
                             parse_schedule, penalty, run_adaptive, update)
from csmaca.errors import ConfigError, DimensionError, DomainError
from csmaca.graph import complete, edgeless, path
from csmaca.optimizer import solve_rstar
from csmaca.runconfig import derive_seed
from csmaca.simulator import SimConfig
from csmaca.stationary import ProtocolParams

P1 = ProtocolParams(p=(1 / 16,), gamma=5, tau_prime=10, T0=15.0)


def test_penalty_branches():
    assert penalty(-0.3, 0.0, 3.5) == pytest.approx(0.3)
    assert penalty(1.7, 0.0, 3.5) == 0.0
    assert penalty(0.0, 0.0, 3.5) == 0.0 and penalty(3.5, 0.0, 3.5) == 0.0
    assert penalty(4.5, 0.0, 3.5) == pytest.approx(-1.0)
    np.testing.assert_allclose(penalty([-1.0, 1.0, 5.0], 0.0, 3.5), [1.0, 0.0, -1.5])
    with pytest.raises(DomainError):
        penalty(0.0, 1.0, 1.0)


def test_update_examples():
    cfg = ControllerConfig()
    r = np.array([1.0, 2.0])
    np.testing.assert_array_equal(update(r, [0.3, 0.2], [0.3, 0.2], 0.5, cfg), r)
    np.testing.assert_allclose(update(r, [1.0, 1.0], [0.0, 0.0], 0.1, cfg), r + 0.1)
    shifted = update(r, [0.3, 0.2], [0.3, 0.2], 0.5, ControllerConfig(delta=0.01))
    np.testing.assert_allclose(shifted, r + 0.005)
    with pytest.raises(DimensionError):
        update(r, [0.1], [0.1, 0.2], 0.5, cfg)
    with pytest.raises(DomainError):
        update(r, [0.1, 0.1], [0.1, 0.2], 1.5, cfg)


def test_schedules():
    assert parse_schedule("harmonic:0.23,2,100")(1) == pytest.approx(0.23 / 2.01)
    assert parse_schedule("reciprocal")(4) == 0.25
    assert parse_schedule("constant:0.1")(1000) == 0.1
    assert str(parse_schedule(str(Harmonic(1, 2, 3)))) == "harmonic:1.0,2.0,3.0"
    for bad in ("harmonic:1", "constant:1.5", "harmonic:3,1,1", "linear:1"):
        with pytest.raises(ConfigError):
            ControllerConfig(schedule=bad)
    assert isinstance(ControllerConfig(schedule="reciprocal").schedule, Reciprocal)
    assert isinstance(ControllerConfig(schedule="constant:0.5").schedule, Constant)


def test_controller_config_validation():
    with pytest.raises(ConfigError):
        ControllerConfig(r_min=1.0, r_max=0.0)
    with pytest.raises(ConfigError):
        ControllerConfig(delta=-0.1)
    assert ControllerConfig(r_min=0, r_max=3.5, lambda_bar=1.0).bounds == (-2.0, 5.5)
    np.testing.assert_array_equal(ControllerConfig(r0=(0.5,)).initial(3), [0.5] * 3)


@given(st.integers(1, 4), st.floats(-1, 1), st.floats(0.5, 4), st.floats(0.1, 1.0),
       st.integers(0, 2**32 - 1), st.sampled_from(["extreme", "uniform"]))
def test_iterates_stay_bounded_under_adversarial_rates(K, r_min, width, lam_bar, seed, kind):
    cfg = ControllerConfig(r_min=r_min, r_max=r_min + width, lambda_bar=lam_bar,
                           schedule=Constant(1.0))
    lo, hi = cfg.bounds
    rng = np.random.default_rng(seed)
    r = rng.uniform(r_min, r_min + width, K)
    for i in range(400):
        if kind == "extreme":
            lam = rng.choice([0.0, lam_bar], K)
            s = rng.choice([0.0, 1.0], K)
        else:
            lam = rng.uniform(0, lam_bar, K)
            s = rng.uniform(0, 1, K)
        r = update(r, lam, s, rng.uniform(1e-3, 1.0), cfg)
        assert np.all(r >= lo - 1e-12) and np.all(r <= hi + 1e-12)


def test_engines_are_bit_identical():
    g = path(3)
    P = ProtocolParams.uniform(3, 1 / 16)
    sc = SimConfig(g, P, r=np.zeros(3), lam=np.array([0.2, 0.15, 0.2]), M=200, seed=17,
                   n_slots=600 * 200, initial_queue=500)
    ctrl = ControllerConfig(delta=0.005)
    a = run_adaptive(sc, ctrl, burn_in_periods=100, chunk_periods=77)
    b = run_adaptive(sc, ctrl, burn_in_periods=100, engine="python")
    for f in ("r", "Tp", "lambda_emp", "s_emp", "queue"):
        np.testing.assert_array_equal(getattr(a.trajectory, f), getattr(b.trajectory, f))
    for f in ("served", "real_served", "arrived", "collisions", "successes", "occupancy"):
        np.testing.assert_array_equal(getattr(a.metrics, f), getattr(b.metrics, f))
    for x, y in zip(a.metrics.delays, b.metrics.delays):
        np.testing.assert_array_equal(x, y)
    assert a.metrics.n_slots == 500 * 200


def test_hidden_engines_are_bit_identical():
    sc = SimConfig(complete(2), ProtocolParams.uniform(2, 1 / 64), r=np.zeros(2),
                   lam=np.full(2, 0.1), M=500, seed=3, n_slots=400 * 500,
                   sensing_graph=edgeless(2))
    ctrl = ControllerConfig(r_max=2.59, r0=(1.0,), schedule=Harmonic(0.14, 2, 100))
    a = run_adaptive(sc, ctrl, chunk_periods=50)
    b = run_adaptive(sc, ctrl, engine="python")
    np.testing.assert_array_equal(a.trajectory.r, b.trajectory.r)


def _single_link_runs(n_seeds=10):
    out = []
    for i in range(n_seeds):
        sc = SimConfig(edgeless(1), P1, r=np.zeros(1), lam=np.array([6 / 11]), M=500,
                       seed=derive_seed(0, i), n_slots=10_000 * 500)
        res = run_adaptive(sc, ControllerConfig(r_min=0.0, r_max=3.5,
                                                schedule=Harmonic(1.0, 1.0, 4.0)))
        assert res.trajectory.within_bounds(ControllerConfig(r_min=0.0, r_max=3.5))
        out.append(res.trajectory.r[-1, 0])
    return np.array(out)


def test_single_link_converges_to_closed_form():
    final = _single_link_runs()
    err = final - math.log(2)
    assert np.all(np.abs(err) <= 0.05)
    # ensemble: mean within 3 standard errors of log 2
    assert abs(err.mean()) <= 3 * err.std(ddof=1) / math.sqrt(err.size)


def test_delta_variant_serves_more_than_arrivals():
    sc = SimConfig(edgeless(1), P1, r=np.zeros(1), lam=np.array([0.4]), M=500, seed=8,
                   n_slots=20_000 * 500)
    res = run_adaptive(sc, ControllerConfig(delta=0.05, schedule=Harmonic(1.0, 1.0, 4.0)),
                       burn_in_periods=10_000)
    tail = res.trajectory.tail(0.5)
    s_mean = res.trajectory.s_emp[tail].mean()
    assert s_mean > res.trajectory.lambda_emp[tail].mean() + 0.03
    assert s_mean > 0.4


def test_constant_step_tracks_arrival_rates():
    g = path(3)
    P = ProtocolParams.uniform(3, 1 / 16)
    lam = np.array([0.3, 0.2, 0.3])
    sc = SimConfig(g, P, r=np.zeros(3), lam=lam, M=500, seed=21, n_slots=30_000 * 500)
    res = run_adaptive(sc, ControllerConfig(r_min=-2.0, r_max=5.0, schedule=Constant(0.02)),
                       burn_in_periods=5_000)
    tail = slice(5_000, None)
    s_avg = res.trajectory.s_emp[tail].mean(axis=0)
    assert np.all(np.abs(s_avg - lam) < 0.01)


def test_ode_limit_reaches_rstar():
    g = path(3)
    P = ProtocolParams.uniform(3, 1 / 16)
    lam = np.array([0.3, 0.2, 0.3])
    ctrl = ControllerConfig(r_min=-2.0, r_max=5.0)
    res = ode_iterate(g, P, lam, ctrl, schedule=Constant(1.0))
    assert np.abs(res.r - solve_rstar(g, P, lam).r_star).max() < 1e-4


def test_run_adaptive_validation():
    sc = SimConfig(edgeless(1), P1, r=np.zeros(1), M=100, n_slots=1000)
    with pytest.raises(ConfigError):
        run_adaptive(sc, ControllerConfig(), engine="gpu")
    with pytest.raises(ConfigError):
        run_adaptive(sc, ControllerConfig(M=50))
    with pytest.raises(ConfigError):
        run_adaptive(sc, ControllerConfig(), burn_in_periods=10)
