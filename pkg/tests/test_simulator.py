import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from csmaca.errors import ConfigError, DomainError
from csmaca.graph import ConflictGraph, complete, edgeless, path
from csmaca.simulator import (COLLISION, IDLE, SUCCESS, ChainState, SimConfig, Simulation,
                              _Streams, run, run_hidden_node, sample_payload, step,
                              window_slots)
from csmaca.stationary import ProtocolParams, onoff_distribution, service_rates

from conftest import graphs


def cfg(g, p=0.1, r=None, **kw):
    K = g.num_links
    P = kw.pop("params", None) or ProtocolParams.uniform(K, p, gamma=kw.pop("gamma", 3),
                                                        tau_prime=kw.pop("tau_prime", 2),
                                                        T0=kw.pop("T0", 4.0))
    return SimConfig(g, P, r=np.zeros(K) if r is None else r, **kw)


# -- payload rounding ----------------------------------------------------------------

def test_integer_mean_is_exact():
    rng = np.random.default_rng(0)
    assert {sample_payload(30.0, rng) for _ in range(1000)} == {30}


def test_half_mean_monte_carlo():
    rng = np.random.default_rng(1)
    draws = np.array([sample_payload(17.5, rng) for _ in range(1_000_000)])
    assert set(np.unique(draws)) == {17, 18}
    assert abs(draws.mean() - 17.5) < 0.01


def test_quarter_fraction():
    rng = np.random.default_rng(2)
    draws = np.array([sample_payload(30.25, rng) for _ in range(200_000)])
    # 5 sigma band around P(31) = 0.25
    assert abs((draws == 31).mean() - 0.25) < 5 * math.sqrt(0.25 * 0.75 / draws.size)


def test_payload_below_one_slot_rejected():
    with pytest.raises(DomainError):
        sample_payload(0.9, np.random.default_rng(0))


# -- one-slot rule -------------------------------------------------------------------

def test_forced_attempt_single_link():
    c = cfg(edgeless(1), T0=30.0, tau_prime=10)
    s = step(ChainState.idle(1), c, np.array([0.0]))
    assert s.kind[0] == SUCCESS and s.a[0] == s.b[0] == 10 + 30


def test_simultaneous_attempts_collide():
    c = cfg(complete(2), gamma=2)
    s = step(ChainState.idle(2), c, np.array([0.01, 0.02]))
    assert list(s.kind) == [COLLISION, COLLISION]
    assert list(s.b) == [2, 2] and list(s.a) == [2, 2]
    s.check(c.graph, 2)


def test_busy_neighbour_silences_link():
    c = cfg(complete(2))
    s = ChainState(np.array([SUCCESS, IDLE], np.int8), np.array([6, 0]), np.array([4, 0]))
    s2 = step(s, c, np.array([0.0, 0.0]))
    assert s2.kind[1] == IDLE and s2.a[0] == 3
    # a transmission in its last slot frees the medium for the next slot's attempt
    s = ChainState(np.array([SUCCESS, IDLE], np.int8), np.array([6, 0]), np.array([1, 0]))
    s2 = step(s, c, np.array([0.9, 0.0]))
    assert s2.kind[0] == IDLE and s2.kind[1] == SUCCESS


def test_idle_link_stays_idle_when_not_drawing():
    c = cfg(edgeless(1), p=1 / 16)
    assert step(ChainState.idle(1), c, np.array([1 / 16])).kind[0] == IDLE


def _lengths(c):
    Tp = c.params.payload_mean(c.r)
    return [{c.params.tau_prime + math.floor(t), c.params.tau_prime + math.ceil(t)} for t in Tp]


@given(graphs(max_links=5), st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_invariants_hold_along_random_walks(g, seed, gamma):
    K = g.num_links
    c = cfg(g, p=0.3, gamma=gamma, tau_prime=1, T0=2.5, r=np.linspace(-0.5, 0.5, K))
    rng = np.random.default_rng(seed)
    s = ChainState.idle(K)
    started = {}
    for t in range(300):
        s2 = step(s, c, rng)
        s2.check(g, gamma, _lengths(c))
        for k in range(K):
            if s.kind[k] == COLLISION and s.a[k] == 1:
                # collisions last exactly gamma slots; the next slot is a fresh start or idle
                assert t - started[k] == gamma
                assert s2.kind[k] != COLLISION or s2.a[k] == gamma
            if s2.kind[k] == COLLISION and s2.a[k] == gamma:
                started[k] = t
        s = s2


def test_step_is_deterministic():
    c = cfg(path(3))
    s = ChainState.idle(3)
    u = np.array([0.05, 0.5, 0.01])
    assert step(s, c, u).key() == step(s, c, u).key()


# -- compiled loop vs reference ----------------------------------------------------------

def _compare(c, n=3000):
    sim = Simulation(c)
    ref = _Streams(c.seed, c.K)
    Tp = c.params.payload_mean(c.r)
    s = ChainState.idle(c.K)
    for _ in range(n):
        sim.advance(1, Tp)
        s = step(s, c, ref.take(1)[0])
        assert sim.state.key() == s.key()


@given(graphs(max_links=4), st.integers(0, 1000))
def test_compiled_matches_reference(g, seed):
    _compare(cfg(g, p=0.2, seed=seed, r=np.full(g.num_links, 0.3)), n=1500)


@pytest.mark.parametrize("mode", ["probe", "complete"])
def test_compiled_matches_reference_hidden(mode):
    g = complete(3)
    sensing = ConflictGraph(3, frozenset({(0, 1)}))
    _compare(cfg(g, p=0.15, seed=4, sensing_graph=sensing, hidden_collision=mode))


# -- whole runs ------------------------------------------------------------------

def test_same_seed_same_metrics_and_chunking_invariance():
    c = cfg(path(3), p=0.1, lam=np.full(3, 0.2), M=50, n_slots=40_000, seed=9)
    a, b = run(c), run(c)
    for f in ("served", "real_served", "arrived", "collisions", "successes", "occupancy",
              "period_served", "period_queue"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    for x, y in zip(a.delays, b.delays):
        np.testing.assert_array_equal(x, y)
    sim = Simulation(c)
    Tp = c.params.payload_mean(c.r)
    for n in (1, 7, 992, 13_000, 26_000):
        sim.advance(n, Tp)
    np.testing.assert_array_equal(sim.served, a.served)
    np.testing.assert_array_equal(sim.arrived, a.arrived)


def test_link_streams_do_not_depend_on_link_count():
    u2 = _Streams(7, 2).take(100)
    u5 = _Streams(7, 5).take(100)
    np.testing.assert_array_equal(u2, u5[:, :2])


def test_zero_load():
    c = cfg(path(3), lam=np.zeros(3), n_slots=20_000, dummy_bits=False)
    m = run(c)
    assert m.arrived.sum() == 0 and m.served.sum() == 0 and m.successes.sum() == 0
    assert m.occupancy[0] == 20_000
    # dummy bits keep the links busy regardless of load
    m = run(cfg(path(3), lam=np.zeros(3), n_slots=20_000))
    assert m.served.sum() > 0 and m.real_served.sum() == 0


def test_no_dummy_bits_serves_only_real_data():
    c = cfg(path(3), p=0.1, lam=np.full(3, 0.1), M=20, n_slots=200_000, dummy_bits=False,
            seed=3)
    m = run(c)
    assert np.all(m.real_served <= m.arrived)
    assert np.all(m.final_queue >= 0)
    np.testing.assert_array_equal(m.final_queue, m.arrived - m.real_served)
    assert np.all(m.served >= m.real_served)


def test_metrics_bookkeeping():
    c = cfg(complete(3), n_slots=30_001, M=100, lam=np.full(3, 0.05))
    m = run(c)
    assert m.occupancy.sum() == 30_001
    assert np.all((m.service_rate >= 0) & (m.service_rate <= 1))
    assert m.period_served.shape == (301, 3)
    assert m.period_served.sum() == m.served.sum()
    for k in range(3):
        assert m.delays[k].size == max(m.successes[k] - 1, 0)
        assert m.delays[k].sum() < 30_001


def test_single_link_mean_access_delay():
    P = ProtocolParams(p=(1 / 16,), gamma=5, tau_prime=10, T0=15.0)
    c = SimConfig(edgeless(1), P, r=np.array([math.log(2)]), n_slots=2_000_000, seed=2)
    m = run(c)
    assert m.delay_stats(0)[0] == pytest.approx(30 / (6 / 11), rel=0.02)


def test_service_rates_within_batch_means_band():
    g = path(3)
    P = ProtocolParams(p=(0.05, 0.08, 0.05), gamma=3, tau_prime=5, T0=10.0)
    r = np.array([0.2, -0.3, 0.6])
    c = SimConfig(g, P, r=r, n_slots=2_000_000, M=20_000, seed=12)
    m = run(c)
    batches = m.s_prime
    se = batches.std(axis=0, ddof=1) / math.sqrt(batches.shape[0])
    assert np.all(np.abs(m.service_rate - service_rates(g, P, r)) < 3.5 * se + 1e-4)
    assert m.total_variation(onoff_distribution(g, P, r).probs) < 0.01


def test_config_validation():
    with pytest.raises(ConfigError):
        cfg(path(3), M=0)
    with pytest.raises(ConfigError):
        cfg(path(3), sensing_graph=complete(3))
    with pytest.raises(ConfigError):
        cfg(path(3), hidden_collision="abort")
    with pytest.raises(ConfigError):
        cfg(path(3), r=np.full(3, -5.0))
    with pytest.raises(ConfigError):
        cfg(path(3), lam=np.full(3, 1.5))


def test_degenerate_hidden_mode_warns_and_matches_run():
    c = cfg(complete(2), n_slots=50_000, seed=1)
    with pytest.warns(RuntimeWarning):
        h = run_hidden_node(c)
    np.testing.assert_array_equal(h.served, run(c).served)


def test_hidden_pair_collides_and_loses_credit():
    g = complete(2)
    c = cfg(g, p=0.05, n_slots=200_000, sensing_graph=edgeless(2), T0=40.0, seed=5)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        m = run_hidden_node(c)
    plain = run(cfg(g, p=0.05, n_slots=200_000, T0=40.0, seed=5))
    assert m.service_rate.sum() < plain.service_rate.sum()


def test_window_length():
    assert window_slots() == 5556
    assert window_slots(50.0, 20.0) == 2500
