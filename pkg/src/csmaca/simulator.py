"""Slot-level simulation of the CSMA/CA protocol with probe collisions.

Each link draws one uniform per slot from its own PCG64 substream.  The
uniform decides the attempt (``u < p``) and, reused as ``u / p``, the
rounding of the payload length, so a link's draws never depend on how many
other links exist.  Arrivals come from a separate substream.

The hot loop lives in :func:`_advance` (numba); :func:`step` is a direct
pure-Python transcription of one slot used for cross-checks.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from .errors import ConfigError, DomainError
from .graph import ConflictGraph
from .stationary import ProtocolParams


IDLE, SUCCESS, COLLISION = 0, 1, 2
HIST_MAX_LINKS = 20


def sample_payload(T_p_mean: float, rng) -> int:
    """Integer payload with mean ``T_p_mean``: ceil w.p. frac(T), floor otherwise."""
    if not T_p_mean >= 1:
        raise DomainError(f"mean payload must be >= 1 slot, got {T_p_mean}")
    fl = math.floor(T_p_mean)
    return fl + 1 if rng.random() < T_p_mean - fl else fl


def _round_payload(T, v):
    fl = math.floor(T)
    return fl + 1 if v < T - fl else fl


# -- configuration ----------------------------------------------------------

@dataclass
class SimConfig:
    graph: ConflictGraph
    params: ProtocolParams
    r: np.ndarray
    lam: np.ndarray = None
    M: int = 500
    seed: int = 0
    n_slots: int = 1_000_000
    dummy_bits: bool = True
    slot_us: float = 9.0
    sensing_graph: Optional[ConflictGraph] = None
    # what happens to a transmission started while an unheard neighbour is busy
    hidden_collision: str = "probe"
    initial_queue: float = 0.0
    record_occupancy: bool = True

    def __post_init__(self):
        K = self.graph.num_links
        self.r = np.asarray(self.r, dtype=float).reshape(-1)
        if self.lam is None:
            self.lam = np.zeros(K)
        self.lam = np.asarray(self.lam, dtype=float).reshape(-1)
        self.validate()

    @property
    def K(self) -> int:
        return self.graph.num_links

    @property
    def sensing(self) -> ConflictGraph:
        return self.graph if self.sensing_graph is None else self.sensing_graph

    @property
    def hidden(self) -> bool:
        return self.sensing.edges != self.graph.edges

    def validate(self):
        K = self.K
        if self.params.K != K:
            raise ConfigError(f"params have {self.params.K} links, graph has {K}")
        if self.r.shape != (K,) or not np.all(np.isfinite(self.r)):
            raise ConfigError("r must be a finite vector of length K")
        if self.lam.shape != (K,) or np.any(self.lam < 0) or np.any(self.lam > 1):
            raise ConfigError("lambda must lie in [0,1]^K")
        if int(self.M) != self.M or self.M < 1:
            raise ConfigError(f"M must be a positive integer, got {self.M}")
        if self.n_slots < 0:
            raise ConfigError("n_slots must be non-negative")
        if not self.sensing.is_subgraph_of(self.graph):
            raise ConfigError("sensing edges must be a subset of interference edges")
        if self.hidden_collision not in ("probe", "complete"):
            raise ConfigError(f"unknown hidden_collision mode {self.hidden_collision!r}")
        if np.any(self.params.payload_mean(self.r) < 1):
            raise ConfigError("mean payload T0*exp(r) must be at least one slot")
        if self.slot_us <= 0:
            raise ConfigError("slot_us must be positive")

    def window_slots(self, window_ms: float = 50.0) -> int:
        return window_slots(window_ms, self.slot_us)


def window_slots(window_ms: float = 50.0, slot_us: float = 9.0) -> int:
    """Slots in a short-term throughput window (50 ms at 9 us is 5556)."""
    return int(round(window_ms * 1000.0 / slot_us))


# -- chain state -------------------------------------------------------------

@dataclass
class ChainState:
    """Per-link transmission records; ``b`` total length, ``a`` slots remaining."""

    kind: np.ndarray
    b: np.ndarray
    a: np.ndarray

    @classmethod
    def idle(cls, K: int) -> "ChainState":
        return cls(np.zeros(K, np.int8), np.zeros(K, np.int64), np.zeros(K, np.int64))

    def copy(self) -> "ChainState":
        return ChainState(self.kind.copy(), self.b.copy(), self.a.copy())

    @property
    def x(self) -> int:
        return int(sum(1 << k for k in np.flatnonzero(self.kind)))

    def key(self):
        return tuple(zip(self.kind.tolist(), self.b.tolist(), self.a.tolist()))

    def check(self, graph: ConflictGraph, gamma: int, lengths=None):
        """Assert the validity conditions of a chain state; ``lengths`` maps
        a link to the admissible total lengths of its successes."""
        act = self.kind != IDLE
        assert np.all((self.a[act] >= 1) & (self.a[act] <= self.b[act])), "need 1 <= a <= b"
        nbr = graph.neighbor_masks
        xm = self.x
        for k in np.flatnonzero(act):
            has_active_nbr = bool(int(nbr[k]) & xm)
            if self.kind[k] == COLLISION:
                assert has_active_nbr, f"link {k} collides alone"
                assert self.b[k] == gamma, "collision length must be gamma"
                for j in graph.neighbors(k):
                    if self.kind[j] != IDLE:
                        assert self.kind[j] == COLLISION and self.a[j] == self.a[k], \
                            "collision component out of sync"
            else:
                assert not has_active_nbr, f"successful link {k} has an active neighbour"
                if lengths is not None:
                    assert int(self.b[k]) in lengths[k], f"length {self.b[k]} outside support"


def step(state: ChainState, config: SimConfig, rng, Tp=None) -> ChainState:
    """One slot of the saturated protocol (reference implementation).

    ``rng`` is a numpy Generator or an array of K uniforms for this slot.
    """
    g, P = config.graph, config.params
    K = g.num_links
    u = rng.random(K) if hasattr(rng, "random") else np.asarray(rng, dtype=float)
    Tp = config.params.payload_mean(config.r) if Tp is None else np.asarray(Tp, float)
    nbr_s = config.sensing.neighbor_masks
    nbr_i = g.neighbor_masks
    new = state.copy()
    cont = 0
    for k in range(K):
        if new.kind[k] != IDLE:
            if new.a[k] > 1:
                new.a[k] -= 1
                cont |= 1 << k
            else:
                new.kind[k], new.b[k], new.a[k] = IDLE, 0, 0
    att = 0
    for k in range(K):
        if new.kind[k] == IDLE and not (int(nbr_s[k]) & cont) and u[k] < P.p[k]:
            att |= 1 << k
    for k in range(K):
        if not (att >> k) & 1:
            continue
        clash = int(nbr_i[k]) & att or (config.hidden and config.hidden_collision == "probe"
                                         and int(nbr_i[k]) & cont)
        if clash:
            new.kind[k], new.b[k], new.a[k] = COLLISION, P.gamma, P.gamma
        else:
            L = P.tau_prime + _round_payload(Tp[k], u[k] / P.p[k])
            new.kind[k], new.b[k], new.a[k] = SUCCESS, L, L
    return new


# -- compiled slot loop --------------------------------------------------------

@njit(cache=True)
def _advance(U, AU, t0, M, lam, p, Tp, tau, gamma, nbr_s, nbr_i, hidden, probe, dummy,
             kind, b, a, dirty, pending, extra, start, last_succ, queue,
             served, real, arrived, coll, nsucc, hist, delays, ndel):
    n, K = U.shape
    e = 0
    for t in range(n):
        tabs = t0 + t
        if tabs % M == 0:
            for k in range(K):
                if AU[e, k] < lam[k]:
                    queue[k] += M
                    arrived[k] += M
            e += 1
        cont = 0
        for k in range(K):
            if kind[k] != 0:
                if a[k] > 1:
                    a[k] -= 1
                    cont |= 1 << k
                else:
                    if kind[k] == 1:
                        if hidden:
                            if not dirty[k]:
                                served[k] += pending[k]
                                nsucc[k] += 1
                                if last_succ[k] >= 0:
                                    delays[k, ndel[k]] = start[k] - last_succ[k]
                                    ndel[k] += 1
                                last_succ[k] = start[k]
                        if not dummy:
                            served[k] += extra[k]
                    kind[k] = 0
                    b[k] = 0
                    a[k] = 0
        att = 0
        for k in range(K):
            if kind[k] == 0 and (nbr_s[k] & cont) == 0 and (dummy or queue[k] > 0):
                if U[t, k] < p[k]:
                    att |= 1 << k
        for k in range(K):
            if (att >> k) & 1 == 0:
                continue
            if (nbr_i[k] & att) != 0 or (hidden and probe and (nbr_i[k] & cont) != 0):
                kind[k] = 2
                b[k] = gamma
                a[k] = gamma
                coll[k] += 1
            else:
                T = Tp[k]
                fl = math.floor(T)
                tp = int(fl) + 1 if U[t, k] / p[k] < T - fl else int(fl)
                if not dummy:
                    actual = tp if tp < queue[k] else queue[k]
                    extra[k] = tp - actual
                    tp = actual
                kind[k] = 1
                b[k] = tau + tp
                a[k] = b[k]
                start[k] = tabs
                dirty[k] = False
                pending[k] = 0
                if not hidden:
                    nsucc[k] += 1
                    if last_succ[k] >= 0:
                        delays[k, ndel[k]] = tabs - last_succ[k]
                        ndel[k] += 1
                    last_succ[k] = tabs
        active = cont | att
        if hidden:
            for k in range(K):
                if kind[k] == 1 and (nbr_i[k] & active) != 0:
                    dirty[k] = True
        if hist.size > 0:
            hist[active] += 1
        for k in range(K):
            if kind[k] == 1 and b[k] - a[k] + 1 > tau:
                if hidden:
                    pending[k] += 1
                else:
                    served[k] += 1
                if queue[k] > 0:
                    queue[k] -= 1
                    real[k] += 1


class _Streams:
    """Per-link uniform substreams, consumed identically however they are chunked."""

    def __init__(self, seed: int, K: int, chunk: int = 1 << 16):
        children = np.random.SeedSequence(seed).spawn(K + 1)
        self.links = [np.random.Generator(np.random.PCG64(c)) for c in children[:K]]
        self.arrivals = np.random.Generator(np.random.PCG64(children[K]))
        self.chunk = chunk
        self.buf = np.empty((0, K))
        self.pos = 0

    def take(self, n: int) -> np.ndarray:
        K = len(self.links)
        if self.pos + n > self.buf.shape[0]:
            need = max(self.chunk, n)
            fresh = np.empty((need, K))
            for k, gen in enumerate(self.links):
                fresh[:, k] = gen.random(need)
            self.buf = np.concatenate([self.buf[self.pos:], fresh])
            self.pos = 0
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


# -- results -------------------------------------------------------------------

@dataclass
class Metrics:
    n_slots: int
    served: np.ndarray              # credited payload slots (dummy included)
    real_served: np.ndarray
    arrived: np.ndarray
    collisions: np.ndarray          # collided attempts per link
    successes: np.ndarray
    delays: list                    # per-link arrays of access delays (slots)
    occupancy: Optional[np.ndarray]  # slots spent in each on-off bitmask
    period_len: int
    period_served: np.ndarray       # (n_periods, K) credited payload slots
    period_arrived: np.ndarray
    period_queue: np.ndarray        # queue (slots of data) at each period end
    period_Tp: np.ndarray           # mean payload in force during each period
    final_queue: np.ndarray
    Tp: np.ndarray
    p: np.ndarray

    @property
    def service_rate(self) -> np.ndarray:
        return self.served / max(self.n_slots, 1)

    @property
    def s_prime(self) -> np.ndarray:
        return self.period_served / self.period_len

    @property
    def lambda_prime(self) -> np.ndarray:
        return self.period_arrived / self.period_len

    @property
    def access_intensity(self) -> np.ndarray:
        return self.Tp / (1.0 / self.p - 1.0)

    def occupancy_distribution(self) -> np.ndarray:
        return self.occupancy / self.occupancy.sum()

    def delay_stats(self, k: int):
        d = self.delays[k]
        if d.size == 0:
            return float("nan"), float("nan")
        return float(d.mean()), float(d.std())

    def total_variation(self, probs) -> float:
        return 0.5 * float(np.abs(self.occupancy_distribution() - np.asarray(probs)).sum())


class Simulation:
    """Stateful engine: advance the chain by blocks with a given mean payload vector."""

    def __init__(self, config: SimConfig, record_delays=True):
        self.config = config
        K = self.K = config.K
        self.streams = _Streams(config.seed, K)
        self.t = 0
        self.kind = np.zeros(K, np.int8)
        self.b = np.zeros(K, np.int64)
        self.a = np.zeros(K, np.int64)
        self.dirty = np.zeros(K, np.bool_)
        self.pending = np.zeros(K, np.int64)
        self.extra = np.zeros(K, np.int64)
        self.start = np.zeros(K, np.int64)
        self.last_succ = np.full(K, -1, np.int64)
        self.queue = np.full(K, int(round(config.initial_queue)), np.int64)
        self.served = np.zeros(K, np.int64)
        self.real = np.zeros(K, np.int64)
        self.arrived = np.zeros(K, np.int64)
        self.coll = np.zeros(K, np.int64)
        self.nsucc = np.zeros(K, np.int64)
        rec = config.record_occupancy and K <= HIST_MAX_LINKS
        self.hist = np.zeros(1 << K if rec else 0, np.int64)
        self.record_delays = record_delays
        self._delays = [[] for _ in range(K)]
        self._nbr_s = config.sensing.neighbor_masks.copy()
        self._nbr_i = config.graph.neighbor_masks.copy()
        self._p = np.asarray(config.params.p, float)

    @property
    def state(self) -> ChainState:
        return ChainState(self.kind.copy(), self.b.copy(), self.a.copy())

    def advance(self, n: int, Tp) -> tuple[np.ndarray, np.ndarray]:
        """Simulate ``n`` slots; returns (credited payload, arrived data) in the block."""
        cfg, P = self.config, self.config.params
        Tp = np.asarray(Tp, dtype=float)
        if np.any(Tp < 1):
            raise DomainError("mean payload must be at least one slot")
        U = self.streams.take(n)
        M = int(cfg.M)
        first = -(-self.t // M) * M
        n_arr = 0 if first >= self.t + n else (self.t + n - 1 - first) // M + 1
        AU = self.streams.arrivals.random((n_arr, self.K)) if n_arr else np.zeros((1, self.K))
        s0, a0 = self.served.copy(), self.arrived.copy()
        delays = np.zeros((self.K, n // 2 + 2), np.int64)
        ndel = np.zeros(self.K, np.int64)
        _advance(U, AU, self.t, M, cfg.lam, self._p, Tp, P.tau_prime, P.gamma,
                 self._nbr_s, self._nbr_i, cfg.hidden, cfg.hidden_collision == "probe",
                 cfg.dummy_bits, self.kind, self.b, self.a, self.dirty, self.pending,
                 self.extra, self.start, self.last_succ, self.queue, self.served, self.real,
                 self.arrived, self.coll, self.nsucc, self.hist, delays, ndel)
        if self.record_delays:
            for k in range(self.K):
                if ndel[k]:
                    self._delays[k].append(delays[k, :ndel[k]].copy())
        self.t += n
        return self.served - s0, self.arrived - a0

    def reset_counters(self):
        """Forget accumulated statistics (e.g. after burn-in) but keep the chain state."""
        self.served[:] = 0
        self.real[:] = 0
        self.arrived[:] = 0
        self.coll[:] = 0
        self.nsucc[:] = 0
        self.hist[:] = 0
        self._delays = [[] for _ in range(self.K)]

    def delays(self) -> list:
        return [np.concatenate(d) if d else np.zeros(0, np.int64) for d in self._delays]


def _run(config: SimConfig) -> Metrics:
    sim = Simulation(config)
    Tp = config.params.payload_mean(config.r)
    M = int(config.M)
    rows_s, rows_a, rows_q = [], [], []
    done = 0
    while done < config.n_slots:
        n = min(M, config.n_slots - done)
        s, a = sim.advance(n, Tp)
        rows_s.append(s)
        rows_a.append(a)
        rows_q.append(sim.queue.copy())
        done += n
    K = config.K
    stack = lambda rows: np.array(rows).reshape(-1, K)
    n_per = len(rows_s)
    return Metrics(
        n_slots=config.n_slots, served=sim.served.copy(), real_served=sim.real.copy(),
        arrived=sim.arrived.copy(), collisions=sim.coll.copy(), successes=sim.nsucc.copy(),
        delays=sim.delays(), occupancy=sim.hist.copy() if sim.hist.size else None,
        period_len=M, period_served=stack(rows_s), period_arrived=stack(rows_a),
        period_queue=stack(rows_q), period_Tp=np.tile(Tp, (n_per, 1)),
        final_queue=sim.queue.copy(), Tp=Tp, p=sim._p.copy())


def run(config: SimConfig) -> Metrics:
    """Simulate ``config.n_slots`` slots with fixed payload exponents ``config.r``."""
    return _run(config)


def run_hidden_node(config: SimConfig) -> Metrics:
    """Like :func:`run`, but carrier sensing only covers ``config.sensing_graph``."""
    if config.sensing_graph is None or not config.hidden:
        warnings.warn("sensing graph equals interference graph; no hidden nodes",
                      RuntimeWarning, stacklevel=2)
    return _run(config)


def short_term_throughput(metrics: Metrics, link: int) -> np.ndarray:
    """Per-window throughput of ``link``; windows are the recorded periods."""
    return metrics.s_prime[:, link]
