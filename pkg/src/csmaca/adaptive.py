"""Transmission-length control: the per-period update of the payload exponents.

Every M slots each link moves its exponent along the gap between the
arrival rate and the service rate it measured during the period, plus a
soft penalty that pulls the exponent back into ``[r_min, r_max]``.  An
optional ``delta`` makes every link pretend its arrivals are a bit larger,
so the service rate ends up strictly above the arrival rate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit

from .errors import ConfigError, DimensionError, DomainError, NonConvergenceError
from .graph import ConflictGraph
from .simulator import Metrics, SimConfig, Simulation, _advance
from .stationary import ProtocolParams, service_rates


def penalty(y, r_min: float, r_max: float):
    """Soft projection: ``r_min - y`` below the box, ``r_max - y`` above, else 0."""
    if not r_min < r_max:
        raise DomainError("need r_min < r_max")
    y = np.asarray(y, dtype=float)
    out = np.where(y < r_min, r_min - y, np.where(y > r_max, r_max - y, 0.0))
    return float(out) if out.ndim == 0 else out


# -- step-size schedules ---------------------------------------------------

@dataclass(frozen=True)
class Harmonic:
    """alpha(i) = c / (a + i/d)."""

    c: float
    a: float
    d: float

    def __call__(self, i: int) -> float:
        return self.c / (self.a + i / self.d)

    def __str__(self):
        return f"harmonic:{self.c},{self.a},{self.d}"


@dataclass(frozen=True)
class Reciprocal:
    def __call__(self, i: int) -> float:
        return 1.0 / i

    def __str__(self):
        return "reciprocal"


@dataclass(frozen=True)
class Constant:
    alpha: float

    def __call__(self, i: int) -> float:
        return self.alpha

    def __str__(self):
        return f"constant:{self.alpha}"


def parse_schedule(text: str):
    """``"harmonic:c,a,d"``, ``"reciprocal"`` or ``"constant:alpha"``."""
    name, _, args = text.partition(":")
    vals = [float(v) for v in args.split(",")] if args else []
    try:
        if name == "harmonic":
            return Harmonic(*vals)
        if name == "reciprocal" and not vals:
            return Reciprocal()
        if name == "constant":
            return Constant(*vals)
    except TypeError:
        pass
    raise ConfigError(f"bad step schedule {text!r}")


def _check_schedule(sched, n=1000):
    a = np.array([sched(i) for i in range(1, n + 1)])
    if not (0 < a[0] <= 1) or np.any(a <= 0):
        raise ConfigError(f"step sizes must lie in (0,1], got alpha(1)={a[0]}")
    if np.any(np.diff(a) > 1e-15):
        raise ConfigError("step sizes must be non-increasing")


# -- controller ---------------------------------------------------------------

@dataclass(frozen=True)
class ControllerConfig:
    r_min: float = 0.0
    r_max: float = 3.5
    delta: float = 0.0
    schedule: object = field(default_factory=lambda: Harmonic(0.23, 2.0, 100.0))
    M: Optional[int] = None          # defaults to the simulation's period
    lambda_bar: float = 1.0
    r0: Optional[tuple] = None       # initial exponents; default all zeros

    def __post_init__(self):
        if not self.r_min < self.r_max:
            raise ConfigError("need r_min < r_max")
        if self.delta < 0:
            raise ConfigError("delta must be non-negative")
        if not 0 < self.lambda_bar <= 1:
            raise ConfigError("lambda_bar must lie in (0,1]")
        if isinstance(self.schedule, str):
            object.__setattr__(self, "schedule", parse_schedule(self.schedule))
        _check_schedule(self.schedule)

    @property
    def bounds(self) -> tuple[float, float]:
        """Box that the iterates can never leave when every alpha(i) <= 1."""
        return self.r_min - 2.0, self.r_max + 2.0 * self.lambda_bar

    def initial(self, K: int) -> np.ndarray:
        if self.r0 is None:
            return np.zeros(K)
        r = np.asarray(self.r0, dtype=float).reshape(-1)
        if r.size == 1:
            r = np.full(K, r[0])
        if r.shape != (K,):
            raise DimensionError(f"r0 has {r.size} entries, expected {K}")
        return r


def update(r_prev, lambda_emp, s_emp, alpha: float, cfg: ControllerConfig) -> np.ndarray:
    """One controller step; the only pull back into the box is the penalty."""
    r_prev = np.asarray(r_prev, dtype=float)
    lambda_emp = np.asarray(lambda_emp, dtype=float)
    s_emp = np.asarray(s_emp, dtype=float)
    if not (r_prev.shape == lambda_emp.shape == s_emp.shape) or r_prev.ndim != 1:
        raise DimensionError("r, lambda' and s' must be vectors of equal length")
    if not 0 < alpha <= 1:
        raise DomainError(f"alpha must lie in (0,1], got {alpha}")
    drift = lambda_emp + cfg.delta - s_emp + penalty(r_prev, cfg.r_min, cfg.r_max)
    return r_prev + alpha * drift


@dataclass
class Trajectory:
    """Per-period records; row ``i`` describes period ``i + 1``."""

    r: np.ndarray            # exponents at the end of the period
    Tp: np.ndarray           # mean payload in force during the period
    lambda_emp: np.ndarray
    s_emp: np.ndarray
    queue: np.ndarray        # queue length (slots) at the end of the period
    r_initial: np.ndarray
    period_len: int

    @property
    def n_periods(self) -> int:
        return self.r.shape[0]

    def tail(self, frac: float = 0.5) -> slice:
        return slice(int(self.n_periods * (1 - frac)), None)

    def mean_payload(self, frac: float = 0.5) -> np.ndarray:
        """Mean payload over the last ``frac`` of the run."""
        return self.Tp[self.tail(frac)].mean(axis=0)

    def within_bounds(self, cfg: ControllerConfig) -> bool:
        lo, hi = cfg.bounds
        return bool(np.all(self.r >= lo) and np.all(self.r <= hi))


@dataclass
class AdaptiveResult:
    trajectory: Trajectory
    metrics: Metrics


@njit(cache=True)
def _payload_means(T0, r, out):
    # the sampler needs at least one slot; iterates below log(1/T0) are rounded up
    for k in range(r.size):
        out[k] = max(T0 * math.exp(r[k]), 1.0)


def payload_for(params: ProtocolParams, r) -> np.ndarray:
    """Mean payload fed to the sampler; shares its arithmetic with the compiled loop."""
    r = np.asarray(r, dtype=float)
    out = np.empty(r.size)
    _payload_means(params.T0, r, out)
    return out


@njit(cache=True)
def _periods(U, AU, t0, M, lam, p, T0, tau, gamma, nbr_s, nbr_i, hidden, probe, dummy,
             kind, b, a, dirty, pending, extra, start, last_succ, queue,
             served, real, arrived, coll, nsucc, hist, delays, ndel,
             r, alphas, r_min, r_max, delta, r_rec, tp_rec, lam_rec, s_rec, q_rec):
    K = r.size
    Tp = np.empty(K)
    for i in range(alphas.size):
        _payload_means(T0, r, Tp)
        tp_rec[i] = Tp
        s0 = served.copy()
        a0 = arrived.copy()
        _advance(U[i * M:(i + 1) * M], AU[i:i + 1], t0 + i * M, M, lam, p, Tp, tau, gamma,
                 nbr_s, nbr_i, hidden, probe, dummy, kind, b, a, dirty, pending, extra, start,
                 last_succ, queue, served, real, arrived, coll, nsucc, hist, delays, ndel)
        for k in range(K):
            s_emp = (served[k] - s0[k]) / M
            l_emp = (arrived[k] - a0[k]) / M
            y = r[k]
            if y < r_min:
                h = r_min - y
            elif y > r_max:
                h = r_max - y
            else:
                h = 0.0
            r[k] = y + alphas[i] * (l_emp + delta - s_emp + h)
            r_rec[i, k] = r[k]
            lam_rec[i, k] = l_emp
            s_rec[i, k] = s_emp
            q_rec[i, k] = queue[k]


def run_adaptive(sim_config: SimConfig, ctrl: ControllerConfig, n_periods: Optional[int] = None,
                 burn_in_periods: int = 0, engine: str = "compiled",
                 chunk_periods: int = 2000) -> AdaptiveResult:
    """Couple the slot simulator with the controller, one update per period.

    ``sim_config.r`` is ignored; the controller's initial exponents are used.
    Metrics count only periods after ``burn_in_periods``.  ``engine="python"``
    runs the same loop through :func:`update` one period at a time; both
    engines consume the random streams identically.
    """
    M = int(sim_config.M if ctrl.M is None else ctrl.M)
    if ctrl.M is not None and ctrl.M != sim_config.M:
        raise ConfigError(f"controller period {ctrl.M} differs from simulation period {sim_config.M}")
    if engine not in ("compiled", "python"):
        raise ConfigError(f"unknown engine {engine!r}")
    n = sim_config.n_slots // M if n_periods is None else int(n_periods)
    if n < 1:
        raise ConfigError("need at least one period")
    if not 0 <= burn_in_periods < n:
        raise ConfigError("burn-in must be shorter than the run")
    K = sim_config.K
    params = sim_config.params
    r = ctrl.initial(K)
    r_init = r.copy()
    sim = Simulation(sim_config)
    rec = {key: np.empty((n, K)) for key in ("r", "Tp", "lam", "s", "q")}
    if engine == "python":
        for i in range(1, n + 1):
            if i == burn_in_periods + 1:
                sim.reset_counters()
            Tp = payload_for(params, r)
            served, arrived = sim.advance(M, Tp)
            s_emp = served / M
            lam_emp = arrived / M
            r = update(r, lam_emp, s_emp, ctrl.schedule(i), ctrl)
            for key, val in (("r", r), ("Tp", Tp), ("lam", lam_emp), ("s", s_emp),
                             ("q", sim.queue)):
                rec[key][i - 1] = val
    else:
        cfg = sim_config
        done = 0
        while done < n:
            stop = burn_in_periods if done < burn_in_periods else n
            m = min(chunk_periods, stop - done)
            if done == burn_in_periods:
                sim.reset_counters()
            alphas = np.array([ctrl.schedule(i) for i in range(done + 1, done + m + 1)])
            if np.any(alphas <= 0) or np.any(alphas > 1):
                raise DomainError("step sizes must lie in (0,1]")
            U = sim.streams.take(m * M)
            AU = sim.streams.arrivals.random((m, K))
            delays = np.zeros((K, m * M // 2 + 2), np.int64)
            ndel = np.zeros(K, np.int64)
            sl = slice(done, done + m)
            _periods(U, AU, sim.t, M, cfg.lam, sim._p, params.T0, params.tau_prime, params.gamma,
                     sim._nbr_s, sim._nbr_i, cfg.hidden, cfg.hidden_collision == "probe",
                     cfg.dummy_bits, sim.kind, sim.b, sim.a, sim.dirty, sim.pending, sim.extra,
                     sim.start, sim.last_succ, sim.queue, sim.served, sim.real, sim.arrived,
                     sim.coll, sim.nsucc, sim.hist, delays, ndel, r, alphas, float(ctrl.r_min),
                     float(ctrl.r_max), float(ctrl.delta), rec["r"][sl], rec["Tp"][sl],
                     rec["lam"][sl], rec["s"][sl], rec["q"][sl])
            sim.t += m * M
            if sim.record_delays:
                for k in range(K):
                    if ndel[k]:
                        sim._delays[k].append(delays[k, :ndel[k]].copy())
            done += m
    traj = Trajectory(rec["r"], rec["Tp"], rec["lam"], rec["s"], rec["q"], r_init, M)
    kept = slice(burn_in_periods, None)
    n_kept = n - burn_in_periods
    metrics = Metrics(
        n_slots=n_kept * M, served=sim.served.copy(), real_served=sim.real.copy(),
        arrived=sim.arrived.copy(), collisions=sim.coll.copy(), successes=sim.nsucc.copy(),
        delays=sim.delays(), occupancy=sim.hist.copy() if sim.hist.size else None,
        period_len=M, period_served=rec["s"][kept] * M, period_arrived=rec["lam"][kept] * M,
        period_queue=rec["q"][kept], period_Tp=rec["Tp"][kept], final_queue=sim.queue.copy(),
        Tp=rec["Tp"][kept].mean(axis=0), p=np.asarray(params.p))
    return AdaptiveResult(traj, metrics)


# -- deterministic limit --------------------------------------------------------

@dataclass
class OdeResult:
    r: np.ndarray
    residual: float          # max |lam + delta - s(r) + penalty(r)|
    iterations: int
    path: np.ndarray = field(repr=False)


def ode_iterate(g: ConflictGraph, params: ProtocolParams, lam, ctrl: ControllerConfig,
                schedule=None, tol=1e-10, max_iter=200_000, r0=None, cap=None) -> OdeResult:
    """The controller driven by exact service rates instead of measured ones.

    This is the noise-free counterpart of :func:`run_adaptive`: its fixed
    point solves ``s(r) = lam + delta`` when that solution lies inside the box.
    """
    lam = np.asarray(lam, dtype=float)
    sched = ctrl.schedule if schedule is None else schedule
    r = ctrl.initial(g.num_links) if r0 is None else np.asarray(r0, dtype=float)
    path = [r.copy()]
    for i in range(1, max_iter + 1):
        s = service_rates(g, params, r, cap)
        drift = lam + ctrl.delta - s + penalty(r, ctrl.r_min, ctrl.r_max)
        res = float(np.abs(drift).max())
        if res <= tol:
            return OdeResult(r, res, i - 1, np.array(path))
        r = r + sched(i) * drift
        path.append(r.copy())
    raise NonConvergenceError(f"no fixed point within {max_iter} iterations", best=r, residual=res)
