"""Reproduction targets: configurations, runs and tolerance checks.

Each target returns a :class:`TargetResult` holding CSV-ready tables and a
list of named pass/fail checks against ``data/expectations.yaml``.  The
``effort`` knob scales run lengths so the same code serves quick smoke runs
and full reproductions; the expectation bands are only meant for ``effort=1``.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import yaml

from .adaptive import ControllerConfig, Harmonic, run_adaptive
from .errors import ConfigError
from .graph import SEVEN_LINK_LAMBDA_BAR, complete, edgeless, lattice, line, seven_link
from .optimizer import solve_rstar
from .runconfig import derive_seed
from .simulator import SimConfig, run, run_hidden_node, window_slots
from .stationary import ProtocolParams

log = logging.getLogger(__name__)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class Table:
    name: str
    header: list
    rows: list = field(default_factory=list)


@dataclass
class TargetResult:
    target: str
    config: dict
    tables: list = field(default_factory=list)
    checks: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str, passed, detail: str = ""):
        self.checks.append(Check(name, bool(passed), detail))


def load_expectations(path=None) -> dict:
    if path is None:
        text = resources.files("csmaca").joinpath("data/expectations.yaml").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    return yaml.safe_load(text)


def _within(value, ref, tol) -> bool:
    return abs(value - ref) <= tol * abs(ref)


def _periods(full: int, effort: float, floor: int) -> int:
    return max(floor, int(round(full * effort)))


# -- adaptive control on the seven-link graph ----------------------------------

SEVEN_PARAMS = dict(gamma=5, tau_prime=10, T0=15.0)
SEVEN_CTRL = dict(r_min=0.0, r_max=3.5, delta=0.005, schedule=Harmonic(0.23, 2.0, 100.0))


def fig8(seed: int = 0, effort: float = 1.0, exp: dict | None = None) -> TargetResult:
    exp = exp or load_expectations()["fig8"]
    g = seven_link()
    P = ProtocolParams.uniform(7, 1 / 16, **SEVEN_PARAMS)
    lam = 0.8 * np.array(SEVEN_LINK_LAMBDA_BAR)
    ctrl = ControllerConfig(**SEVEN_CTRL)
    n = _periods(40_000, effort, 200)
    q0 = float(exp["initial_queue"])
    seeds = [derive_seed(seed, i) for i in range(int(exp["seeds"]))]
    res = TargetResult("fig8", {"graph": "seven_link", "rho": 0.8, "M": 500, "periods": n,
                                "initial_queue": q0, "seeds": seeds, **SEVEN_PARAMS,
                                **{k: str(v) for k, v in SEVEN_CTRL.items()}})
    traj_table = Table("fig8_trajectory", ["seed", "period", "link", "Tp", "queue"])
    end_queues, bounded = [], []
    for si, s in enumerate(seeds):
        cfg = SimConfig(g, P, r=np.zeros(7), lam=lam, M=500, seed=s, n_slots=n * 500,
                        initial_queue=q0)
        tr = run_adaptive(cfg, ctrl).trajectory
        bounded.append(tr.within_bounds(ctrl))
        end_queues.append(tr.queue[tr.tail(0.1)].mean(axis=0))
        if si == 0:
            first = tr
            for i in range(0, n, max(1, n // 400)):
                for k in range(7):
                    traj_table.rows.append([s, i + 1, k + 1, tr.Tp[i, k], tr.queue[i, k]])
    res.tables.append(traj_table)
    q4 = first.Tp[first.tail(0.25)].mean(axis=0)
    q3 = first.Tp[slice(n // 2, 3 * n // 4)].mean(axis=0)
    rel = np.abs(q4 - q3) / q3
    res.check("payload plateau", np.all(rel <= exp["plateau_rel_change"]),
              f"max relative change between last two quarters {rel.max():.3f}")
    ens = np.mean(end_queues, axis=0)
    res.check("queues drain", np.all(ens < q0),
              f"ensemble final queues {np.round(ens).astype(int).tolist()} vs start {q0:.0f}")
    lo, hi = ctrl.bounds
    res.check("iterate bounds", all(bounded), f"all {len(seeds)} runs inside [{lo}, {hi}]"
              if all(bounded) else f"violations in {bounded.count(False)} runs")
    return res


def table_st(seed: int = 0, effort: float = 1.0, exp: dict | None = None,
             rhos=None) -> TargetResult:
    exp = exp or load_expectations()["table_st"]
    ref = {float(k): v for k, v in exp["reference"].items()}
    rhos = sorted(ref) if rhos is None else [float(r) for r in rhos]
    link = int(exp["link"]) - 1
    g = seven_link()
    P = ProtocolParams.uniform(7, 1 / 16, **SEVEN_PARAMS)
    ctrl = ControllerConfig(**SEVEN_CTRL)
    n = _periods(60_000, effort, 400)
    res = TargetResult("table_st", {"graph": "seven_link", "rhos": rhos, "periods": n,
                                    "burn_in": n // 2, "link": link + 1, "master_seed": seed,
                                    **SEVEN_PARAMS, **{k: str(v) for k, v in SEVEN_CTRL.items()}})
    tab = Table("table_st", ["rho", "seed", "delay_mean", "delay_std", "ref_mean", "ref_std",
                             "samples"])
    means, stds = [], []
    tol = exp["tolerance"]
    for j, rho in enumerate(rhos):
        s = derive_seed(seed, j)
        lam = rho * np.array(SEVEN_LINK_LAMBDA_BAR)
        cfg = SimConfig(g, P, r=np.zeros(7), lam=lam, M=500, seed=s, n_slots=n * 500)
        d = run_adaptive(cfg, ctrl, burn_in_periods=n // 2).metrics.delays[link]
        m, sd = float(d.mean()), float(d.std())
        means.append(m)
        stds.append(sd)
        r = ref.get(rho, {"mean": math.nan, "std": math.nan})
        tab.rows.append([rho, s, m, sd, r["mean"], r["std"], d.size])
        if rho in ref:
            res.check(f"rho={rho} mean", _within(m, r["mean"], tol),
                      f"{m:.1f} vs {r['mean']} (ratio {m / r['mean']:.3f})")
            res.check(f"rho={rho} std", _within(sd, r["std"], tol),
                      f"{sd:.1f} vs {r['std']} (ratio {sd / r['std']:.3f})")
    res.tables.append(tab)
    if len(rhos) > 1:
        res.check("mean increases with rho", np.all(np.diff(means) > 0), str(np.round(means, 1)))
        res.check("std increases with rho", np.all(np.diff(stds) > 0), str(np.round(stds, 1)))
    return res


# -- access intensities on the 6-link line -----------------------------------

TABLE_R_PARAMS = dict(gamma=1, tau_prime=1, T0=15.0)
TABLE_R_M = 100
TABLE_R_SEEDS = 2


def table_R(seed: int = 0, effort: float = 1.0, exp: dict | None = None,
            thetas=None) -> TargetResult:
    exp = exp or load_expectations()["table_R"]
    ref = {float(k): np.array(v, float) for k, v in exp["reference"].items()}
    thetas = sorted(ref) if thetas is None else [float(t) for t in thetas]
    g = line(6, 2)
    P = ProtocolParams.uniform(6, 1 / 16, **TABLE_R_PARAMS)
    ctrl = ControllerConfig(r_min=-2.0, r_max=5.0, schedule=Harmonic(1.0, 1.0, 5000.0))
    n = _periods(500_000, effort, 2000)
    res = TargetResult("table_R", {"graph": "line6_2hop", "thetas": thetas, "M": TABLE_R_M,
                                   "periods": n, "runs_per_theta": TABLE_R_SEEDS,
                                   "r_min": ctrl.r_min, "r_max": ctrl.r_max,
                                   "schedule": str(ctrl.schedule), "master_seed": seed,
                                   **TABLE_R_PARAMS})
    tab = Table("table_R", ["theta", "link", "R_sim", "R_analytic", "R_ref", "ratio"])
    backoff = 1.0 / np.asarray(P.p) - 1.0
    for j, th in enumerate(thetas):
        lam = np.full(6, th)
        tails = []
        for s_i in range(TABLE_R_SEEDS):
            cfg = SimConfig(g, P, r=np.zeros(6), lam=lam, M=TABLE_R_M,
                            seed=derive_seed(seed, j, s_i), n_slots=n * TABLE_R_M)
            tr = run_adaptive(cfg, ctrl).trajectory
            tails.append(tr.r[tr.tail(0.5)].mean(axis=0))
        R = P.payload_mean(np.mean(tails, axis=0)) / backoff
        R_an = P.payload_mean(solve_rstar(g, P, lam).r_star) / backoff
        rf = ref.get(th)
        for k in range(6):
            rk = rf[k] if rf is not None else math.nan
            tab.rows.append([th, k + 1, R[k], R_an[k], rk, R[k] / rk])
        if rf is not None:
            ratio = R / rf
            res.check(f"theta={th}", np.all(np.abs(ratio - 1) <= exp["tolerance"]),
                      "ratios " + " ".join(f"{v:.3f}" for v in ratio))
    res.tables.append(tab)
    return res


# -- hidden nodes --------------------------------------------------------------

HIDDEN_PARAMS = dict(gamma=5, tau_prime=10, T0=15.0)
HIDDEN_PAYLOADS = (5, 10, 15, 17.5, 20, 25, 30, 35, 40, 50, 60, 80, 100, 150)
HIDDEN_CTRL = dict(r_min=0.0, r_max=2.59, schedule=Harmonic(0.14, 2.0, 100.0))


def hidden_nodes(seed: int = 0, effort: float = 1.0, exp: dict | None = None) -> TargetResult:
    exp = exp or load_expectations()["hidden_nodes"]
    P = ProtocolParams.uniform(2, 1 / 64, **HIDDEN_PARAMS)
    g, sens = complete(2), edgeless(2)
    n_fixed = _periods(4_000_000, effort, 100_000)
    n_low = _periods(300_000, effort, 2000)
    n_high = _periods(20_000, effort, 2000)
    res = TargetResult("hidden_nodes", {"interference": "complete2", "sensing": "edgeless2",
                                        "p": 1 / 64, "payloads": list(HIDDEN_PAYLOADS),
                                        "slots_per_payload": n_fixed, "lam": 0.1,
                                        "periods_from_40": n_low, "periods_from_80": n_high,
                                        "master_seed": seed, **HIDDEN_PARAMS,
                                        **{k: str(v) for k, v in HIDDEN_CTRL.items()}})
    sweep = Table("hidden_sweep", ["Tp", "seed", "s_1", "s_2", "s_mean"])
    curve = []
    for j, tp in enumerate(HIDDEN_PAYLOADS):
        s = derive_seed(seed, 0, j)
        cfg = SimConfig(g, P, r=P.r_for_payload([tp, tp]), sensing_graph=sens, seed=s,
                        n_slots=n_fixed, M=5000)
        sr = run_hidden_node(cfg).service_rate
        curve.append(sr.mean())
        sweep.rows.append([tp, s, sr[0], sr[1], sr.mean()])
    res.tables.append(sweep)
    curve = np.array(curve)
    peak_i = int(curve.argmax())
    peak = float(curve[peak_i])
    res.check("peak service rate", abs(peak - exp["peak"]) <= exp["peak_tolerance"],
              f"{peak:.4f} at Tp={HIDDEN_PAYLOADS[peak_i]}")
    # well past the peak the curve must fall; next to it Monte Carlo noise dominates
    far = np.array([v for tp, v in zip(HIDDEN_PAYLOADS, curve)
                    if tp >= 2 * HIDDEN_PAYLOADS[peak_i]])
    res.check("decline beyond peak", far.size > 1 and np.all(np.diff(far) < 0)
              and far[-1] < peak - exp["peak_tolerance"],
              "rates from twice the peak payload " + " ".join(f"{v:.4f}" for v in far))

    adapt = Table("hidden_adaptive", ["initial_Tp", "seed", "periods", "final_Tp_1",
                                      "final_Tp_2"])
    ctrl_kw = dict(HIDDEN_CTRL)
    finals = {40: [], 80: []}
    for init, n, runs in ((40, n_low, 3), (80, n_high, 2)):
        ctrl = ControllerConfig(r0=(math.log(init / P.T0),) * 2, **ctrl_kw)
        for s_i in range(runs):
            s = derive_seed(seed, init, s_i)
            cfg = SimConfig(g, P, r=np.zeros(2), lam=[0.1, 0.1], M=500, seed=s,
                            n_slots=n * 500, sensing_graph=sens)
            fin = run_adaptive(cfg, ctrl).trajectory.mean_payload(0.25)
            finals[init].append(fin)
            adapt.rows.append([init, s, n, fin[0], fin[1]])
    res.tables.append(adapt)
    low = np.array(finals[40])
    fp = float(low.mean())
    res.check("converges from 40", _within(fp, exp["fixed_point"], exp["fixed_point_tolerance"])
              and np.all(low < 40), f"settles at {fp:.1f} slots")
    cap = P.T0 * math.exp(HIDDEN_CTRL["r_max"])
    high = np.array(finals[80])
    res.check("runs away from 80", np.all(high >= exp["runaway_fraction"] * cap),
              f"final payloads {np.round(high.ravel(), 1).tolist()} vs cap {cap:.0f}")
    return res


# -- short-term throughput on lattices ----------------------------------------

def _lattice(name: str, g, link: int, payloads, seed: int, effort: float) -> TargetResult:
    P = ProtocolParams.uniform(g.num_links, 1 / 16, gamma=5, tau_prime=10, T0=15.0)
    n_win = _periods(2000, effort, 50)
    res = TargetResult(name, {"num_links": g.num_links, "edges": g.to_json()["edges"],
                              "link": link + 1, "payloads": list(payloads),
                              "windows": n_win, "master_seed": seed, "p": 1 / 16,
                              "gamma": 5, "tau_prime": 10})
    wins = Table(f"{name}_windows", ["Tp", "window", "throughput"])
    summ = Table(f"{name}_summary", ["Tp", "seed", "window_slots", "mean", "std"])
    stds = []
    for j, tp in enumerate(payloads):
        s = derive_seed(seed, j)
        W = window_slots()
        cfg = SimConfig(g, P, r=P.r_for_payload([tp] * g.num_links), seed=s, M=W,
                        n_slots=W * n_win, record_occupancy=False)
        series = run(cfg).s_prime[:, link]
        stds.append(series.std())
        summ.rows.append([tp, s, W, series.mean(), series.std()])
        wins.rows.extend([tp, i + 1, v] for i, v in enumerate(series))
    res.tables += [summ, wins]
    res.check("oscillation grows with payload", np.all(np.diff(stds) > 0),
              "window std " + " ".join(f"{v:.4f}" for v in stds))
    return res


def lattice_1d(seed: int = 0, effort: float = 1.0, exp: dict | None = None) -> TargetResult:
    exp = exp or load_expectations()["lattice_1d"]
    return _lattice("lattice_1d", line(16, 2), int(exp["link"]) - 1, exp["payloads"], seed, effort)


def lattice_2d(seed: int = 0, effort: float = 1.0, exp: dict | None = None) -> TargetResult:
    exp = exp or load_expectations()["lattice_2d"]
    return _lattice("lattice_2d", lattice(5, 5), int(exp["link"]) - 1, exp["payloads"], seed,
                    effort)


TARGETS = {
    "fig8": fig8,
    "table_st": table_st,
    "table_R": table_R,
    "hidden_nodes": hidden_nodes,
    "lattice_1d": lattice_1d,
    "lattice_2d": lattice_2d,
}


def reproduce(target: str, seed: int = 0, effort: float = 1.0, expectations=None) -> TargetResult:
    if target not in TARGETS:
        raise ConfigError(f"unknown target {target!r}; choose from {', '.join(TARGETS)}")
    exp = load_expectations(expectations)
    t0 = time.perf_counter()
    res = TARGETS[target](seed=seed, effort=effort, exp=exp[target])
    res.seconds = time.perf_counter() - t0
    log.info("%s finished in %.1fs", target, res.seconds)
    return res
