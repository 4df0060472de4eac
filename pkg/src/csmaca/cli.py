"""Command-line entry point: ``csmaca <command> [options]``.

Exit codes: 0 success, 1 a reproduction or verification expectation was
missed, 2 invalid input or configuration.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import oracle
from .adaptive import run_adaptive
from .errors import CsmaError
from .graph import to_bits
from .optimizer import feasibility, r_lower_bound, solve_rstar
from .runconfig import (DEFAULTS, controller_of, derive_seed, graph_of, params_of,
                        parse_overrides, parse_value, resolve, sim_config_of, with_settings)
from .simulator import run, run_hidden_node
from .stationary import access_intensity, onoff_distribution, service_rates


EXIT_OK, EXIT_MISS, EXIT_INVALID = 0, 1, 2


# -- output helpers --------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    raise TypeError(f"not serializable: {type(obj)}")


class Output:
    """Writes CSV/JSON files that each carry the resolved config, plus a manifest."""

    def __init__(self, out_dir, config: dict, command: str):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.command = command
        self.files: list[str] = []

    def csv(self, name: str, header, rows):
        path = self.dir / name
        with open(path, "w", newline="") as fh:
            fh.write("# config: " + json.dumps(self.config, sort_keys=True, default=_jsonable) + "\n")
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        self.files.append(name)
        return path

    def json(self, name: str, payload: dict):
        path = self.dir / name
        body = {"config": self.config, **payload}
        path.write_text(json.dumps(body, indent=2, sort_keys=True, default=_jsonable))
        self.files.append(name)
        return path

    def manifest(self, **extra):
        body = {"command": self.command, "config": self.config, "files": self.files, **extra}
        (self.dir / "manifest.json").write_text(
            json.dumps(body, indent=2, sort_keys=True, default=_jsonable))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def read_csv(path) -> tuple[dict, list[dict]]:
    """Config and rows of a CSV written by :class:`Output`."""
    with open(path) as fh:
        first = fh.readline()
        config = json.loads(first.split(":", 1)[1]) if first.startswith("# config:") else {}
        if not first.startswith("#"):
            fh.seek(0)
        return config, list(csv.DictReader(fh))


# -- commands ---------------------------------------------------------------------

def _resolve(args) -> dict:
    return resolve(graph=args.graph, params_path=args.params, config_path=args.config,
                   seed=args.seed, slots=args.slots, overrides=parse_overrides(args.override),
                   sensing=getattr(args, "sensing", None))


def cmd_analyze(args) -> int:
    cfg = _resolve(args)
    g, P = graph_of(cfg), params_of(cfg)
    s = cfg["settings"]
    r = np.array(s["r"])
    cap = int(s["cap"])
    dist = onoff_distribution(g, P, r, cap)
    rates = service_rates(g, P, r, cap)
    out = Output(args.out, cfg, "analyze")
    K = g.num_links
    out.csv("states.csv", ["mask", "state", "probability"],
            ([m, "".join(map(str, to_bits(m, K))), v] for m, v in enumerate(dist.probs)))
    Tp = P.payload_mean(r)
    out.csv("rates.csv", ["link", "service_rate", "Tp", "access_intensity"],
            ([k + 1, rates[k], Tp[k], access_intensity(P, Tp)[k]] for k in range(K)))
    out.manifest(log_normalizer=dist.log_normalizer)
    print(f"log E(r) = {dist.log_normalizer:.12g}")
    for k in range(K):
        print(f"s_{k + 1} = {rates[k]:.9f}")
    return EXIT_OK


def _solve_report(cfg: dict) -> dict:
    g, P = graph_of(cfg), params_of(cfg)
    s = cfg["settings"]
    lam = np.array(s["lam"])
    cap = int(s["cap"])
    rep = feasibility(g, lam, cap)
    out = {"feasibility": {"status": rep.status, "margin": rep.margin}}
    if rep.status == "strictly_feasible":
        res = solve_rstar(g, P, lam, tol=float(s["tol"]), cap=cap)
        out.update(r_star=res.r_star, residual=res.residual, iterations=res.iterations,
                   Tp_star=P.payload_mean(res.r_star),
                   region_check=bool(np.all(res.r_star > s["r_min"])
                                     and np.all(res.r_star < s["r_max"])))
    if np.all(lam < 1):
        out["lower_bound"] = r_lower_bound(P, lam)
    return out


def cmd_solve(args) -> int:
    cfg = _resolve(args)
    report = _solve_report(cfg)
    out = Output(args.out, cfg, "solve")
    out.json("solve.json", report)
    out.manifest()
    print(json.dumps(report, indent=2, default=_jsonable))
    return EXIT_OK


def _sim_summary(m, K) -> dict:
    means = [m.delay_stats(k)[0] for k in range(K)]
    stds = [m.delay_stats(k)[1] for k in range(K)]
    return {"service_rate": m.service_rate, "real_rate": m.real_served / max(m.n_slots, 1),
            "collisions": m.collisions, "successes": m.successes, "delay_mean": means,
            "delay_std": stds, "access_intensity": m.access_intensity,
            "final_queue": m.final_queue}


def _simulate(cfg: dict):
    sc = sim_config_of(cfg)
    return run_hidden_node(sc) if sc.hidden else run(sc)


def cmd_simulate(args) -> int:
    cfg = _resolve(args)
    m = _simulate(cfg)
    K = cfg["graph"]["num_links"]
    out = Output(args.out, cfg, "simulate")
    rows = []
    sp, lp = m.s_prime, m.lambda_prime
    for i in range(sp.shape[0]):
        for k in range(K):
            rows.append([i + 1, k + 1, sp[i, k], lp[i, k], m.period_queue[i, k], m.period_Tp[i, k]])
    out.csv("periods.csv", ["period", "link", "s_prime", "lambda_prime", "queue", "Tp"], rows)
    summ = _sim_summary(m, K)
    srows = [[key, k + 1, summ[key][k]] for key in summ for k in range(K)]
    if m.occupancy is not None:
        occ = m.occupancy_distribution()
        srows += [["occupancy", int(x), occ[x]] for x in np.flatnonzero(occ)]
    out.csv("summary.csv", ["quantity", "index", "value"], srows)
    out.manifest(n_slots=m.n_slots)
    for k in range(K):
        print(f"link {k + 1}: service rate {m.service_rate[k]:.5f}, "
              f"mean access delay {summ['delay_mean'][k]:.1f} slots")
    return EXIT_OK


def _adapt(cfg: dict):
    s = cfg["settings"]
    sc = sim_config_of(cfg)
    ctrl = controller_of(cfg)
    n = None if s["periods"] is None else int(s["periods"])
    return run_adaptive(sc, ctrl, n_periods=n, burn_in_periods=int(s["burn_in"]))


def _adapt_summary(cfg: dict, res) -> dict:
    tr = res.trajectory
    s = cfg["settings"]
    tail = tr.tail(0.25)
    conv = tr.r[tail].mean(axis=0)
    summary = {"converged_r": conv, "converged_Tp": params_of(cfg).payload_mean(conv),
               "periods": tr.n_periods}
    half = slice(tr.n_periods // 2, None)
    idx = np.arange(tr.n_periods)[half]
    if idx.size > 1:
        summary["queue_drift"] = [float(np.polyfit(idx, tr.queue[half, k], 1)[0])
                                  for k in range(tr.queue.shape[1])]
    g = graph_of(cfg)
    target = np.array(s["lam"]) + float(s["delta"])
    try:
        if g.num_links <= int(s["cap"]) and np.all(target > 0) and np.all(target < 1):
            rs = solve_rstar(g, params_of(cfg), target, cap=int(s["cap"])).r_star
            summary["r_star"] = rs
            summary["residual_vs_rstar"] = float(np.abs(conv - rs).max())
    except CsmaError as exc:
        summary["r_star_error"] = str(exc)
    d = res.metrics.delays
    summary["delay_mean"] = [float(x.mean()) if x.size else None for x in d]
    summary["delay_std"] = [float(x.std()) if x.size else None for x in d]
    return summary


def cmd_adapt(args) -> int:
    cfg = _resolve(args)
    res = _adapt(cfg)
    tr = res.trajectory
    out = Output(args.out, cfg, "adapt")
    K = tr.r.shape[1]
    rows = ([i + 1, k + 1, tr.r[i, k], tr.Tp[i, k], tr.lambda_emp[i, k], tr.s_emp[i, k],
             tr.queue[i, k]] for i in range(tr.n_periods) for k in range(K))
    out.csv("trajectory.csv", ["period", "link", "r", "Tp", "lambda_prime", "s_prime", "queue"],
            rows)
    summary = _adapt_summary(cfg, res)
    out.json("summary.json", summary)
    out.manifest()
    print(json.dumps({k: summary[k] for k in ("converged_r", "residual_vs_rstar")
                      if k in summary}, default=_jsonable))
    return EXIT_OK


def cmd_verify(args) -> int:
    suite = oracle.default_suite(b_max=args.b_max)
    out = Output(args.out, {"b_max": args.b_max, "instances": [s[0] for s in suite]}, "verify")
    rows, ok = [], True
    for name, g, P, pmf in suite:
        rep = oracle.verify(g, P, pmf, cap=max(args.b_max, oracle.DEFAULT_B_MAX))
        ok &= rep.ok()
        rows.append([name, rep.n_states, rep.product_form, rep.marginal, rep.balance,
                     rep.involution, rep.support_symmetric, rep.block_sum, rep.ok()])
    header = ["instance", "states", "product_form", "marginal", "balance", "involution",
              "support_symmetric", "block_sum", "ok"]
    out.csv("verify.csv", header, rows)
    out.manifest(passed=ok)
    worst = {h: max(r[i] for r in rows) for i, h in enumerate(header) if h in
             ("product_form", "marginal", "balance", "block_sum")}
    for h, v in worst.items():
        print(f"max {h} deviation: {v:.3e}")
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_MISS


SWEEP_BASES = ("simulate", "adapt", "solve")


def parse_grid(items) -> list[tuple[str, list]]:
    grid = []
    for item in items or ():
        key, sep, vals = item.partition("=")
        if not sep or not vals:
            raise CsmaError(f"grid entry {item!r} is not key=v1,v2,...")
        if key not in DEFAULTS:
            raise CsmaError(f"unknown setting {key!r} in grid")
        grid.append((key, [parse_value(v) for v in vals.split(",")]))
    return grid


def sweep_cells(cfg: dict, grid) -> list[dict]:
    """Resolved config per grid cell, each with its own derived seed."""
    import itertools
    keys = [k for k, _ in grid]
    cells = []
    for i, combo in enumerate(itertools.product(*[v for _, v in grid])):
        cells.append(with_settings(cfg, seed=derive_seed(cfg["seed"], i), **dict(zip(keys, combo))))
    return cells


def run_cell(base: str, cfg: dict) -> dict:
    """Flat summary of one sweep cell (top-level so worker processes can pickle it)."""
    K = cfg["graph"]["num_links"]
    if base == "simulate":
        summ = _sim_summary(_simulate(cfg), K)
    elif base == "adapt":
        summ = _adapt_summary(cfg, _adapt(cfg))
    else:
        summ = _solve_report(cfg)
    flat = {}
    for key, val in summ.items():
        if isinstance(val, dict):
            for k2, v2 in val.items():
                flat[f"{key}.{k2}"] = v2
        elif np.ndim(val) == 1 and len(val) == K:
            for k in range(K):
                flat[f"{key}_{k + 1}"] = val[k]
        elif np.ndim(val) == 0:
            flat[key] = val
    return flat


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    grid = parse_grid(args.grid)
    if not grid:
        raise CsmaError("empty grid: pass at least one --grid key=v1,v2")
    cells = sweep_cells(cfg, grid)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(run_cell, [args.base] * len(cells), cells))
    else:
        results = [run_cell(args.base, c) for c in cells]
    keys = [k for k, _ in grid]
    cols = sorted({c for r in results for c in r})
    out = Output(args.out, {**cfg, "grid": dict(grid), "base": args.base}, "sweep")
    rows = [[i, cell["seed"]] + [json.dumps(cell["settings"][k]) if isinstance(
             cell["settings"][k], list) else cell["settings"][k] for k in keys]
            + [res.get(c, "") for c in cols] for i, (cell, res) in enumerate(zip(cells, results))]
    out.csv("sweep.csv", ["cell", "seed"] + keys + cols, rows)
    out.manifest(cells=len(cells))
    print(f"{len(cells)} cells written to {out.dir / 'sweep.csv'}")
    return EXIT_OK


def cmd_reproduce(args) -> int:
    from .experiments import reproduce
    res = reproduce(args.target, seed=args.seed or 0, effort=args.effort,
                    expectations=args.expectations)
    cfg = {"target": args.target, "seed": args.seed or 0, "effort": args.effort, **res.config}
    out = Output(Path(args.out) / args.target, cfg, "reproduce")
    for t in res.tables:
        out.csv(f"{t.name}.csv", t.header, t.rows)
    checks = [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in res.checks]
    out.json("checks.json", {"checks": checks, "passed": res.passed, "seconds": res.seconds})
    out.manifest(passed=res.passed)
    for c in res.checks:
        print(f"[{'PASS' if c.passed else 'FAIL'}] {args.target}: {c.name}  {c.detail}")
    if not res.passed:
        misses = [c.name for c in res.checks if not c.passed]
        print(f"{len(misses)} expectation(s) missed: {', '.join(misses)}", file=sys.stderr)
    return EXIT_OK if res.passed else EXIT_MISS


# -- argument parsing -----------------------------------------------------------

def _common(p: argparse.ArgumentParser, graph_required=False):
    p.add_argument("--graph", help="preset name or graph JSON file")
    p.add_argument("--params", help="JSON file with protocol settings (p, gamma, tau_prime, T0, ...)")
    p.add_argument("--config", help="resolved config saved by a previous run")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--slots", type=int, default=None, help="number of simulated slots")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="set any setting, e.g. lam=0.3 or r=[0,1,2]")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="csmaca", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="exact stationary law and service rates")
    _common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("solve", help="feasibility and optimal payload exponents")
    _common(p)
    p.set_defaults(func=cmd_solve)

    for name, func, helptext in (("simulate", cmd_simulate, "slot-level simulation, fixed r"),
                                 ("adapt", cmd_adapt, "simulation with payload control")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--sensing", help="sensing graph (preset or file) for hidden-node runs")
        p.set_defaults(func=func)

    p = sub.add_parser("verify", help="exact chain checks on tiny instances")
    p.add_argument("--b-max", type=int, default=6)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", help="grid of runs with independent derived seeds")
    _common(p)
    p.add_argument("--sensing")
    p.add_argument("--base", choices=SWEEP_BASES, default="simulate")
    p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2,...")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    from .experiments import TARGETS
    p = sub.add_parser("reproduce", help="rerun a published experiment and check it")
    p.add_argument("target", choices=sorted(TARGETS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.add_argument("--effort", type=float, default=1.0, help="scale factor on run lengths")
    p.add_argument("--expectations", help="alternative expectations YAML")
    p.set_defaults(func=cmd_reproduce)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CsmaError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
