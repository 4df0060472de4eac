"""Flat run configuration shared by the CLI, sweeps and reproduction targets.

A resolved configuration is a JSON-serializable dict::

    {"graph": {...}, "sensing_graph": {...} | None, "seed": int, "settings": {...}}

where ``settings`` holds every scalar or per-link knob with per-link values
already expanded to lists.  Writing this dict next to each output and
feeding it back through ``--config`` reproduces the run.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .adaptive import ControllerConfig
from .errors import ConfigError
from .graph import PRESETS, SEVEN_LINK_LAMBDA_BAR, ConflictGraph
from .simulator import SimConfig
from .stationary import ProtocolParams

DEFAULTS = {
    "p": 1 / 16, "gamma": 5, "tau_prime": 10, "T0": 15.0,
    "r": 0.0, "lam": 0.0, "rho": None, "lam_bar": None,
    "M": 500, "n_slots": 1_000_000, "dummy_bits": True, "slot_us": 9.0,
    "hidden_collision": "probe", "initial_queue": 0.0,
    "r_min": 0.0, "r_max": 3.5, "delta": 0.0, "schedule": "harmonic:0.23,2,100",
    "r0": 0.0, "lambda_max": 1.0, "periods": None, "burn_in": 0,
    "tol": 1e-9, "window_ms": 50.0, "cap": 20,
}
PER_LINK = ("p", "r", "lam", "lam_bar", "r0")
DEFAULT_LAM_BAR = {"seven_link": SEVEN_LINK_LAMBDA_BAR}


def parse_value(text: str):
    """Override values: JSON literals where possible, bare strings otherwise."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        low = text.lower()
        if low in ("true", "false"):
            return low == "true"
        return text


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, val = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        if key not in DEFAULTS:
            raise ConfigError(f"unknown setting {key!r}; known: {', '.join(sorted(DEFAULTS))}")
        out[key] = parse_value(val)
    return out


def load_graph(source) -> tuple[ConflictGraph, str | None]:
    """A preset name or a path to graph JSON; returns the graph and preset name."""
    if isinstance(source, ConflictGraph):
        return source, None
    if isinstance(source, dict):
        return ConflictGraph.from_json(source), None
    if source in PRESETS:
        return PRESETS[source](), source
    path = Path(source)
    if not path.exists():
        raise ConfigError(f"graph {source!r} is neither a preset ({', '.join(PRESETS)}) nor a file")
    try:
        return ConflictGraph.load(path), None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"graph file {source}: {exc}") from exc


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"no such file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _expand(val, K: int, key: str):
    if val is None:
        return None
    if np.isscalar(val):
        return [float(val)] * K
    val = [float(v) for v in val]
    if len(val) != K:
        raise ConfigError(f"setting {key!r} has {len(val)} entries, expected {K}")
    return val


def resolve(graph=None, params_path=None, config_path=None, seed=None, slots=None,
            overrides=None, sensing=None) -> dict:
    """Merge defaults, a saved config, a params file, flags and overrides (in that order)."""
    settings = dict(DEFAULTS)
    base_graph = base_sensing = None
    base_seed = 0
    if config_path is not None:
        saved = _load_json(config_path)
        settings.update(saved.get("settings", {}))
        base_graph = saved.get("graph")
        base_sensing = saved.get("sensing_graph")
        base_seed = saved.get("seed", 0)
    if params_path is not None:
        pj = _load_json(params_path)
        unknown = set(pj) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown keys in params file: {sorted(unknown)}")
        settings.update(pj)
    if slots is not None:
        settings["n_slots"] = int(slots)
    settings.update(overrides or {})
    source = graph if graph is not None else base_graph
    if source is None:
        raise ConfigError("a graph is required (--graph PRESET|FILE or --config)")
    g, preset = load_graph(source)
    K = g.num_links
    if settings.get("lam_bar") is None and preset in DEFAULT_LAM_BAR:
        settings["lam_bar"] = list(DEFAULT_LAM_BAR[preset])
    for key in PER_LINK:
        settings[key] = _expand(settings[key], K, key)
    if settings.get("rho") is not None:
        if settings["lam_bar"] is None:
            raise ConfigError("rho needs lam_bar (set it or use a preset that defines it)")
        settings["lam"] = [settings["rho"] * v for v in settings["lam_bar"]]
    sens = sensing if sensing is not None else base_sensing
    sg = load_graph(sens)[0] if sens is not None else None
    return {"graph": g.to_json(), "sensing_graph": sg.to_json() if sg else None,
            "seed": int(base_seed if seed is None else seed), "settings": settings}


def graph_of(cfg: dict) -> ConflictGraph:
    return ConflictGraph.from_json(cfg["graph"])


def params_of(cfg: dict) -> ProtocolParams:
    s = cfg["settings"]
    return ProtocolParams(p=tuple(s["p"]), gamma=s["gamma"], tau_prime=s["tau_prime"], T0=s["T0"])


def sim_config_of(cfg: dict) -> SimConfig:
    s = cfg["settings"]
    sg = cfg.get("sensing_graph")
    return SimConfig(
        graph=graph_of(cfg), params=params_of(cfg), r=np.array(s["r"]), lam=np.array(s["lam"]),
        M=int(s["M"]), seed=int(cfg["seed"]), n_slots=int(s["n_slots"]),
        dummy_bits=bool(s["dummy_bits"]), slot_us=float(s["slot_us"]),
        sensing_graph=ConflictGraph.from_json(sg) if sg else None,
        hidden_collision=s["hidden_collision"], initial_queue=float(s["initial_queue"]))


def controller_of(cfg: dict) -> ControllerConfig:
    s = cfg["settings"]
    return ControllerConfig(r_min=float(s["r_min"]), r_max=float(s["r_max"]),
                            delta=float(s["delta"]), schedule=str(s["schedule"]),
                            lambda_bar=float(s["lambda_max"]), r0=tuple(s["r0"]))


def derive_seed(master: int, *path: int) -> int:
    """Independent 63-bit seed for the cell at ``path`` under ``master``."""
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(int(v) for v in path))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def with_settings(cfg: dict, seed=None, **updates) -> dict:
    """Copy of a resolved config with some settings replaced (per-link values re-expanded)."""
    out = json.loads(json.dumps(cfg))
    K = out["graph"]["num_links"]
    for key, val in updates.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown setting {key!r}")
        out["settings"][key] = _expand(val, K, key) if key in PER_LINK else val
    s = out["settings"]
    if "rho" in updates and s.get("rho") is not None:
        if s.get("lam_bar") is None:
            raise ConfigError("rho needs lam_bar")
        s["lam"] = [s["rho"] * v for v in s["lam_bar"]]
    if seed is not None:
        out["seed"] = int(seed)
    return out
