"""Run configuration: JSON documents, regime presets and dotted overrides.

Precedence, lowest first: built-in defaults, preset, config file, command
line ``key=value`` overrides.  Every value is validated with the dotted path
of the offending field in the message.  All rates and frequencies are in
units of the spontaneous emission rate, which is fixed to 1.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from typing import Any, Optional

from .bloch import SystemParams
from .noise import DEFAULT_HALF_WIDTH, DEFAULT_POINTS, OunParams, RtnParams, XiGrid, ou_initial_pmf
from .propagator import METHODS

MODES = ("timeseries", "sweep", "pmf", "tau", "validate")
NOISE_KINDS = ("none", "oun", "rtn")


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "system": {"delta0": 0.0, "omega0": 1.0},
    "noise": {"kind": "none"},
    "grid": {"n_points": DEFAULT_POINTS, "half_width": DEFAULT_HALF_WIDTH},
    "run": {
        "mode": "timeseries",
        "times": {"start": 0.0, "stop": 20.0, "num": 41},
        "deltas": {"start": -10.0, "stop": 10.0, "num": 41},
        "a_values": None,
        "n_max": 4,
        "t_max": None,
        "tol": 1e-9,
        "method": "auto",
        "seed": 0,
        "n_traj": 20000,
        "dt_max": None,
        "k_sigma": 4.0,
        "workers": None,
        "out": None,
    },
}

NOISE_FIELDS = {
    "none": {"kind": str},
    "oun": {"kind": str, "gamma": float, "sigma": float, "a": float, "chi": float},
    "rtn": {"kind": str, "lambda": float, "nu": float, "a": float},
}
NOISE_DEFAULTS = {"oun": {"a": 0.0, "chi": 0.0}, "rtn": {"a": 0.0}}

# Figure-caption parameter sets.  Slow presets are read at Gamma t = 1e3.
# rtn-fast uses lambda = 1e4: its caption prints 1e-4, which contradicts the
# fast-modulation condition lambda >> nu, Gamma, Omega0 it illustrates.
PRESETS: dict = {
    "oun-slow": {"noise": {"kind": "oun", "gamma": 1e-4, "sigma": 1.0, "chi": 1.0}},
    "oun-fast": {"noise": {"kind": "oun", "gamma": 1e4, "sigma": 1.0, "chi": 1.0}},
    "rtn-slow-strong": {"noise": {"kind": "rtn", "lambda": 1e-4, "nu": 5.0}},
    "rtn-slow-intermediate": {"noise": {"kind": "rtn", "lambda": 1e-4, "nu": 1.0}},
    "rtn-slow-weak": {"noise": {"kind": "rtn", "lambda": 1e-4, "nu": 0.2}},
    "rtn-fast": {"noise": {"kind": "rtn", "lambda": 1e4, "nu": 5.0}},
}
for _p in PRESETS.values():
    _p["system"] = {"omega0": 1.0}
    _p["run"] = {"mode": "sweep", "times": [1000.0]}


@dataclass(frozen=True)
class RunConfig:
    system: SystemParams
    noise: Any                 # OunParams | RtnParams | None
    grid_points: int
    grid_half_width: float
    run: dict
    raw: dict                  # fully resolved document, echoed into outputs

    @property
    def mode(self) -> str:
        return self.run["mode"]

    def xi_grid(self, noise_model=None) -> Optional[XiGrid]:
        model = self.noise if noise_model is None else noise_model
        if isinstance(model, OunParams):
            return XiGrid.for_params(model, self.grid_points, self.grid_half_width)
        return None

    def with_a(self, a: float):
        """Noise model with the nonequilibrium parameter replaced."""
        if self.noise is None:
            raise ConfigError("run.a_values: noise-free runs have no nonequilibrium parameter")
        return _build_noise({**self.raw["noise"], "a": a}, "run.a_values")

    def to_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))


def _merge(base: dict, top: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in top.items():
        if key == "noise" and isinstance(value, dict) and "kind" in value:
            # a new noise kind replaces the whole block
            if value["kind"] != out.get("noise", {}).get("kind"):
                out["noise"] = copy.deepcopy(value)
                continue
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_json(text: str, source: str = "<config>") -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    return doc


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc: dict, item: str) -> dict:
    """Apply ``section.key=value``; the value is read as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    path, text = item.split("=", 1)
    keys = path.strip().split(".")
    if len(keys) < 2 or not all(keys):
        raise ConfigError(f"override {item!r}: key must be a dotted path such as noise.a")
    value = _parse_value(text)
    if keys == ["noise", "kind"]:
        return _merge(doc, {"noise": {"kind": value}})
    out = copy.deepcopy(doc)
    node = out
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {item!r}: {k} is not a section")
    node[keys[-1]] = value
    return out


def _number(value, path, positive=False, integer=False, allow_none=False):
    if value is None and allow_none:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    if not math.isfinite(value):
        raise ConfigError(f"{path}: must be finite")
    if integer and int(value) != value:
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if positive and value <= 0:
        raise ConfigError(f"{path}: must be positive, got {value!r}")
    return int(value) if integer else float(value)


def _check_keys(block, allowed, path):
    if not isinstance(block, dict):
        raise ConfigError(f"{path}: expected an object")
    unknown = sorted(set(block) - set(allowed))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key (allowed: {', '.join(sorted(allowed))})")


def _build_noise(block: dict, path: str = "noise"):
    kind = block.get("kind", "none")
    if kind not in NOISE_KINDS:
        raise ConfigError(f"{path}.kind: expected one of {NOISE_KINDS}, got {kind!r}")
    _check_keys(block, NOISE_FIELDS[kind], path)
    if kind == "none":
        return None
    vals = {**NOISE_DEFAULTS[kind], **block}
    missing = [k for k in NOISE_FIELDS[kind] if k not in vals]
    if missing:
        raise ConfigError(f"{path}.{missing[0]}: required for {kind} noise")
    nums = {k: _number(vals[k], f"{path}.{k}") for k in NOISE_FIELDS[kind] if k != "kind"}
    if kind == "oun":
        if abs(nums["a"]) >= 1:
            raise ConfigError(f"{path}.a: OUN needs |a| < 1 so the initial variance "
                              f"sigma^2 (1 - a^2) is positive, got {nums['a']}")
        for k in ("gamma", "sigma"):
            if nums[k] <= 0:
                raise ConfigError(f"{path}.{k}: must be positive, got {nums[k]}")
        return OunParams(nums["gamma"], nums["sigma"], nums["a"], nums["chi"])
    if abs(nums["a"]) > 1:
        raise ConfigError(f"{path}.a: RTN needs |a| <= 1, got {nums['a']}")
    for k in ("lambda", "nu"):
        if nums[k] <= 0:
            raise ConfigError(f"{path}.{k}: must be positive, got {nums[k]}")
    return RtnParams(nums["lambda"], nums["nu"], nums["a"])


def expand_range(spec, path: str, allow_steady: bool = False) -> list:
    """A list of numbers, or ``{"start", "stop", "num"}`` for an inclusive linspace."""
    if isinstance(spec, dict):
        _check_keys(spec, ("start", "stop", "num"), path)
        for k in ("start", "stop", "num"):
            if k not in spec:
                raise ConfigError(f"{path}.{k}: required")
        start = _number(spec["start"], f"{path}.start")
        stop = _number(spec["stop"], f"{path}.stop")
        num = _number(spec["num"], f"{path}.num", positive=True, integer=True)
        if num == 1:
            return [start]
        return [start + (stop - start) * i / (num - 1) for i in range(num)]
    if isinstance(spec, list) and spec:
        out = []
        for i, v in enumerate(spec):
            if allow_steady and v == "steady":
                out.append(v)
            else:
                out.append(_number(v, f"{path}[{i}]"))
        return out
    raise ConfigError(f"{path}: expected a non-empty list or a start/stop/num object")


def _validate_run(run: dict) -> dict:
    _check_keys(run, DEFAULTS["run"], "run")
    out = dict(run)
    if out["mode"] not in MODES:
        raise ConfigError(f"run.mode: expected one of {MODES}, got {out['mode']!r}")
    times = expand_range(out["times"], "run.times", allow_steady=True)
    finite = [t for t in times if t != "steady"]
    if any(t < 0 for t in finite):
        raise ConfigError("run.times: times must be non-negative")
    if out["mode"] != "sweep" and len(finite) != len(times):
        raise ConfigError("run.times: 'steady' is only available in sweep mode")
    if any(b <= a for a, b in zip(finite, finite[1:])):
        raise ConfigError("run.times: times must be strictly ascending")
    out["times"] = times
    deltas = expand_range(out["deltas"], "run.deltas")
    if any(b <= a for a, b in zip(deltas, deltas[1:])):
        raise ConfigError("run.deltas: detunings must be strictly ascending")
    out["deltas"] = deltas
    if out["a_values"] is not None:
        out["a_values"] = expand_range(out["a_values"], "run.a_values")
    out["n_max"] = _number(out["n_max"], "run.n_max", integer=True)
    if not 0 <= out["n_max"] <= 10:
        raise ConfigError("run.n_max: must be between 0 and 10")
    out["t_max"] = _number(out["t_max"], "run.t_max", positive=True, allow_none=True)
    out["tol"] = _number(out["tol"], "run.tol", positive=True)
    if out["method"] not in METHODS:
        raise ConfigError(f"run.method: expected one of {METHODS}, got {out['method']!r}")
    out["seed"] = _number(out["seed"], "run.seed", integer=True)
    if out["seed"] < 0:
        raise ConfigError("run.seed: must be non-negative")
    out["n_traj"] = _number(out["n_traj"], "run.n_traj", integer=True)
    if out["n_traj"] < 2:
        raise ConfigError("run.n_traj: must be at least 2")
    out["dt_max"] = _number(out["dt_max"], "run.dt_max", positive=True, allow_none=True)
    out["k_sigma"] = _number(out["k_sigma"], "run.k_sigma", positive=True)
    out["workers"] = _number(out["workers"], "run.workers", positive=True, integer=True,
                             allow_none=True)
    if out["out"] is not None and not isinstance(out["out"], str):
        raise ConfigError("run.out: expected a path string")
    return out


def resolve(doc: dict) -> RunConfig:
    """Validate a merged document into a RunConfig."""
    _check_keys(doc, ("system", "noise", "grid", "run", "preset"), "<root>")
    _check_keys(doc["system"], ("delta0", "omega0"), "system")
    system = SystemParams(_number(doc["system"]["delta0"], "system.delta0"),
                          _number(doc["system"]["omega0"], "system.omega0"))
    noise_model = _build_noise(doc["noise"])
    _check_keys(doc["grid"], ("n_points", "half_width"), "grid")
    n_points = _number(doc["grid"]["n_points"], "grid.n_points", integer=True)
    if n_points < 3:
        raise ConfigError("grid.n_points: at least 3 points are required")
    half_width = _number(doc["grid"]["half_width"], "grid.half_width", positive=True)
    run = _validate_run(doc["run"])
    if run["a_values"] is not None:
        for a in run["a_values"]:
            _build_noise({**doc["noise"], "a": a}, "run.a_values")
    cfg = RunConfig(system, noise_model, n_points, half_width, run, copy.deepcopy(doc))
    if isinstance(noise_model, OunParams):
        # the initial Gaussian must be resolved by the grid
        try:
            ou_initial_pmf(cfg.xi_grid(), noise_model)
        except ValueError as exc:
            raise ConfigError(f"grid: {exc}") from None
    return cfg


def parse_config(text: Optional[str] = None, preset: Optional[str] = None,
                 overrides: Optional[list] = None, source: str = "<config>") -> RunConfig:
    """Defaults <- preset <- JSON text <- overrides, then validate."""
    doc = copy.deepcopy(DEFAULTS)
    user = load_json(text, source) if text else {}
    preset = preset or user.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r} (choose from {', '.join(PRESETS)})")
        doc = _merge(doc, PRESETS[preset])
        doc["preset"] = preset
    doc = _merge(doc, user)
    for item in overrides or []:
        doc = apply_override(doc, item)
    return resolve(doc)
