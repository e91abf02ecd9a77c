"""Command-line front end: ``simulate --mode <mode> [--config PATH] [--preset NAME] ...``."""
from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from typing import Optional

import numpy as np
import scipy

from . import __version__, csvio, mc, observables, parallel, sle
from .bloch import CountingPoint
from .config import MODES, PRESETS, ConfigError, RunConfig, parse_config

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2


def _versions() -> dict:
    return {"specdiff": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _a_values(cfg: RunConfig) -> list:
    if cfg.run["a_values"] is not None:
        return list(cfg.run["a_values"])
    return [cfg.noise.a if cfg.noise is not None else 0.0]


def _noise_for(cfg: RunConfig, a: float):
    if cfg.noise is None:
        return None
    return cfg.with_a(a)


def _time_grid(times) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    return t if t[0] == 0.0 else np.concatenate([[0.0], t])


def run_timeseries(cfg: RunConfig):
    t = _time_grid(cfg.run["times"])
    obs = observables.compute_observables(cfg.system, cfg.noise, t, grid=cfg.xi_grid(),
                                          method=cfg.run["method"], tol=cfg.run["tol"])
    rows = np.column_stack([obs.times, obs.mean_n, obs.second_fact, obs.intensity, obs.mandel_q])
    return ["t", "mean_n", "second_fact", "I", "Q"], rows, {}, True


def run_sweep(cfg: RunConfig):
    times = cfg.run["times"]
    columns = ["delta0", "a", "t", "I", "Q", "mean_n", "second_fact", "ok"]
    rows = []
    failures = []
    for a in _a_values(cfg):
        model = _noise_for(cfg, a)
        table = observables.detuning_sweep(cfg.system, model, cfg.run["deltas"], times,
                                           grid_points=cfg.grid_points, method=cfg.run["method"],
                                           workers=cfg.run["workers"])
        bad = {d for d, _ in table.failures}
        failures += [{"delta0": d, "a": a, "error": msg} for d, msg in table.failures]
        for i, d in enumerate(table.deltas):
            for j, t in enumerate(times):
                tval = np.inf if t == observables.STEADY else t
                rows.append([d, a, tval] + [table.columns[c][i, j] for c in
                                            ("I", "Q", "mean_n", "second_fact")]
                            + [0.0 if float(d) in bad else 1.0])
    return columns, rows, {"failures": failures}, not failures


def run_pmf(cfg: RunConfig):
    t = np.asarray(cfg.run["times"], dtype=float)
    n_max = cfg.run["n_max"]
    pn = observables.photon_pmf(cfg.system, cfg.noise, n_max, t, grid=cfg.xi_grid(),
                                method=cfg.run["method"])
    return ["t"] + [f"p{k}" for k in range(n_max + 1)], np.column_stack([t, pn]), {}, True


def run_tau(cfg: RunConfig):
    res = observables.waiting_time(cfg.system, cfg.noise, t_max=cfg.run["t_max"],
                                   grid=cfg.xi_grid())
    row = [res.mean, res.quadrature, res.tail, res.t_max, res.decay_rate]
    return ["tau", "quadrature", "tail", "t_max", "tail_rate"], [row], {}, True


def run_validate(cfg: RunConfig):
    t = _time_grid(cfg.run["times"])
    cp = CountingPoint(1.0, 2)
    grid = cfg.xi_grid()
    series = sle.average_series(cfg.system, cfg.noise, cp, t, grid=grid, method=cfg.run["method"],
                                tol=cfg.run["tol"])
    est = mc.mc_estimate(cfg.system, cfg.noise, cp, t, cfg.run["n_traj"], cfg.run["seed"],
                         dt_max=cfg.run["dt_max"], workers=cfg.run["workers"])
    report = mc.compare(series, est, cfg.run["k_sigma"])
    q_mc, q_se = mc.q_with_stderr(est)
    n1 = series.component("dP")
    q_sle = observables.mandel_q(n1, series.component("d2P"))
    rows = np.column_stack([t, series.component("P"), est.component("P"), est.stderr[:, 3],
                            n1, est.component("dP"), est.stderr[:, 7], q_sle, q_mc, q_se])
    columns = ["t", "P_sle", "P_mc", "P_se", "mean_n_sle", "mean_n_mc", "mean_n_se",
               "Q_sle", "Q_mc", "Q_se"]
    return columns, rows, {"report": report.as_dict(), "n_traj": est.n_traj}, report.passed


RUNNERS = {"timeseries": run_timeseries, "sweep": run_sweep, "pmf": run_pmf, "tau": run_tau,
           "validate": run_validate}


def _read_config_text(path: str) -> str:
    """JSON config, or the ``config`` header line of a CSV this tool wrote."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if text.lstrip().startswith("#"):
        meta, _, _ = csvio.parse_csv(text)
        if "config" not in meta:
            raise ConfigError(f"{path}: CSV header carries no config line")
        return json.dumps(meta["config"])
    return text


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="simulate",
        description="Photon counting statistics of a driven two-level emitter with spectral "
                    "diffusion (rates in units of the spontaneous emission rate).")
    p.add_argument("--mode", choices=MODES, help="run mode (default: from config)")
    p.add_argument("--config", help="JSON config, or a CSV produced by this tool")
    p.add_argument("--preset", choices=sorted(PRESETS), help="regime preset")
    p.add_argument("--out", help="output CSV path (default: stdout)")
    p.add_argument("--workers", type=int, help=f"worker processes (env {parallel.WORKERS_ENV})")
    p.add_argument("overrides", nargs="*", metavar="key=value",
                   help="dotted overrides, e.g. noise.a=0.6 run.times=[10,20]")
    return p


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides)
    if args.mode:
        overrides.append(f'run.mode="{args.mode}"')
    if args.out:
        overrides.append(f"run.out={json.dumps(args.out)}")
    if args.workers is not None:
        overrides.append(f"run.workers={args.workers}")
    try:
        text = _read_config_text(args.config) if args.config else None
        cfg = parse_config(text, preset=args.preset, overrides=overrides,
                           source=args.config or "<config>")
    except (ConfigError, OSError) as exc:
        print(f"simulate: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    start = time.perf_counter()
    try:
        columns, rows, extra, ok = RUNNERS[cfg.mode](cfg)
    except Exception as exc:
        print(f"simulate: {cfg.mode} run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED
    wall = time.perf_counter() - start

    metadata = {"mode": cfg.mode, "config": json.loads(cfg.to_json()),
                "seed": cfg.run["seed"], "versions": _versions(),
                "wall_time_s": round(wall, 3), "status": "ok" if ok else "failed"}
    metadata.update(extra)
    out = cfg.run["out"]
    if out:
        csvio.emit_csv(columns, rows, out, metadata)
        if cfg.mode == "validate":
            report_path = out.rsplit(".", 1)[0] + ".json"
            with open(report_path, "w", encoding="utf-8") as fh:
                json.dump({k: metadata[k] for k in ("mode", "config", "seed", "versions",
                                                    "status", "report", "n_traj")}, fh, indent=2)
    else:
        sys.stdout.write(csvio.render_csv(columns, rows, metadata))
    if not ok:
        print(f"simulate: {cfg.mode} finished with failures (status recorded in output)",
              file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
