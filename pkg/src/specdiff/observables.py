"""Photon-counting observables derived from the noise-averaged generating function.

At ``s = 1`` the first two s-derivatives of the population sum are the mean
photon number and the second factorial moment; at ``s = 0`` its Taylor
coefficients are the photon-number probabilities.
"""
from __future__ import annotations

import math
import traceback
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

from . import bloch, noise, parallel, propagator, sle
from .bloch import BLOCK, CountingPoint, SystemParams
from .noise import OunParams, XiGrid
from .sle import GfSeries, NoiseModel

Q_UNDEFINED_BELOW = 1e-12
PMF_MAX_ORDER = 10
PMF_NEGATIVE_LIMIT = -1e-9


@dataclass
class ObservableSeries:
    times: np.ndarray
    mean_n: np.ndarray
    second_fact: np.ndarray
    intensity: np.ndarray
    mandel_q: np.ndarray
    p_n: Optional[np.ndarray] = None


def _component(series: GfSeries, k: int, comp: int) -> np.ndarray:
    if series.n_derivs < k:
        raise ValueError(f"series carries derivatives up to order {series.n_derivs}; "
                         f"order {k} is required")
    return series.values[:, BLOCK * k + comp]


def _require_s1(series: GfSeries):
    if series.s != 1.0:
        raise ValueError(f"moments are read at s=1, series was computed at s={series.s}")


def mean_photons(series: GfSeries) -> np.ndarray:
    _require_s1(series)
    return _component(series, 1, bloch.P)


def second_factorial_moment(series: GfSeries) -> np.ndarray:
    _require_s1(series)
    return _component(series, 2, bloch.P)


def line_shape(series: GfSeries, gamma_sp: float = 1.0) -> np.ndarray:
    """Emission intensity (Gamma/2)(W + P): the exact rate of change of <N>."""
    _require_s1(series)
    return 0.5 * gamma_sp * (series.values[:, bloch.W] + series.values[:, bloch.P])


def mandel_q(mean_n, second_fact, eps: float = Q_UNDEFINED_BELOW) -> np.ndarray:
    """(<N(N-1)> - <N>^2) / <N>; NaN where <N> <= eps (undefined)."""
    n1 = np.asarray(mean_n, dtype=float)
    n2 = np.asarray(second_fact, dtype=float)
    defined = n1 > eps
    safe = np.where(defined, n1, 1.0)
    return np.where(defined, (n2 - n1**2) / safe, np.nan)


def observable_series(series: GfSeries, gamma_sp: float = 1.0) -> ObservableSeries:
    n1 = mean_photons(series)
    n2 = second_factorial_moment(series)
    return ObservableSeries(series.times, n1, n2, line_shape(series, gamma_sp), mandel_q(n1, n2))


def compute_observables(sys: SystemParams, noise_model: NoiseModel, t_grid,
                        grid: Optional[XiGrid] = None, method: str = "auto",
                        tol: float = 1e-9) -> ObservableSeries:
    series = sle.average_series(sys, noise_model, CountingPoint(1.0, 2), t_grid, grid=grid,
                                method=method, tol=tol)
    return observable_series(series, sys.gamma_sp)


class NumericalAccuracyError(RuntimeError):
    pass


def photon_pmf(sys: SystemParams, noise_model: NoiseModel, n_max: int, t_list,
               grid: Optional[XiGrid] = None, method: str = "auto") -> np.ndarray:
    """p_n(t) for n = 0..n_max, shape (len(t_list), n_max + 1)."""
    if int(n_max) != n_max or n_max < 0:
        raise ValueError("n_max must be a non-negative integer")
    if n_max > PMF_MAX_ORDER:
        raise ValueError(f"n_max={n_max} exceeds the supported maximum {PMF_MAX_ORDER}")
    t = np.asarray(t_list, dtype=float)
    grid_t = t if t.size and t[0] == 0.0 else np.concatenate([[0.0], t])
    series = sle.average_series(sys, noise_model, CountingPoint(0.0, n_max), grid_t, grid=grid,
                                method=method)
    derivs = series.values[:, bloch.P::BLOCK]
    pn = derivs / np.array([math.factorial(k) for k in range(n_max + 1)], dtype=float)
    pn = pn[grid_t.size - t.size:]
    worst = pn.min() if pn.size else 0.0
    if worst < PMF_NEGATIVE_LIMIT:
        i, k = np.unravel_index(np.argmin(pn), pn.shape)
        raise NumericalAccuracyError(
            f"p_{k}(t={t[i]:g}) = {worst:.3e} is negative beyond {PMF_NEGATIVE_LIMIT:g}; "
            "tighten the integrator tolerance or refine the noise grid")
    return pn


@dataclass
class WaitingTime:
    mean: float
    quadrature: float
    tail: float
    t_max: float
    decay_rate: float


def _no_photon_integral(gen: sle.SleGenerator, init, times):
    """p0 and its running integral on ``times`` from one bordered propagation.

    The generator is extended by an accumulator row reading the summed P
    components, so the integral is propagated exactly along with the state.
    """
    k = gen.n_noise
    read = np.zeros(BLOCK * k)
    read[bloch.P::BLOCK] = 1.0
    bordered = sp.bmat([[gen.base, None], [sp.csr_matrix(read), sp.csr_matrix((1, 1))]],
                       format="csr")
    y0 = np.concatenate([init.reshape(-1), [0.0]])[None, :]
    traj = propagator.propagate(bordered, sp.csr_matrix(bordered.shape), 0, y0, times)[:, 0]
    return traj[:, :-1] @ read, traj[:, -1]


def waiting_time(sys: SystemParams, noise_model: NoiseModel, t_max: Optional[float] = None,
                 tol: float = 1e-10, grid: Optional[XiGrid] = None,
                 t_limit: float = 1e7) -> WaitingTime:
    """Mean waiting time for the first photon, the time integral of p0.

    The integral over [0, t_max] is exact; the remainder is an exponential
    tail fitted to log p0 over the last decade before ``t_max``.  Without
    ``t_max`` the horizon doubles from 10/Gamma until p0 < tol.
    """
    if isinstance(noise_model, OunParams) and grid is None:
        grid = XiGrid.for_params(noise_model)
    gen = sle.build_generator(sys, noise_model, 0.0, 0, grid)
    init = sle.sle_initial(sle.initial_pmf(noise_model, grid), 0)
    horizon = float(t_max) if t_max is not None else 10.0 / sys.gamma_sp
    if horizon <= 0:
        raise ValueError("t_max must be positive")
    while True:
        times = np.concatenate([[0.0], np.linspace(0.1 * horizon, horizon, 11)])
        p0, integral = _no_photon_integral(gen, init, times)
        if p0[-1] < tol:
            break
        if t_max is not None or horizon >= t_limit:
            raise ValueError(
                f"no-photon probability does not decay: p0(t={horizon:g}) = {p0[-1]:.3e} "
                f"exceeds tol={tol:g}; the waiting time is not defined for this configuration "
                "or needs a longer t_max")
        horizon *= 2.0
    tail_t, tail_p = times[1:], p0[1:]
    positive = tail_p > 0
    rate = 0.0
    tail = 0.0
    if positive.sum() >= 2:
        slope = np.polyfit(tail_t[positive], np.log(tail_p[positive]), 1)[0]
        rate = -slope
        if rate > 0:
            tail = max(p0[-1], 0.0) / rate
    return WaitingTime(float(integral[-1] + tail), float(integral[-1]), float(tail), horizon,
                       float(rate))


@dataclass
class SweepTable:
    """Observables on a (detuning, time) grid; ``columns[name][i, j]``."""

    deltas: np.ndarray
    times: list
    columns: dict
    metadata: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


STEADY = "steady"
SWEEP_COLUMNS = ("I", "Q", "mean_n", "second_fact")


def _sweep_point(task):
    sys, noise_model, times, grid, method = task
    out = {name: np.full(len(times), np.nan) for name in SWEEP_COLUMNS}
    finite = [t for t in times if t != STEADY]
    if finite:
        t_grid = np.unique(np.concatenate([[0.0], np.asarray(finite, dtype=float)]))
        obs = compute_observables(sys, noise_model, t_grid, grid=grid, method=method)
        for j, t in enumerate(times):
            if t == STEADY:
                continue
            i = int(np.searchsorted(t_grid, float(t)))
            out["I"][j] = obs.intensity[i]
            out["Q"][j] = obs.mandel_q[i]
            out["mean_n"][j] = obs.mean_n[i]
            out["second_fact"][j] = obs.second_fact[i]
    if STEADY in times:
        gen = sle.build_generator(sys, noise_model, 1.0, 0, grid)
        init = sle.sle_initial(sle.initial_pmf(noise_model, grid), 0)
        _, state = sle.steady_state(gen, init)
        v = state.sum(axis=0)
        out["I"][times.index(STEADY)] = 0.5 * sys.gamma_sp * (v[bloch.W] + v[bloch.P])
    return out


def _safe_sweep_point(task):
    try:
        return _sweep_point(task), None
    except Exception as exc:  # reported per point, the sweep carries on
        return None, f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}"


def detuning_sweep(sys: SystemParams, noise_model: NoiseModel, deltas: Sequence[float],
                   times: Sequence[Union[float, str]], grid_points: Optional[int] = None,
                   method: str = "auto", workers: Optional[int] = None,
                   metadata: Optional[dict] = None) -> SweepTable:
    """I, Q, <N> and <N(N-1)> versus Delta0 at the requested times.

    ``times`` may contain ``"steady"`` for the stationary line shape found by
    the steady-state detector (only I is defined there).  Failing points are
    recorded in ``failures`` and left as NaN.
    """
    deltas = np.asarray(deltas, dtype=float)
    if deltas.ndim != 1 or deltas.size == 0:
        raise ValueError("delta list must be a non-empty 1-D sequence")
    if np.any(np.diff(deltas) <= 0):
        raise ValueError("delta list must be strictly ascending")
    times = list(times)
    for t in times:
        if t != STEADY and not (isinstance(t, (int, float)) and t >= 0):
            raise ValueError(f"times must be non-negative numbers or {STEADY!r}, got {t!r}")
    grid = None
    if isinstance(noise_model, OunParams):
        grid = XiGrid.for_params(noise_model, grid_points or noise.DEFAULT_POINTS)
    tasks = [(SystemParams(float(d), sys.omega0, sys.gamma_sp), noise_model, times, grid, method)
             for d in deltas]
    results = parallel.ordered_map(_safe_sweep_point, tasks, workers)
    columns = {name: np.full((deltas.size, len(times)), np.nan) for name in SWEEP_COLUMNS}
    failures = []
    for i, (res, err) in enumerate(results):
        if err is not None:
            failures.append((float(deltas[i]), err))
            continue
        for name in SWEEP_COLUMNS:
            columns[name][i] = res[name]
    return SweepTable(deltas, times, columns, dict(metadata or {}), failures)


def peak_location(x, y) -> float:
    """Maximum of ``y(x)`` on a uniform grid, refined by a parabola through the top three samples."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    i = int(np.nanargmax(y))
    if i == 0 or i == x.size - 1:
        return float(x[i])
    y0, y1, y2 = y[i - 1], y[i], y[i + 1]
    denom = y0 - 2 * y1 + y2
    if denom == 0:
        return float(x[i])
    return float(x[i] + 0.5 * (y0 - y2) / denom * (x[i + 1] - x[i]))
