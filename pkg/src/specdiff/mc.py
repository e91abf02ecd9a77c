"""Monte Carlo oracle: generating-function propagation along sampled noise paths.

Each trajectory draws its own noise path from a counter-based stream keyed
by (seed, trajectory index) and integrates the augmented Bloch equations
with the detuning held piecewise constant on a fine internal grid.
Trajectories are processed in fixed-size chunks whose partial moments are
merged in chunk order, so the estimate is bit-identical for any number of
workers.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import bloch, noise, parallel
from .bloch import BLOCK, CountingPoint, SystemParams
from .noise import OunParams, RtnParams
from .sle import GfSeries, NoiseModel

CHUNK_SIZE = 1000
DEFAULT_DT = 0.01
RELATIVE_SE_WARNING = 0.1
_TAYLOR_TOL = 1e-17
_MAX_STEP_NORM = 4.0


@dataclass
class McEstimate:
    """Per-time mean, standard error and covariance of the augmented vector."""

    times: np.ndarray
    mean: np.ndarray      # (T, 4(n+1))
    stderr: np.ndarray    # (T, 4(n+1))
    n_traj: int
    cov: np.ndarray       # (T, 4(n+1), 4(n+1)) sample covariance of one trajectory
    s: float = 1.0
    n_derivs: int = 0

    def component(self, name: str) -> np.ndarray:
        return self.mean[:, bloch.component_names(self.n_derivs).index(name)]


def internal_grid(t_grid, dt_max: float):
    """Fine grid refining every output interval into equal steps <= dt_max.

    Returns the fine grid and the fine-grid index of every output time.
    """
    t = np.asarray(t_grid, dtype=float)
    if t.ndim != 1 or t.size == 0 or t[0] != 0.0 or np.any(np.diff(t) < 0):
        raise ValueError("t_grid must be ascending and start at 0")
    pieces = [np.zeros(1)]
    index = [0]
    for a, b in zip(t[:-1], t[1:]):
        m = max(1, math.ceil((b - a) / dt_max - 1e-9)) if b > a else 0
        if m:
            piece = a + (b - a) * np.arange(1, m + 1) / m
            piece[-1] = b  # output times are hit exactly
            pieces.append(piece)
        index.append(index[-1] + m)
    return np.concatenate(pieces), np.array(index)


def default_dt(noise_model: NoiseModel) -> float:
    """Fine step: DEFAULT_DT, or a tenth of the noise correlation time if shorter."""
    if isinstance(noise_model, (OunParams, RtnParams)):
        return min(DEFAULT_DT, 0.1 / noise_model.rate)
    return DEFAULT_DT


def _sample_chunk_paths(noise_model, fine, seed, first, count):
    # one independent stream per trajectory; draws never depend on chunking
    if noise_model is None:
        return np.zeros((count, fine.size))
    gaussian = isinstance(noise_model, OunParams)
    draws = np.empty((count, fine.size))
    for j in range(count):
        rng = noise.trajectory_stream(seed, first + j)
        draws[j] = rng.standard_normal(fine.size) if gaussian else rng.random(fine.size)
    if gaussian:
        return noise.ou_paths(noise_model, fine, draws)
    return noise.rtn_paths(noise_model, fine, draws)


def _taylor_step(y, a0t, et, xi, dt):
    # y <- exp(dt (A0 + xi E)) y for every row, each row with its own xi
    term = y
    out = y.copy()
    k = 1
    bound = dt * (np.abs(a0t).sum(axis=1).max() + np.abs(xi).max() * np.abs(et).sum(axis=1).max())
    if bound > _MAX_STEP_NORM:
        raise ValueError(f"internal step too coarse: ||A|| dt = {bound:.3g}; lower dt_max")
    scale = 1.0
    while True:
        term = (term @ a0t + xi[:, None] * (term @ et)) * (dt / k)
        out += term
        scale *= bound / k
        if scale < _TAYLOR_TOL:
            return out
        k += 1


def _run_chunk(task):
    sys, noise_model, cp, fine, out_index, seed, first, count = task
    n = cp.n_derivs
    a0t = np.ascontiguousarray(bloch.augmented_generator(sys, cp.s, 0.0, n).T)
    e_aug = np.kron(np.eye(n + 1), bloch.detuning_matrix())
    et = np.ascontiguousarray(e_aug.T)
    paths = _sample_chunk_paths(noise_model, fine, seed, first, count)
    # step-average detuning: mean of the exact node values at both ends
    xi_steps = 0.5 * (paths[:, :-1] + paths[:, 1:])
    dts = np.diff(fine)
    y = np.tile(bloch.initial_state(n), (count, 1))
    record = np.empty((out_index.size, count, y.shape[1]))
    slot = 0
    if out_index[0] == 0:
        record[0] = y
        slot = 1
    for k, dt in enumerate(dts):
        y = _taylor_step(y, a0t, et, xi_steps[:, k], dt)
        while slot < out_index.size and out_index[slot] == k + 1:
            record[slot] = y
            slot += 1
    mean = record.mean(axis=1)
    dev = record - mean[:, None, :]
    m2 = np.einsum("tjc,tjd->tcd", dev, dev)
    return count, mean, m2


def _merge(a, b):
    # pairwise combination of (count, mean, centred second moment)
    na, ma, sa = a
    nb, mb, sb = b
    n = na + nb
    delta = mb - ma
    mean = ma + delta * (nb / n)
    m2 = sa + sb + np.einsum("tc,td->tcd", delta, delta) * (na * nb / n)
    return n, mean, m2


def _tree_reduce(parts):
    while len(parts) > 1:
        nxt = [_merge(parts[i], parts[i + 1]) for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def mc_estimate(sys: SystemParams, noise_model: NoiseModel, cp: CountingPoint, t_grid,
                n_traj: int, seed: int, dt_max: Optional[float] = None,
                workers: Optional[int] = None, chunk_size: int = CHUNK_SIZE) -> McEstimate:
    """Noise-path average of the augmented generating function on ``t_grid``."""
    if int(n_traj) != n_traj or n_traj < 2:
        raise ValueError("n_traj must be an integer >= 2")
    if chunk_size < 1:
        raise ValueError("chunk_size must be positive")
    dt = default_dt(noise_model) if dt_max is None else float(dt_max)
    if not dt > 0:
        raise ValueError("dt_max must be positive")
    t = np.asarray(t_grid, dtype=float)
    fine, out_index = internal_grid(t, dt)
    tasks = [(sys, noise_model, cp, fine, out_index, int(seed), first,
              min(chunk_size, n_traj - first)) for first in range(0, int(n_traj), chunk_size)]
    parts = parallel.ordered_map(_run_chunk, tasks, workers)
    count, mean, m2 = _tree_reduce(parts)
    cov = m2 / (count - 1)
    var = np.clip(np.diagonal(cov, axis1=1, axis2=2), 0.0, None)
    stderr = np.sqrt(var / count)
    est = McEstimate(t, mean, stderr, int(count), cov, cp.s, cp.n_derivs)
    _warn_noisy(est)
    return est


def _warn_noisy(est: McEstimate):
    cols = np.arange(bloch.P, est.mean.shape[1], BLOCK)
    m = np.abs(est.mean[:, cols])
    se = est.stderr[:, cols]
    bad = (se > RELATIVE_SE_WARNING * m) & (m > 0)
    if np.any(bad):
        names = bloch.component_names(est.n_derivs)
        which = sorted({names[cols[j]] for j in np.nonzero(bad)[1]})
        warnings.warn(f"Monte Carlo standard error exceeds {RELATIVE_SE_WARNING:.0%} of the mean "
                      f"for {', '.join(which)}; increase n_traj", RuntimeWarning, stacklevel=3)


def q_with_stderr(est: McEstimate):
    """Mandel Q and its delta-method standard error from the (dP, d2P) covariance."""
    if est.s != 1.0 or est.n_derivs < 2:
        raise ValueError("Q needs an s=1 estimate with at least two derivatives")
    i1, i2 = BLOCK + bloch.P, 2 * BLOCK + bloch.P
    n1, n2 = est.mean[:, i1], est.mean[:, i2]
    with np.errstate(divide="ignore", invalid="ignore"):
        q = (n2 - n1**2) / n1
        g1 = -(n2 + n1**2) / n1**2
        g2 = 1.0 / n1
        var = (g1**2 * est.cov[:, i1, i1] + 2 * g1 * g2 * est.cov[:, i1, i2]
               + g2**2 * est.cov[:, i2, i2]) / est.n_traj
    undefined = n1 <= 1e-12
    q = np.where(undefined, np.nan, q)
    se = np.where(undefined, np.nan, np.sqrt(np.clip(var, 0.0, None)))
    return q, se


@dataclass
class ComparisonReport:
    k_sigma: float
    z_max: dict
    passed: bool
    failing: list

    def as_dict(self) -> dict:
        return {"k_sigma": self.k_sigma, "passed": self.passed, "failing": self.failing,
                "z_max": {k: (None if math.isnan(v) else v) for k, v in self.z_max.items()}}


def _z(diff, se):
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, np.abs(diff) / se, np.where(np.abs(diff) > 0, np.inf, 0.0))
    z = z[np.isfinite(diff)]
    return float(z.max()) if z.size else float("nan")


def compare(sle_series: GfSeries, mc: McEstimate, k_sigma: float = 4.0) -> ComparisonReport:
    """Worst z-score per component (plus Q when available); pass if all <= k_sigma."""
    if sle_series.values.shape != mc.mean.shape or not np.array_equal(sle_series.times, mc.times):
        raise ValueError("SLE series and Monte Carlo estimate are on different grids or layouts")
    if sle_series.s != mc.s:
        raise ValueError(f"counting variables differ: s={sle_series.s} vs s={mc.s}")
    names = bloch.component_names(mc.n_derivs)
    z_max = {name: _z(sle_series.values[:, j] - mc.mean[:, j], mc.stderr[:, j])
             for j, name in enumerate(names)}
    if mc.s == 1.0 and mc.n_derivs >= 2:
        n1 = sle_series.values[:, BLOCK + bloch.P]
        n2 = sle_series.values[:, 2 * BLOCK + bloch.P]
        with np.errstate(divide="ignore", invalid="ignore"):
            q_sle = np.where(n1 > 1e-12, (n2 - n1**2) / n1, np.nan)
        q_mc, q_se = q_with_stderr(mc)
        z_max["Q"] = _z(q_sle - q_mc, q_se)
    failing = [k for k, v in z_max.items() if v > k_sigma]
    return ComparisonReport(float(k_sigma), z_max, not failing, failing)
