"""Stochastic Liouville equation for the noise-averaged generating function.

The joint state holds one augmented Bloch vector per noise coordinate
(grid node for OUN, telegraph state for RTN).  Each block evolves under the
Bloch generator at its own detuning while the noise generator moves
probability weight between blocks; summing the blocks gives the complete
average over the noise.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp

from . import bloch, noise, propagator
from .bloch import BLOCK, CountingPoint, SystemParams
from .noise import OunParams, RtnParams, XiGrid

MAX_DIMENSION = 10**6
STEADY_TOL = 1e-12

NoiseModel = Union[OunParams, RtnParams, None]


@dataclass(frozen=True, eq=False)
class SleGenerator:
    """Joint generator of the marginal averages.

    ``base`` is the n = 0 joint generator (dimension 4K) and ``coupling`` its
    s-derivative; together with ``n_derivs`` they define the augmented
    generator.  ``matrix`` assembles the latter in noise-major layout: index
    ``i * 4(n+1) + 4k + c`` for noise coordinate i, derivative order k and
    Bloch component c.
    """

    base: sp.csr_matrix
    coupling: sp.csr_matrix
    n_derivs: int
    n_noise: int
    s: float
    kind: str
    xi: np.ndarray = field(repr=False)
    gamma_sp: float = 1.0

    @property
    def dim(self) -> int:
        return BLOCK * (self.n_derivs + 1) * self.n_noise

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        full = propagator.assemble(self.base, self.coupling, self.n_derivs)
        perm = _noise_major_permutation(self.n_noise, self.n_derivs)
        return sp.csr_matrix(full[perm][:, perm])


@dataclass
class MarginalTrajectory:
    times: np.ndarray
    blocks: np.ndarray  # (T, K, 4(n+1))

    @property
    def n_noise(self) -> int:
        return self.blocks.shape[1]


@dataclass
class GfSeries:
    """Complete-average generating function ``values[t, component]``."""

    times: np.ndarray
    values: np.ndarray
    s: float
    n_derivs: int

    def component(self, name: str) -> np.ndarray:
        return self.values[:, bloch.component_names(self.n_derivs).index(name)]


def _noise_major_permutation(k: int, n: int) -> np.ndarray:
    # derivative-major index of every noise-major position
    i, d, c = np.meshgrid(np.arange(k), np.arange(n + 1), np.arange(BLOCK), indexing="ij")
    return (d * (BLOCK * k) + i * BLOCK + c).reshape(-1)


def _check_dimension(k: int, n: int):
    dim = BLOCK * (n + 1) * k
    if dim > MAX_DIMENSION:
        raise ValueError(f"SLE dimension {dim} exceeds {MAX_DIMENSION}; coarsen the xi grid "
                         f"(currently {k} points) or lower the derivative order ({n})")


def _joint(sys: SystemParams, s: float, xi: np.ndarray, zgen) -> tuple:
    k = xi.size
    m0 = bloch.coefficient_matrix(sys, s)
    base = (sp.kron(sp.identity(k), m0) + sp.kron(sp.diags(xi), bloch.detuning_matrix())
            + sp.kron(sp.csr_matrix(zgen), sp.identity(BLOCK)))
    coupling = sp.kron(sp.identity(k), bloch.ds_coefficient_matrix(sys))
    return sp.csr_matrix(base), sp.csr_matrix(coupling)


def build_sle_generator_oun(sys: SystemParams, oun: OunParams, grid: XiGrid, s: float,
                            n: int) -> SleGenerator:
    if n < 0:
        raise ValueError("derivative order n must be >= 0")
    _check_dimension(grid.n_points, n)
    xi = grid.nodes
    base, coupling = _joint(sys, s, xi, noise.ou_generator(grid, oun))
    return SleGenerator(base, coupling, n, grid.n_points, s, "oun", xi, sys.gamma_sp)


def build_sle_generator_rtn(sys: SystemParams, rtn: RtnParams, s: float, n: int) -> SleGenerator:
    if n < 0:
        raise ValueError("derivative order n must be >= 0")
    xi = rtn.values
    base, coupling = _joint(sys, s, xi, noise.rtn_generator(rtn))
    return SleGenerator(base, coupling, n, 2, s, "rtn", xi, sys.gamma_sp)


def build_noise_free_generator(sys: SystemParams, s: float, n: int) -> SleGenerator:
    if n < 0:
        raise ValueError("derivative order n must be >= 0")
    base, coupling = _joint(sys, s, np.zeros(1), np.zeros((1, 1)))
    return SleGenerator(base, coupling, n, 1, s, "none", np.zeros(1), sys.gamma_sp)


def build_generator(sys: SystemParams, noise_model: NoiseModel, s: float, n: int,
                    grid: Optional[XiGrid] = None) -> SleGenerator:
    if noise_model is None:
        return build_noise_free_generator(sys, s, n)
    if isinstance(noise_model, RtnParams):
        return build_sle_generator_rtn(sys, noise_model, s, n)
    if isinstance(noise_model, OunParams):
        grid = grid or XiGrid.for_params(noise_model)
        return build_sle_generator_oun(sys, noise_model, grid, s, n)
    raise TypeError(f"unsupported noise model {type(noise_model).__name__}")


def initial_pmf(noise_model: NoiseModel, grid: Optional[XiGrid] = None) -> np.ndarray:
    if noise_model is None:
        return np.ones(1)
    if isinstance(noise_model, RtnParams):
        return np.array(noise.rtn_initial_pmf(noise_model.a))
    grid = grid or XiGrid.for_params(noise_model)
    return noise.ou_initial_pmf(grid, noise_model)


def sle_initial(noise_pmf, n: int) -> np.ndarray:
    """Stacked marginal initial state, shape (K, 4(n+1)): block i = pmf[i] * y0."""
    pmf = np.asarray(noise_pmf, dtype=float)
    if pmf.ndim != 1 or pmf.size == 0:
        raise ValueError("noise pmf must be a non-empty vector")
    if abs(pmf.sum() - 1.0) > 1e-9:
        raise ValueError(f"noise pmf is not normalized (sum = {pmf.sum():.12g})")
    return pmf[:, None] * bloch.initial_state(n)[None, :]


def _to_deriv_major(stacked: np.ndarray, n: int) -> np.ndarray:
    k = stacked.shape[-2]
    arr = stacked.reshape(stacked.shape[:-2] + (k, n + 1, BLOCK))
    arr = np.moveaxis(arr, -2, -3)
    return arr.reshape(stacked.shape[:-2] + (n + 1, k * BLOCK))


def _to_noise_major(dm: np.ndarray, k: int) -> np.ndarray:
    n1 = dm.shape[-2]
    arr = dm.reshape(dm.shape[:-2] + (n1, k, BLOCK))
    arr = np.moveaxis(arr, -3, -2)
    return arr.reshape(dm.shape[:-2] + (k, n1 * BLOCK))


def propagate(gen: SleGenerator, init, t_grid, tol: float = 1e-9,
              method: str = "auto") -> MarginalTrajectory:
    """Marginal averages on ``t_grid`` (ascending, starting at 0).

    The generator is time independent: ``"expm"`` steps with its exact
    exponential, ``"krylov"`` uses Krylov exponential actions, ``"rk"``
    integrates with adaptive DOP853 at relative tolerance ``tol``.
    """
    init = np.asarray(init, dtype=float)
    if init.shape != (gen.n_noise, BLOCK * (gen.n_derivs + 1)):
        raise ValueError(f"initial state shape {init.shape} does not match generator layout "
                         f"{(gen.n_noise, BLOCK * (gen.n_derivs + 1))}")
    y0 = _to_deriv_major(init, gen.n_derivs)
    traj = propagator.propagate(gen.base, gen.coupling, gen.n_derivs, y0, t_grid, method=method,
                                rtol=tol, atol=tol * 1e-2)
    return MarginalTrajectory(np.asarray(t_grid, dtype=float), _to_noise_major(traj, gen.n_noise))


def complete_average(traj: MarginalTrajectory, weights=None) -> np.ndarray:
    """Sum (or weighted sum) of the marginal blocks, shape (T, 4(n+1))."""
    if weights is None:
        return traj.blocks.sum(axis=1)
    w = np.asarray(weights, dtype=float)
    if w.shape != (traj.n_noise,):
        raise ValueError(f"expected {traj.n_noise} weights, got shape {w.shape}")
    return np.einsum("tkc,k->tc", traj.blocks, w)


def steady_state(gen: SleGenerator, init, tol: float = STEADY_TOL, t_start: float = 0.0,
                 t_chunk: float = 10.0, t_limit: float = 1e8):
    """Propagate until the n = 0 blocks stop moving.

    Only the underived blocks can become stationary (counting moments grow
    forever), so the detector is ``max |d/dt y| < tol * gamma_sp`` on them.
    The step length doubles every 64 steps.  Returns ``(t, state)`` with the
    state in the stacked layout of ``init``.
    """
    n = gen.n_derivs
    state = propagator.derivs_to_taylor(_to_deriv_major(np.asarray(init, dtype=float), n))
    base = gen.base
    t = t_start
    dt = t_chunk
    phi = propagator.poly_expm(_dense_if_small(base), _dense_if_small(gen.coupling), n, dt)
    steps = 0
    while True:
        rate = np.abs(base @ state[0]).max()
        if rate < tol * gen.gamma_sp:
            return t, _to_noise_major(propagator.taylor_to_derivs(state), gen.n_noise)
        if t >= t_limit:
            raise propagator.IntegrationError(
                f"no steady state within t={t_limit:g} (|dy/dt| = {rate:.3g})", time=t)
        state = propagator.poly_apply(phi, state)
        t += dt
        steps += 1
        if steps % 64 == 0:
            phi = propagator._ring_mul(phi, phi)
            dt *= 2.0


def _dense_if_small(m):
    return m.toarray() if m.shape[0] <= 64 else m


def average_series(sys: SystemParams, noise_model: NoiseModel, cp: CountingPoint, t_grid,
                   grid: Optional[XiGrid] = None, method: str = "auto",
                   tol: float = 1e-9) -> GfSeries:
    """Complete-average generating function for one parameter set."""
    if isinstance(noise_model, OunParams) and grid is None:
        grid = XiGrid.for_params(noise_model)
    gen = build_generator(sys, noise_model, cp.s, cp.n_derivs, grid)
    init = sle_initial(initial_pmf(noise_model, grid), cp.n_derivs)
    traj = propagate(gen, init, t_grid, tol=tol, method=method)
    return GfSeries(traj.times, complete_average(traj), cp.s, cp.n_derivs)


def relaxation_time(noise_model: NoiseModel) -> float:
    if noise_model is None:
        return 0.0
    if isinstance(noise_model, RtnParams):
        return 1.0 / (2.0 * noise_model.lambda_switch)
    return 1.0 / noise_model.gamma_decay

