"""Environmental frequency noise: Ornstein-Uhlenbeck and random telegraph.

Provides the forward generators acting on probability vectors, the
nonstationary initial distributions controlled by the nonequilibrium
parameter ``a``, and exact samplers for individual noise paths.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

DEFAULT_POINTS = 201
DEFAULT_HALF_WIDTH = 6.0  # in units of sigma
PMF_DEFICIT_LIMIT = 1e-6


@dataclass(frozen=True)
class OunParams:
    gamma_decay: float
    sigma: float
    a: float = 0.0
    chi: float = 0.0

    def __post_init__(self):
        for name in ("gamma_decay", "sigma", "a", "chi"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.gamma_decay <= 0:
            raise ValueError("gamma_decay must be positive")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if abs(self.a) >= 1:
            raise ValueError("OUN requires |a| < 1 so the initial variance sigma^2 (1 - a^2) is positive")

    @property
    def initial_mean(self) -> float:
        return self.a * self.chi

    @property
    def initial_std(self) -> float:
        return self.sigma * math.sqrt(1.0 - self.a**2)

    @property
    def rate(self) -> float:
        return self.gamma_decay


@dataclass(frozen=True)
class RtnParams:
    lambda_switch: float
    nu: float
    a: float = 0.0

    def __post_init__(self):
        for name in ("lambda_switch", "nu", "a"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.lambda_switch <= 0:
            raise ValueError("lambda_switch must be positive")
        if self.nu < 0:
            raise ValueError("nu must be non-negative")
        if abs(self.a) > 1:
            raise ValueError("RTN requires |a| <= 1")

    @property
    def values(self) -> np.ndarray:
        """Noise values in state order (+nu, -nu)."""
        return np.array([self.nu, -self.nu])

    @property
    def rate(self) -> float:
        return self.lambda_switch


@dataclass(frozen=True)
class XiGrid:
    """Uniform grid of noise values for the Fokker-Planck discretization.

    Nodes are laid out symmetrically about the grid centre, so the grid for
    (-xi_max, -xi_min) is the exact mirror image of this one.
    """

    xi_min: float
    xi_max: float
    n_points: int = DEFAULT_POINTS

    def __post_init__(self):
        if self.n_points < 3:
            raise ValueError("XiGrid needs at least 3 points")
        if not (math.isfinite(self.xi_min) and math.isfinite(self.xi_max)):
            raise ValueError("grid bounds must be finite")
        if not self.xi_min < self.xi_max:
            raise ValueError("xi_min must be smaller than xi_max")

    @property
    def spacing(self) -> float:
        return (self.xi_max - self.xi_min) / (self.n_points - 1)

    @property
    def nodes(self) -> np.ndarray:
        centre = 0.5 * (self.xi_min + self.xi_max)
        offsets = np.arange(self.n_points) - 0.5 * (self.n_points - 1)
        return centre + offsets * self.spacing

    def mirrored(self) -> "XiGrid":
        return XiGrid(-self.xi_max, -self.xi_min, self.n_points)

    @classmethod
    def for_params(cls, p: OunParams, n_points: int = DEFAULT_POINTS,
                   half_width: float = DEFAULT_HALF_WIDTH) -> "XiGrid":
        """Grid spanning ``half_width`` sigma beyond both 0 and the initial mean."""
        m = p.initial_mean
        return cls(min(0.0, m) - half_width * p.sigma, max(0.0, m) + half_width * p.sigma, n_points)


@dataclass(frozen=True)
class NoisePath:
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if np.shape(self.times) != np.shape(self.values):
            raise ValueError("times and values must have the same length")


def ou_generator(grid: XiGrid, p: OunParams) -> sp.csr_matrix:
    """Flux-form central discretization of ``gamma d/dxi (xi + sigma^2 d/dxi)``.

    The interface flux ``J = gamma (xi p + sigma^2 dp/dxi)`` is evaluated at
    cell faces with zero flux through the outer faces, so columns sum to zero
    and total probability is conserved exactly up to rounding.
    """
    if grid.n_points < 3:
        raise ValueError("XiGrid needs at least 3 points")
    h = grid.spacing
    x = grid.nodes
    faces = 0.5 * (x[:-1] + x[1:])
    diff = p.sigma**2 / h
    # J_{i+1/2} = gamma * (lo_i * p_i + hi_i * p_{i+1})
    lo = p.gamma_decay * (0.5 * faces - diff) / h
    hi = p.gamma_decay * (0.5 * faces + diff) / h
    if np.any(hi < 0) or np.any(lo > 0):
        raise ValueError(
            f"grid spacing {h:.3g} too coarse for sigma={p.sigma:.3g} on [{grid.xi_min:.3g}, "
            f"{grid.xi_max:.3g}]: off-diagonal rates would turn negative")
    # Snap rates to a common power-of-two quantum (41 significant bits of the
    # largest rate) so every diagonal entry and column sum is formed exactly.
    top = max(np.abs(lo).max(), np.abs(hi).max())
    quantum = 2.0 ** (math.frexp(top)[1] - 41)
    lo = np.round(lo / quantum) * quantum
    hi = np.round(hi / quantum) * quantum
    n = grid.n_points
    # (Zp)_i = (J_{i+1/2} - J_{i-1/2}) / h
    upper = hi                 # Z[i, i+1]
    lower = -lo                # Z[i+1, i]
    main = np.zeros(n)
    main[:-1] += lo
    main[1:] -= hi
    return sp.diags([lower, main, upper], [-1, 0, 1], shape=(n, n), format="csr")


def ou_initial_pmf(grid: XiGrid, p: OunParams) -> np.ndarray:
    """Nonstationary Gaussian (mean a*chi, variance sigma^2 (1-a^2)) on the grid."""
    mean, std = p.initial_mean, p.initial_std
    x = grid.nodes
    dens = np.exp(-0.5 * ((x - mean) / std) ** 2) / (std * math.sqrt(2 * math.pi))
    total = math.fsum(dens)  # order independent, so mirrored grids normalize identically
    mass = total * grid.spacing
    if abs(1.0 - mass) > PMF_DEFICIT_LIMIT:
        raise ValueError(
            f"initial distribution (mean {mean:.3g}, std {std:.3g}) is not resolved by the grid "
            f"[{grid.xi_min:.3g}, {grid.xi_max:.3g}] with {grid.n_points} points "
            f"(mass deficit {1.0 - mass:.2e})")
    return dens / total


def ou_stationary_pmf(grid: XiGrid, p: OunParams) -> np.ndarray:
    return ou_initial_pmf(grid, OunParams(p.gamma_decay, p.sigma, 0.0, 0.0))


def rtn_generator(p: RtnParams) -> np.ndarray:
    lam = p.lambda_switch
    return np.array([[-lam, lam], [lam, -lam]])


def rtn_initial_pmf(a: float) -> tuple[float, float]:
    """Weights of the (+nu, -nu) states at t = 0."""
    if not abs(a) <= 1:
        raise ValueError("RTN requires |a| <= 1")
    return (0.5 * (1 + a), 0.5 * (1 - a))


def trajectory_stream(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream owned by one trajectory.

    Philox keyed by (seed, index): the draws of trajectory ``index`` never
    depend on how trajectories are distributed across workers.
    """
    if seed < 0 or index < 0:
        raise ValueError("seed and index must be non-negative")
    return np.random.Generator(np.random.Philox(key=np.array([seed, index], dtype=np.uint64)))


def ou_paths(p: OunParams, t_grid, normals: np.ndarray) -> np.ndarray:
    """OU paths on ``t_grid`` from standard normals of shape (N, len(t_grid)).

    Uses the exact transition kernel, so node values carry no time-step bias.
    """
    t = np.asarray(t_grid, dtype=float)
    z = np.atleast_2d(normals)
    out = np.empty_like(z)
    out[:, 0] = p.initial_mean + p.initial_std * z[:, 0]
    decay = np.exp(-p.gamma_decay * np.diff(t))
    kick = p.sigma * np.sqrt(-np.expm1(-2.0 * p.gamma_decay * np.diff(t)))
    for k in range(1, t.size):
        out[:, k] = out[:, k - 1] * decay[k - 1] + kick[k - 1] * z[:, k]
    return out


def rtn_paths(p: RtnParams, t_grid, uniforms: np.ndarray) -> np.ndarray:
    """Telegraph paths on ``t_grid`` from uniforms of shape (N, len(t_grid)).

    The first uniform picks the initial state; each later one decides
    whether an odd number of exponential(lambda) switches fell inside the
    step, which happens with probability (1 - exp(-2 lambda dt)) / 2.
    """
    t = np.asarray(t_grid, dtype=float)
    u = np.atleast_2d(uniforms)
    plus = u[:, 0] < 0.5 * (1 + p.a)
    flip = -0.5 * np.expm1(-2.0 * p.lambda_switch * np.diff(t))
    flips = u[:, 1:] < flip
    parity = np.cumsum(flips, axis=1) % 2 == 1
    state = np.empty(u.shape, dtype=bool)
    state[:, 0] = plus
    state[:, 1:] = plus[:, None] ^ parity
    return np.where(state, p.nu, -p.nu)


def sample_ou_path(p: OunParams, t_grid, rng: np.random.Generator) -> NoisePath:
    t = np.asarray(t_grid, dtype=float)
    _check_ascending(t)
    values = ou_paths(p, t, rng.standard_normal((1, t.size)))[0]
    return NoisePath(t, values)


def sample_rtn_path(p: RtnParams, t_grid, rng: np.random.Generator) -> NoisePath:
    t = np.asarray(t_grid, dtype=float)
    _check_ascending(t)
    values = rtn_paths(p, t, rng.random((1, t.size)))[0]
    return NoisePath(t, values)


def _check_ascending(t):
    if t.ndim != 1 or t.size == 0 or np.any(np.diff(t) < 0):
        raise ValueError("t_grid must be a non-empty ascending sequence")
