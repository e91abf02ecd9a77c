"""Generating-function optical Bloch equations of a driven two-level emitter.

The state of one derivative block is ``(U, V, W, P)``: the coherence
quadratures, the inversion and the population sum of the photon-number
generating function.  Augmented states stack blocks by ascending order of
the derivative with respect to the counting variable ``s``.  All rates and
frequencies are in units of the spontaneous emission rate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import propagator

BLOCK = 4
U, V, W, P = range(BLOCK)
COMPONENTS = ("U", "V", "W", "P")


@dataclass(frozen=True)
class SystemParams:
    """Emitter and laser constants: detuning, Rabi frequency, emission rate."""

    delta0: float = 0.0
    omega0: float = 1.0
    gamma_sp: float = 1.0

    def __post_init__(self):
        for name in ("delta0", "omega0", "gamma_sp"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.gamma_sp <= 0:
            raise ValueError("gamma_sp must be positive")


@dataclass(frozen=True)
class CountingPoint:
    s: float
    n_derivs: int = 0

    def __post_init__(self):
        if not math.isfinite(self.s):
            raise ValueError("counting variable s must be finite")
        if int(self.n_derivs) != self.n_derivs or self.n_derivs < 0:
            raise ValueError("n_derivs must be a non-negative integer")


def component_names(n: int) -> list[str]:
    """Labels of the augmented vector: U, V, W, P, dU, ..., d2P, ..."""
    names = []
    for k in range(n + 1):
        prefix = "" if k == 0 else ("d" if k == 1 else f"d{k}")
        names.extend(prefix + c for c in COMPONENTS)
    return names


def detuning_matrix() -> np.ndarray:
    """Derivative of the coefficient matrix with respect to the detuning."""
    e = np.zeros((BLOCK, BLOCK))
    e[U, V] = -1.0
    e[V, U] = 1.0
    return e


def coefficient_matrix(sys: SystemParams, s: float, xi: float = 0.0) -> np.ndarray:
    """4x4 generator at counting variable ``s`` and detuning ``delta0 + xi``."""
    g = sys.gamma_sp
    delta = sys.delta0 + xi
    om = sys.omega0
    return np.array([
        [-g / 2, -delta, 0.0, 0.0],
        [delta, -g / 2, -om, 0.0],
        [0.0, om, -g / 2 * (1 + s), -g / 2 * (1 + s)],
        [0.0, 0.0, -g / 2 * (1 - s), -g / 2 * (1 - s)],
    ])


def ds_coefficient_matrix(sys: SystemParams) -> np.ndarray:
    m = np.zeros((BLOCK, BLOCK))
    half = sys.gamma_sp / 2
    m[W, W] = m[W, P] = -half
    m[P, W] = m[P, P] = half
    return m


def augmented_generator(sys: SystemParams, s: float, xi: float = 0.0, n: int = 0) -> np.ndarray:
    """Block lower-bidiagonal generator of the state and its first n s-derivatives."""
    if n < 0:
        raise ValueError("derivative order n must be >= 0")
    m = coefficient_matrix(sys, s, xi)
    dm = ds_coefficient_matrix(sys)
    size = BLOCK * (n + 1)
    out = np.zeros((size, size))
    for k in range(n + 1):
        r = slice(BLOCK * k, BLOCK * (k + 1))
        out[r, r] = m
        if k:
            out[r, BLOCK * (k - 1):BLOCK * k] = k * dm
    return out


def initial_state(n: int = 0) -> np.ndarray:
    """Excited-state preparation: (U, V, W, P) = (0, 0, 1, 1), derivatives zero."""
    if n < 0:
        raise ValueError("derivative order n must be >= 0")
    y = np.zeros(BLOCK * (n + 1))
    y[W] = 1.0
    y[P] = 1.0
    return y


def noise_free_propagate(sys: SystemParams, cp: CountingPoint, t_grid, method: str = "auto",
                         rtol: float = 1e-9, atol: float = 1e-11) -> np.ndarray:
    """Augmented generating function on ``t_grid`` without spectral diffusion.

    Returns an array of shape ``(len(t_grid), 4*(n+1))``.  The generator is
    constant, so the default path steps with its exact exponential;
    ``method="rk"`` runs adaptive DOP853 at the given tolerances instead.
    """
    n = cp.n_derivs
    y0 = initial_state(n).reshape(n + 1, BLOCK)
    traj = propagator.propagate(coefficient_matrix(sys, cp.s), ds_coefficient_matrix(sys), n, y0,
                                t_grid, method=method, rtol=rtol, atol=atol)
    return traj.reshape(traj.shape[0], -1)


def steady_state_excitation(sys: SystemParams, xi: float = 0.0) -> float:
    """Closed-form steady excited population of the ordinary Bloch equations."""
    delta = sys.delta0 + xi
    g = sys.gamma_sp
    om2 = sys.omega0**2
    return (om2 / 4) / (delta**2 + g**2 / 4 + om2 / 2)
