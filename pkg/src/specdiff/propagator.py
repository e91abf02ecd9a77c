"""Propagators for time-independent, derivative-augmented linear systems.

Every generator in this package is affine in the counting variable, so the
system for the s-derivatives of a state ``y`` obeying ``y' = (B + s C) y`` is

    d/dt T_k = B T_k + C T_{k-1},        T_k = (d^k y / ds^k) / k!,

for k = 0..n.  Read as a polynomial ``T(eps) = sum_k T_k eps^k`` truncated
after ``eps**n``, this is ``T' = (B + eps C) T``, and the propagator is the
matrix exponential ``exp((B + eps C) t)`` in that truncated polynomial ring.
Scaling and squaring in the ring needs (n+1)(n+2)/2 products of D x D
matrices per squaring instead of one product of size D(n+1), which is what
makes the stiff noise-coupled generators tractable.

Public arrays use the *derivative* form ``y[k] = d^k y / ds^k`` with shape
``(n+1, D)``; the Taylor form is internal.
"""
from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp
from scipy.sparse.linalg import expm_multiply

METHODS = ("auto", "expm", "krylov", "rk")

# Largest base dimension for which dense propagator polynomials are formed.
DENSE_LIMIT = 3000
# Beyond this value of ||A|| * t an explicit Runge-Kutta run is refused.
RK_STIFFNESS_LIMIT = 1e6

_THETA = 2.0
_TAYLOR_DEGREE = 24  # 2**25 / 25! < 3e-18


class IntegrationError(RuntimeError):
    """Raised when a propagation cannot deliver the requested accuracy."""

    def __init__(self, message, time=None, stiffness=None, suggestion=None):
        details = []
        if time is not None:
            details.append(f"t={time:.6g}")
        if stiffness is not None:
            details.append(f"stiffness ||A||*T={stiffness:.3g}")
        if suggestion is not None:
            details.append(f"suggested method: {suggestion}")
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)
        self.time = time
        self.stiffness = stiffness
        self.suggestion = suggestion


def onenorm(a) -> float:
    """Induced 1-norm (max absolute column sum) of a dense or sparse matrix."""
    if sp.issparse(a):
        if a.nnz == 0:
            return 0.0
        return float(abs(a).sum(axis=0).max())
    a = np.asarray(a)
    if a.size == 0:
        return 0.0
    return float(np.abs(a).sum(axis=0).max())


def _factorials(order: int) -> np.ndarray:
    return np.array([math.factorial(k) for k in range(order + 1)], dtype=float)[:, None]


def derivs_to_taylor(y: np.ndarray) -> np.ndarray:
    """``(..., n+1, D)`` derivative blocks -> Taylor coefficients."""
    y = np.asarray(y, dtype=float)
    return y / _factorials(y.shape[-2] - 1)


def taylor_to_derivs(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    return c * _factorials(c.shape[-2] - 1)


def _gen_mul(hb, hc, w):
    # (hB + eps hC) * W in the truncated ring
    out = np.empty_like(w)
    out[0] = hb @ w[0]
    for k in range(1, w.shape[0]):
        out[k] = hb @ w[k] + hc @ w[k - 1]
    return out


def _ring_mul(x, y):
    out = np.empty_like(x)
    for k in range(x.shape[0]):
        acc = x[0] @ y[k]
        for i in range(1, k + 1):
            acc += x[i] @ y[k - i]
        out[k] = acc
    return out


def poly_expm(base, coupling, order: int, t: float) -> np.ndarray:
    """Coefficients of ``exp((base + eps*coupling) t)`` up to ``eps**order``.

    Returns an array of shape ``(order+1, D, D)``.  Uses a degree-24 Taylor
    polynomial for ``expm1`` at ``||h A|| <= 2`` followed by squaring of
    ``I + Y`` through ``Y <- 2Y + Y^2``, which keeps the near-identity
    propagators free of cancellation.
    """
    d = base.shape[0]
    nrm = (onenorm(base) + (onenorm(coupling) if order else 0.0)) * abs(t)
    squarings = math.ceil(math.log2(nrm / _THETA)) if nrm > _THETA else 0
    h = t / 2.0**squarings
    hb = base * h
    hc = coupling * h
    eye = np.eye(d)
    w = np.zeros((order + 1, d, d))
    w[0] = eye
    for j in range(_TAYLOR_DEGREE, 1, -1):
        w = _gen_mul(hb, hc, w)
        w /= j
        w[0] += eye
    y = _gen_mul(hb, hc, w)
    for _ in range(squarings):
        y = 2.0 * y + _ring_mul(y, y)
    y[0] += eye
    return y


def poly_apply(phi: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """Apply a propagator polynomial to Taylor coefficients ``(order+1, D)``."""
    out = np.empty_like(coeffs)
    for k in range(coeffs.shape[0]):
        acc = phi[k] @ coeffs[0]
        for j in range(1, k + 1):
            acc += phi[k - j] @ coeffs[j]
        out[k] = acc
    return out


def assemble(base, coupling, order: int) -> sp.csr_matrix:
    """Full augmented generator in derivative-major layout.

    Block (k, k) is ``base`` and block (k, k-1) is ``k * coupling``.
    """
    base = sp.csr_matrix(base)
    coupling = sp.csr_matrix(coupling)
    weights = sp.diags(np.arange(1, order + 1, dtype=float), -1, shape=(order + 1, order + 1))
    full = sp.kron(sp.identity(order + 1), base) + sp.kron(weights, coupling)
    return sp.csr_matrix(full)


def check_time_grid(t_grid) -> np.ndarray:
    t = np.asarray(t_grid, dtype=float)
    if t.ndim != 1 or t.size == 0:
        raise ValueError("time grid must be a non-empty 1-D sequence")
    if t[0] != 0.0:
        raise ValueError(f"time grid must start at 0, got {t[0]!r}")
    if not np.all(np.isfinite(t)):
        raise ValueError("time grid contains non-finite values")
    if np.any(np.diff(t) < 0):
        raise ValueError("time grid must be ascending")
    return t


def _distinct_steps(dts):
    keys: list[float] = []
    index = []
    for dt in dts:
        for i, key in enumerate(keys):
            if abs(dt - key) <= 1e-13 * max(dt, key):
                index.append(i)
                break
        else:
            keys.append(dt)
            index.append(len(keys) - 1)
    return keys, index


def choose_method(base, coupling, order: int, t_grid) -> str:
    """Cheapest exact method for this generator and grid.

    Dense polynomial exponentials cost ~log2(||A|| dt) squarings per distinct
    step; Krylov (``expm_multiply``) costs ~||A|| T sparse products, which
    blows up for stiff noise generators.
    """
    d = base.shape[0]
    if d <= 64:
        return "expm"
    if d > DENSE_LIMIT:
        return "krylov"
    t = np.asarray(t_grid, dtype=float)
    dts = [dt for dt in np.diff(t) if dt > 0]
    if not dts:
        return "expm"
    nrm = onenorm(base) + order * onenorm(coupling)
    keys, _ = _distinct_steps(dts)
    ring_products = (order + 1) * (order + 2) // 2
    dense = 0.0
    for dt in keys:
        sq = max(0.0, math.log2(max(nrm * dt / _THETA, 1.0)))
        dense += (sq + 2) * ring_products * 2.0 * d**3
    dense += len(dts) * ring_products * 2.0 * d**2
    nnz = (order + 1) * sp.csr_matrix(base).nnz + order * sp.csr_matrix(coupling).nnz
    # sparse products run roughly 20x below dense BLAS throughput
    krylov = 20.0 * (nrm * (t[-1] - t[0]) + 40.0 * len(dts)) * 2.0 * nnz
    return "expm" if dense <= krylov else "krylov"


def propagate(base, coupling, order: int, y0, t_grid, method: str = "auto",
              rtol: float = 1e-9, atol: float = 1e-11) -> np.ndarray:
    """Solve ``d/dt y_k = B y_k + k C y_{k-1}`` on ``t_grid``.

    Parameters
    ----------
    base, coupling : (D, D) dense or sparse matrices
    order : highest s-derivative carried
    y0 : (order+1, D) initial derivative blocks
    t_grid : ascending times starting at 0
    method : ``"expm"`` (dense ring exponential), ``"krylov"``
        (``scipy.sparse.linalg.expm_multiply``), ``"rk"`` (adaptive DOP853 with
        ``rtol``/``atol``) or ``"auto"``.

    Returns
    -------
    (len(t_grid), order+1, D) array in derivative form.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if order < 0:
        raise ValueError("order must be >= 0")
    t = check_time_grid(t_grid)
    y0 = np.asarray(y0, dtype=float)
    d = base.shape[0]
    if y0.shape != (order + 1, d):
        raise ValueError(f"initial state has shape {y0.shape}, expected {(order + 1, d)}")
    if method == "auto":
        method = choose_method(base, coupling, order, t)

    # overflow is reported below as an IntegrationError
    with np.errstate(over="ignore", invalid="ignore"):
        if method == "expm":
            out = _propagate_expm(base, coupling, order, y0, t)
        elif method == "krylov":
            out = _propagate_krylov(base, coupling, order, y0, t)
        else:
            out = _propagate_rk(base, coupling, order, y0, t, rtol, atol)
    if not np.all(np.isfinite(out)):
        bad = int(np.argmax(~np.all(np.isfinite(out.reshape(len(t), -1)), axis=1)))
        nrm = onenorm(base) + order * onenorm(coupling)
        raise IntegrationError("propagation produced non-finite values", time=float(t[bad]),
                               stiffness=nrm * t[-1], suggestion="expm")
    return out


def _propagate_expm(base, coupling, order, y0, t):
    if sp.issparse(base) and base.shape[0] <= 64:
        base = base.toarray()
    if sp.issparse(coupling) and coupling.shape[0] <= 64:
        coupling = coupling.toarray()
    dts = np.diff(t)
    keys, index = _distinct_steps([dt for dt in dts])
    cache: dict[int, np.ndarray] = {}
    state = derivs_to_taylor(y0)
    out = np.empty((t.size,) + y0.shape)
    out[0] = state
    for step, dt in enumerate(dts):
        if dt > 0:
            i = index[step]
            if i not in cache:
                cache[i] = poly_expm(base, coupling, order, keys[i])
            state = poly_apply(cache[i], state)
        out[step + 1] = state
    return taylor_to_derivs(out)


def _propagate_krylov(base, coupling, order, y0, t):
    a = assemble(base, coupling, order)
    v = y0.reshape(-1)
    dts = np.diff(t)
    if t.size > 2 and np.allclose(dts, dts[0], rtol=1e-12, atol=0.0) and dts[0] > 0:
        traj = expm_multiply(a, v, start=0.0, stop=t[-1], num=t.size, endpoint=True)
    else:
        traj = np.empty((t.size, v.size))
        traj[0] = v
        for i, dt in enumerate(dts):
            v = expm_multiply(a * dt, v) if dt > 0 else v
            traj[i + 1] = v
    return traj.reshape((t.size,) + y0.shape)


def _propagate_rk(base, coupling, order, y0, t, rtol, atol):
    a = assemble(base, coupling, order)
    stiffness = onenorm(a) * t[-1]
    if stiffness > RK_STIFFNESS_LIMIT:
        raise IntegrationError("generator too stiff for explicit Runge-Kutta", time=0.0,
                               stiffness=stiffness, suggestion="expm")
    if t[-1] == 0.0:
        return np.broadcast_to(y0, (t.size,) + y0.shape).copy()
    sol = solve_ivp(lambda _t, y: a @ y, (0.0, t[-1]), y0.reshape(-1), method="DOP853",
                    t_eval=t, rtol=rtol, atol=atol)
    if sol.status != 0:
        t_fail = float(sol.t[-1]) if sol.t.size else 0.0
        raise IntegrationError(f"Runge-Kutta integration failed: {sol.message}", time=t_fail,
                               stiffness=stiffness, suggestion="expm")
    return sol.y.T.reshape((t.size,) + y0.shape)
