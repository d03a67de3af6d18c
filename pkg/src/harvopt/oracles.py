"""Independent reference implementations used by the test and check suites.

Everything here deliberately avoids the production code paths: dense
matrices instead of sparse ones, explicit exhaustive enumeration instead
of running maxima, fixed-point sweeps instead of policy iteration, and
np.interp instead of index arithmetic.  Agreement between these oracles
and the fast implementations is what the scheme-soundness checks assert.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .chain import GridSpec, SolverError
from .impulse import Schedule
from .model import ModelParams

__all__ = [
    "rk4_logistic",
    "euler_maruyama_logistic",
    "dense_generator",
    "dense_implicit_solve",
    "dense_harvest_sup",
    "reference_backward_solve",
]


def rk4_logistic(r0: float, dt: float, params: ModelParams, n_steps: int = 400) -> float:
    """Classic RK4 integration of dr/dt = eta r (lambda - r) over dt."""
    def f(r):
        return params.eta * r * (params.lambda_cap - r)

    h = dt / n_steps
    r = float(r0)
    for _ in range(n_steps):
        k1 = f(r)
        k2 = f(r + 0.5 * h * k1)
        k3 = f(r + 0.5 * h * k2)
        k4 = f(r + h * k3)
        r += h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
    return r


def euler_maruyama_logistic(r0, t0: float, t1: float, draws: np.ndarray,
                            params: ModelParams) -> np.ndarray:
    """Euler-Maruyama path of the logistic SDE on the draws' time grid.

    draws holds unit normals with shape (..., n_steps); returns the path
    at the n_steps + 1 grid points, floored at zero (extinction absorbs).
    """
    draws = np.asarray(draws, dtype=float)
    n_steps = draws.shape[-1]
    h = (t1 - t0) / n_steps
    sq = math.sqrt(h)
    out = np.empty(draws.shape[:-1] + (n_steps + 1,))
    out[..., 0] = r0
    r = np.broadcast_to(np.asarray(r0, dtype=float), draws.shape[:-1]).copy()
    for j in range(n_steps):
        r = r + params.eta * r * (params.lambda_cap - r) * h + params.gamma * r * sq * draws[..., j]
        r = np.maximum(r, 0.0)
        out[..., j + 1] = r
    return out


def dense_generator(params: ModelParams, grid: GridSpec) -> np.ndarray:
    """Dense chain generator assembled node by node with explicit loops."""
    n_r, n_s = grid.n_r, grid.n_s
    h_r, h_s = grid.h_r, grid.h_s
    A = np.zeros((n_r * n_s, n_r * n_s))
    b_s = params.mu - 0.5 * params.sigma**2
    d_s = 0.5 * params.sigma**2
    for i in range(n_r):
        r = grid.r_axis[i]
        b_r = params.eta * r * (params.lambda_cap - r)
        d_r = 0.5 * params.gamma**2 * r**2
        for j in range(n_s):
            node = i * n_s + j
            interior_r = 0 < i < n_r - 1
            interior_s = 0 < j < n_s - 1
            up_r = (max(b_r, 0.0) / h_r + (d_r / h_r**2 if interior_r else 0.0)) if i < n_r - 1 else 0.0
            dn_r = (max(-b_r, 0.0) / h_r + (d_r / h_r**2 if interior_r else 0.0)) if i > 0 else 0.0
            up_s = (max(b_s, 0.0) / h_s + (d_s / h_s**2 if interior_s else 0.0)) if j < n_s - 1 else 0.0
            dn_s = (max(-b_s, 0.0) / h_s + (d_s / h_s**2 if interior_s else 0.0)) if j > 0 else 0.0
            if up_r:
                A[node, node + n_s] = up_r
            if dn_r:
                A[node, node - n_s] = dn_r
            if up_s:
                A[node, node + 1] = up_s
            if dn_s:
                A[node, node - 1] = dn_s
            A[node, node] = -(up_r + dn_r + up_s + dn_s)
    return A


def dense_implicit_solve(w_slice: np.ndarray, dt: float, params: ModelParams,
                         grid: GridSpec) -> np.ndarray:
    """Solve (I - dt A) w = w_slice with a dense LU factorization."""
    A = dense_generator(params, grid)
    B = np.eye(A.shape[0]) - dt * A
    return np.linalg.solve(B, w_slice.reshape(-1)).reshape(w_slice.shape)


def dense_harvest_sup(w_slice: np.ndarray, grid: GridSpec, params: ModelParams) -> np.ndarray:
    """Exhaustive intervention envelope: explicit max over every candidate.

    w_slice has shape (..., n_r, n_s).  Candidate harvests move node i_r to
    any target k <= i_r and pay (p - c1)(i_r - k) h_r - c2.
    """
    n_r = grid.n_r
    coef = np.exp(grid.s_axis) - params.c1
    lev = np.arange(n_r)
    pay = coef[None, None, :] * (lev[:, None, None] - lev[None, :, None]) * grid.h_r - params.c2
    cand = pay + w_slice[..., None, :, :]  # (..., i_r, k, s)
    mask = lev[None, :] <= lev[:, None]
    cand = np.where(mask[..., :, :, None], cand, -np.inf)
    return cand.max(axis=-2)


def _qvi_fixed_point(w_next: np.ndarray, B: np.ndarray, grid: GridSpec,
                     params: ModelParams, tol: float = 1e-13,
                     max_sweeps: int = 200_000) -> np.ndarray:
    """Solve min(B w - w_next, w - Hw) = 0 by a monotone Jacobi sweep.

    w_next has shape (n_combo, n_nodes).  Each sweep replaces w with
    max(local continue solve, exhaustive Hw); no obstacle on the r = 0 rows.
    """
    diag = np.diag(B).copy()
    off = B - np.diag(diag)
    f = w_next
    w = np.linalg.solve(B, f.T).T
    n_combo = f.shape[0]
    for sweep in range(max_sweeps):
        cont = (f - w @ off.T) / diag
        h = dense_harvest_sup(
            w.reshape(n_combo, grid.n_r, grid.n_s), grid, params
        ).reshape(n_combo, -1)
        h[:, : grid.n_s] = -np.inf
        w_new = np.maximum(cont, h)
        delta = np.abs(w_new - w).max()
        w = w_new
        if delta < tol * (1.0 + np.abs(w).max()):
            return w
    raise SolverError(f"QVI fixed point did not converge in {max_sweeps} sweeps ({delta:.2e})")


def reference_backward_solve(params: ModelParams, grid: GridSpec) -> list[np.ndarray]:
    """Full independent backward sweep on the same grid and action sets.

    Returns one array per renewal interval with shape
    (n_t + 1, n_combo, n_r, n_s) matching the production field layout
    (pending combos in row-major product order, oldest order first).
    Dense linear algebra and exhaustive enumeration throughout; intended
    for coarse grids.
    """
    schedule = Schedule.from_params(params)
    n_e, e_axis = grid.n_e, grid.e_axis
    n_nodes = grid.n_r * grid.n_s
    gain = np.maximum(
        (np.exp(grid.s_axis)[None, :] - params.c1) * grid.r_axis[:, None] - params.c2, 0.0
    )
    cost = np.exp(grid.s_axis) + params.c3

    def shift_eval(w_rs: np.ndarray, shift: float) -> np.ndarray:
        out = np.empty_like(w_rs)
        pos = np.minimum(grid.r_axis + shift, grid.r_max)
        for j in range(grid.n_s):
            out[:, j] = np.interp(pos, grid.r_axis, w_rs[:, j])
        return out

    def jump(post_lookup, k: int) -> np.ndarray:
        matures = k > schedule.m_delay
        len_prev = schedule.pending_len(k - 1)
        combos = list(itertools.product(range(n_e), repeat=len_prev))
        pre = np.empty((len(combos), grid.n_r, grid.n_s))
        for ci, tup in enumerate(combos):
            if matures and len_prev:
                shift0 = params.g0 + params.g(float(e_axis[tup[0]]))
                tail = tup[1:]
            else:
                shift0 = params.g0
                tail = tup
            best = None
            for ei in range(n_e):
                extra = params.g(float(e_axis[ei])) if schedule.m_delay == 0 else 0.0
                val = shift_eval(post_lookup(tail + (ei,)), shift0 + extra) - cost[None, :] * e_axis[ei]
                best = val if best is None else np.maximum(best, val)
            fused = dense_harvest_sup(best, grid, params)
            fused[0, :] = -np.inf
            pre[ci] = np.maximum(best, fused)
        return pre

    dt = schedule.T / schedule.n_dates / grid.n_t
    A = dense_generator(params, grid)
    B = np.eye(n_nodes) - dt * A

    out: list[np.ndarray] = [None] * schedule.n_dates  # type: ignore[list-item]
    pre = jump(lambda tup: gain, schedule.n_dates)
    for k in range(schedule.n_dates - 1, -1, -1):
        n_combo = n_e ** schedule.pending_len(k)
        w = np.empty((grid.n_t + 1, n_combo, grid.n_r, grid.n_s))
        w[grid.n_t] = pre
        for j in range(grid.n_t - 1, -1, -1):
            w[j] = _qvi_fixed_point(
                w[j + 1].reshape(n_combo, -1), B, grid, params
            ).reshape(n_combo, grid.n_r, grid.n_s)
        out[k] = w
        if k > 0:
            shape_next = (n_e,) * schedule.pending_len(k)

            def post_lookup(tup, w0=w[0]):
                flat = int(np.ravel_multi_index(tup, shape_next)) if shape_next else 0
                return w0[flat]

            pre = jump(post_lookup, k)
    return out
