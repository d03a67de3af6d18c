"""Discretized state space and locally consistent Markov-chain stencils.

The solver works on the reduced value w(t, r, s, pending) = v - x with
s = log p (price axis in log coordinates, so drift mu - sigma^2/2 and
diffusion sigma^2 are constant) and, in the cost-equals-price mode, q tied
to the s-node.  The generator of (R, S) is discretized with upwind first
differences for the drifts and central second differences for the
diffusions, which keeps every row an M-matrix row: off-diagonals >= 0 and
zero row sum.  At the axis boundaries only the inward-pointing upwind drift
is kept and the diffusion term is dropped (one-sided truncation; the
+-3 sigma sqrt(T) log-price band makes the boundary influence negligible).

Flattened node order is row-major with r outer: node = i_r * n_s + i_s.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import ModelParams, ParamError

__all__ = [
    "SolverError",
    "GridSpec",
    "GeneratorRow",
    "build_grid",
    "generator_stencil",
    "Generator",
    "implicit_step",
    "interpolate",
]

_PERMC = "MMD_AT_PLUS_A"


class SolverError(RuntimeError):
    """An iterative procedure failed to converge within its cap."""


@dataclass(frozen=True)
class GridSpec:
    """Axes of the value grid.

    r on [0, r_max] with n_r nodes, s = log p on [s_min, s_max] with n_s
    nodes, pending-order quantities on [0, K] with n_e levels, n_t implicit
    time steps per renewal interval.
    """

    r_max: float = 1.0
    n_r: int = 151
    s_min: float = -0.7146152422706632
    s_max: float = 0.7146152422706632
    n_s: int = 101
    n_e: int = 11
    n_t: int = 50
    K: float = 0.3

    def __post_init__(self):
        if self.n_r < 2 or self.n_s < 2 or self.n_t < 2:
            raise ParamError("n_r, n_s and n_t must all be >= 2")
        if not self.s_min < self.s_max:
            raise ParamError(f"degenerate log-price axis: s_min={self.s_min} >= s_max={self.s_max}")
        if not self.r_max > 0:
            raise ParamError(f"r_max must be > 0, got {self.r_max}")
        if self.K > 0 and self.n_e < 2:
            raise ParamError("n_e must be >= 2 when K > 0")
        if self.K == 0 and self.n_e != 1:
            object.__setattr__(self, "n_e", 1)

    @property
    def h_r(self) -> float:
        return self.r_max / (self.n_r - 1)

    @property
    def h_s(self) -> float:
        return (self.s_max - self.s_min) / (self.n_s - 1)

    @property
    def r_axis(self) -> np.ndarray:
        return np.linspace(0.0, self.r_max, self.n_r)

    @property
    def s_axis(self) -> np.ndarray:
        return np.linspace(self.s_min, self.s_max, self.n_s)

    @property
    def e_axis(self) -> np.ndarray:
        if self.n_e == 1:
            return np.zeros(1)
        return np.linspace(0.0, self.K, self.n_e)

    @property
    def n_nodes(self) -> int:
        return self.n_r * self.n_s


def build_grid(params: ModelParams, overrides: dict | None = None) -> GridSpec:
    """Grid with the log-price band +-(|mu - sigma^2/2| T + 3 sigma sqrt(T)).

    Any GridSpec field can be overridden; a zero-width band (e.g. sigma = 0
    with mu = sigma^2/2 and no explicit bounds) is rejected as degenerate.
    """
    half_band = abs(params.mu - 0.5 * params.sigma**2) * params.T + 3.0 * params.sigma * math.sqrt(params.T)
    spec = GridSpec(s_min=-half_band, s_max=half_band, K=params.K)
    if overrides:
        unknown = set(overrides) - {f for f in GridSpec.__dataclass_fields__}
        if unknown:
            raise ParamError(f"unknown grid overrides: {sorted(unknown)}")
        spec = replace(spec, **overrides)
    return spec


@dataclass(frozen=True)
class GeneratorRow:
    """One row of the chain generator: nonnegative rates to the neighbors."""

    node: tuple[int, int]
    rates: dict[str, float]  # keys r+, r-, s+, s- (absent neighbors omitted)

    @property
    def diagonal(self) -> float:
        return -sum(self.rates.values())


def _rate_arrays(params: ModelParams, grid: GridSpec):
    """Upwind/central rates per unit time on the (n_r, n_s) grid.

    Returns (up_r, dn_r, up_s, dn_s); boundary truncation already applied.
    """
    r = grid.r_axis[:, None]
    b_r = params.eta * r * (params.lambda_cap - r)
    d_r = 0.5 * params.gamma**2 * r**2
    h_r, h_s = grid.h_r, grid.h_s

    up_r = np.maximum(b_r, 0.0) / h_r + d_r / h_r**2
    dn_r = np.maximum(-b_r, 0.0) / h_r + d_r / h_r**2
    up_r = np.broadcast_to(up_r, (grid.n_r, grid.n_s)).copy()
    dn_r = np.broadcast_to(dn_r, (grid.n_r, grid.n_s)).copy()
    # boundary rows keep only the inward drift, no diffusion
    up_r[-1, :] = 0.0
    dn_r[-1, :] = max(-float(b_r[-1, 0]), 0.0) / h_r
    dn_r[0, :] = 0.0
    up_r[0, :] = max(float(b_r[0, 0]), 0.0) / h_r  # zero: r = 0 is absorbing

    b_s = params.mu - 0.5 * params.sigma**2
    d_s = 0.5 * params.sigma**2
    up_s = np.full((grid.n_r, grid.n_s), max(b_s, 0.0) / h_s + d_s / h_s**2)
    dn_s = np.full((grid.n_r, grid.n_s), max(-b_s, 0.0) / h_s + d_s / h_s**2)
    up_s[:, -1] = 0.0
    dn_s[:, -1] = max(-b_s, 0.0) / h_s
    dn_s[:, 0] = 0.0
    up_s[:, 0] = max(b_s, 0.0) / h_s
    return up_r, dn_r, up_s, dn_s


def generator_stencil(node: tuple[int, int], params: ModelParams, grid: GridSpec) -> GeneratorRow:
    """The generator row at one node, for inspection and consistency checks."""
    i_r, i_s = node
    if not (0 <= i_r < grid.n_r and 0 <= i_s < grid.n_s):
        raise ParamError(f"node {node} outside the {grid.n_r} x {grid.n_s} grid")
    up_r, dn_r, up_s, dn_s = _rate_arrays(params, grid)
    rates = {}
    if i_r + 1 < grid.n_r and up_r[i_r, i_s] > 0:
        rates["r+"] = float(up_r[i_r, i_s])
    if i_r - 1 >= 0 and dn_r[i_r, i_s] > 0:
        rates["r-"] = float(dn_r[i_r, i_s])
    if i_s + 1 < grid.n_s and up_s[i_r, i_s] > 0:
        rates["s+"] = float(up_s[i_r, i_s])
    if i_s - 1 >= 0 and dn_s[i_r, i_s] > 0:
        rates["s-"] = float(dn_s[i_r, i_s])
    return GeneratorRow(node=node, rates=rates)


class Generator:
    """Sparse chain generator A over the flattened (r, s) grid.

    ``inject_negative_offdiag`` deliberately corrupts one interior rate;
    it exists so the scheme-soundness checker can prove it catches a broken
    stencil, and must never be set in production runs.
    """

    def __init__(self, params: ModelParams, grid: GridSpec, inject_negative_offdiag: bool = False):
        self.params = params
        self.grid = grid
        up_r, dn_r, up_s, dn_s = _rate_arrays(params, grid)
        if inject_negative_offdiag:
            i, j = grid.n_r // 2, grid.n_s // 2
            up_s[i, j] = -abs(up_s[i, j]) - 1.0
        self.rates = (up_r, dn_r, up_s, dn_s)
        n_r, n_s, n = grid.n_r, grid.n_s, grid.n_nodes
        idx = np.arange(n).reshape(n_r, n_s)
        rows, cols, vals = [], [], []
        for arr, (dr, ds) in zip((up_r, dn_r, up_s, dn_s), ((1, 0), (-1, 0), (0, 1), (0, -1))):
            src_r = slice(max(0, -dr), n_r - max(0, dr))
            src_s = slice(max(0, -ds), n_s - max(0, ds))
            block = arr[src_r, src_s]
            nz = block != 0.0
            i, j = np.nonzero(nz)
            i += src_r.start
            j += src_s.start
            rows.append(idx[i, j])
            cols.append(idx[i + dr, j + ds])
            vals.append(arr[i, j])
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        off = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
        diag = up_r + dn_r + up_s + dn_s
        self.diag_total = diag.reshape(-1)
        self.A = (off - sp.diags(self.diag_total)).tocsr()
        self._lu_cache: dict[float, object] = {}
        self._b_cache: dict[float, tuple] = {}

    # -- soundness --------------------------------------------------------
    def row_report(self):
        """(min off-diagonal, max |row sum|) over every row of A."""
        off = self.A.copy()
        off.setdiag(0.0)
        off.eliminate_zeros()
        min_off = off.data.min() if off.nnz else 0.0
        row_sums = np.asarray(self.A.sum(axis=1)).ravel()
        return float(min_off), float(np.abs(row_sums).max())

    def moment_errors(self):
        """Local-consistency errors on interior nodes.

        Returns (max |first moment - drift|, max (second moment - variance
        - h |drift|)); the first should vanish to roundoff, the second be
        <= 0 up to roundoff.
        """
        g, p = self.grid, self.params
        up_r, dn_r, up_s, dn_s = self.rates
        r = g.r_axis[:, None]
        b_r = p.eta * r * (p.lambda_cap - r)
        var_r = p.gamma**2 * r**2
        b_s = p.mu - 0.5 * p.sigma**2
        interior = np.s_[1:-1, 1:-1]
        m1_r = (up_r - dn_r)[interior] * g.h_r - np.broadcast_to(b_r, up_r.shape)[interior]
        m2_r = (up_r + dn_r)[interior] * g.h_r**2 - np.broadcast_to(var_r, up_r.shape)[interior] \
            - g.h_r * np.abs(np.broadcast_to(b_r, up_r.shape))[interior]
        m1_s = (up_s - dn_s)[interior] * g.h_s - b_s
        m2_s = (up_s + dn_s)[interior] * g.h_s**2 - p.sigma**2 - g.h_s * abs(b_s)
        first = max(np.abs(m1_r).max(), np.abs(m1_s).max())
        second = max(m2_r.max(), m2_s.max())
        return float(first), float(second)

    # -- implicit stepping -------------------------------------------------
    def _b_parts(self, dt: float):
        """COO data of B = I - dt A plus the per-entry row index."""
        key = float(dt)
        if key not in self._b_cache:
            B = (sp.eye(self.grid.n_nodes, format="csr") - dt * self.A).tocsr()
            B.sort_indices()
            row_of_entry = np.repeat(np.arange(B.shape[0]), np.diff(B.indptr))
            self._b_cache[key] = (B, row_of_entry)
        return self._b_cache[key]

    def B(self, dt: float):
        """The implicit-step matrix I - dt A (CSR)."""
        return self._b_parts(dt)[0]

    def factorized(self, dt: float):
        key = float(dt)
        if key not in self._lu_cache:
            B, _ = self._b_parts(dt)
            self._lu_cache[key] = spla.splu(B.tocsc(), permc_spec=_PERMC)
        return self._lu_cache[key]

    def solve_continue(self, dt: float, rhs: np.ndarray) -> np.ndarray:
        """Solve (I - dt A) w = rhs with the cached factorization."""
        return self.factorized(dt).solve(rhs.reshape(-1)).reshape(rhs.shape)

    def solve_policy(self, dt: float, w_next: np.ndarray, harvest_target: np.ndarray,
                     harvest_payoff: np.ndarray) -> np.ndarray:
        """Solve the mixed continue/harvest linear system of one policy.

        harvest_target[i] = flattened target node of a harvesting row
        (w_i - w_target = payoff_i), or -1 for a continue row
        ((I - dt A) w)_i = w_next_i.  Targets must differ from their row.
        """
        n = self.grid.n_nodes
        tgt = harvest_target.reshape(-1)
        pay = harvest_payoff.reshape(-1)
        f = w_next.reshape(-1)
        harvesting = tgt >= 0
        if not harvesting.any():
            return self.solve_continue(dt, w_next)
        B, row_of_entry = self._b_parts(dt)
        keep = ~harvesting[row_of_entry]
        h_idx = np.nonzero(harvesting)[0]
        rows = np.concatenate([row_of_entry[keep], h_idx, h_idx])
        cols = np.concatenate([B.indices[keep], h_idx, tgt[h_idx]])
        vals = np.concatenate([B.data[keep], np.ones(h_idx.size), -np.ones(h_idx.size)])
        M = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsc()
        rhs = np.where(harvesting, pay, f)
        w = spla.spsolve(M, rhs, permc_spec=_PERMC)
        return w.reshape(w_next.shape)


def implicit_step(w_slice: np.ndarray, dt: float, gen: Generator,
                  obstacle: np.ndarray | None = None,
                  tol: float = 1e-12, max_iters: int = 100) -> np.ndarray:
    """One backward implicit step: solve (I - dt A) w = w_slice.

    With a frozen obstacle psi the step solves the linear complementarity
    problem min((I - dt A) w - w_slice, w - psi) = 0 by policy iteration
    over the active set.  Raises SolverError with the residual if the
    iteration does not settle within max_iters.
    """
    if not dt > 0:
        raise ParamError(f"dt must be > 0, got {dt}")
    if not np.all(np.isfinite(w_slice)):
        raise ParamError("value slice contains non-finite entries")
    if obstacle is None:
        return gen.solve_continue(dt, w_slice)

    n = gen.grid.n_nodes
    f = w_slice.reshape(-1)
    psi = obstacle.reshape(-1)
    B, row_of_entry = gen._b_parts(dt)
    active = np.zeros(n, dtype=bool)
    w = gen.solve_continue(dt, w_slice).reshape(-1)
    for _ in range(max_iters):
        new_active = (B @ w - f) > (w - psi)
        if np.array_equal(new_active, active):
            return w.reshape(w_slice.shape)
        active = new_active
        keep = ~active[row_of_entry]
        a_idx = np.nonzero(active)[0]
        rows = np.concatenate([row_of_entry[keep], a_idx])
        cols = np.concatenate([B.indices[keep], a_idx])
        vals = np.concatenate([B.data[keep], np.ones(a_idx.size)])
        M = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsc()
        rhs = np.where(active, psi, f)
        w = spla.spsolve(M, rhs, permc_spec=_PERMC)
    res = np.minimum(B @ w - f, w - psi)
    raise SolverError(
        f"obstacle step did not converge in {max_iters} iterations; residual {np.abs(res).max():.3e}"
    )


def interpolate(field_slice: np.ndarray, r, s, e=None, grid: GridSpec | None = None):
    """Multilinear interpolation of a value slice at (r, s[, e]).

    Queries above an axis maximum are clamped to it (renewal jumps push r
    past r_max by design); queries below an axis minimum raise.  Exact at
    the nodes and linear along each axis, so cell bounds are preserved.
    """
    if grid is None:
        raise ParamError("grid is required")
    r = np.asarray(r, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(r < 0):
        raise ParamError("query below the resource grid minimum")
    if np.any(s < grid.s_min - 1e-12):
        raise ParamError("query below the log-price grid minimum")
    r = np.minimum(r, grid.r_max)
    s = np.clip(s, grid.s_min, grid.s_max)

    def axis_weights(x, x0, h, n):
        u = (x - x0) / h
        i0 = np.clip(np.floor(u).astype(int), 0, n - 2)
        frac = np.clip(u - i0, 0.0, 1.0)
        return i0, frac

    ir, fr = axis_weights(r, 0.0, grid.h_r, grid.n_r)
    js, fs = axis_weights(s, grid.s_min, grid.h_s, grid.n_s)

    if e is None:
        if field_slice.ndim != 2:
            raise ParamError("expected a 2-d (r, s) slice when e is not given")
        w = field_slice
        val = ((1 - fr) * (1 - fs) * w[ir, js]
               + (1 - fr) * fs * w[ir, js + 1]
               + fr * (1 - fs) * w[ir + 1, js]
               + fr * fs * w[ir + 1, js + 1])
        return float(val) if val.ndim == 0 else val

    if field_slice.ndim != 3:
        raise ParamError("expected a 3-d (e, r, s) slice when e is given")
    e = np.asarray(e, dtype=float)
    if np.any(e < 0):
        raise ParamError("query below the pending-quantity grid minimum")
    e = np.minimum(e, grid.K)
    if grid.n_e == 1:
        return interpolate(field_slice[0], r, s, grid=grid)
    h_e = grid.K / (grid.n_e - 1)
    ke, fe = axis_weights(e, 0.0, h_e, grid.n_e)
    lo = ((1 - fr) * (1 - fs) * field_slice[ke, ir, js]
          + (1 - fr) * fs * field_slice[ke, ir, js + 1]
          + fr * (1 - fs) * field_slice[ke, ir + 1, js]
          + fr * fs * field_slice[ke, ir + 1, js + 1])
    hi = ((1 - fr) * (1 - fs) * field_slice[ke + 1, ir, js]
          + (1 - fr) * fs * field_slice[ke + 1, ir, js + 1]
          + fr * (1 - fs) * field_slice[ke + 1, ir + 1, js]
          + fr * fs * field_slice[ke + 1, ir + 1, js + 1])
    val = (1 - fe) * lo + fe * hi
    return float(val) if val.ndim == 0 else val
