"""Backward solver for the harvest QVI with date jumps and delayed renewal.

The reduced value w = v - x is computed on the chain grid by backward
induction over the renewal intervals [t_k, t_{k+1}):

* terminal condition at T-: mature the oldest pending order, choose the
  terminal renewal (never profitable for a positive delay) and an optional
  fused harvest, then liquidate;
* inside an interval: implicit steps of the obstacle problem
  min((I - dt A) w - w_next, w - Hw) = 0, solved by Howard policy
  iteration over the binary continue/harvest policy with the harvest
  amount enumerated on the r-sub-grid;
* at a date t_k: discrete max over renewal orders e' (and an optional
  fused harvest), with the pending axis re-indexed: the maturing order is
  consumed, the new order appended.

Harvest and renewal amounts are restricted to grid-aligned values so every
post-jump query lands back on the grid (the r-axis is interpolated only
for the maturation shifts g(e) + g0, clamped at r_max with a counter).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np

from .chain import Generator, GridSpec, SolverError, build_grid, interpolate
from .impulse import Schedule
from .model import ModelParams, ParamError, validate_params

__all__ = [
    "CONTINUE",
    "HARVEST",
    "PLANT",
    "PLANT_AND_HARVEST",
    "LABEL_NAMES",
    "ValueField",
    "RegionMap",
    "SolveResult",
    "discrete_harvest_sup",
    "terminal_slice",
    "date_jump",
    "qvi_interval_solve",
    "solve",
]

CONTINUE, HARVEST, PLANT, PLANT_AND_HARVEST = 0, 1, 2, 3
LABEL_NAMES = {CONTINUE: "CONTINUE", HARVEST: "HARVEST", PLANT: "PLANT",
               PLANT_AND_HARVEST: "PLANT_AND_HARVEST"}


# ---------------------------------------------------------------------------
# containers


@dataclass
class ValueField:
    """Reduced value w on the grid, one array per renewal interval.

    w[k] has shape (n_t + 1, n_combo_k, n_r, n_s) where step j is time
    t_k + j dt; step n_t holds the pre-jump value at t_{k+1}^- and step 0
    the post-jump value at t_k.  Pending orders are flattened into combo
    indices: a tuple of e-grid levels (oldest first) maps to
    ravel_multi_index over (n_e,) * pending_len.
    """

    params: ModelParams
    grid: GridSpec
    schedule: Schedule
    w: list[np.ndarray]

    @property
    def n_intervals(self) -> int:
        return self.schedule.n_dates

    def pending_len(self, k: int) -> int:
        return self.schedule.pending_len(k)

    def n_combo(self, k: int) -> int:
        return self.grid.n_e ** self.pending_len(k)

    def combo_index(self, k: int, e_indices: tuple[int, ...]) -> int:
        length = self.pending_len(k)
        if len(e_indices) != length:
            raise ParamError(
                f"interval {k} carries {length} pending orders, got {len(e_indices)}"
            )
        if length == 0:
            return 0
        return int(np.ravel_multi_index(tuple(int(i) for i in e_indices), (self.grid.n_e,) * length))

    def step_of_time(self, t: float) -> tuple[int, int]:
        """Map a time to (interval, step), snapping to the nearest grid step.

        A date t_k maps to (k, 0), the post-jump slice; t = T maps to the
        terminal pre-jump slice (n - 1, n_t).
        """
        sched, n_t = self.schedule, self.grid.n_t
        if not -1e-12 <= t <= sched.T + 1e-12:
            raise ParamError(f"time {t} outside [0, {sched.T}]")
        width = sched.T / sched.n_dates
        dt = width / n_t
        step_global = int(round(t / dt))
        k, j = divmod(step_global, n_t)
        if k >= sched.n_dates:
            k, j = sched.n_dates - 1, n_t
        return k, j

    def eval(self, t: float, r, s, pending: tuple[float, ...] = ()) -> float | np.ndarray:
        """Interpolated reduced value at (t, r, s) with the given pending orders.

        Pending quantities may be off the e-grid; they are handled by
        multilinear weights across the pending axes.
        """
        k, j = self.step_of_time(t)
        length = self.pending_len(k)
        if len(pending) != length:
            raise ParamError(f"expected {length} pending quantities at t={t}, got {len(pending)}")
        slab = self.w[k][j]
        if length == 0:
            return interpolate(slab[0], r, s, grid=self.grid)
        axes = []
        if self.grid.n_e == 1:
            corners = [((0,) * length, 1.0)]
        else:
            h_e = self.grid.K / (self.grid.n_e - 1)
            for e in pending:
                if not -1e-12 <= e <= self.grid.K + 1e-12:
                    raise ParamError(f"pending quantity {e} outside [0, {self.grid.K}]")
                u = min(max(e, 0.0), self.grid.K) / h_e
                lo = min(int(np.floor(u)), self.grid.n_e - 2)
                axes.append(((lo, 1.0 - (u - lo)), (lo + 1, u - lo)))
            corners = [((), 1.0)]
            for ax in axes:
                corners = [(idx + (i,), wgt * f) for idx, wgt in corners for i, f in ax if f != 0.0]
        out = 0.0
        for idx, wgt in corners:
            flat = self.combo_index(k, idx)
            out = out + wgt * interpolate(slab[flat], r, s, grid=self.grid)
        return out


@dataclass
class RegionMap:
    """Per-node policy labels and grid-aligned action amounts.

    labels[k] matches w[k]'s shape; interior steps carry CONTINUE/HARVEST,
    the last step of each interval carries the renewal-date decision
    (PLANT / PLANT_AND_HARVEST / HARVEST / CONTINUE).  harvest_units counts
    multiples of h_r; plant_level indexes the e-grid (stored at the date
    step only).
    """

    labels: list[np.ndarray]
    harvest_units: list[np.ndarray]
    plant_level: list[np.ndarray]

    def harvest_amount(self, k: int, grid: GridSpec) -> np.ndarray:
        return self.harvest_units[k] * grid.h_r

    def plant_amount(self, k: int, grid: GridSpec) -> np.ndarray:
        return grid.e_axis[self.plant_level[k]]


@dataclass
class SolveResult:
    field: ValueField
    regions: RegionMap
    meta: dict

    def value0(self, x: float, r: float, p: float, pending: tuple[float, ...] = ()) -> float:
        return x + float(self.field.eval(0.0, r, float(np.log(p)), pending))


# ---------------------------------------------------------------------------
# operators


def discrete_harvest_sup(w_slice: np.ndarray, grid: GridSpec, params: ModelParams):
    """Intervention envelope Hw and its argmax on the r-sub-grid.

    At node (i_r, i_s) the candidates are harvests a = j h_r for
    j = 0..i_r, worth (p - c1) a - c2 + w(r - a, s).  Rewriting in the
    target level k = i_r - j turns the maximum into a running maximum of
    w[k] - (p - c1) k h_r along the r-axis, so the whole slice costs
    O(n_r n_s).  Ties pick the smallest amount.  Returns (Hw, units) with
    units the argmax in multiples of h_r (int16).
    """
    coef = np.exp(grid.s_axis) - params.c1
    lev = np.arange(grid.n_r)[:, None]
    keyed = w_slice - coef * (lev * grid.h_r)
    run = np.maximum.accumulate(keyed, axis=-2)
    best = np.maximum.accumulate(np.where(keyed == run, lev, 0), axis=-2)
    h = run + coef * (lev * grid.h_r) - params.c2
    units = (lev - best).astype(np.int16)
    return h, units


def _shift_rows(w_rs: np.ndarray, shift: float, grid: GridSpec):
    """Evaluate w at (r + shift, s) by linear interpolation along r.

    shift >= 0; positions past r_max are clamped there.  Returns the
    shifted slice and the number of clamped r-levels.
    """
    pos = (grid.r_axis + shift) / grid.h_r
    clamped = int(np.count_nonzero(pos > grid.n_r - 1 + 1e-12))
    pos = np.minimum(pos, grid.n_r - 1)
    lo = np.minimum(np.floor(pos).astype(int), grid.n_r - 2)
    frac = (pos - lo)[:, None]
    return w_rs[..., lo, :] * (1.0 - frac) + w_rs[..., lo + 1, :] * frac, clamped


@dataclass
class _JumpResult:
    pre: np.ndarray            # (n_combo_prev, n_r, n_s)
    labels: np.ndarray         # int8, same shape
    plant_level: np.ndarray    # int16, executed renewal level per node
    harvest_units: np.ndarray  # int16, fused harvest amount per node
    clamped_rows: int
    e0_gap: float              # max over nodes of (best branch) - (e'=0 branch)


def _jump_core(get_post, k: int, grid: GridSpec, params: ModelParams, schedule: Schedule,
               tol_tie: float) -> _JumpResult:
    """Shared date-jump composition: mature, renew, optional fused harvest.

    ``get_post`` maps the post-jump pending tuple to a (n_r, n_s) value
    slice.  k is the date index (1..n); the maturing order exists only for
    k > m_delay.  The fused-harvest branch wins only when it beats the
    plain branch by more than tol_tie (ties never harvest).
    """
    m = schedule.m_delay
    matures = k > m
    len_prev = schedule.pending_len(k - 1)
    n_e, e_axis = grid.n_e, grid.e_axis
    cost = np.exp(grid.s_axis) + params.c3  # unit renewal cost q + c3 with q = p
    n_prev = n_e ** len_prev
    pre = np.empty((n_prev, grid.n_r, grid.n_s))
    labels = np.zeros((n_prev, grid.n_r, grid.n_s), dtype=np.int8)
    plant = np.zeros((n_prev, grid.n_r, grid.n_s), dtype=np.int16)
    units = np.zeros((n_prev, grid.n_r, grid.n_s), dtype=np.int16)
    clamped = 0
    e0_gap = 0.0
    prev_shape = (n_e,) * len_prev
    for flat_prev in range(n_prev):
        tup = np.unravel_index(flat_prev, prev_shape) if len_prev else ()
        if matures and len_prev:
            e_old_idx, tail = tup[0], tuple(tup[1:])
            base_shift = params.g0 + params.g(float(e_axis[e_old_idx]))
        else:
            tail = tuple(tup)
            base_shift = params.g0
        branch = np.empty((n_e, grid.n_r, grid.n_s))
        for ei in range(n_e):
            post = get_post(tail + (ei,))
            shift = base_shift + (params.g(float(e_axis[ei])) if m == 0 else 0.0)
            shifted, cl = _shift_rows(post, shift, grid)
            clamped += cl
            branch[ei] = shifted - cost[None, :] * e_axis[ei]
        phi = branch[0].copy()
        phi_arg = np.zeros((grid.n_r, grid.n_s), dtype=np.int16)
        for ei in range(1, n_e):
            better = branch[ei] > phi
            np.copyto(phi, branch[ei], where=better)
            phi_arg[better] = ei
        e0_gap = max(e0_gap, float((phi - branch[0]).max()))
        fused, amt = discrete_harvest_sup(phi, grid, params)
        use_fused = fused > phi + tol_tie
        use_fused[0, :] = False  # empty stock: nothing to harvest
        pre[flat_prev] = np.where(use_fused, fused, phi)
        tgt = np.arange(grid.n_r)[:, None] - amt
        plant_exec = np.where(use_fused, np.take_along_axis(phi_arg, tgt, axis=0), phi_arg)
        units[flat_prev] = np.where(use_fused, amt, 0)
        plant[flat_prev] = plant_exec
        lab = np.full((grid.n_r, grid.n_s), CONTINUE, dtype=np.int8)
        lab[(~use_fused) & (plant_exec > 0)] = PLANT
        lab[use_fused & (plant_exec > 0)] = PLANT_AND_HARVEST
        lab[use_fused & (plant_exec == 0)] = HARVEST
        labels[flat_prev] = lab
    return _JumpResult(pre, labels, plant, units, clamped, e0_gap)


def terminal_slice(grid: GridSpec, params: ModelParams, schedule: Schedule,
                   tol_tie: float = 1e-10) -> _JumpResult:
    """Pre-jump value at T^-: date-T renewal composed with liquidation.

    The post-jump continuation is the liquidation gain max((p - c1) r - c2, 0),
    which ignores pending orders, so for a positive delay the renewal at T
    only costs money and the e' = 0 branch always attains the maximum.
    """
    gain = np.maximum(
        (np.exp(grid.s_axis)[None, :] - params.c1) * grid.r_axis[:, None] - params.c2, 0.0
    )
    return _jump_core(lambda tup: gain, schedule.n_dates, grid, params, schedule, tol_tie)


def date_jump(post_slices: np.ndarray, k: int, grid: GridSpec, params: ModelParams,
              schedule: Schedule, tol_tie: float = 1e-10) -> _JumpResult:
    """Value just before date t_k from the already-solved value at t_k.

    post_slices has shape (n_combo at interval k, n_r, n_s).  For k > m
    the oldest pending order matures before the new order is appended; for
    k <= m the pending set only grows.
    """
    if not 1 <= k < schedule.n_dates:
        raise ParamError(f"date index must lie in [1, {schedule.n_dates - 1}], got {k}")
    len_next = schedule.pending_len(k)
    shape_next = (grid.n_e,) * len_next

    def get_post(tup):
        flat = int(np.ravel_multi_index(tup, shape_next)) if len_next else 0
        return post_slices[flat]

    return _jump_core(get_post, k, grid, params, schedule, tol_tie)


# ---------------------------------------------------------------------------
# interval QVI


@dataclass
class _IntervalResult:
    w: np.ndarray
    labels: np.ndarray
    harvest_units: np.ndarray
    policy_iters: int
    max_qvi_resid: float
    max_continue_resid: float


def qvi_interval_solve(end_slice: np.ndarray, k: int, gen: Generator, grid: GridSpec,
                       params: ModelParams, schedule: Schedule, *,
                       tol_policy: float = 1e-8, max_iters: int = 200,
                       tol_tie: float = 1e-10, threads: int = 1) -> _IntervalResult:
    """Solve min(-L_dt w, w - Hw) = 0 backward across one renewal interval.

    Each backward step alternates (i) the implicit linear solve given the
    current continue/harvest policy with (ii) the policy update comparing
    the continuation and intervention residuals (Howard iteration, warm
    started from the previous step; ties stay on continue).  The obstacle
    is never applied on the empty-stock plane r = 0.  Pending-order combos
    are independent and may be solved in parallel.
    """
    n_combo = end_slice.shape[0]
    n_t, n_nodes = grid.n_t, grid.n_nodes
    dt = schedule.T / schedule.n_dates / n_t
    w = np.empty((n_t + 1, n_combo, grid.n_r, grid.n_s))
    labels = np.zeros((n_t + 1, n_combo, grid.n_r, grid.n_s), dtype=np.int8)
    units = np.zeros((n_t + 1, n_combo, grid.n_r, grid.n_s), dtype=np.int16)
    w[n_t] = end_slice
    B = gen.B(dt)
    coef_grid = (np.exp(grid.s_axis) - params.c1)[None, :] * grid.h_r
    node = np.arange(n_nodes)

    def run_combo(c: int):
        target = np.full(n_nodes, -1, dtype=np.int64)
        payoff = np.zeros(n_nodes)
        iters = 0
        qvi_resid = 0.0
        cont_resid = 0.0
        for j in range(n_t - 1, -1, -1):
            f = w[j + 1, c]
            w_prev = None
            change = np.inf
            for it in range(max_iters + 1):
                if it == max_iters:
                    raise SolverError(
                        f"policy iteration exceeded {max_iters} iterations at interval {k}, "
                        f"step {j}, combo {c}; last value change {change:.3e}"
                    )
                w_cur = gen.solve_policy(dt, f, target, payoff)
                h_slice, a_idx = discrete_harvest_sup(w_cur, grid, params)
                resid_c = B @ w_cur.reshape(-1) - f.reshape(-1)
                resid_o = (w_cur - h_slice).reshape(-1)
                a_flat = a_idx.reshape(-1).astype(np.int64)
                want = (resid_o + tol_tie < resid_c) & (a_flat > 0)
                want[: grid.n_s] = False  # r = 0 plane: no obstacle
                new_target = np.where(want, node - a_flat * grid.n_s, -1)
                iters += 1
                if w_prev is not None:
                    change = float(np.abs(w_cur - w_prev).max())
                if np.array_equal(new_target, target) or change < tol_policy:
                    break
                target = new_target
                payoff = (coef_grid * a_idx - params.c2).reshape(-1)
                w_prev = w_cur
            w[j, c] = w_cur
            harvesting = target >= 0
            a_solved = np.where(harvesting, (node - target) // grid.n_s, 0)
            harvesting = harvesting.reshape(grid.n_r, grid.n_s)
            labels[j, c][harvesting] = HARVEST
            units[j, c] = a_solved.reshape(grid.n_r, grid.n_s).astype(np.int16)
            qvi_resid = max(qvi_resid, float((h_slice - w_cur).max()))
            cont = np.abs(resid_c)[~harvesting.reshape(-1)]
            if cont.size:
                cont_resid = max(cont_resid, float(cont.max()))
        return iters, qvi_resid, cont_resid

    if threads > 1 and n_combo > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_combo, range(n_combo)))
    else:
        results = [run_combo(c) for c in range(n_combo)]
    total_iters = sum(r[0] for r in results)
    return _IntervalResult(
        w=w, labels=labels, harvest_units=units, policy_iters=total_iters,
        max_qvi_resid=max(r[1] for r in results),
        max_continue_resid=max(r[2] for r in results),
    )


# ---------------------------------------------------------------------------
# full backward sweep


def solve(params: ModelParams, grid_overrides: dict | None = None, *,
          tol_policy: float = 1e-8, max_iters: int = 200, tol_tie: float = 1e-10,
          threads: int = 1, allow_degenerate_vol: bool = False,
          inject_negative_offdiag: bool = False, s_pad: int | None = None) -> SolveResult:
    """Full backward sweep: terminal slice, interval QVIs and date jumps.

    Returns the complete ValueField, the RegionMap and run metadata
    (policy iterations, residuals, clamp counts, wall time).  The sweep is
    deterministic; there is no randomness anywhere on the solver path.

    The log-price band is padded internally by s_pad extra columns per side
    (same spacing) and only the requested window is stored: the band
    truncation dampens the value slope near s_max, which would otherwise
    leave a small non-monotone strip where the renewal cost q = p rises
    faster than the truncated continuation value.  The default pad covers
    one interval's diffusion cone, 1.5 sigma sqrt(T/n); s_pad=0 disables
    padding (used when comparing against same-grid oracles).
    """
    params = validate_params(params, allow_degenerate_vol=allow_degenerate_vol)
    if not params.cost_equals_price:
        raise ParamError(
            "the grid solver requires cost_equals_price=True (q is tied to the price "
            "axis); decoupled costs are supported in Monte Carlo only"
        )
    overrides = dict(grid_overrides or {})
    if "K" in overrides and overrides["K"] != params.K:
        raise ParamError("grid K override conflicts with params.K")
    overrides["K"] = params.K
    grid = build_grid(params, overrides)
    if s_pad is None:
        cone = 1.5 * params.sigma * math.sqrt(params.T / params.n_dates)
        s_pad = max(4, int(math.ceil(cone / grid.h_s)))
    if s_pad > 0:
        padded = replace(grid, n_s=grid.n_s + 2 * s_pad,
                         s_min=grid.s_min - s_pad * grid.h_s,
                         s_max=grid.s_max + s_pad * grid.h_s)
    else:
        padded = grid
    schedule = Schedule.from_params(params)
    gen = Generator(params, padded, inject_negative_offdiag=inject_negative_offdiag)
    n = schedule.n_dates

    t_start = time.perf_counter()
    meta: dict = {"policy_iters": 0, "max_qvi_resid": 0.0, "max_continue_resid": 0.0,
                  "clamped_rows": 0, "terminal_e0_gap": 0.0}
    w_list: list[np.ndarray | None] = [None] * n
    lab_list: list[np.ndarray | None] = [None] * n
    unit_list: list[np.ndarray | None] = [None] * n
    plant_list: list[np.ndarray | None] = [None] * n

    window = slice(s_pad, padded.n_s - s_pad) if s_pad > 0 else slice(None)
    jump = terminal_slice(padded, params, schedule, tol_tie)
    meta["terminal_e0_gap"] = jump.e0_gap
    for k in range(n - 1, -1, -1):
        res = qvi_interval_solve(
            jump.pre, k, gen, padded, params, schedule,
            tol_policy=tol_policy, max_iters=max_iters, tol_tie=tol_tie, threads=threads,
        )
        res.labels[grid.n_t] = jump.labels
        res.harvest_units[grid.n_t] = jump.harvest_units
        w_list[k] = np.ascontiguousarray(res.w[..., window])
        lab_list[k] = np.ascontiguousarray(res.labels[..., window])
        unit_list[k] = np.ascontiguousarray(res.harvest_units[..., window])
        plant_list[k] = np.ascontiguousarray(jump.plant_level[..., window])
        meta["policy_iters"] += res.policy_iters
        meta["max_qvi_resid"] = max(meta["max_qvi_resid"], res.max_qvi_resid)
        meta["max_continue_resid"] = max(meta["max_continue_resid"], res.max_continue_resid)
        meta["clamped_rows"] += jump.clamped_rows
        if k > 0:
            jump = date_jump(res.w[0], k, padded, params, schedule, tol_tie)

    field = ValueField(params=params, grid=grid, schedule=schedule, w=w_list)
    regions = RegionMap(labels=lab_list, harvest_units=unit_list, plant_level=plant_list)
    meta["w_min"] = float(min(w.min() for w in w_list))
    meta["w_max"] = float(max(w.max() for w in w_list))
    meta["s_pad"] = s_pad
    meta["wall_time_s"] = time.perf_counter() - t_start
    meta["grid"] = {"n_r": grid.n_r, "n_s": grid.n_s, "n_e": grid.n_e, "n_t": grid.n_t,
                    "s_min": grid.s_min, "s_max": grid.s_max, "r_max": grid.r_max}
    return SolveResult(field=field, regions=regions, meta=meta)
