"""Strategy extraction from a solved field and forward Monte Carlo validation.

The extracted strategy follows the contact rule: harvest the first time the
interpolated value touches the interpolated intervention envelope (within a
relative trigger tolerance), with the amount recomputed as the argmax over
grid-aligned targets; renew at the dates by the argmax over the e-grid of
the post-jump value net of the order cost.  Simulated paths mirror the
solver's domain truncation: resource and log-price excursions past the grid
are clamped with counters so the policy and the value stay consistent.

Paths are independent given the per-path seed split; reports aggregate in a
fixed order, so results are bit-stable for a given (seed, n_paths).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .chain import interpolate
from .impulse import Schedule, Strategy
from .model import ModelParams, ParamError, State, logistic_sample_path, path_rng, sale_gain
from .solver import (CONTINUE, HARVEST, PLANT, PLANT_AND_HARVEST,
                     ValueField, RegionMap, discrete_harvest_sup)

__all__ = [
    "Action",
    "SimReport",
    "extract_action",
    "simulate",
    "dpp_check",
    "region_metrics",
    "replay_strategy",
]

TOL_TRIGGER = 1e-7  # relative contact tolerance for the harvest trigger
TOL_TIE = 1e-10


@dataclass(frozen=True)
class Action:
    kind: str                 # CONTINUE | HARVEST | PLANT | PLANT_AND_HARVEST
    harvest: float = 0.0
    plant: float = 0.0


@dataclass
class SimReport:
    n_paths: int
    seed: int
    j_mc: float
    std_error: float
    pde_value: float
    rel_gap: float
    harvest_total: int
    harvest_mean_per_path: float
    harvest_mean_time: float
    harvest_count_hist: dict
    renew_mean: tuple
    admissibility_violations: int
    plant_and_harvest_count: int
    clamped_r: int
    clamped_s: int
    filtered_skips: int
    policy: str
    filter_on: bool

    def row(self) -> dict:
        """Flat mapping for the one-row CSV artifact."""
        out = {
            "n_paths": self.n_paths, "seed": self.seed, "j_mc": self.j_mc,
            "std_error": self.std_error, "pde_value": self.pde_value,
            "rel_gap": self.rel_gap, "harvest_total": self.harvest_total,
            "harvest_mean_per_path": self.harvest_mean_per_path,
            "harvest_mean_time": self.harvest_mean_time,
            "admissibility_violations": self.admissibility_violations,
            "plant_and_harvest_count": self.plant_and_harvest_count,
            "clamped_r": self.clamped_r, "clamped_s": self.clamped_s,
            "filtered_skips": self.filtered_skips, "policy": self.policy,
            "filter_on": self.filter_on,
        }
        for i, v in enumerate(self.renew_mean, start=1):
            out[f"renew_mean_t{i}"] = v
        return out


# ---------------------------------------------------------------------------
# shared interpolation helpers (vectorized over paths)


def _s_weights(s: np.ndarray, grid):
    u = (np.clip(s, grid.s_min, grid.s_max) - grid.s_min) / grid.h_s
    js = np.minimum(u.astype(int), grid.n_s - 2)
    return js, u - js


def _r_weights(r: np.ndarray, grid):
    u = np.minimum(r, grid.r_max) / grid.h_r
    ir = np.minimum(u.astype(int), grid.n_r - 2)
    return ir, u - ir


def _interp_rs(w2: np.ndarray, r: np.ndarray, s: np.ndarray, grid) -> np.ndarray:
    ir, fr = _r_weights(r, grid)
    js, fs = _s_weights(s, grid)
    return ((1 - fr) * (1 - fs) * w2[ir, js] + (1 - fr) * fs * w2[ir, js + 1]
            + fr * (1 - fs) * w2[ir + 1, js] + fr * fs * w2[ir + 1, js + 1])


def _s_columns(w2: np.ndarray, s: np.ndarray, grid) -> np.ndarray:
    """Interpolate along s only: returns the (n_paths, n_r) value columns."""
    js, fs = _s_weights(s, grid)
    return (w2[:, js] * (1 - fs) + w2[:, js + 1] * fs).T


def _best_grid_harvest(cols: np.ndarray, r: np.ndarray, price: np.ndarray,
                       params: ModelParams, grid):
    """Best grid-aligned harvest given per-path value columns.

    cols[p, k] is the continuation value at target level k for path p.
    Candidates leave r at k h_r <= r; returns (gain-maximizing value,
    amount) where value includes the harvest payoff (p - c1) a - c2.
    """
    n_paths = r.shape[0]
    lev = np.arange(grid.n_r)
    amounts = r[:, None] - lev[None, :] * grid.h_r
    feasible = amounts >= -1e-12
    pay = (price[:, None] - params.c1) * np.maximum(amounts, 0.0) - params.c2
    cand = np.where(feasible, pay + cols, -np.inf)
    best_k = np.argmax(cand, axis=1)
    idx = np.arange(n_paths)
    return cand[idx, best_k], np.maximum(amounts[idx, best_k], 0.0)


# ---------------------------------------------------------------------------
# scalar strategy extraction


def extract_action(field: ValueField, t: float, state: State,
                   pending: tuple[float, ...], grid, params: ModelParams,
                   tol_trigger: float = TOL_TRIGGER) -> Action:
    """Optimal action at one (t, state) per the solved field.

    Interior times: HARVEST(a*) when the interpolated value touches the
    interpolated intervention envelope within the relative trigger
    tolerance, a* recomputed over grid-aligned targets; else CONTINUE.
    Renewal dates: PLANT(e*) with e* the argmax of the date branch (the
    fused branch shares the same argmax expression).
    """
    sched = field.schedule
    if not 0 <= t < sched.T:
        raise ParamError(f"actions are defined for t in [0, T), got {t}")
    s = math.log(state.p)
    if not grid.s_min - 1e-9 <= s <= grid.s_max + 1e-9:
        raise ParamError(f"log-price {s} outside the grid band")
    width = sched.T / sched.n_dates
    k_date = int(round(t / width))
    if k_date >= 1 and abs(t - k_date * width) < 1e-9 * max(1.0, sched.T):
        return _date_action_scalar(field, k_date, state, pending, grid, params)
    k, j = field.step_of_time(t)
    length = field.pending_len(k)
    levels = _snap_levels(pending, grid, length)
    combo = field.combo_index(k, levels)
    w2 = field.w[k][j][combo]
    h2, _ = discrete_harvest_sup(w2, grid, params)
    r = np.asarray([min(state.r, grid.r_max)])
    sv = np.asarray([s])
    wv = float(_interp_rs(w2, r, sv, grid))
    hv = float(_interp_rs(h2, r, sv, grid))
    if state.r <= 0 or wv > hv + tol_trigger * (1.0 + abs(wv)):
        return Action("CONTINUE")
    cols = _s_columns(w2, sv, grid)
    val, amount = _best_grid_harvest(cols, r, np.asarray([state.p]), params, grid)
    if amount[0] <= 0:
        return Action("CONTINUE")
    return Action("HARVEST", harvest=float(amount[0]))


def _snap_levels(pending, grid, length) -> tuple[int, ...]:
    if len(pending) != length:
        raise ParamError(f"expected {length} pending quantities, got {len(pending)}")
    if grid.n_e == 1:
        return (0,) * length
    h_e = grid.K / (grid.n_e - 1)
    return tuple(int(round(min(max(e, 0.0), grid.K) / h_e)) for e in pending)


def _date_action_scalar(field, k, state, pending, grid, params) -> Action:
    sched = field.schedule
    matures = k > sched.m_delay
    len_prev = sched.pending_len(k - 1)
    levels = _snap_levels(pending, grid, len_prev)
    tail = levels[1:] if matures and len_prev else levels
    e_old = grid.e_axis[levels[0]] if matures and len_prev else 0.0
    shift = params.g0 + (params.g(e_old) if matures and len_prev else 0.0)
    s = math.log(state.p)
    cost = state.p + params.c3 if params.cost_equals_price else state.q + params.c3
    best, best_e = -np.inf, 0
    for ei in range(grid.n_e):
        combo = field.combo_index(k, tail + (ei,))
        extra = params.g(float(grid.e_axis[ei])) if sched.m_delay == 0 else 0.0
        w2 = field.w[k][0][combo]
        val = float(interpolate(w2, min(state.r + shift + extra, grid.r_max), s, grid=grid))
        val -= cost * float(grid.e_axis[ei])
        if val > best + TOL_TIE:
            best, best_e = val, ei
    return Action("PLANT", plant=float(grid.e_axis[best_e]))


# ---------------------------------------------------------------------------
# vectorized forward simulation


class _Counters:
    def __init__(self):
        self.admissibility = 0
        self.plant_and_harvest = 0
        self.clamped_r = 0
        self.clamped_s = 0
        self.filtered = 0


def _draw_block(seed: int, n_paths: int, n_steps: int, n_sub: int) -> np.ndarray:
    """Per-path unit normals, shape (n_paths, n_steps, n_sub, 2).

    Layout per path and step: [:, :, :, 0] drives the resource, [:, :, :, 1]
    the price (and the cost in decoupled mode, via the same increments).
    """
    draws = np.empty((n_paths, n_steps, n_sub, 2))
    for i in range(n_paths):
        draws[i] = path_rng(seed, i).standard_normal((n_steps, n_sub, 2))
    return draws


def _clamp_state(r, s, grid, counters: _Counters):
    over_r = r > grid.r_max + 1e-15
    counters.clamped_r += int(np.count_nonzero(over_r))
    np.minimum(r, grid.r_max, out=r)
    out_s = (s < grid.s_min - 1e-15) | (s > grid.s_max + 1e-15)
    counters.clamped_s += int(np.count_nonzero(out_s))
    np.clip(s, grid.s_min, grid.s_max, out=s)


def simulate(field: ValueField, z0: State, pending0: tuple[float, ...],
             n_paths: int, seed: int, n_sub: int, params: ModelParams, *,
             policy: str = "field", apply_filter: bool = True,
             collect_paths: bool = False):
    """Run the extracted (or no-intervention) strategy forward by Monte Carlo.

    Decision checks happen on the solver's time grid.  Harvests respect
    admissibility (amount <= stock) by construction; with the online
    profitable filter on, a triggered harvest with negative net payoff is
    skipped and counted.  Returns a SimReport (and the path log rows when
    collect_paths is set).
    """
    if policy not in ("field", "none"):
        raise ParamError(f"policy must be 'field' or 'none', got {policy!r}")
    if n_paths < 1:
        raise ParamError("n_paths must be >= 1")
    if pending0 != tuple():
        raise ParamError("simulation starts at t = 0 where no orders are pending")
    grid, sched = field.grid, field.schedule
    n, n_t, n_e = sched.n_dates, grid.n_t, grid.n_e
    dt = sched.T / n / n_t
    sub_dt = dt / n_sub
    s0 = math.log(z0.p)
    if not grid.s_min - 1e-9 <= s0 <= grid.s_max + 1e-9:
        raise ParamError(f"initial log-price {s0} outside the grid band")
    if z0.r > grid.r_max + 1e-12:
        raise ParamError(f"initial stock {z0.r} above r_max={grid.r_max}")
    if params.cost_equals_price and abs(z0.q - z0.p) > 1e-12:
        raise ParamError("cost_equals_price requires q0 = p0")

    draws = _draw_block(seed, n_paths, n * n_t, n_sub)
    r = np.full(n_paths, float(z0.r))
    s = np.full(n_paths, s0)
    x = np.full(n_paths, float(z0.x))
    logq = np.full(n_paths, math.log(z0.q))
    pend = np.zeros((n_paths, 0), dtype=np.int64)
    cnt = _Counters()
    harvest_count = np.zeros(n_paths, dtype=np.int64)
    harvest_time_sum = 0.0
    renew_sum = np.zeros(n)
    planted_now = np.zeros(n_paths, dtype=bool)
    log_rows: list[tuple] = []

    def log_state(t, action="", amount=np.zeros(0)):
        if collect_paths:
            q = np.exp(s) if params.cost_equals_price else np.exp(logq)
            p = np.exp(s)
            for i in range(n_paths):
                a = float(amount[i]) if amount.size else 0.0
                log_rows.append((i, t, float(r[i]), float(p[i]), float(q[i]), action, a))

    b_s = params.mu - 0.5 * params.sigma**2
    bq = params.rho_cost - 0.5 * params.varsigma**2

    fused_now = np.zeros(n_paths, dtype=bool)
    for k in range(n):
        t_k = k * sched.T / n
        if k >= 1:
            fused_now, planted_now, pend = _apply_date(
                field, k, r, s, x, logq, pend, params, grid, sched,
                policy, apply_filter, cnt, renew_sum, harvest_count)
            assert pend.shape[1] == sched.pending_len(k)
        hw_cache: dict[tuple[int, int], np.ndarray] = {}
        for j in range(n_t):
            t_j = t_k + j * dt
            if policy == "field":
                skip = fused_now if j == 0 else np.zeros(n_paths, dtype=bool)
                ht = _interior_check(field, k, j, r, s, x, pend, params, grid,
                                     apply_filter, cnt, harvest_count, skip,
                                     planted_now if j == 0 and k >= 1 else None, hw_cache)
                harvest_time_sum += t_j * ht
            log_state(t_j)
            step = k * n_t + j
            r[:] = logistic_sample_path(r, t_j, t_j + dt, n_sub,
                                        draws[:, step, :, 0], params)[:, -1]
            dw = math.sqrt(sub_dt) * draws[:, step, :, 1].sum(axis=1)
            s += b_s * dt + params.sigma * dw
            if not params.cost_equals_price:
                logq += bq * dt + params.varsigma * dw
            _clamp_state(r, s, grid, cnt)

    # date t_n = T: mature, natural renewal, terminal order, then liquidate
    matures = sched.n_dates > sched.m_delay and pend.shape[1] > 0
    shift = params.g0 + (params.g(grid.e_axis[pend[:, 0]]) if matures else 0.0)
    r += shift
    over = r > grid.r_max
    cnt.clamped_r += int(np.count_nonzero(over))
    np.minimum(r, grid.r_max, out=r)
    price = np.exp(s)
    if sched.m_delay == 0 and policy == "field" and params.K > 0:
        cost = (price if params.cost_equals_price else np.exp(logq)) + params.c3
        best = sale_gain(r, price, params)
        best_e = np.zeros(n_paths, dtype=np.int64)
        for ei in range(1, n_e):
            val = sale_gain(np.minimum(r + params.g(float(grid.e_axis[ei])), grid.r_max),
                            price, params) - cost * grid.e_axis[ei]
            better = val > best + TOL_TIE
            best = np.where(better, val, best)
            best_e[better] = ei
        x -= cost * grid.e_axis[best_e]
        r = np.minimum(r + params.g(grid.e_axis[best_e]), grid.r_max)
        renew_sum[n - 1] += grid.e_axis[best_e].sum()
    liquidation_values = x + sale_gain(r, price, params)
    log_state(sched.T, "LIQUIDATE", sale_gain(r, price, params))

    cnt.admissibility += int(np.count_nonzero(r < -1e-12))
    j_mc = float(np.mean(liquidation_values))
    se = float(np.std(liquidation_values, ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
    pde_value = float(z0.x + field.eval(0.0, z0.r, s0, pending0))
    rel_gap = abs(j_mc - pde_value) / max(abs(pde_value), 1e-12)
    total_h = int(harvest_count.sum())
    hist: dict[int, int] = {}
    for c in np.unique(harvest_count):
        hist[int(c)] = int(np.count_nonzero(harvest_count == c))
    report = SimReport(
        n_paths=n_paths, seed=seed, j_mc=j_mc, std_error=se, pde_value=pde_value,
        rel_gap=rel_gap, harvest_total=total_h,
        harvest_mean_per_path=total_h / n_paths,
        harvest_mean_time=harvest_time_sum / total_h if total_h else float("nan"),
        harvest_count_hist=hist,
        renew_mean=tuple(renew_sum / n_paths),
        admissibility_violations=cnt.admissibility,
        plant_and_harvest_count=cnt.plant_and_harvest,
        clamped_r=cnt.clamped_r, clamped_s=cnt.clamped_s,
        filtered_skips=cnt.filtered, policy=policy, filter_on=apply_filter,
    )
    if collect_paths:
        return report, log_rows
    return report


def _combo_groups(field: ValueField, k: int, pend: np.ndarray):
    """Group paths by their flattened pending combo."""
    n_paths = pend.shape[0]
    if pend.shape[1] == 0:
        return {0: np.arange(n_paths)}
    shape = (field.grid.n_e,) * pend.shape[1]
    flat = np.ravel_multi_index(tuple(pend.T), shape)
    return {int(c): np.nonzero(flat == c)[0] for c in np.unique(flat)}


def _interior_check(field, k, j, r, s, x, pend, params, grid, apply_filter,
                    cnt: _Counters, harvest_count, skip_mask, planted_mask, hw_cache):
    """Contact-rule harvest check at one decision step.  Returns the number
    of executed harvests (for timing stats)."""
    executed = 0
    slab = field.w[k][j]
    for combo, idx in _combo_groups(field, k, pend).items():
        w2 = slab[combo]
        key = (j, combo)
        if key not in hw_cache:
            hw_cache[key] = discrete_harvest_sup(w2, grid, params)[0]
        h2 = hw_cache[key]
        sub = idx[(r[idx] > 0) & ~skip_mask[idx]]
        if sub.size == 0:
            continue
        wv = _interp_rs(w2, r[sub], s[sub], grid)
        hv = _interp_rs(h2, r[sub], s[sub], grid)
        trig = wv <= hv + TOL_TRIGGER * (1.0 + np.abs(wv))
        hit = sub[trig]
        if hit.size == 0:
            continue
        price = np.exp(s[hit])
        cols = _s_columns(w2, s[hit], grid)
        _, amount = _best_grid_harvest(cols, r[hit], price, params, grid)
        pay = (price - params.c1) * amount - params.c2
        do = amount > 1e-15
        if apply_filter:
            skipped = do & (pay < 0)
            cnt.filtered += int(np.count_nonzero(skipped))
            do &= pay >= 0
        cnt.admissibility += int(np.count_nonzero(amount > r[hit] + 1e-9))
        sel = hit[do]
        if sel.size:
            x[sel] += pay[do]
            r[sel] = np.maximum(r[sel] - amount[do], 0.0)
            harvest_count[sel] += 1
            executed += sel.size
            if planted_mask is not None:
                cnt.plant_and_harvest += int(np.count_nonzero(planted_mask[sel]))
    return executed


def _apply_date(field, k, r, s, x, logq, pend, params, grid, sched,
                policy, apply_filter, cnt: _Counters, renew_sum, harvest_count,
                chunk: int = 2048):
    """Renewal decision at date t_k (vectorized, chunked per combo group).

    Mutates the state arrays in place; returns (fused-harvest mask,
    planted-positive mask, new pending matrix)."""
    n_paths = r.shape[0]
    n_e = grid.n_e
    matures = k > sched.m_delay
    len_prev = sched.pending_len(k - 1)
    if matures and len_prev:
        e_old = grid.e_axis[pend[:, 0]]
        tail = pend[:, 1:]
        shift = params.g0 + params.g(e_old)
    else:
        tail = pend
        shift = np.full(n_paths, params.g0)
    price = np.exp(s)
    cost = (price if params.cost_equals_price else np.exp(logq)) + params.c3
    chosen_e = np.zeros(n_paths, dtype=np.int64)
    fused_amount = np.zeros(n_paths)
    fused_mask = np.zeros(n_paths, dtype=bool)

    if policy == "field" and params.K > 0:
        slab0 = field.w[k][0]
        shape_next = (n_e,) * sched.pending_len(k)
        groups: dict[tuple, np.ndarray] = {}
        if tail.shape[1]:
            for t_combo in np.unique(tail, axis=0):
                mask = np.all(tail == t_combo[None, :], axis=1)
                groups[tuple(int(v) for v in t_combo)] = np.nonzero(mask)[0]
        else:
            groups[()] = np.arange(n_paths)
        lev = np.arange(grid.n_r)
        for t_combo, idx_all in groups.items():
            for start in range(0, idx_all.size, chunk):
                idx = idx_all[start:start + chunk]
                rows = np.arange(idx.size)
                take = rows[:, None]
                # per-order branch values on the target r-grid, then at the path stock
                phi = np.full((idx.size, grid.n_r), -np.inf)
                phi_arg = np.zeros((idx.size, grid.n_r), dtype=np.int64)
                ppos = np.minimum(r[idx] / grid.h_r, grid.n_r - 1)
                plo = np.minimum(ppos.astype(int), grid.n_r - 2)
                pfr = ppos - plo
                n_val = np.full(idx.size, -np.inf)
                e_plain = np.zeros(idx.size, dtype=np.int64)
                for ei in range(n_e):
                    flat = int(np.ravel_multi_index(t_combo + (ei,), shape_next)) if shape_next else 0
                    col = _s_columns(slab0[flat], s[idx], grid)
                    extra = params.g(float(grid.e_axis[ei])) if sched.m_delay == 0 else 0.0
                    # grid-target positions past r_max evaluate at the cap
                    # (the solver's own composition clamps identically)
                    pos = (grid.r_axis[None, :] + shift[idx][:, None] + extra) / grid.h_r
                    pos = np.minimum(pos, grid.n_r - 1)
                    lo = np.minimum(pos.astype(int), grid.n_r - 2)
                    fr = pos - lo
                    branch = col[take, lo] * (1 - fr) + col[take, lo + 1] * fr
                    branch -= (cost[idx] * grid.e_axis[ei])[:, None]
                    better = branch > phi + TOL_TIE
                    phi = np.where(better, branch, phi)
                    phi_arg[better] = ei
                    bval = branch[rows, plo] * (1 - pfr) + branch[rows, plo + 1] * pfr
                    improves = bval > n_val + TOL_TIE
                    n_val = np.where(improves, bval, n_val)
                    e_plain[improves] = ei
                # fused branch: grid-aligned harvest before maturation
                amounts = r[idx][:, None] - lev[None, :] * grid.h_r
                feas = amounts >= -1e-12
                paybar = (price[idx][:, None] - params.c1) * np.maximum(amounts, 0.0) - params.c2
                cand = np.where(feas, paybar + phi, -np.inf)
                bk = np.argmax(cand, axis=1)
                f_val = cand[rows, bk]
                f_amt = np.maximum(amounts[rows, bk], 0.0)
                use_f = (f_val > n_val + TOL_TIE) & (f_amt > 1e-15)
                if apply_filter:
                    bad = use_f & ((price[idx] - params.c1) * f_amt - params.c2 < 0)
                    cnt.filtered += int(np.count_nonzero(bad))
                    use_f &= ~bad
                chosen_e[idx] = np.where(use_f, phi_arg[rows, bk], e_plain)
                fused_amount[idx] = np.where(use_f, f_amt, 0.0)
                fused_mask[idx] = use_f

    # execute: optional fused harvest, then maturation + natural renewal + order
    if fused_mask.any():
        pay = (price - params.c1) * fused_amount - params.c2
        x[fused_mask] += pay[fused_mask]
        r[fused_mask] = np.maximum(r[fused_mask] - fused_amount[fused_mask], 0.0)
        harvest_count[fused_mask] += 1
        cnt.plant_and_harvest += int(np.count_nonzero(fused_mask & (chosen_e > 0)))
    r += shift
    cnt.clamped_r += int(np.count_nonzero(r > grid.r_max))
    np.minimum(r, grid.r_max, out=r)
    e_star = grid.e_axis[chosen_e]
    x -= cost * e_star
    if sched.m_delay == 0:
        r += params.g(e_star)
        cnt.clamped_r += int(np.count_nonzero(r > grid.r_max))
        np.minimum(r, grid.r_max, out=r)
    renew_sum[k - 1] += e_star.sum()
    if sched.m_delay > 0:
        new_pend = np.concatenate([tail, chosen_e[:, None]], axis=1)
    else:
        new_pend = np.zeros((n_paths, 0), dtype=np.int64)
    return fused_mask, chosen_e > 0, new_pend


# ---------------------------------------------------------------------------
# dynamic-programming spot check


def dpp_check(field: ValueField, z0: State, pending0: tuple[float, ...],
              stop, n_paths: int, seed: int, params: ModelParams, *,
              n_sub: int = 4, budget: float = 0.02) -> dict:
    """Check v(0, z0) >= E[v(theta, Z_theta)] under the no-intervention flow.

    stop is ("date", i), ("fixed", t_star) or ("band", lo, hi): the first
    renewal date, a fixed time snapped to the solver grid, or the first
    decision step at which the stock leaves [lo, hi] (capped at T^-).
    Reports the all-in inequality with a 3 SE + budget tolerance.
    """
    grid, sched = field.grid, field.schedule
    if pending0 != tuple():
        raise ParamError("the check starts at t = 0 with no pending orders")
    n, n_t = sched.n_dates, grid.n_t
    dt = sched.T / n / n_t
    kind = stop[0]
    if kind == "date":
        i_stop = int(stop[1])
        if not 1 <= i_stop <= n:
            raise ParamError(f"stop date index must lie in [1, {n}]")
        t_stop_step = i_stop * n_t
    elif kind == "fixed":
        t_stop_step = int(round(float(stop[1]) / dt))
        t_stop_step = min(max(t_stop_step, 0), n * n_t)
    elif kind == "band":
        lo, hi = float(stop[1]), float(stop[2])
        t_stop_step = None
    else:
        raise ParamError(f"unknown stopping rule {stop!r}")

    draws = _draw_block(seed, n_paths, n * n_t, n_sub)
    r = np.full(n_paths, float(z0.r))
    s = np.full(n_paths, math.log(z0.p))
    cnt = _Counters()
    stopped = np.zeros(n_paths, dtype=bool)
    stop_val = np.zeros(n_paths)
    b_s = params.mu - 0.5 * params.sigma**2
    sub_dt = dt / n_sub

    def eval_field(step: int, mask: np.ndarray):
        if not mask.any():
            return
        k, j = divmod(step, n_t)
        if k >= n:
            k, j = n - 1, n_t
        length = field.pending_len(k)
        combo = field.combo_index(k, (0,) * length)
        w2 = field.w[k][j][combo]
        stop_val[mask] = _interp_rs(w2, r[mask], s[mask], grid)
        stopped[mask] = True

    for step in range(n * n_t + 1):
        k, j = divmod(step, n_t)
        if j == 0 and 1 <= k <= n - 1:
            # xi = 0 on every date: only the natural renewal arrives; the
            # date-T bump is part of the terminal slice, not added here
            r[~stopped] += params.g0
            _clamp_state(r, s, grid, cnt)
        if t_stop_step is not None and step == t_stop_step:
            eval_field(step, ~stopped)
            break
        if t_stop_step is None:
            exited = (~stopped) & ((r < lo) | (r > hi))
            eval_field(step, exited)
            if step == n * n_t:
                eval_field(step, ~stopped)
                break
        if step == n * n_t:
            break
        r[:] = np.where(stopped, r,
                        logistic_sample_path(r, 0.0, dt, n_sub, draws[:, step, :, 0], params)[:, -1])
        dw = math.sqrt(sub_dt) * draws[:, step, :, 1].sum(axis=1)
        s[:] = np.where(stopped, s, s + b_s * dt + params.sigma * dw)
        _clamp_state(r, s, grid, cnt)

    lhs = float(z0.x + field.eval(0.0, z0.r, math.log(z0.p), pending0))
    rhs_mean = float(z0.x + stop_val.mean())
    se = float(stop_val.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
    slack = 3.0 * se + budget * abs(lhs)
    return {
        "lhs_value": lhs,
        "rhs_mean": rhs_mean,
        "std_error": se,
        "budget": slack,
        "holds": lhs >= rhs_mean - slack,
        "n_paths": n_paths,
        "seed": seed,
        "stop": stop,
    }


# ---------------------------------------------------------------------------
# region metrics


def region_metrics(regions: RegionMap, grid, k: int, step: int, combo: int = 0) -> dict:
    """Label counts and shape diagnostics for one (interval, step, combo) slice."""
    lab = regions.labels[k][step, combo]
    harvest = (lab == HARVEST) | (lab == PLANT_AND_HARVEST)
    plant = (lab == PLANT) | (lab == PLANT_AND_HARVEST)
    descents = int(np.count_nonzero(harvest[:, :-1] & ~harvest[:, 1:]))
    row_counts = harvest.sum(axis=1)
    boundary_rows = int(np.count_nonzero((row_counts > 0) & (row_counts < grid.n_s)))
    half = grid.n_s // 2
    plant_rows = plant.any(axis=1)
    return {
        "continue_area": int(np.count_nonzero(lab == CONTINUE)),
        "harvest_area": int(np.count_nonzero(harvest)),
        "plant_area": int(np.count_nonzero(plant)),
        "plant_and_harvest": int(np.count_nonzero(lab == PLANT_AND_HARVEST)),
        "monotone_s_descents": descents,
        "harvest_boundary_rows": boundary_rows,
        "harvest_area_lower_s": int(np.count_nonzero(harvest[:, :half])),
        "plant_area_lower_s": int(np.count_nonzero(plant[:, :half])),
        "plant_max_r": float(grid.r_axis[np.nonzero(plant_rows)[0].max()]) if plant_rows.any() else 0.0,
    }


# ---------------------------------------------------------------------------
# fixed-strategy replay (path-level checks of the profitable-harvest reduction)


def replay_strategy(strategy: Strategy, z0: State, params: ModelParams,
                    n_paths: int, seed: int, n_steps: int, *,
                    n_sub: int = 1, apply_filter: bool = False) -> dict:
    """Execute a fixed strategy on simulated paths; prices are exogenous.

    Harvest times snap to the uniform n_steps grid over [0, T] (n_steps must
    be a multiple of n_dates so the renewal dates are on the grid).  With
    apply_filter the unprofitable harvests are skipped online, mirroring the
    profitable-harvest reduction.  Amounts are capped at the available stock.
    Returns terminal liquidation values and the executed-harvest log.
    """
    sched = Schedule.from_params(params)
    if n_steps % sched.n_dates:
        raise ParamError("n_steps must be a multiple of n_dates")
    dt = params.T / n_steps
    sub_dt = dt / n_sub
    steps_per_date = n_steps // sched.n_dates
    harvest_at: dict[int, list[float]] = {}
    for t_h, amount in strategy.harvests:
        harvest_at.setdefault(int(round(t_h / dt)), []).append(amount)

    draws = _draw_block(seed, n_paths, n_steps, n_sub)
    r = np.full(n_paths, float(z0.r))
    s = np.full(n_paths, math.log(z0.p))
    lq = np.full(n_paths, math.log(z0.q))
    x = np.full(n_paths, float(z0.x))
    b_s = params.mu - 0.5 * params.sigma**2
    bq = params.rho_cost - 0.5 * params.varsigma**2
    executed = 0
    skipped = 0

    def date_of(step):
        return step // steps_per_date if step % steps_per_date == 0 and step > 0 else None

    for step in range(n_steps + 1):
        i_date = date_of(step)
        if i_date is not None and i_date <= sched.n_dates:
            matured = strategy.renewals.get(i_date - sched.m_delay, 0.0) if i_date > sched.m_delay else 0.0
            r += params.g(matured) + params.g0
            xi = strategy.renewals.get(i_date, 0.0)
            if not 0 <= xi <= params.K:
                raise ParamError(f"renewal at date {i_date} outside [0, K]")
            q = np.exp(s) if params.cost_equals_price else np.exp(lq)
            x -= (q + params.c3) * xi
        for amount in harvest_at.get(step, ()):  # post-jump when on a date
            p = np.exp(s)
            a = np.minimum(amount, r)
            pay = (p - params.c1) * a - params.c2
            if apply_filter:
                keep = pay >= 0
                skipped += int(np.count_nonzero(~keep))
                a = np.where(keep, a, 0.0)
                pay = np.where(keep, pay, 0.0)
            x += pay
            r -= a
            executed += int(np.count_nonzero(a > 0))
        if step == n_steps:
            break
        r[:] = logistic_sample_path(r, 0.0, dt, n_sub, draws[:, step, :, 0], params)[:, -1]
        dw = math.sqrt(sub_dt) * draws[:, step, :, 1].sum(axis=1)
        s += b_s * dt + params.sigma * dw
        if not params.cost_equals_price:
            lq += bq * dt + params.varsigma * dw
    p = np.exp(s)
    q = p if params.cost_equals_price else np.exp(lq)
    liq = x + sale_gain(r, p, params)
    return {
        "liquidation": liq, "r": r.copy(), "p": p, "q": q, "x": x.copy(),
        "executed": executed, "skipped": skipped,
    }
