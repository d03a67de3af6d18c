"""Runtime invariant suites: scheme soundness, model oracles, policy checks.

Run by the `check` CLI subcommand on a reduced grid (51 x 35, 20 steps per
interval) so the whole battery finishes within a couple of minutes.  Each
check returns PASS/FAIL plus a one-line detail; any FAIL makes the command
exit nonzero.  The growth-bound constant below was fitted once on the full
baseline run and is frozen for regression.
"""

from __future__ import annotations

import math

import numpy as np

from . import oracles
from .chain import Generator, build_grid
from .impulse import Schedule, Strategy, harvest_op, mature_op, renew_op
from .model import ModelParams, State, baseline_params, logistic_sample_path, path_rng, validate_params
from .policy_sim import dpp_check, region_metrics, replay_strategy, simulate
from .solver import CONTINUE, PLANT_AND_HARVEST, discrete_harvest_sup, solve

__all__ = ["GROWTH_C", "CHECK_GRID", "run_checks", "monotonicity_violation", "growth_bound_excess"]

# Fitted once on the solved full baseline (max w / (1 + r^4 + p^4 + q^4)
# came out near 0.60); frozen with headroom for regression runs.
GROWTH_C = 0.8

CHECK_GRID = {"n_r": 51, "n_s": 35, "n_t": 20}


def monotonicity_violation(field) -> float:
    """Largest decrease of w along the r- and s-axes over every stored slice."""
    worst = 0.0
    for w_k in field.w:
        worst = max(worst, float((w_k[..., :-1, :] - w_k[..., 1:, :]).max()))
        worst = max(worst, float((w_k[..., :, :-1] - w_k[..., :, 1:]).max()))
    return worst


def growth_bound_excess(field, c_const: float = GROWTH_C) -> float:
    """Largest w - C (1 + r^4 + p^4 + q^4); <= 0 when the bound holds."""
    grid = field.grid
    p = np.exp(grid.s_axis)[None, :]
    bound = c_const * (1.0 + grid.r_axis[:, None] ** 4 + 2.0 * p**4)
    worst = -np.inf
    for w_k in field.w:
        worst = max(worst, float((w_k - bound).max()))
    return worst


def _qvi_residuals(result):
    """Post-solve residuals: obstacle violation and r = 0 labelling."""
    field, regions = result.field, result.regions
    grid, params = field.grid, field.params
    worst = -np.inf
    r0_bad = 0
    for k in range(field.n_intervals):
        for j in range(grid.n_t):
            h, _ = discrete_harvest_sup(field.w[k][j], grid, params)
            worst = max(worst, float((h - field.w[k][j]).max()))
            r0_bad += int(np.count_nonzero(regions.labels[k][j, :, 0, :] != CONTINUE))
    return worst, r0_bad


def run_checks(params: ModelParams, *, n_paths: int = 3000, seed: int = 1234,
               inject_negative_offdiag: bool = False, log=print) -> list[dict]:
    """Execute every check; returns [{name, ok, detail}, ...]."""
    results: list[dict] = []

    def record(name: str, ok: bool, detail: str):
        results.append({"name": name, "ok": bool(ok), "detail": detail})
        log(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")

    params = validate_params(params, allow_degenerate_vol=True)
    deterministic = params.gamma == 0.0 and params.sigma == 0.0
    grid = build_grid(params, dict(CHECK_GRID))

    # -- scheme soundness ---------------------------------------------------
    gen = Generator(params, grid, inject_negative_offdiag=inject_negative_offdiag)
    min_off, row_sum = gen.row_report()
    record("scheme.m_matrix", min_off >= 0.0 and row_sum <= 1e-12,
           f"min off-diagonal {min_off:.3e}, max |row sum| {row_sum:.3e}")
    first, second = gen.moment_errors()
    record("scheme.local_consistency", first <= 1e-10 and second <= 1e-10,
           f"first-moment err {first:.3e}, second-moment excess {second:.3e}")

    small = build_grid(params, {"n_r": 7, "n_s": 6, "n_t": 4})
    rng = np.random.default_rng(seed)
    w0 = rng.random((small.n_r, small.n_s))
    from .chain import implicit_step
    dense = oracles.dense_implicit_solve(w0, 0.05, params, small)
    fast = implicit_step(w0, 0.05, Generator(params, small))
    gap = float(np.abs(dense - fast).max())
    record("scheme.implicit_dense", gap <= 1e-10, f"small-grid dense vs sparse gap {gap:.3e}")

    # -- model oracles ------------------------------------------------------
    from .model import logistic_step_deterministic
    r_det = logistic_step_deterministic(0.5, 1.0, params)
    r_rk4 = oracles.rk4_logistic(0.5, 1.0, params)
    record("model.logistic_closed_form", abs(r_det - r_rk4) <= 1e-8,
           f"closed form {r_det:.10f} vs RK4 {r_rk4:.10f}")

    if params.gamma > 0:
        n_mc = 100_000
        rng = path_rng(seed, 0)
        draws = rng.standard_normal((n_mc, 64))
        exact = logistic_sample_path(np.full(n_mc, 0.5), 0.0, 1.0, 64, draws, params)[:, -1]
        draws_em = path_rng(seed, 1).standard_normal((n_mc, 1024))
        em = oracles.euler_maruyama_logistic(0.5, 0.0, 1.0, draws_em, params)[:, -1]
        diff = abs(exact.mean() - em.mean())
        se = math.hypot(exact.std(ddof=1), em.std(ddof=1)) / math.sqrt(n_mc)
        record("model.em_mean", diff <= 3 * se,
               f"mean gap {diff:.2e} vs 3 SE {3 * se:.2e}")

        fine = 64
        draws_s = path_rng(seed, 2).standard_normal((1000, fine))
        errs = []
        for n_sub in (8, 16, 32, 64):
            agg = draws_s.reshape(1000, n_sub, fine // n_sub).sum(axis=2) / math.sqrt(fine // n_sub)
            ex = logistic_sample_path(np.full(1000, 0.5), 0.0, 1.0, n_sub, agg, params)[:, -1]
            em_c = oracles.euler_maruyama_logistic(0.5, 0.0, 1.0, agg, params)[:, -1]
            errs.append(float(np.abs(ex - em_c).mean()))
        mono = all(b < a for a, b in zip(errs, errs[1:]))
        record("model.em_strong_monotone", mono,
               "strong error by n_sub doubling: " + ", ".join(f"{e:.2e}" for e in errs))

        sched = Schedule.from_params(params)
        cap = params.g(params.K) + params.g0
        ratios = []
        for r0 in (0.1, 0.5, 1.0):
            sup = np.full(4000, r0)
            r_cur = np.full(4000, r0)
            t = 0.0
            for i, t_next in enumerate(np.append(sched.dates, params.T)[: sched.n_dates]):
                d = path_rng(seed, 10 + i).standard_normal((4000, 32))
                seg = logistic_sample_path(r_cur, t, t_next, 32, d, params)
                sup = np.maximum(sup, seg.max(axis=1))
                r_cur = seg[:, -1] + cap
                sup = np.maximum(sup, r_cur)
                t = t_next
            ratios.append(float((sup**2).mean() / (1 + r0**2)))
        spread = max(ratios) / min(ratios)
        record("model.sup_moment_ratio", spread < 10.0,
               f"E[sup R^2]/(1+r0^2) ratios {['%.3f' % v for v in ratios]}, spread {spread:.2f}")

    # -- impulse operators ----------------------------------------------------
    z = State(0.3, 0.4, 1.2, 1.2)
    comp = renew_op(mature_op(z, 0.1, params), 0.2, params)
    manual = State(z.x - (z.q + params.c3) * 0.2, z.r + params.g(0.1) + params.g0, z.p, z.q)
    shift = harvest_op(State(z.x + 1.0, z.r, z.p, z.q), 0.2, params).x - harvest_op(z, 0.2, params).x
    record("impulse.compose_translate",
           abs(comp.x - manual.x) < 1e-15 and abs(comp.r - manual.r) < 1e-15 and abs(shift - 1.0) < 1e-15,
           "renewal composition and cash translation hold")

    strat = Strategy(renewals={1: 0.1}, harvests=((0.4, 0.05), (1.4, 0.004), (2.2, 0.08)))
    raw = replay_strategy(strat, State(0.0, 0.5, 1.0, 1.0), params, 200, seed, 60)
    filt = replay_strategy(strat, State(0.0, 0.5, 1.0, 1.0), params, 200, seed, 60, apply_filter=True)
    worst = float((raw["liquidation"] - filt["liquidation"]).max())
    record("impulse.filter_pathwise", worst <= 1e-12,
           f"max pathwise loss from filtering {worst:.2e} (skipped {filt['skipped']})")

    # -- reduced solve ---------------------------------------------------------
    result = solve(params, dict(CHECK_GRID), allow_degenerate_vol=True,
                   inject_negative_offdiag=inject_negative_offdiag)
    field = result.field
    mono = monotonicity_violation(field)
    record("solver.monotone_r_s", mono <= 1e-8, f"worst directional decrease {mono:.3e}")
    record("solver.w_nonnegative", result.meta["w_min"] >= -1e-9,
           f"min w {result.meta['w_min']:.3e}")
    resid, r0_bad = _qvi_residuals(result)
    record("solver.qvi_obstacle", resid <= 1e-8, f"max Hw - w {resid:.3e}")
    record("solver.continue_residual", result.meta["max_continue_resid"] <= 1e-8,
           f"max continuation residual {result.meta['max_continue_resid']:.3e}")
    record("solver.r0_plane_continue", r0_bad == 0, f"{r0_bad} non-CONTINUE labels at r = 0")
    excess = growth_bound_excess(field)
    record("solver.growth_bound", excess <= 0.0,
           f"max w - C(1+r^4+p^4+q^4) = {excess:.3e} (C = {GROWTH_C})")
    record("solver.terminal_no_renewal", result.meta["terminal_e0_gap"] <= 1e-12,
           f"terminal argmax vs e'=0 gap {result.meta['terminal_e0_gap']:.3e}")
    pah = sum(int(np.count_nonzero(lab == PLANT_AND_HARVEST)) for lab in result.regions.labels)
    record("solver.no_plant_and_harvest", pah == 0, f"{pah} fused nodes in the region map")

    if deterministic:
        ref = oracles.reference_backward_solve(params, field.grid)
        worst_ref = max(float(np.abs(a - b).max()) for a, b in zip(ref, field.w))
        record("oracle.deterministic_dp", worst_ref <= 1e-6,
               f"solver vs exhaustive dense DP sup gap {worst_ref:.3e}")

    # -- policy simulation ----------------------------------------------------
    z0 = State(0.0, 0.5, 1.0, 1.0)
    rep = simulate(field, z0, (), n_paths, seed, 4, params)
    gap_ok = rep.rel_gap <= 0.05 and rep.j_mc <= rep.pde_value + 3 * rep.std_error
    record("policy.mc_pde_gap", gap_ok,
           f"J_MC {rep.j_mc:.5f} vs v {rep.pde_value:.5f} (gap {rep.rel_gap:.2%}, SE {rep.std_error:.2e})")
    record("policy.admissibility", rep.admissibility_violations == 0,
           f"{rep.admissibility_violations} violations; clamps r {rep.clamped_r}, s {rep.clamped_s}")
    record("policy.no_simultaneous", rep.plant_and_harvest_count == 0,
           f"{rep.plant_and_harvest_count} simultaneous plant+harvest events over {n_paths} paths")

    rep_nf = simulate(field, z0, (), n_paths, seed, 4, params, apply_filter=False)
    se_comb = math.hypot(rep.std_error, rep_nf.std_error)
    record("policy.filter_improves", rep.j_mc >= rep_nf.j_mc - 3 * se_comb,
           f"J(filter) {rep.j_mc:.5f} vs J(raw) {rep_nf.j_mc:.5f} +- {3 * se_comb:.2e}")

    dpp = dpp_check(field, z0, (), ("date", 1), n_paths, seed, params)
    record("policy.dpp_date1", dpp["holds"],
           f"v(0) {dpp['lhs_value']:.5f} >= E[v(t1)] {dpp['rhs_mean']:.5f} - {dpp['budget']:.2e}")

    if deterministic:
        rep1 = simulate(field, z0, (), 1, seed, 4, params)
        det_gap = abs(rep1.j_mc - rep1.pde_value) / max(abs(rep1.pde_value), 1e-12)
        record("oracle.deterministic_sim", det_gap <= 0.05,
               f"single deterministic path {rep1.j_mc:.6f} vs value {rep1.pde_value:.6f}")

    return results
