"""Command-line interface: config ingestion, subcommands, artifact emission.

Config files are flat text with dotted keys (`model.eta = 1.0`); `#` starts
a comment.  Unknown keys are rejected and every default is materialized
into the echoed `resolved_config` so a run can be reproduced bit-for-bit
from its artifacts.  Subcommands: solve, simulate, regions, check.

Exit codes: 0 ok, 1 config error, 2 solver non-convergence, 3 I/O error,
4 config-hash mismatch, 5 failed check, 6 admissibility violations.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import artifacts
from .chain import SolverError
from .checks import run_checks
from .model import ModelParams, ParamError, State, validate_params
from .policy_sim import region_metrics, simulate
from .solver import solve

__all__ = ["ConfigError", "parse_config_file", "resolve_config", "main"]


class ConfigError(ValueError):
    pass


_REQUIRED = object()

# key -> (type tag, default); types: f float, i int, b bool, s str
_SCHEMA: dict[str, tuple[str, object]] = {
    "model.eta": ("f", 1.0),
    "model.lambda_cap": ("f", 0.7),
    "model.gamma": ("f", 0.1),
    "model.mu": ("f", 0.07),
    "model.sigma": ("f", 0.1),
    "model.rho_cost": ("f", 0.07),
    "model.varsigma": ("f", 0.1),
    "model.c1": ("f", 0.1),
    "model.c2": ("f", 0.01),
    "model.c3": ("f", 0.1),
    "model.g0": ("f", 0.03),
    "model.g_slope": ("f", 1.0),
    "model.K": ("f", _REQUIRED),
    "model.T": ("f", 3.0),
    "model.n_dates": ("i", 3),
    "model.m_delay": ("i", 1),
    "model.cost_equals_price": ("b", True),
    "grid.r_max": ("f", 1.0),
    "grid.n_r": ("i", 151),
    "grid.n_s": ("i", 101),
    "grid.n_e": ("i", 11),
    "grid.s_min": ("s", "auto"),
    "grid.s_max": ("s", "auto"),
    "solver.tol_policy": ("f", 1e-8),
    "solver.max_iters": ("i", 200),
    "solver.tol_tie": ("f", 1e-10),
    "solver.n_t": ("i", 50),
    "sim.n_paths": ("i", 10000),
    "sim.seed": ("i", 42),
    "sim.n_sub": ("i", 4),
    "sim.z0": ("s", "0,0.5,1,1"),
    "sim.pending0": ("s", ""),
    "output.dir": ("s", "out"),
    "output.slices": ("s", "dates,midpoints"),
    "output.emit_value": ("b", True),
    "output.emit_regions": ("b", True),
    "output.emit_pgm": ("b", False),
    "output.emit_paths": ("b", False),
}


def parse_config_file(path: str) -> dict[str, str]:
    raw: dict[str, str] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            if key in raw:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            raw[key] = val
    return raw


def _convert(key: str, value, kind: str):
    if isinstance(value, str):
        text = value.strip()
        try:
            if kind == "f":
                return float(text)
            if kind == "i":
                return int(text)
            if kind == "b":
                if text.lower() in ("true", "1", "yes"):
                    return True
                if text.lower() in ("false", "0", "no"):
                    return False
                raise ValueError(text)
            return text
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return value


def resolve_config(raw: dict, overrides: dict | None = None) -> dict:
    """Typed config with every default materialized; unknown keys rejected."""
    unknown = set(raw) - set(_SCHEMA)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    out: dict = {}
    for key, (kind, default) in _SCHEMA.items():
        if key in raw:
            out[key] = _convert(key, raw[key], kind)
        elif default is _REQUIRED:
            raise ConfigError(
                f"missing required key {key}: the renewal cap has no accepted default; "
                f"set model.K explicitly (0.3 reproduces the shipped baseline)"
            )
        else:
            out[key] = default
    for key, val in (overrides or {}).items():
        kind, _ = _SCHEMA[key]
        out[key] = _convert(key, val, kind)
    return out


def params_from_config(cfg: dict) -> ModelParams:
    fields = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("model.")}
    return ModelParams(**fields)


def grid_overrides_from_config(cfg: dict) -> dict:
    out = {"r_max": cfg["grid.r_max"], "n_r": cfg["grid.n_r"], "n_s": cfg["grid.n_s"],
           "n_e": cfg["grid.n_e"], "n_t": cfg["solver.n_t"]}
    for bound in ("s_min", "s_max"):
        raw = cfg[f"grid.{bound}"]
        if raw != "auto":
            out[bound] = float(raw)
    return out


def _parse_z0(cfg: dict) -> State:
    parts = [float(v) for v in cfg["sim.z0"].split(",")]
    if len(parts) != 4:
        raise ConfigError(f"sim.z0 must be 'x,r,p,q', got {cfg['sim.z0']!r}")
    return State(*parts)


def _parse_pending(cfg: dict) -> tuple:
    text = cfg["sim.pending0"].strip()
    if not text:
        return ()
    return tuple(float(v) for v in text.split(","))


def _parse_slices(text: str, n_dates: int, n_t: int) -> list[tuple[int, int, int]]:
    out: list[tuple[int, int, int]] = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        if token == "dates":
            out.extend((k, n_t, 0) for k in range(n_dates))
        elif token == "midpoints":
            out.extend((k, n_t // 2, 0) for k in range(n_dates))
        elif token == "start":
            out.append((0, 0, 0))
        else:
            parts = token.split(":")
            if len(parts) != 3:
                raise ConfigError(f"bad slice token {token!r} (want k:step:combo)")
            out.append((int(parts[0]), int(parts[1]), int(parts[2])))
    seen, uniq = set(), []
    for sel in out:
        if sel not in seen:
            seen.add(sel)
            uniq.append(sel)
    return uniq


def _warn_degenerate(params: ModelParams, quiet: bool):
    zeros = [name for name in ("gamma", "sigma", "varsigma") if getattr(params, name) == 0.0]
    if zeros and not quiet:
        print(f"warning: degenerate diffusion ({', '.join(zeros)} = 0); "
              f"the model assumes positive volatilities", file=sys.stderr)


def _load_config(args) -> dict:
    raw = parse_config_file(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["sim.seed"] = args.seed
    if getattr(args, "out", None) is not None:
        overrides["output.dir"] = args.out
    return resolve_config(raw, overrides)


def cmd_solve(args) -> int:
    cfg = _load_config(args)
    params = params_from_config(cfg)
    validate_params(params, allow_degenerate_vol=True)
    _warn_degenerate(params, args.quiet)
    result = solve(
        params, grid_overrides_from_config(cfg),
        tol_policy=cfg["solver.tol_policy"], max_iters=cfg["solver.max_iters"],
        tol_tie=cfg["solver.tol_tie"], threads=args.threads,
        allow_degenerate_vol=True,
    )
    out_dir = cfg["output.dir"]
    os.makedirs(out_dir, exist_ok=True)
    artifacts.write_resolved_config(os.path.join(out_dir, "resolved_config"), cfg)
    meta = dict(result.meta)
    meta["config_hash"] = artifacts.config_hash(cfg)
    artifacts.write_meta(os.path.join(out_dir, "meta.txt"), meta)
    artifacts.save_field(os.path.join(out_dir, "field.npz"), result, cfg)
    grid = result.field.grid
    selections = _parse_slices(cfg["output.slices"], params.n_dates, grid.n_t)
    if cfg["output.emit_value"]:
        for k, step, combo in selections:
            artifacts.write_value_csv(
                os.path.join(out_dir, f"w_k{k}_t{step}_e{combo}.csv"), result.field, k, step, combo)
    if cfg["output.emit_regions"]:
        artifacts.write_regions_csv(os.path.join(out_dir, "regions.csv"),
                                    result.field, result.regions, selections)
    if cfg["output.emit_pgm"]:
        for k, step, combo in selections:
            artifacts.write_region_pgm(
                os.path.join(out_dir, f"regions_k{k}_t{step}_e{combo}.pgm"),
                result.regions, result.field, k, step, combo)
    if not args.quiet:
        v0 = result.value0(0.0, 0.5, 1.0) if grid.r_max >= 0.5 else float("nan")
        print(f"solved: w in [{result.meta['w_min']:.3e}, {result.meta['w_max']:.5f}], "
              f"value(0, r=0.5, p=1) = {v0:.6f}, "
              f"{result.meta['policy_iters']} policy iterations, "
              f"{result.meta['wall_time_s']:.1f}s -> {out_dir}")
    return 0


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    field_dir = args.field or cfg["output.dir"]
    result, stored_hash = artifacts.load_field(os.path.join(field_dir, "field.npz"))
    current = artifacts.config_hash(cfg)
    if stored_hash and stored_hash != current:
        print(f"error: config hash {current[:12]} does not match the solved "
              f"artifacts ({stored_hash[:12]}); re-run solve", file=sys.stderr)
        return 4
    params = params_from_config(cfg)
    _warn_degenerate(params, args.quiet)
    z0 = _parse_z0(cfg)
    out = simulate(result.field, z0, _parse_pending(cfg), cfg["sim.n_paths"],
                   cfg["sim.seed"], cfg["sim.n_sub"], params,
                   collect_paths=cfg["output.emit_paths"])
    report, rows = out if cfg["output.emit_paths"] else (out, None)
    out_dir = cfg["output.dir"]
    os.makedirs(out_dir, exist_ok=True)
    artifacts.write_sim_report(os.path.join(out_dir, "sim_report.csv"), report)
    if rows is not None:
        artifacts.write_paths_csv(os.path.join(out_dir, "paths.csv"), rows)
    if not args.quiet:
        print(f"simulated {report.n_paths} paths: J_MC = {report.j_mc:.6f} "
              f"+- {report.std_error:.2e}, value = {report.pde_value:.6f} "
              f"(gap {report.rel_gap:.2%}), harvests/path {report.harvest_mean_per_path:.2f}")
    if report.admissibility_violations > 0:
        print(f"error: {report.admissibility_violations} admissibility violations",
              file=sys.stderr)
        return 6
    return 0


def cmd_regions(args) -> int:
    field_dir = args.field
    result, _ = artifacts.load_field(os.path.join(field_dir, "field.npz"))
    grid = result.field.grid
    selections = _parse_slices(args.slices, result.field.n_intervals, grid.n_t)
    if not selections:
        raise ConfigError("empty slice selection")
    for k, step, combo in selections:
        if not (0 <= k < result.field.n_intervals and 0 <= step <= grid.n_t
                and 0 <= combo < result.field.n_combo(k)):
            raise ConfigError(f"slice {k}:{step}:{combo} outside the solved field")
    out_dir = args.out or field_dir
    os.makedirs(out_dir, exist_ok=True)
    artifacts.write_regions_csv(os.path.join(out_dir, "regions_selected.csv"),
                                result.field, result.regions, selections)
    with open(os.path.join(out_dir, "regions_summary.txt"), "w") as f:
        for k, step, combo in selections:
            metrics = region_metrics(result.regions, grid, k, step, combo)
            line = (f"slice k={k} step={step} e={combo}: "
                    + ", ".join(f"{key}={val}" for key, val in metrics.items()))
            f.write(line + "\n")
            if not args.quiet:
                print(line)
    return 0


def cmd_check(args) -> int:
    cfg = _load_config(args)
    params = params_from_config(cfg)
    log = (lambda *a, **k: None) if args.quiet else print
    results = run_checks(params, n_paths=args.n_paths, seed=cfg["sim.seed"],
                         inject_negative_offdiag=args.inject_fault == "negative-offdiag",
                         log=log)
    failures = [r for r in results if not r["ok"]]
    if failures:
        print(f"{len(failures)} of {len(results)} checks FAILED", file=sys.stderr)
        return 5
    if not args.quiet:
        print(f"all {len(results)} checks passed")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="harvopt",
        description="Optimal harvesting with delayed renewal: QVI solver, "
                    "strategy extraction and Monte Carlo validation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="flat dotted-key config file")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--seed", type=int, help="RNG seed (overrides sim.seed)")
        p.add_argument("--threads", type=int, default=1, help="worker cap for per-level solves")
        p.add_argument("--quiet", action="store_true")

    p_solve = sub.add_parser("solve", help="run the backward solver and emit artifacts")
    common(p_solve)
    p_sim = sub.add_parser("simulate", help="simulate the extracted strategy from solved artifacts")
    common(p_sim)
    p_sim.add_argument("--field", help="directory holding field.npz (default: output.dir)")
    p_reg = sub.add_parser("regions", help="export region maps and metrics from solved artifacts")
    common(p_reg, needs_config=False)
    p_reg.add_argument("--field", required=True, help="directory holding field.npz")
    p_reg.add_argument("--slices", default="dates,midpoints", help="slice selector")
    p_chk = sub.add_parser("check", help="run the reduced-grid invariant suites")
    common(p_chk)
    p_chk.add_argument("--n-paths", type=int, default=3000, help="Monte Carlo paths per check")
    p_chk.add_argument("--inject-fault", choices=["negative-offdiag"],
                       help="self-test hook: corrupt one stencil entry so the checker must fail")

    args = parser.parse_args(argv)
    handlers = {"solve": cmd_solve, "simulate": cmd_simulate,
                "regions": cmd_regions, "check": cmd_check}
    try:
        return handlers[args.command](args)
    except (ConfigError, ParamError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
