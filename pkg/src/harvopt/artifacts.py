"""Artifact emission and reload.

All numeric CSV output uses repr(float), which round-trips doubles exactly
and is locale-independent.  The value field itself is archived as a
compressed .npz so a simulation run can reload exactly what the solver
produced; the CSV surfaces exist for external tools.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .chain import GridSpec
from .impulse import Schedule
from .model import ModelParams
from .solver import LABEL_NAMES, RegionMap, SolveResult, ValueField

__all__ = [
    "config_hash",
    "write_resolved_config",
    "write_meta",
    "write_value_csv",
    "write_regions_csv",
    "write_region_pgm",
    "write_sim_report",
    "write_paths_csv",
    "save_field",
    "load_field",
]

VOLATILE_META = ("wall_time_s",)


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def config_hash(resolved: dict, sections=("model", "grid", "solver")) -> str:
    """Hash of the solver-relevant config lines (sim/output excluded)."""
    lines = sorted(
        f"{key} = {_fmt(val)}" for key, val in resolved.items()
        if key.split(".", 1)[0] in sections
    )
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()


def write_resolved_config(path: str, resolved: dict) -> None:
    with open(path, "w") as f:
        for key in sorted(resolved):
            f.write(f"{key} = {_fmt(resolved[key])}\n")


def write_meta(path: str, meta: dict) -> None:
    """key: value lines; volatile entries (wall time) go last for diffing."""
    flat = {}
    for key, val in meta.items():
        if isinstance(val, dict):
            for k2, v2 in val.items():
                flat[f"{key}.{k2}"] = v2
        else:
            flat[key] = val
    with open(path, "w") as f:
        for key in sorted(k for k in flat if k not in VOLATILE_META):
            f.write(f"{key}: {_fmt(flat[key])}\n")
        f.write("# volatile\n")
        for key in VOLATILE_META:
            if key in flat:
                f.write(f"{key}: {_fmt(flat[key])}\n")


def write_value_csv(path: str, field: ValueField, k: int, step: int, combo: int) -> None:
    """One slice as `r,s,w` rows in row-major node order (r outer)."""
    grid = field.grid
    slab = field.w[k][step, combo]
    with open(path, "w") as f:
        f.write("r,s,w\n")
        for i, r in enumerate(grid.r_axis):
            for j, s in enumerate(grid.s_axis):
                f.write(f"{_fmt(r)},{_fmt(s)},{_fmt(slab[i, j])}\n")


def write_regions_csv(path: str, field: ValueField, regions: RegionMap,
                      selections: list[tuple[int, int, int]]) -> None:
    grid = field.grid
    with open(path, "w") as f:
        f.write("k,step,e,r,s,label,harvest_amount,plant_amount\n")
        for k, step, combo in selections:
            lab = regions.labels[k][step, combo]
            units = regions.harvest_units[k][step, combo]
            plant = regions.plant_level[k][combo] if step == grid.n_t else None
            for i, r in enumerate(grid.r_axis):
                for j, s in enumerate(grid.s_axis):
                    pl = grid.e_axis[plant[i, j]] if plant is not None else 0.0
                    f.write(
                        f"{k},{step},{combo},{_fmt(r)},{_fmt(s)},"
                        f"{LABEL_NAMES[int(lab[i, j])]},{_fmt(units[i, j] * grid.h_r)},{_fmt(pl)}\n"
                    )


def write_region_pgm(path: str, regions: RegionMap, field: ValueField,
                     k: int, step: int, combo: int) -> None:
    """Label-coded P5 heatmap, one byte per node (0/85/170/255)."""
    lab = regions.labels[k][step, combo]
    levels = np.array([0, 85, 170, 255], dtype=np.uint8)
    img = levels[lab][::-1, :]  # r increases upward
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(img.tobytes())


def write_sim_report(path: str, report) -> None:
    row = report.row()
    with open(path, "w") as f:
        f.write(",".join(row.keys()) + "\n")
        f.write(",".join(_fmt(v) for v in row.values()) + "\n")


def write_paths_csv(path: str, rows) -> None:
    with open(path, "w") as f:
        f.write("path,time,r,p,q,action,amount\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def save_field(path: str, result: SolveResult, resolved: dict | None = None) -> None:
    field, regions = result.field, result.regions
    arrays = {}
    for k in range(field.n_intervals):
        arrays[f"w_{k}"] = field.w[k]
        arrays[f"labels_{k}"] = regions.labels[k]
        arrays[f"units_{k}"] = regions.harvest_units[k]
        arrays[f"plant_{k}"] = regions.plant_level[k]
    payload = {
        "params": {f: getattr(field.params, f) for f in ModelParams.__dataclass_fields__},
        "grid": {f: getattr(field.grid, f) for f in GridSpec.__dataclass_fields__},
        "meta": result.meta,
        "config_hash": config_hash(resolved) if resolved else "",
    }
    arrays["payload_json"] = np.frombuffer(json.dumps(payload).encode(), dtype=np.uint8)
    np.savez_compressed(path, **arrays)


def load_field(path: str) -> tuple[SolveResult, str]:
    """Reload a saved solve; returns (result, stored config hash)."""
    with np.load(path) as data:
        payload = json.loads(bytes(data["payload_json"]).decode())
        params = ModelParams(**payload["params"])
        grid = GridSpec(**payload["grid"])
        schedule = Schedule.from_params(params)
        w, labels, units, plant = [], [], [], []
        for k in range(params.n_dates):
            w.append(data[f"w_{k}"])
            labels.append(data[f"labels_{k}"])
            units.append(data[f"units_{k}"])
            plant.append(data[f"plant_{k}"])
    field = ValueField(params=params, grid=grid, schedule=schedule, w=w)
    regions = RegionMap(labels=labels, harvest_units=units, plant_level=plant)
    return SolveResult(field=field, regions=regions, meta=payload["meta"]), payload["config_hash"]
