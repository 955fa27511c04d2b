"""Artifact persistence: model grids, tightening bundles, traces, cycles.

JSON artifacts are written canonically (sorted keys, fixed separators) so
identical inputs produce byte-identical files; content hashes provide
staleness detection between a grid and the plans built from it.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .config import GRID_IDS, ToolkitConfig
from .engine import LinearModel, ModelGrid, OperatingPoint, _make_warp
from .geometry import Hypercube
from .tightening import TighteningBundle


def canonical_dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def content_hash(obj) -> str:
    return hashlib.sha256(canonical_dumps(obj).encode()).hexdigest()[:16]


def write_json(path, obj):
    Path(path).write_text(canonical_dumps(obj))


def read_json(path):
    return json.loads(Path(path).read_text())


# -- model grid --------------------------------------------------------------

def grid_to_dict(grid: ModelGrid) -> dict:
    return {
        "Ts": grid.Ts,
        "points": [{"speed": p.speed, "fuel": p.fuel} for p in grid.points],
        "models": [m.to_dict() for m in grid.models],
        "disturbance": [{"half_width": d.half_width.tolist()}
                        for d in grid.disturbance],
        "meta": {"seed": grid.seed, "eta_fraction": grid.eta_fraction,
                 "eta_max": grid.eta_max.tolist()
                 if grid.eta_max is not None else None},
    }


def grid_from_dict(data: dict) -> ModelGrid:
    points = [OperatingPoint(p["speed"], p["fuel"]) for p in data["points"]]
    speeds = np.unique([p.speed for p in points])
    fuels = np.unique([p.fuel for p in points])
    models = []
    for gid, md in zip(GRID_IDS, data["models"]):
        models.append(LinearModel(
            np.asarray(md["A"]), np.asarray(md["B"]), np.asarray(md["C"]),
            np.asarray(md["D"]), np.asarray(md["trim_x"]),
            np.asarray(md["trim_u"]), np.asarray(md["trim_y"]), gid))
    dists = [Hypercube.zero_centered(np.asarray(d["half_width"]))
             for d in data["disturbance"]]
    meta = data.get("meta", {})
    grid = ModelGrid(
        Ts=float(data["Ts"]), speeds=speeds, fuels=fuels, points=points,
        models=models, disturbance=dists, seed=int(meta.get("seed", 0)),
        eta_fraction=float(meta.get("eta_fraction", 0.0)))
    if meta.get("eta_max") is not None:
        grid.eta_max = np.asarray(meta["eta_max"], dtype=float)
    # the truth-plant warp rebuilds deterministically from the stored seed
    grid._warp = _make_warp(grid.seed)
    return grid


def save_grid(path, grid: ModelGrid):
    write_json(path, grid_to_dict(grid))


def load_grid(path) -> ModelGrid:
    return grid_from_dict(read_json(path))


def grid_hash(grid: ModelGrid) -> str:
    return content_hash(grid_to_dict(grid))


# -- tightening bundle -------------------------------------------------------

def save_bundle(path, bundle: TighteningBundle, grid: ModelGrid):
    payload = bundle.to_dict()
    payload["grid_hash"] = grid_hash(grid)
    write_json(path, payload)


def load_bundle(path, grid: ModelGrid | None = None,
                check_stale: bool = True) -> TighteningBundle:
    data = read_json(path)
    if grid is not None and check_stale:
        if data.get("grid_hash") != grid_hash(grid):
            raise StalePlans("plans were built from a different grid")
    return TighteningBundle.from_dict(data)


class StalePlans(Exception):
    pass


# -- drive cycles and traces -------------------------------------------------

def save_cycle_csv(path, time_s, speed, fuel):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["time", "speed", "fuel"])
        for row in zip(time_s, speed, fuel):
            wr.writerow([f"{v:.6f}" for v in row])


def load_cycle_csv(path):
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if [h.strip() for h in header] != ["time", "speed", "fuel"]:
            raise ValueError(f"unexpected cycle header: {header}")
        rows = np.array([[float(v) for v in row] for row in rd])
    return rows[:, 0], rows[:, 1], rows[:, 2]


TRACE_HEADER = ["time", "speed", "fuel", "active_grid",
                "x1", "x2", "x3", "x4", "u1", "u2", "u3",
                "y1", "y2", "r1", "r2", "Y1", "Y2", "V", "feasible"]


def save_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(TRACE_HEADER)
        for k in range(trace.n_steps):
            row = ([f"{trace.time[k]:.6f}", f"{trace.speed[k]:.4f}",
                    f"{trace.fuel[k]:.4f}", trace.active_grid[k]]
                   + [f"{v:.8g}" for v in trace.x[k]]
                   + [f"{v:.8g}" for v in trace.u[k]]
                   + [f"{v:.8g}" for v in trace.y[k]]
                   + [f"{v:.8g}" for v in trace.ref[k]]
                   + [f"{v:.8g}" for v in trace.Y[k]]
                   + [f"{trace.V[k]:.8g}", str(int(trace.feasible[k]))])
            wr.writerow(row)


def chart_json(trace, channels=("y1", "y2"), max_points: int = 2000) -> dict:
    """Line-chart payload: one series per requested channel, downsampled."""
    stride = max(1, int(np.ceil(trace.n_steps / max_points)))
    idx = np.arange(0, trace.n_steps, stride)
    series = {}
    lookup = {
        "y1": trace.y[:, 0], "y2": trace.y[:, 1],
        "r1": trace.ref[:, 0], "r2": trace.ref[:, 1],
        "Y1": trace.Y[:, 0], "Y2": trace.Y[:, 1],
        "u1": trace.u[:, 0], "u2": trace.u[:, 1], "u3": trace.u[:, 2],
        "x1": trace.x[:, 0], "x2": trace.x[:, 1],
        "x3": trace.x[:, 2], "x4": trace.x[:, 3],
        "V": trace.V, "speed": trace.speed, "fuel": trace.fuel,
    }
    for ch in channels:
        series[ch] = [round(float(v), 8) for v in lookup[ch][idx]]
    return {"time": [round(float(t), 6) for t in trace.time[idx]],
            "series": series,
            "active_grid": [trace.active_grid[i] for i in idx]}


def config_hash(cfg: ToolkitConfig) -> str:
    return content_hash(cfg.to_dict())
