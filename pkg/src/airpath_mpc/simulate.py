"""Closed-loop experiments: step tests, drive cycles, Monte-Carlo
robust-feasibility campaigns.

Two plant fidelities are available.  "nearest" evolves the state with the
active grid model plus the injected disturbance, so the realised
disturbance is exactly the sampled one — the setting under which the
recursive-feasibility guarantee is stated and tested.  "interp" uses the
blended warped truth plant, whose mismatch comes on top of the injected
noise (used for identification realism, not for guarantee tests).
"""

from __future__ import annotations

import multiprocessing as mp
from dataclasses import dataclass, field

import numpy as np

from .config import GRID_IDS, ToolkitConfig
from .engine import (
    ModelGrid,
    OperatingPoint,
    PlantState,
    interpolate_trims,
    plant_step,
)
from .mpc import InfeasibleMpc, MpcMemory
from .supervisor import ControllerBank, build_bank, clamp_op_sequence, control_step
from .tightening import alpha_box


@dataclass
class DriveCycle:
    """Timed (speed, fuel) trace; time strictly increasing."""

    time: np.ndarray
    speed: np.ndarray
    fuel: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=float)
        self.speed = np.asarray(self.speed, dtype=float)
        self.fuel = np.asarray(self.fuel, dtype=float)
        if not (np.diff(self.time) > 0).all():
            raise ValueError("cycle time must be strictly increasing")
        if not (self.time.size == self.speed.size == self.fuel.size):
            raise ValueError("cycle arrays must share length")

    def resample(self, Ts: float):
        t = np.arange(self.time[0], self.time[-1] + 1e-12, Ts)
        sp = np.interp(t, self.time, self.speed)
        fu = np.interp(t, self.time, self.fuel)
        return [OperatingPoint(float(s), float(f)) for s, f in zip(sp, fu)]


@dataclass
class SimTrace:
    """Time-indexed closed-loop record."""

    time: np.ndarray
    speed: np.ndarray
    fuel: np.ndarray
    active_grid: list
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    ref: np.ndarray
    Y: np.ndarray
    V: np.ndarray
    feasible: np.ndarray
    x_term_pred: np.ndarray
    Ts: float
    infeasible_event: dict | None = None

    @property
    def n_steps(self) -> int:
        return self.time.size


def _trace_from_records(records, Ts, infeasible_event=None) -> SimTrace:
    return SimTrace(
        time=np.array([r.time for r in records]),
        speed=np.array([r.op.speed for r in records]),
        fuel=np.array([r.op.fuel for r in records]),
        active_grid=[r.active_grid for r in records],
        x=np.array([r.x for r in records]),
        u=np.array([r.u for r in records]),
        y=np.array([r.y for r in records]),
        ref=np.array([r.ref_y for r in records]),
        Y=np.array([r.Y for r in records]),
        V=np.array([r.V for r in records]),
        feasible=np.array([r.feasible for r in records], dtype=bool),
        x_term_pred=np.array([r.x_term_pred for r in records]),
        Ts=Ts,
        infeasible_event=infeasible_event,
    )


def make_disturbance_sampler(bank: ControllerBank, mode: str, rng,
                             scale: float = 1.0):
    """Disturbance draw per step, bounded by the active plan's box."""
    if mode == "none":
        return lambda gid: np.zeros(4)
    if mode not in ("uniform", "vertex", "mixed"):
        raise ValueError(f"unknown disturbance mode: {mode}")
    boxes = {g: alpha_box(bank.plans[g].alpha) for g in GRID_IDS}

    def sample(gid):
        box = boxes[gid]
        if mode == "vertex" or (mode == "mixed" and rng.random() < 0.5):
            signs = rng.choice([-1.0, 1.0], size=4)
            w = box.center + signs * box.half_width
        else:
            w = box.center + rng.uniform(-1, 1, size=4) * box.half_width
        return scale * w

    return sample


def run_closed_loop(bank: ControllerBank, ops, x0, w_sampler,
                    plant_mode: str = "nearest",
                    stop_on_infeasible: bool = True) -> SimTrace:
    """Simulate the switched MPC along a prepared op sequence."""
    grid = bank.grid
    Ts = grid.Ts
    mem = MpcMemory()
    state = PlantState(np.asarray(x0, dtype=float))
    records = []
    infeasible_event = None
    for k, op in enumerate(ops):
        try:
            u_abs, rec, mem = control_step(bank, mem, state.x, op,
                                           time_s=k * Ts)
        except InfeasibleMpc as exc:
            infeasible_event = {"step": k, "time": k * Ts, **exc.snapshot}
            if stop_on_infeasible:
                break
            raise
        records.append(rec)
        w = w_sampler(rec.active_grid)
        if plant_mode == "nearest":
            model = grid.model(rec.active_grid)
            # model-matched plant about the interpolated trims
            x_next = rec.trim_x + model.A @ (state.x - rec.trim_x) \
                + model.B @ (u_abs - rec.trim_u) + w
            state = PlantState(x_next)
        elif plant_mode == "interp":
            state = plant_step(state, u_abs, op, w, grid)
        else:
            raise ValueError(f"unknown plant mode: {plant_mode}")
    if not records:
        raise InfeasibleMpc("initial problem infeasible",
                            snapshot=infeasible_event or {})
    return _trace_from_records(records, Ts, infeasible_event)


def run_step_test(bank: ControllerBank, seed: int, grid_id: str,
                  fuel_step: float, duration: float,
                  disturbance_mode: str = "none",
                  plant_mode: str = "nearest",
                  settle: float = 1.0) -> SimTrace:
    """Fuelling-step experiment at a grid point.

    The op holds at the grid point for `settle` seconds, then ramps to the
    stepped fuel value at the allowed per-sample slew (instant fuel steps
    would violate the trim-jump sets the margins were built for).
    """
    grid = bank.grid
    pt = grid.point(grid_id)
    n_settle = int(round(settle / grid.Ts))
    n_total = n_settle + int(round(duration / grid.Ts))
    target = grid.clamp(OperatingPoint(pt.speed, pt.fuel + fuel_step))
    ops = [pt] * n_settle + [target] * (n_total - n_settle)
    ops = clamp_op_sequence(bank, ops)
    rng = np.random.default_rng([seed, 17])
    sampler = make_disturbance_sampler(bank, disturbance_mode, rng)
    tx, _, _ = interpolate_trims(grid, pt)
    return run_closed_loop(bank, ops, tx, sampler, plant_mode)


def run_drive_cycle(bank: ControllerBank, seed: int, cycle: DriveCycle,
                    disturbance_mode: str = "none",
                    plant_mode: str = "nearest") -> SimTrace:
    ops = clamp_op_sequence(bank, cycle.resample(bank.grid.Ts))
    rng = np.random.default_rng([seed, 31])
    sampler = make_disturbance_sampler(bank, disturbance_mode, rng)
    tx, _, _ = interpolate_trims(bank.grid, ops[0])
    return run_closed_loop(bank, ops, tx, sampler, plant_mode)


# -- Monte-Carlo robust feasibility -------------------------------------------


@dataclass
class McScenario:
    n_steps: int = 400
    disturbance_mode: str = "mixed"
    disturbance_scale: float = 1.0
    plant_mode: str = "nearest"


@dataclass
class McReport:
    runs: int = 0
    steps: int = 0
    infeasible_count: int = 0
    infeasible_runs: list = field(default_factory=list)
    max_state_violation: float = -np.inf
    max_input_violation: float = -np.inf
    switch_count: int = 0
    envelope_violation: float = -np.inf
    slew_violation: float = -np.inf

    def merge(self, other: "McReport"):
        self.runs += other.runs
        self.steps += other.steps
        self.infeasible_count += other.infeasible_count
        self.infeasible_runs += other.infeasible_runs
        self.max_state_violation = max(self.max_state_violation,
                                       other.max_state_violation)
        self.max_input_violation = max(self.max_input_violation,
                                       other.max_input_violation)
        self.switch_count += other.switch_count
        self.envelope_violation = max(self.envelope_violation,
                                      other.envelope_violation)
        self.slew_violation = max(self.slew_violation, other.slew_violation)
        return self

    def to_dict(self):
        return {
            "runs": self.runs, "steps": self.steps,
            "infeasible": self.infeasible_count,
            "infeasible_runs": self.infeasible_runs,
            "max_state_violation": float(self.max_state_violation),
            "max_input_violation": float(self.max_input_violation),
            "switches": self.switch_count,
            "envelope_violation": float(self.envelope_violation),
            "slew_violation": float(self.slew_violation),
        }


def random_op_walk(bank: ControllerBank, rng, n_steps: int):
    """Slew-limited random walk over the lattice hull, crossing cells."""
    grid = bank.grid
    sp_max, fu_max = bank.max_op_step()
    sp = rng.uniform(grid.speeds[0], grid.speeds[-1])
    fu = rng.uniform(grid.fuels[0], grid.fuels[-1])
    ops = [grid.clamp(OperatingPoint(float(sp), float(fu)))]
    # piecewise-constant random targets give sustained cell-crossing sweeps
    target = None
    hold = 0
    for _ in range(n_steps - 1):
        if hold <= 0:
            target = (rng.uniform(grid.speeds[0], grid.speeds[-1]),
                      rng.uniform(grid.fuels[0], grid.fuels[-1]))
            hold = int(rng.integers(20, 80))
        hold -= 1
        prev = ops[-1]
        sp = prev.speed + np.clip(target[0] - prev.speed, -sp_max, sp_max)
        fu = prev.fuel + np.clip(target[1] - prev.fuel, -fu_max, fu_max)
        ops.append(grid.clamp(OperatingPoint(float(sp), float(fu))))
    return ops


def _violations(bank: ControllerBank, trace: SimTrace):
    """Worst realised constraint violations in absolute coordinates."""
    sx = (trace.x @ bank.X.H.T - bank.X.b).max() if trace.n_steps else -np.inf
    su = (trace.u @ bank.U.H.T - bank.U.b).max() if trace.n_steps else -np.inf
    return float(sx), float(su)


def _envelope_slack(trace: SimTrace):
    """Worst |y - ref| beyond the recorded envelope height."""
    return float((np.abs(trace.y - trace.ref) - trace.Y).max())


def _slew_slack(trace: SimTrace, delta: float):
    if trace.n_steps < 2:
        return -np.inf
    du = np.abs(np.diff(trace.u, axis=0)).max()
    return float(du - delta)


def mc_single_run(bank: ControllerBank, seed: int, scenario: McScenario) -> McReport:
    rng = np.random.default_rng([seed, 97])
    ops = random_op_walk(bank, rng, scenario.n_steps)
    sampler = make_disturbance_sampler(bank, scenario.disturbance_mode, rng,
                                       scale=scenario.disturbance_scale)
    tx, _, _ = interpolate_trims(bank.grid, ops[0])
    rep = McReport()
    try:
        trace = run_closed_loop(bank, ops, tx, sampler, scenario.plant_mode)
        if trace.infeasible_event is not None:
            rep.infeasible_count += 1
            rep.infeasible_runs.append(seed)
    except InfeasibleMpc:
        rep.runs = 1
        rep.infeasible_count = 1
        rep.infeasible_runs.append(seed)
        return rep
    rep.runs = 1
    rep.steps = trace.n_steps
    sx, su = _violations(bank, trace)
    rep.max_state_violation = sx
    rep.max_input_violation = su
    rep.envelope_violation = _envelope_slack(trace)
    rep.slew_violation = _slew_slack(trace, bank.delta)
    rep.switch_count = int(sum(a != b for a, b in
                               zip(trace.active_grid, trace.active_grid[1:])))
    return rep


_MC_BANK = None


def _mc_worker_init(grid_dict, bundle_dict, cfg_dict, tunings_dict):
    global _MC_BANK
    from .config import ToolkitConfig as TC
    from .persist import grid_from_dict
    from .tightening import TighteningBundle
    from .mpc import TuningParams
    import dataclasses

    cfg = _config_from_dict(cfg_dict)
    grid = grid_from_dict(grid_dict)
    bundle = TighteningBundle.from_dict(bundle_dict)
    tunings = {g: TuningParams.from_dict(t) for g, t in tunings_dict.items()}
    _MC_BANK = build_bank(grid, cfg, bundle=bundle, tunings=tunings)


def _config_from_dict(d: dict) -> ToolkitConfig:
    import dataclasses
    from . import config as C

    cfg = ToolkitConfig()
    cfg.seed = d.get("seed", cfg.seed)
    for name, cls in C._SECTION_TYPES.items():
        if name in d:
            payload = {k: tuple(v) if isinstance(v, list) else v
                       for k, v in d[name].items()}
            setattr(cfg, name, cls(**payload))
    return cfg


def _mc_worker_run(args):
    seed, scenario = args
    return mc_single_run(_MC_BANK, seed, scenario)


def monte_carlo_feasibility(bank: ControllerBank, n_runs: int, base_seed: int,
                            scenario: McScenario | None = None,
                            jobs: int = 1) -> McReport:
    """Robust-feasibility campaign; failures are data in the report."""
    scenario = scenario or McScenario()
    seeds = [base_seed + k for k in range(n_runs)]
    total = McReport()
    if jobs <= 1:
        for s in seeds:
            total.merge(mc_single_run(bank, s, scenario))
        return total
    from .persist import grid_to_dict

    init_args = (grid_to_dict(bank.grid),
                 _bundle_dict(bank),
                 bank.config.to_dict(),
                 {g: t.to_dict() for g, t in bank.tunings.items()})
    with mp.Pool(jobs, initializer=_mc_worker_init, initargs=init_args) as pool:
        for rep in pool.imap_unordered(_mc_worker_run,
                                       [(s, scenario) for s in seeds]):
            total.merge(rep)
    return total


def _bundle_dict(bank: ControllerBank) -> dict:
    from .tightening import TighteningBundle

    return TighteningBundle(
        plans=bank.plans, switch=bank.switch, terminal=bank.terminal,
        delta=bank.delta, coverage={}, N=bank.cost.N).to_dict()
