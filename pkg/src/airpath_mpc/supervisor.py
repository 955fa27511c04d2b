"""Switched-controller outer loop: per-step model selection, trim
interpolation, and invocation of the local envelope MPC."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import GRID_IDS, ToolkitConfig
from .engine import ModelGrid, OperatingPoint, interpolate_trims, nearest_grid
from .geometry import Polytope
from .mpc import CostConfig, EnvelopeMpc, MpcMemory, TuningParams
from .tightening import (
    SwitchMarginSets,
    TerminalSet,
    TighteningBundle,
    compute_tightening,
    constraint_polytopes,
    slew_bound,
)


class SupervisorError(Exception):
    pass


class OperatingPointSlewViolation(SupervisorError):
    """A trace moves faster than the trim-jump sets assumed offline."""


@dataclass
class ControllerBank:
    """Everything the online loop needs, immutable after construction."""

    grid: ModelGrid
    plans: dict                     # grid id -> TighteningPlan
    tunings: dict                   # grid id -> TuningParams
    cost: CostConfig
    terminal: TerminalSet
    delta: float
    switch: SwitchMarginSets
    X: Polytope
    U: Polytope
    config: ToolkitConfig
    _controllers: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        missing = [g for g in GRID_IDS if g not in self.plans]
        if missing:
            raise SupervisorError(f"plans missing for grid ids {missing}")
        floor = self.config.tightening.slew_floor
        required = slew_bound(self.plans, floor=0.0)
        if self.delta < required - 1e-9:
            raise SupervisorError(
                f"slew bound {self.delta} below margin requirement {required}")

    def controller(self, grid_id: str) -> EnvelopeMpc:
        """Per-grid condensed MPC, built lazily and cached."""
        ctl = self._controllers.get(grid_id)
        if ctl is None:
            ctl = EnvelopeMpc(
                self.grid.model(grid_id), self.plans[grid_id],
                self.tunings[grid_id], self.cost, self.terminal,
                self.delta, self.grid.Ts, self.X, self.U)
            self._controllers[grid_id] = ctl
        return ctl

    def set_tuning(self, grid_id: str, tuning: TuningParams):
        """Replace one controller's calibration knobs (invalidates cache)."""
        self.tunings[grid_id] = tuning.validate()
        self._controllers.pop(grid_id, None)

    def max_op_step(self):
        tc = self.config.tightening
        return tc.speed_slew, tc.fuel_slew


def build_bank(grid: ModelGrid, cfg: ToolkitConfig,
               bundle: TighteningBundle | None = None,
               tunings: dict | None = None) -> ControllerBank:
    """Assemble a controller bank, running the offline pipeline if needed."""
    if bundle is None:
        bundle = compute_tightening(grid, cfg)
    X, U = constraint_polytopes(cfg)
    td = cfg.tuning
    base = TuningParams(td.tau_boost, td.tau_egr, td.w, td.eps_boost,
                        td.eps_egr)
    tunings = tunings or {g: TuningParams(**base.to_dict()) for g in GRID_IDS}
    cost = CostConfig.from_mpc_config(cfg.mpc)
    return ControllerBank(
        grid=grid, plans=bundle.plans, tunings=tunings, cost=cost,
        terminal=bundle.terminal, delta=bundle.delta, switch=bundle.switch,
        X=X, U=U, config=cfg)


@dataclass
class StepRecord:
    time: float
    op: OperatingPoint
    active_grid: str
    x: np.ndarray            # absolute state
    u: np.ndarray            # absolute applied input
    y: np.ndarray            # absolute outputs
    ref_y: np.ndarray        # output trims used as references
    trim_x: np.ndarray
    trim_u: np.ndarray
    Y: np.ndarray            # initial envelope heights
    V: float                 # optimal cost
    qp_iterations: int
    feasible: bool
    clamped: bool
    x_term_pred: np.ndarray  # predicted terminal state (perturbation)


def control_step(bank: ControllerBank, mem: MpcMemory, x_now, op: OperatingPoint,
                 time_s: float = 0.0):
    """One Algorithm-1 step: nearest model, interpolated trims, QP solve."""
    clamped = not bank.grid.in_hull(op)
    op_used = bank.grid.clamp(op) if clamped else op
    gid = nearest_grid(bank.grid, op_used)
    trim_x, trim_u, trim_y = interpolate_trims(bank.grid, op_used)
    ctl = bank.controller(gid)
    sol, mem_next = ctl.solve(x_now, trim_x, trim_u, mem)
    model = bank.grid.model(gid)
    y_abs = trim_y + model.C @ (np.asarray(x_now) - trim_x) \
        + model.D @ (sol.u_apply - trim_u)
    rec = StepRecord(
        time=time_s, op=op_used, active_grid=gid, x=np.asarray(x_now, float),
        u=sol.u_apply, y=y_abs, ref_y=trim_y, trim_x=trim_x, trim_u=trim_u,
        Y=sol.Y_seq[0], V=sol.objective,
        qp_iterations=sol.qp_report.iterations, feasible=True,
        clamped=clamped, x_term_pred=sol.x_seq[-1])
    return sol.u_apply, rec, mem_next


def validate_op_slew(bank: ControllerBank, ops: list):
    """Reject op sequences whose per-step motion exceeds the offline bound."""
    sp_max, fu_max = bank.max_op_step()
    for k in range(1, len(ops)):
        dsp = abs(ops[k].speed - ops[k - 1].speed)
        dfu = abs(ops[k].fuel - ops[k - 1].fuel)
        if dsp > sp_max + 1e-9 or dfu > fu_max + 1e-9:
            raise OperatingPointSlewViolation(
                f"operating-point step {k} moves ({dsp:.3g} rpm, {dfu:.3g} "
                f"mm^3/st); allowed ({sp_max}, {fu_max})")


def clamp_op_sequence(bank: ControllerBank, ops: list) -> list:
    """Rate-limit an op sequence to the offline slew assumptions."""
    sp_max, fu_max = bank.max_op_step()
    out = [bank.grid.clamp(ops[0])]
    for op in ops[1:]:
        prev = out[-1]
        sp = prev.speed + np.clip(op.speed - prev.speed, -sp_max, sp_max)
        fu = prev.fuel + np.clip(op.fuel - prev.fuel, -fu_max, fu_max)
        out.append(bank.grid.clamp(OperatingPoint(float(sp), float(fu))))
    return out
