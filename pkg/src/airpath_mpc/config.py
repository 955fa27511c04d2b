"""Central configuration for the airpath MPC toolkit.

Every tunable that the pipeline stages share lives here, with defaults
sized for the synthetic desk-scale engine.  A JSON config file (sections
named after the dataclasses below) can override any field; CLI flags
override the file.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

ENV_CONFIG_VAR = "AIRPATH_MPC_CONFIG"

#: Roman labels of the 12 grid points, column-major over the lattice:
#: speed low->high in columns, fuel high->low within a column.
GRID_IDS = (
    "I", "II", "III", "IV",
    "V", "VI", "VII", "VIII",
    "IX", "X", "XI", "XII",
)

N_STATES = 4
N_INPUTS = 3
N_OUTPUTS = 2


@dataclass
class RangeConfig:
    """Engine operating range and lattice layout."""

    speed_min: float = 1000.0   # rpm
    speed_max: float = 3000.0
    fuel_min: float = 10.0      # mm^3/st
    fuel_max: float = 40.0
    n_speed: int = 3
    n_fuel: int = 4


@dataclass
class PlantConfig:
    """Synthetic truth-plant generation knobs."""

    Ts: float = 0.05
    # fraction of the grid disturbance half-widths that the smooth
    # nonlinear warp may reach
    eta_fraction: float = 0.25
    # half-widths of the injected "real" disturbance, per state channel
    noise_half_width: tuple = (0.35, 0.45, 0.22, 0.0030)
    # span (fraction of the state-constraint box) used when sampling
    # perturbations for mismatch bounding
    sampling_span: float = 0.06
    mismatch_samples: int = 4000
    # inflation applied to the sampled mismatch bound to form the stored
    # per-grid disturbance hypercube
    mismatch_inflation: float = 1.15


@dataclass
class ConstraintConfig:
    """Absolute state and input constraint boxes.

    States: p_im (kPa), p_em (kPa), W_comp (g/s), y_EGR (-).
    Inputs: throttle, EGR valve, VGT (%).
    """

    x_lower: tuple = (40.0, 45.0, 1.0, 0.01)
    x_upper: tuple = (320.0, 360.0, 165.0, 0.75)
    u_lower: tuple = (0.0, 0.0, 0.0)
    u_upper: tuple = (100.0, 100.0, 100.0)


@dataclass
class MpcConfig:
    """Online MPC cost and horizon parameters."""

    N: int = 7
    gamma: float = 2e-4
    w_boost_norm: float = 40.0
    w_egr_norm: float = 0.6
    # numerical regularisation keeping the condensed QP strictly convex
    y_ridge: float = 1e-10
    u_ridge: float = 1e-12


@dataclass
class TuningDefaults:
    """Baseline calibration parameters applied to every grid point."""

    tau_boost: float = 1.0
    tau_egr: float = 1.0
    w: float = 0.5
    eps_boost: float = 0.0
    eps_egr: float = 0.0


@dataclass
class TighteningConfig:
    """Offline constraint-tightening parameters."""

    rho: float = 1e-6
    i_max: int = 100
    delta_tol: float = 1e-5
    alpha_min: float = 1e-9
    bisect_tol: float = 1e-3
    # physical floor on the per-sample actuator slew bound (%)
    slew_floor: float = 5.0
    # per-sample operating-point slew used when sizing the trim-jump sets
    # (and enforced on simulated traces)
    speed_slew: float = 40.0   # rpm per sample
    fuel_slew: float = 1.0     # mm^3/st per sample
    # LQR weights for the common terminal feedback
    lqr_q: float = 1.0
    lqr_r: float = 1.0
    invariant_max_iter: int = 300


@dataclass
class CalibrationConfig:
    """Oscillation classification thresholds and rule nudge factors."""

    undershoot_pct: float = 10.0
    overshoot_pct: float = 10.0
    # factors used when a tuning rule is applied programmatically
    tau_factor: float = 2.0
    eps_step: float = 0.05
    w_step: float = 0.1
    # sliding-window settings for drive-cycle region flagging
    min_step_span: float = 0.15  # reference jumps below this (scaled) are ignored


@dataclass
class SolverTolerances:
    feas_tol: float = 1e-7
    opt_tol: float = 1e-6
    max_iter: int = 200


@dataclass
class ToolkitConfig:
    """Top-level bundle passed around the pipeline."""

    seed: int = 1
    ranges: RangeConfig = field(default_factory=RangeConfig)
    plant: PlantConfig = field(default_factory=PlantConfig)
    constraints: ConstraintConfig = field(default_factory=ConstraintConfig)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    tuning: TuningDefaults = field(default_factory=TuningDefaults)
    tightening: TighteningConfig = field(default_factory=TighteningConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    solver: SolverTolerances = field(default_factory=SolverTolerances)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTION_TYPES = {
    "ranges": RangeConfig,
    "plant": PlantConfig,
    "constraints": ConstraintConfig,
    "mpc": MpcConfig,
    "tuning": TuningDefaults,
    "tightening": TighteningConfig,
    "calibration": CalibrationConfig,
    "solver": SolverTolerances,
}


def _coerce(section_cls, data: dict):
    valid = {f.name for f in dataclasses.fields(section_cls)}
    unknown = set(data) - valid
    if unknown:
        raise ValueError(f"unknown {section_cls.__name__} keys: {sorted(unknown)}")
    coerced = {}
    for key, value in data.items():
        coerced[key] = tuple(value) if isinstance(value, list) else value
    return coerced


def load_config(path: str | None = None) -> ToolkitConfig:
    """Build a ToolkitConfig from defaults, optionally overlaid by a JSON file.

    Resolution order for the file: explicit ``path`` argument, then the
    AIRPATH_MPC_CONFIG environment variable, then pure defaults.
    """
    cfg = ToolkitConfig()
    if path is None:
        path = os.environ.get(ENV_CONFIG_VAR)
    if not path:
        return cfg
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError("config file must contain a JSON object")
    for section, payload in data.items():
        if section == "seed":
            cfg.seed = int(payload)
            continue
        if section not in _SECTION_TYPES:
            raise ValueError(f"unknown config section: {section}")
        base = getattr(cfg, section)
        setattr(
            cfg,
            section,
            dataclasses.replace(base, **_coerce(_SECTION_TYPES[section], payload)),
        )
    return cfg
