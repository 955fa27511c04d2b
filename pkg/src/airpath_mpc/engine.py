"""Synthetic plant world: model grid, truth plant, identification.

A seeded generator lays 12 discrete-time models on the 3x4 speed/fuel
lattice with smooth trim maps.  The truth plant blends the grid models
bilinearly over the operating range and adds a bounded smooth warp, so a
controller using the nearest grid model sees a genuine, quantifiable
mismatch.  Identification is ordinary least squares on excitation data
with a train/test split.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .config import GRID_IDS, N_INPUTS, N_OUTPUTS, N_STATES, ToolkitConfig
from .geometry import Hypercube

log = logging.getLogger(__name__)


class EngineModelError(Exception):
    pass


class ConfigInvalid(EngineModelError):
    pass


class RankDeficient(EngineModelError):
    """Excitation data insufficient for regression."""


class TooFewSamples(EngineModelError):
    pass


@dataclass(frozen=True)
class OperatingPoint:
    speed: float  # rpm
    fuel: float   # mm^3/st

    def as_array(self) -> np.ndarray:
        return np.array([self.speed, self.fuel])


@dataclass
class LinearModel:
    """Discrete LTI quadruple plus trim vectors for one grid point."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    trim_x: np.ndarray
    trim_u: np.ndarray
    trim_y: np.ndarray
    grid_id: str

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        self.C = np.asarray(self.C, dtype=float)
        self.D = np.asarray(self.D, dtype=float)
        self.trim_x = np.asarray(self.trim_x, dtype=float).ravel()
        self.trim_u = np.asarray(self.trim_u, dtype=float).ravel()
        self.trim_y = np.asarray(self.trim_y, dtype=float).ravel()

    def predict(self, x_abs, u_abs):
        """One absolute-coordinate step of the nominal model."""
        dx = np.asarray(x_abs) - self.trim_x
        du = np.asarray(u_abs) - self.trim_u
        return self.trim_x + self.A @ dx + self.B @ du

    def output(self, x_abs, u_abs):
        dx = np.asarray(x_abs) - self.trim_x
        du = np.asarray(u_abs) - self.trim_u
        return self.trim_y + self.C @ dx + self.D @ du

    def spectral_radius(self) -> float:
        return float(np.abs(np.linalg.eigvals(self.A)).max())

    def is_stabilizable(self, tol: float = 1e-7) -> bool:
        """PBH test on every eigenvalue outside the unit circle."""
        n = self.A.shape[0]
        for lam in np.linalg.eigvals(self.A):
            if abs(lam) >= 1.0 - 1e-12:
                M = np.hstack([self.A - lam * np.eye(n), self.B])
                if np.linalg.matrix_rank(M, tol=tol) < n:
                    return False
        return True

    def is_controllable(self, tol: float = 1e-7) -> bool:
        n = self.A.shape[0]
        blocks = [self.B]
        for _ in range(n - 1):
            blocks.append(self.A @ blocks[-1])
        return np.linalg.matrix_rank(np.hstack(blocks), tol=tol) == n

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(), "B": self.B.tolist(),
            "C": self.C.tolist(), "D": self.D.tolist(),
            "trim_x": self.trim_x.tolist(), "trim_u": self.trim_u.tolist(),
            "trim_y": self.trim_y.tolist(),
        }


@dataclass
class ModelGrid:
    """12-point model lattice with disturbance sets and truth-plant warp."""

    Ts: float
    speeds: np.ndarray          # ascending, length 3
    fuels: np.ndarray           # ascending, length 4
    points: list                # OperatingPoint per roman id
    models: list                # LinearModel per roman id
    disturbance: list           # Hypercube per roman id (state space)
    seed: int
    eta_fraction: float
    eta_max: np.ndarray = field(default=None)
    _warp: dict = field(default=None, repr=False)

    def model(self, grid_id: str) -> LinearModel:
        return self.models[GRID_IDS.index(grid_id)]

    def point(self, grid_id: str) -> OperatingPoint:
        return self.points[GRID_IDS.index(grid_id)]

    def disturbance_set(self, grid_id: str) -> Hypercube:
        return self.disturbance[GRID_IDS.index(grid_id)]

    @property
    def hull(self):
        return (self.speeds[0], self.speeds[-1], self.fuels[0], self.fuels[-1])

    def clamp(self, op: OperatingPoint) -> OperatingPoint:
        s = min(max(op.speed, self.speeds[0]), self.speeds[-1])
        f = min(max(op.fuel, self.fuels[0]), self.fuels[-1])
        return OperatingPoint(s, f)

    def in_hull(self, op: OperatingPoint, tol: float = 1e-9) -> bool:
        return (self.speeds[0] - tol <= op.speed <= self.speeds[-1] + tol
                and self.fuels[0] - tol <= op.fuel <= self.fuels[-1] + tol)


def lattice_indices(gid: str) -> tuple[int, int]:
    """(speed_idx, fuel_idx) of a roman grid id; fuel descends within a column."""
    k = GRID_IDS.index(gid)
    return k // 4, 3 - (k % 4)


def roman_id(speed_idx: int, fuel_idx: int) -> str:
    return GRID_IDS[speed_idx * 4 + (3 - fuel_idx)]


def _smooth(v, lo, hi):
    return lo + (hi - lo) * v


def _trim_maps(s, f, wig):
    """Trim values at normalised lattice coordinates (s, f in [0, 1])."""
    p_im = 95.0 + 95.0 * f + 25.0 * s + 4.0 * wig[0] * np.sin(2.1 * f + 1.3 * s)
    p_em = p_im + 11.0 + 24.0 * s + 3.0 * wig[1] * np.cos(1.7 * f - 0.8 * s)
    w_comp = 16.0 + 58.0 * s + 22.0 * f + 3.0 * wig[2] * np.sin(1.1 * f + 2.3 * s)
    y_egr = 0.355 - 0.145 * f - 0.055 * s + 0.018 * wig[3] * np.cos(2.9 * f + 0.6 * s)
    thr = 63.0 - 17.0 * f - 7.0 * s + 2.5 * wig[4] * np.sin(1.9 * f + 1.1 * s)
    egr = 49.0 - 13.0 * s + 7.0 * f + 2.5 * wig[5] * np.cos(0.9 * f + 1.8 * s)
    vgt = 37.0 + 19.0 * f + 9.0 * s + 2.5 * wig[6] * np.sin(2.4 * f - 1.5 * s)
    x = np.array([p_im, p_em, w_comp, y_egr])
    u = np.array([thr, egr, vgt])
    return x, u


_C_OUT = np.array([[1.0, 0.0, 0.0, 0.0],
                   [0.0, 0.0, 0.0, 1.0]])


def _dynamics_template(s, f, pert):
    """Continuous-time (A, B) at normalised op coordinates with a seeded
    multiplicative perturbation field `pert` (4x4 and 4x3, around 1)."""
    tau_im = _smooth(0.5 * s + 0.5 * f, 0.18, 0.32)
    tau_em = _smooth(0.6 * s + 0.4 * f, 0.12, 0.24)
    tau_tc = _smooth(1.0 - 0.55 * s, 0.8, 1.9)
    tau_eg = _smooth(0.5 + 0.3 * f - 0.4 * s, 0.10, 0.20)
    A = np.array([
        [-1.0 / tau_im, 0.22 + 0.10 * s, 0.85 + 0.3 * s, -6.0],
        [0.16, -1.0 / tau_em, -0.28, 4.0 + 2.0 * f],
        [0.05, 0.42 + 0.22 * s, -1.0 / tau_tc, 0.0],
        [-0.0022, 0.0016, -0.0042, -1.0 / tau_eg],
    ])
    B = np.array([
        [-2.1 - 0.7 * f, 0.85, 1.35 + 0.5 * s],
        [-0.30, -1.25, 2.0 + 0.8 * s],
        [-0.24, -0.36, 0.85 + 0.35 * s],
        [0.0062, 0.020 + 0.006 * f, -0.0085],
    ])
    offdiag = ~np.eye(4, dtype=bool)
    A[offdiag] = A[offdiag] * pert[0][offdiag]
    B = B * pert[1]
    return A, B


def _discretize(A_c, B_c, Ts):
    n, m = B_c.shape
    M = np.zeros((n + m, n + m))
    M[:n, :n] = A_c
    M[:n, n:] = B_c
    E = expm(M * Ts)
    return E[:n, :n], E[:n, n:]


def synth_grid(seed: int, config: ToolkitConfig | None = None) -> ModelGrid:
    """Deterministic-in-seed synthetic model grid over the operating range."""
    cfg = config or ToolkitConfig()
    rc = cfg.ranges
    if rc.speed_max <= rc.speed_min or rc.fuel_max <= rc.fuel_min:
        raise ConfigInvalid("operating range is empty")
    if rc.n_speed != 3 or rc.n_fuel != 4:
        raise ConfigInvalid("lattice must be 3 speeds x 4 fuels")
    speeds = np.linspace(rc.speed_min, rc.speed_max, rc.n_speed)
    fuels = np.linspace(rc.fuel_min, rc.fuel_max, rc.n_fuel)
    Ts = cfg.plant.Ts

    points, models = [], []
    for gid in GRID_IDS:
        si, fi = lattice_indices(gid)
        s_n = si / (rc.n_speed - 1)
        f_n = fi / (rc.n_fuel - 1)
        rng = np.random.default_rng([seed, GRID_IDS.index(gid), 101])
        wig = rng.uniform(-1.0, 1.0, size=7)
        trim_x, trim_u = _trim_maps(s_n, f_n, wig)
        pertA = 1.0 + 0.18 * rng.uniform(-1, 1, size=(4, 4))
        pertB = 1.0 + 0.18 * rng.uniform(-1, 1, size=(4, 3))
        damp = 1.0
        for _attempt in range(8):
            A_c, B_c = _dynamics_template(s_n, f_n, (
                1.0 + damp * (pertA - 1.0), 1.0 + damp * (pertB - 1.0)))
            A, B = _discretize(A_c, B_c, Ts)
            model = LinearModel(A, B, _C_OUT.copy(), np.zeros((2, 3)),
                                trim_x, trim_u, _C_OUT @ trim_x, gid)
            if model.spectral_radius() < 0.999 and model.is_controllable():
                break
            damp *= 0.7
        else:
            raise ConfigInvalid(f"could not stabilise grid point {gid}")
        points.append(OperatingPoint(float(speeds[si]), float(fuels[fi])))
        models.append(model)

    grid = ModelGrid(Ts=Ts, speeds=speeds, fuels=fuels, points=points,
                     models=models, disturbance=[None] * 12, seed=seed,
                     eta_fraction=cfg.plant.eta_fraction)
    grid.eta_max = cfg.plant.eta_fraction * np.asarray(cfg.plant.noise_half_width)
    grid._warp = _make_warp(seed)
    grid.disturbance = _mismatch_hypercubes(grid, cfg)
    return grid


def _make_warp(seed: int) -> dict:
    rng = np.random.default_rng([seed, 777])
    return {
        "Qx": rng.normal(0.0, 0.35, size=(4, 4, 4)),
        "Qu": rng.normal(0.0, 0.35, size=(4, 3, 3)),
        "S": rng.normal(0.0, 0.25, size=(4, 4, 3)),
    }


#: normalisation scales for the warp arguments
_X_WARP_SCALE = np.array([9.0, 11.0, 5.0, 0.05])
_U_WARP_SCALE = np.array([22.0, 22.0, 22.0])


def _warp_eta(grid: ModelGrid, dx, du):
    """Bounded smooth nonlinearity of the truth plant."""
    if grid.eta_max is None or grid._warp is None:
        return np.zeros(4)
    xn = dx / _X_WARP_SCALE
    un = du / _U_WARP_SCALE
    w = grid._warp
    q = np.einsum("i,kij,j->k", xn, w["Qx"], xn) \
        + np.einsum("i,kij,j->k", un, w["Qu"], un) \
        + np.einsum("i,kij,j->k", xn, w["S"], un)
    return grid.eta_max * np.tanh(q)


def _cell_of(grid: ModelGrid, op: OperatingPoint):
    si = int(np.clip(np.searchsorted(grid.speeds, op.speed) - 1, 0,
                     len(grid.speeds) - 2))
    fi = int(np.clip(np.searchsorted(grid.fuels, op.fuel) - 1, 0,
                     len(grid.fuels) - 2))
    ds = grid.speeds[si + 1] - grid.speeds[si]
    df = grid.fuels[fi + 1] - grid.fuels[fi]
    ws = (op.speed - grid.speeds[si]) / ds
    wf = (op.fuel - grid.fuels[fi]) / df
    return si, fi, float(np.clip(ws, 0.0, 1.0)), float(np.clip(wf, 0.0, 1.0))


def _bilinear(grid: ModelGrid, op: OperatingPoint, getter):
    si, fi, ws, wf = _cell_of(grid, op)
    acc = None
    for dsi, wsi in ((0, 1 - ws), (1, ws)):
        for dfi, wfi in ((0, 1 - wf), (1, wf)):
            gid = roman_id(si + dsi, fi + dfi)
            val = getter(grid.model(gid))
            term = wsi * wfi * np.asarray(val)
            acc = term if acc is None else acc + term
    return acc


def interpolate_trims(grid: ModelGrid, op: OperatingPoint):
    """Bilinear trim interpolation; operating points outside the hull clamp."""
    if not grid.in_hull(op):
        log.warning("operating point (%s, %s) outside lattice hull; clamped",
                    op.speed, op.fuel)
        op = grid.clamp(op)
    tx = _bilinear(grid, op, lambda m: m.trim_x)
    tu = _bilinear(grid, op, lambda m: m.trim_u)
    ty = _bilinear(grid, op, lambda m: m.trim_y)
    return tx, tu, ty


def nearest_grid(grid: ModelGrid, op: OperatingPoint) -> str:
    """Grid id minimising lattice-spacing-scaled distance; ties pick the
    lowest roman index."""
    ds = grid.speeds[1] - grid.speeds[0]
    df = grid.fuels[1] - grid.fuels[0]
    best, best_d = None, np.inf
    for gid, pt in zip(GRID_IDS, grid.points):
        d = ((op.speed - pt.speed) / ds) ** 2 + ((op.fuel - pt.fuel) / df) ** 2
        if d < best_d - 1e-15:
            best, best_d = gid, d
    return best


@dataclass
class PlantState:
    x: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).ravel()
        if not np.isfinite(self.x).all():
            raise ValueError("plant state must be finite")


def plant_step(state: PlantState, u_abs, op: OperatingPoint, w,
               grid: ModelGrid) -> PlantState:
    """One step of the blended, warped truth plant.

    Inputs saturate to the actuator box with a logged warning; `w` is the
    injected disturbance in state coordinates.
    """
    u_abs = np.asarray(u_abs, dtype=float).ravel()
    if (u_abs < -1e-9).any() or (u_abs > 100.0 + 1e-9).any():
        log.warning("actuator command outside [0, 100]; saturating")
        u_abs = np.clip(u_abs, 0.0, 100.0)
    op = grid.clamp(op)
    A = _bilinear(grid, op, lambda m: m.A)
    B = _bilinear(grid, op, lambda m: m.B)
    tx = _bilinear(grid, op, lambda m: m.trim_x)
    tu = _bilinear(grid, op, lambda m: m.trim_u)
    dx = state.x - tx
    du = u_abs - tu
    x_next = tx + A @ dx + B @ du + _warp_eta(grid, dx, du) + np.asarray(w)
    return PlantState(x_next)


def plant_output(grid: ModelGrid, op: OperatingPoint, x_abs) -> np.ndarray:
    return _C_OUT @ np.asarray(x_abs, dtype=float)


def _blend_batch(grid: ModelGrid, speeds, fuels):
    """Vectorised bilinear blend of (A, B, trim_x, trim_u) over many ops."""
    speeds = np.clip(speeds, grid.speeds[0], grid.speeds[-1])
    fuels = np.clip(fuels, grid.fuels[0], grid.fuels[-1])
    si = np.clip(np.searchsorted(grid.speeds, speeds) - 1, 0, len(grid.speeds) - 2)
    fi = np.clip(np.searchsorted(grid.fuels, fuels) - 1, 0, len(grid.fuels) - 2)
    ws = (speeds - grid.speeds[si]) / (grid.speeds[si + 1] - grid.speeds[si])
    wf = (fuels - grid.fuels[fi]) / (grid.fuels[fi + 1] - grid.fuels[fi])
    n = speeds.size
    A = np.zeros((n, 4, 4))
    B = np.zeros((n, 4, 3))
    tx = np.zeros((n, 4))
    tu = np.zeros((n, 3))
    for dsi in (0, 1):
        for dfi in (0, 1):
            wt = (ws if dsi else 1 - ws) * (wf if dfi else 1 - wf)
            gids = [roman_id(s + dsi, f + dfi) for s, f in zip(si, fi)]
            idx = np.array([GRID_IDS.index(g) for g in gids])
            A += wt[:, None, None] * np.stack([grid.models[i].A for i in idx])
            B += wt[:, None, None] * np.stack([grid.models[i].B for i in idx])
            tx += wt[:, None] * np.stack([grid.models[i].trim_x for i in idx])
            tu += wt[:, None] * np.stack([grid.models[i].trim_u for i in idx])
    return A, B, tx, tu


def _warp_eta_batch(grid: ModelGrid, dx, du):
    if grid.eta_max is None or grid._warp is None:
        return np.zeros_like(dx)
    xn = dx / _X_WARP_SCALE
    un = du / _U_WARP_SCALE
    w = grid._warp
    q = np.einsum("ni,kij,nj->nk", xn, w["Qx"], xn) \
        + np.einsum("ni,kij,nj->nk", un, w["Qu"], un) \
        + np.einsum("ni,kij,nj->nk", xn, w["S"], un)
    return grid.eta_max * np.tanh(q)


def _mismatch_hypercubes(grid: ModelGrid, cfg: ToolkitConfig) -> list:
    """Per-grid disturbance sets from sampled one-step prediction error of
    the nearest-grid model against the truth plant, inflated."""
    x_span = cfg.plant.sampling_span * (
        np.asarray(cfg.constraints.x_upper) - np.asarray(cfg.constraints.x_lower))
    out = []
    half_speed = 0.5 * (grid.speeds[1] - grid.speeds[0])
    half_fuel = 0.5 * (grid.fuels[1] - grid.fuels[0])
    n_samp = cfg.plant.mismatch_samples
    for gid in GRID_IDS:
        rng = np.random.default_rng([grid.seed, 555, GRID_IDS.index(gid)])
        pt = grid.point(gid)
        model = grid.model(gid)
        ops_s = np.clip(pt.speed + rng.uniform(-half_speed, half_speed, n_samp),
                        grid.speeds[0], grid.speeds[-1])
        ops_f = np.clip(pt.fuel + rng.uniform(-half_fuel, half_fuel, n_samp),
                        grid.fuels[0], grid.fuels[-1])
        dxs = rng.uniform(-1, 1, size=(n_samp, 4)) * x_span
        dus = rng.uniform(-12.0, 12.0, size=(n_samp, 3))
        A, B, tx, tu = _blend_batch(grid, ops_s, ops_f)
        x_abs = tx + dxs
        u_abs = np.clip(tu + dus, 0.0, 100.0)
        dx_p = x_abs - tx
        du_p = u_abs - tu
        truth = tx + np.einsum("nij,nj->ni", A, dx_p) \
            + np.einsum("nij,nj->ni", B, du_p) + _warp_eta_batch(grid, dx_p, du_p)
        pred = model.trim_x + (x_abs - model.trim_x) @ model.A.T \
            + (u_abs - model.trim_u) @ model.B.T
        worst = np.abs(truth - pred).max(axis=0)
        out.append(Hypercube.zero_centered(cfg.plant.mismatch_inflation * worst))
    return out


@dataclass
class ExcitationTrace:
    """Absolute-coordinate excitation record at one operating point."""

    time: np.ndarray
    u: np.ndarray   # (T, 3)
    x: np.ndarray   # (T+1, 4) — includes the final state
    y: np.ndarray   # (T, 2)
    op: OperatingPoint


def make_excitation(grid: ModelGrid, grid_id: str, n_samples: int, seed: int,
                    noise_half_width=None, hold: int = 4) -> ExcitationTrace:
    """Pseudo-random actuator excitation of the truth plant at a grid point.

    Amplitude per channel is max(15% of the trim value, 2% of full scale),
    switching sign every `hold` samples at random.
    """
    model = grid.model(grid_id)
    op = grid.point(grid_id)
    rng = np.random.default_rng([seed, 33, GRID_IDS.index(grid_id)])
    amp = np.maximum(0.15 * np.abs(model.trim_u), 2.0)
    w_hw = np.asarray(noise_half_width if noise_half_width is not None
                      else np.zeros(4))
    levels = rng.choice([-1.0, 1.0], size=(int(np.ceil(n_samples / hold)), 3))
    u_seq = np.repeat(levels, hold, axis=0)[:n_samples] * amp + model.trim_u
    u_seq = np.clip(u_seq, 0.0, 100.0)

    xs = np.empty((n_samples + 1, 4))
    ys = np.empty((n_samples, 2))
    state = PlantState(model.trim_x.copy())
    xs[0] = state.x
    for k in range(n_samples):
        ys[k] = plant_output(grid, op, state.x)
        w = rng.uniform(-1, 1, size=4) * w_hw
        state = plant_step(state, u_seq[k], op, w, grid)
        xs[k + 1] = state.x
    t = np.arange(n_samples) * grid.Ts
    return ExcitationTrace(t, u_seq, xs, ys, op)


@dataclass
class FitDiagnostics:
    train_rmse: np.ndarray   # per state channel, normalised
    test_rmse: np.ndarray
    output_rmse: np.ndarray  # per output channel (train)


def identify_lti(trace: ExcitationTrace, trim_x, trim_u, trim_y,
                 grid_id: str = "?", test_fraction: float = 0.3):
    """Least-squares fit of (A, B) and (C, D) around the supplied trims.

    The trailing `test_fraction` of the trace is held out; diagnostics
    report normalised one-step RMSE on both splits.
    """
    T = trace.u.shape[0]
    if T < 50 * (N_STATES + N_INPUTS):
        raise RankDeficient(f"need at least {50 * (N_STATES + N_INPUTS)} samples")
    dx = trace.x[:-1] - np.asarray(trim_x)
    dxn = trace.x[1:] - np.asarray(trim_x)
    du = trace.u - np.asarray(trim_u)
    dy = trace.y - np.asarray(trim_y)

    n_train = int(np.floor(T * (1.0 - test_fraction)))
    reg = np.hstack([dx, du])
    if np.linalg.matrix_rank(reg[:n_train], tol=1e-8) < N_STATES + N_INPUTS:
        raise RankDeficient("excitation not persistently exciting")

    theta, *_ = np.linalg.lstsq(reg[:n_train], dxn[:n_train], rcond=None)
    A = theta[:N_STATES].T
    B = theta[N_STATES:].T
    theta_y, *_ = np.linalg.lstsq(reg[:n_train], dy[:n_train], rcond=None)
    C = theta_y[:N_STATES].T
    D = theta_y[N_STATES:].T

    pred = reg @ theta
    err = dxn - pred
    scale_x = np.maximum(np.std(dxn[:n_train], axis=0), 1e-12)
    train_rmse = np.sqrt(np.mean(err[:n_train] ** 2, axis=0)) / scale_x
    test_rmse = np.sqrt(np.mean(err[n_train:] ** 2, axis=0)) / scale_x
    err_y = dy[:n_train] - reg[:n_train] @ theta_y
    scale_y = np.maximum(np.std(dy[:n_train], axis=0), 1e-12)
    out_rmse = np.sqrt(np.mean(err_y ** 2, axis=0)) / scale_y

    model = LinearModel(A, B, C, D, trim_x, trim_u, trim_y, grid_id)
    return model, FitDiagnostics(train_rmse, test_rmse, out_rmse)


def one_step_residuals(model: LinearModel, trace: ExcitationTrace,
                       start: int = 0) -> np.ndarray:
    """Prediction errors of `model` along a recorded trace."""
    preds = np.array([model.predict(x, u)
                      for x, u in zip(trace.x[start:-1], trace.u[start:])])
    return trace.x[start + 1:] - preds


def estimate_disturbance_set(residuals) -> Hypercube:
    """Smallest zero-centered hypercube containing every residual."""
    res = np.atleast_2d(np.asarray(residuals, dtype=float))
    if res.shape[0] < 100:
        raise TooFewSamples("need at least 100 residual samples")
    return Hypercube.zero_centered(np.abs(res).max(axis=0))


def empirical_disturbance(grid: ModelGrid, grid_id: str, seed: int,
                          noise_half_width, n_samples: int = 600):
    """Excite, fit, and bound the residual set at one grid point.

    Returns (W_emp, fitted model, diagnostics); residuals are one-step
    errors of the *grid* model on the held-out part of the trace.
    """
    trace = make_excitation(grid, grid_id, n_samples, seed,
                            noise_half_width=noise_half_width)
    model = grid.model(grid_id)
    fitted, diag = identify_lti(trace, model.trim_x, model.trim_u,
                                model.trim_y, grid_id)
    start = int(np.floor(n_samples * 0.7))
    res = one_step_residuals(model, trace, start=start)
    return estimate_disturbance_set(res), fitted, diag, res
