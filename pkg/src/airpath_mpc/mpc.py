"""Envelope-parameterised MPC: assemble and solve the per-step QP.

Decision variables are the input perturbation sequence plus the initial
envelope heights; envelope heights further along the horizon are
eliminated through the fixed decay, and the state/output predictions are
condensed into the inputs.  Everything that depends only on (model, plan,
tuning) is precomputed once per controller; each control step only
refreshes right-hand sides and the linear cost term.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import MpcConfig, N_INPUTS, N_OUTPUTS, N_STATES
from .engine import LinearModel
from .geometry import Polytope
from .solvers import QuadProgram, SolveReport, SolverTolerances, solve_qp
from .tightening import TerminalSet, TighteningPlan


class MpcError(Exception):
    pass


class InfeasibleMpc(MpcError):
    """The robustified problem lost feasibility (should not happen for
    in-set disturbances); carries a state snapshot for debugging."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class PlanGridMismatch(MpcError):
    pass


@dataclass
class TuningParams:
    """The five calibration knobs of one local controller."""

    tau_boost: float = 1.0
    tau_egr: float = 1.0
    w: float = 0.5
    eps_boost: float = 0.0
    eps_egr: float = 0.0

    def validate(self):
        if not (self.tau_boost > 0 and self.tau_egr > 0):
            raise ValueError("envelope time constants must be positive")
        if not 0.0 <= self.w <= 1.0:
            raise ValueError("priority weight must lie in [0, 1]")
        if self.eps_boost < 0 or self.eps_egr < 0:
            raise ValueError("smoothness weights must be nonnegative")
        return self

    def to_dict(self):
        return {"tau_boost": self.tau_boost, "tau_egr": self.tau_egr,
                "w": self.w, "eps_boost": self.eps_boost,
                "eps_egr": self.eps_egr}

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


@dataclass
class CostConfig:
    """Fixed cost-function parameters shared by all controllers."""

    N: int = 7
    gamma: float = 2e-4
    R: np.ndarray = field(default_factory=lambda: np.eye(N_INPUTS))
    w_boost_norm: float = 40.0
    w_egr_norm: float = 0.6
    y_ridge: float = 1e-10
    u_ridge: float = 1e-12

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float)
        if self.N < 2:
            raise ValueError("horizon must be at least 2")
        if self.gamma < 0:
            raise ValueError("input regularisation must be nonnegative")
        if np.linalg.matrix_rank(self.R) < N_INPUTS:
            raise ValueError("R must have full rank")

    @classmethod
    def from_mpc_config(cls, mc: MpcConfig) -> "CostConfig":
        return cls(N=mc.N, gamma=mc.gamma, w_boost_norm=mc.w_boost_norm,
                   w_egr_norm=mc.w_egr_norm, y_ridge=mc.y_ridge,
                   u_ridge=mc.u_ridge)


@dataclass
class MpcMemory:
    """Linking state between consecutive solves (physical quantities, so a
    controller switch carries it over unchanged)."""

    prev_Y_next: np.ndarray | None = None    # envelope floor for this step
    prev_u_abs_next: np.ndarray | None = None  # absolute input planned for now

    @property
    def initialized(self) -> bool:
        return self.prev_Y_next is not None


@dataclass
class MpcSolution:
    u_apply: np.ndarray          # absolute actuator command
    u_seq: np.ndarray            # (N, 3) perturbations
    x_seq: np.ndarray            # (N+1, 4) perturbations
    y_seq: np.ndarray            # (N, 2) perturbations
    Y_seq: np.ndarray            # (N, 2) envelope heights
    objective: float
    qp_report: SolveReport
    active_grid: str


def envelope_decay_matrix(tuning: TuningParams, Ts: float) -> np.ndarray:
    """Per-step decay of the two envelope channels."""
    if Ts <= 0:
        raise ValueError("sampling time must be positive")
    tuning.validate()
    return np.diag(np.exp([-Ts / tuning.tau_boost, -Ts / tuning.tau_egr]))


class EnvelopeMpc:
    """Condensed QP builder/solver for one grid point's controller."""

    def __init__(self, model: LinearModel, plan: TighteningPlan,
                 tuning: TuningParams, cost: CostConfig,
                 terminal: TerminalSet, delta: float, Ts: float,
                 X: Polytope, U: Polytope,
                 solver_cfg: SolverTolerances | None = None):
        if plan.grid_id != model.grid_id:
            raise PlanGridMismatch(
                f"plan {plan.grid_id} does not match model {model.grid_id}")
        self.model = model
        self.plan = plan
        self.tuning = tuning.validate()
        self.cost = cost
        self.terminal = terminal
        self.delta = float(delta)
        self.Ts = Ts
        self.X = X
        self.U = U
        self.solver_cfg = solver_cfg or SolverTolerances()
        self._build()

    # -- offline assembly ---------------------------------------------------

    def _build(self):
        N = self.cost.N
        A, B, C, D = (self.model.A, self.model.B, self.model.C, self.model.D)
        n, m, p = N_STATES, N_INPUTS, N_OUTPUTS
        self.nv = m * N + p

        # state prediction x_j = Apow[j] x0 + Su[j] @ u_flat
        Apow = [np.eye(n)]
        for _ in range(N):
            Apow.append(A @ Apow[-1])
        Su = [np.zeros((n, m * N))]
        for j in range(1, N + 1):
            Sj = np.zeros((n, m * N))
            for i in range(j):
                Sj[:, m * i:m * (i + 1)] = Apow[j - 1 - i] @ B
            Su.append(Sj)
        # outputs y_j = Ox[j] x0 + Ou[j] u_flat
        Ox = [C @ Apow[j] for j in range(N)]
        Ou = []
        for j in range(N):
            Oj = C @ Su[j]
            Oj[:, m * j:m * (j + 1)] += D
            Ou.append(Oj)
        self._Apow, self._Su, self._Ox, self._Ou = Apow, Su, Ox, Ou

        gamma_env = np.exp([-self.Ts / self.tuning.tau_boost,
                            -self.Ts / self.tuning.tau_egr])
        self.gamma_env = gamma_env
        self.gpow = np.vstack([gamma_env ** j for j in range(N)])

        w = self.tuning.w
        W_diag = np.array([w / self.cost.w_boost_norm,
                           (1.0 - w) / self.cost.w_egr_norm])
        self.W_diag = W_diag
        eps = np.array([self.tuning.eps_boost, self.tuning.eps_egr])

        # cost: envelope term sum_j ||W g^j Y||^2 -> diagonal in Y
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(np.abs(1 - gamma_env ** 2) < 1e-14, N,
                             (1 - gamma_env ** (2 * N)) / (1 - gamma_env ** 2))
        env_coef = W_diag ** 2 * ratio + self.cost.y_ridge

        # smoothness rows: d_j = y_{j+1} - diag(g) y_j for j = 0..N-2
        Tu = np.zeros((p * (N - 1), m * N))
        Tx = np.zeros((p * (N - 1), n))
        for j in range(N - 1):
            r = slice(p * j, p * (j + 1))
            Tu[r] = Ou[j + 1] - gamma_env[:, None] * Ou[j]
            Tx[r] = Ox[j + 1] - gamma_env[:, None] * Ox[j]
        sm_w = np.tile(eps * W_diag, N - 1)
        self._Tu, self._Tx, self._sm_w = Tu, Tx, sm_w

        Q = np.zeros((self.nv, self.nv))
        RtR = self.cost.gamma * (self.cost.R.T @ self.cost.R) \
            + self.cost.u_ridge * np.eye(m)
        for j in range(N):
            Q[m * j:m * (j + 1), m * j:m * (j + 1)] += 2.0 * RtR
        Q[:m * N, :m * N] += 2.0 * (Tu.T * sm_w ** 2) @ Tu
        Q[m * N:, m * N:] += 2.0 * np.diag(env_coef)
        self.Q = Q

        # constraint rows (constant); rhs refreshed per step
        self.A_in, self._rhs_builder = _tight_rows(self)

    def qp(self, x0_pert, trim_x, trim_u, mem: MpcMemory) -> QuadProgram:
        c = np.zeros(self.nv)
        mN = N_INPUTS * self.cost.N
        c[:mN] = 2.0 * (self._Tu.T * self._sm_w ** 2) @ (self._Tx @ x0_pert)
        b = self._rhs_builder(x0_pert, trim_x, trim_u, mem)
        return QuadProgram(self.Q, c, self.A_in, b)

    def objective_const(self, x0_pert) -> float:
        v = self._sm_w * (self._Tx @ x0_pert)
        return float(v @ v)

    # -- per-step solve -----------------------------------------------------

    def solve(self, x_now, trim_x, trim_u, mem: MpcMemory,
              warm_start=None):
        x0 = np.asarray(x_now, dtype=float) - np.asarray(trim_x, dtype=float)
        prob = self.qp(x0, trim_x, trim_u, mem)
        rep = solve_qp(prob, warm_start=warm_start, config=self.solver_cfg)
        if rep.status != "optimal":
            raise InfeasibleMpc(
                f"MPC {self.model.grid_id}: QP status {rep.status}",
                snapshot={"x_now": np.asarray(x_now).tolist(),
                          "trim_x": np.asarray(trim_x).tolist(),
                          "trim_u": np.asarray(trim_u).tolist(),
                          "grid": self.model.grid_id,
                          "mem_initialized": mem.initialized,
                          "status": rep.status})
        N, m = self.cost.N, N_INPUTS
        z = rep.z_star
        u_seq = z[:m * N].reshape(N, m)
        Y0 = z[m * N:]
        x_seq = np.vstack([self._Apow[j] @ x0 + self._Su[j] @ z[:m * N]
                           for j in range(N + 1)])
        y_seq = np.vstack([self._Ox[j] @ x0 + self._Ou[j] @ z[:m * N]
                           for j in range(N)])
        Y_seq = self.gpow * Y0
        u_apply = u_seq[0] + np.asarray(trim_u, dtype=float)
        sol = MpcSolution(
            u_apply=u_apply, u_seq=u_seq, x_seq=x_seq, y_seq=y_seq,
            Y_seq=Y_seq, objective=rep.objective + self.objective_const(x0),
            qp_report=rep, active_grid=self.model.grid_id)
        mem_next = MpcMemory(
            prev_Y_next=self.gamma_env * Y0,
            prev_u_abs_next=u_seq[1] + np.asarray(trim_u, dtype=float)
            if N >= 2 else u_apply.copy())
        return sol, mem_next


def _tight_rows(ctl: EnvelopeMpc):
    """Constant inequality matrix and a per-step rhs builder."""
    N, m, p = ctl.cost.N, N_INPUTS, N_OUTPUTS
    nv = ctl.nv
    plan, term = ctl.plan, ctl.terminal
    E_x, f_x = ctl.X.H, ctl.X.b
    G_u, h_u = ctl.U.H, ctl.U.b
    rows = []
    specs = []  # (kind, payload) for rhs assembly

    # output envelope: +-y_j <= g^j Y
    for j in range(N):
        for sgn in (+1.0, -1.0):
            blk = np.zeros((p, nv))
            blk[:, :m * N] = sgn * ctl._Ou[j]
            blk[:, m * N:] = -np.diag(ctl.gpow[j])
            rows.append(blk)
            specs.append(("env", (j, sgn)))
    # envelope floor: -Y <= -prev (or 0 cold)
    blk = np.zeros((p, nv))
    blk[:, m * N:] = -np.eye(p)
    rows.append(blk)
    specs.append(("floor", None))
    # tightened state constraints, j = 1..N-1
    for j in range(1, N):
        blk = np.zeros((E_x.shape[0], nv))
        blk[:, :m * N] = E_x @ ctl._Su[j]
        rows.append(blk)
        specs.append(("state", j))
    # tightened input constraints, j = 0..N-1
    for j in range(N):
        blk = np.zeros((G_u.shape[0], nv))
        blk[:, m * j:m * (j + 1)] = G_u
        rows.append(blk)
        specs.append(("input", j))
    # terminal constraint on x_N (perturbation coordinates)
    S, t = term.set.H, term.set.b
    blk = np.zeros((S.shape[0], nv))
    blk[:, :m * N] = S @ ctl._Su[N]
    rows.append(blk)
    specs.append(("terminal", None))
    # internal slew
    for j in range(N - 1):
        for sgn in (+1.0, -1.0):
            blk = np.zeros((m, nv))
            blk[:, m * j:m * (j + 1)] = -sgn * np.eye(m)
            blk[:, m * (j + 1):m * (j + 2)] = sgn * np.eye(m)
            rows.append(blk)
            specs.append(("slew", None))
    # slew link to the previously planned input
    for sgn in (+1.0, -1.0):
        blk = np.zeros((m, nv))
        blk[:, :m] = sgn * np.eye(m)
        rows.append(blk)
        specs.append(("link", sgn))

    A_in = np.vstack(rows)
    E_rows = {j: E_x @ ctl._Apow[j] for j in range(1, N)}
    S_rows = S @ ctl._Apow[N]

    def rhs(x0, trim_x, trim_u, mem: MpcMemory):
        out = []
        for kind, payload in specs:
            if kind == "env":
                j, sgn = payload
                out.append(-sgn * (ctl._Ox[j] @ x0))
            elif kind == "floor":
                out.append(-(mem.prev_Y_next if mem.initialized
                             else np.zeros(p)))
            elif kind == "state":
                j = payload
                out.append(f_x - plan.sigma[j] - E_x @ np.asarray(trim_x)
                           - E_rows[j] @ x0)
            elif kind == "input":
                j = payload
                out.append(h_u - plan.mu[j] - G_u @ np.asarray(trim_u))
            elif kind == "terminal":
                out.append(t - plan.sigma_term - S_rows @ x0)
            elif kind == "slew":
                out.append(np.full(m, ctl.delta))
            elif kind == "link":
                sgn = payload
                if mem.initialized:
                    gap = mem.prev_u_abs_next - np.asarray(trim_u)
                    out.append(np.full(m, ctl.delta) + sgn * gap)
                else:
                    out.append(np.full(m, 1e9))
        return np.concatenate(out)

    return A_in, rhs


def assemble_qp(x_now, model: LinearModel, plan: TighteningPlan,
                tuning: TuningParams, cost: CostConfig, trim_x, trim_u,
                terminal: TerminalSet, mem: MpcMemory, delta: float,
                Ts: float, X: Polytope, U: Polytope) -> QuadProgram:
    """One-shot QP assembly (uncached path, used by tests and tooling)."""
    ctl = EnvelopeMpc(model, plan, tuning, cost, terminal, delta, Ts, X, U)
    x0 = np.asarray(x_now, dtype=float) - np.asarray(trim_x, dtype=float)
    return ctl.qp(x0, trim_x, trim_u, mem)


def solve_mpc(x_now, model: LinearModel, plan: TighteningPlan,
              tuning: TuningParams, cost: CostConfig, trim_x, trim_u,
              terminal: TerminalSet, mem: MpcMemory, delta: float,
              Ts: float, X: Polytope, U: Polytope):
    """One-shot solve (uncached path)."""
    ctl = EnvelopeMpc(model, plan, tuning, cost, terminal, delta, Ts, X, U)
    return ctl.solve(x_now, trim_x, trim_u, mem)
