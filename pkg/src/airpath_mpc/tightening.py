"""Offline robustification for the switched LTI controllers.

Per grid point: a nilpotent disturbance-feedback policy, margin recursions
that price every uncertainty source facet-by-facet, a sequential convex
program that grows the admissible disturbance box as far as non-empty
tightened constraints allow, and a common terminal set.  Margins are the
sum of a disturbance part (priced through dual matrices against the box
facets) and a switching part (interval over-bounds for model/trim changes).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_discrete_are

from .config import GRID_IDS, N_INPUTS, N_STATES, ToolkitConfig
from .engine import LinearModel, ModelGrid, empirical_disturbance
from .geometry import (
    Hypercube,
    Polytope,
    is_empty,
    max_invariant_set,
)
from .solvers import LogDetProgram, SolverTolerances, solve_logdet

log = logging.getLogger(__name__)

#: facet matrix of the disturbance box parameterisation {w : Zeta w <= alpha 1}
ZETA = np.vstack([np.eye(N_STATES), -np.eye(N_STATES)])
N_ALPHA = 2 * N_STATES


class TighteningError(Exception):
    pass


class NotDeadbeatable(TighteningError):
    pass


class EmptyTightenedSet(TighteningError):
    def __init__(self, step, kind):
        super().__init__(f"tightened {kind} constraint empty at step {step}")
        self.step = step
        self.kind = kind


class InitInfeasible(TighteningError):
    pass


class NoFeasibleScale(TighteningError):
    pass


class NoCommonStabilizer(TighteningError):
    pass


def alpha_box(alpha) -> Hypercube:
    """Disturbance box {w : Zeta w <= alpha 1} as a Hypercube."""
    alpha = np.asarray(alpha, dtype=float)
    n = alpha.size // 2
    hi = alpha[:n]
    lo = -alpha[n:]
    return Hypercube(0.5 * (hi + lo), 0.5 * (hi - lo))


def hypercube_alpha(W: Hypercube) -> np.ndarray:
    """Facet offsets of a Hypercube in the stacked-identity parameterisation."""
    return np.concatenate([W.center + W.half_width,
                           -(W.center - W.half_width)])


def minimal_dual(V: np.ndarray) -> np.ndarray:
    """Smallest Z >= 0 with V = Z' Zeta, columns of Z per row of V.

    Row v of V splits into positive/negative parts: the support of the
    box along v is then (Z' alpha) for any admissible alpha.
    """
    V = np.atleast_2d(V)
    pos = np.maximum(V, 0.0)
    neg = np.maximum(-V, 0.0)
    return np.hstack([pos, neg]).T  # shape (2n, rows)


@dataclass
class TighteningPlan:
    """Margin schedule and policy for one grid point."""

    grid_id: str
    sigma: list            # sigma_0..sigma_{N-1} (state facets), sigma_N -> see sigma_term
    sigma_term: np.ndarray  # margin against terminal facets
    mu: list               # mu_0..mu_{N-1} (input facets)
    P_seq: list            # P_0..P_{N-2}
    L_seq: list            # L_0..L_{N-1}
    alpha: np.ndarray      # 2n facet offsets of the admissible disturbance box
    N_np: int
    K_x: np.ndarray = None
    Z_seq: list = field(default_factory=list)    # duals per state step
    Zt_seq: list = field(default_factory=list)   # duals per input step
    sigma_w: list = field(default_factory=list)  # disturbance-only part
    mu_w: list = field(default_factory=list)
    deadbeat_ok: bool = True

    @property
    def w_max(self) -> Hypercube:
        return alpha_box(self.alpha)

    def log_volume(self) -> float:
        return float(np.sum(np.log(np.maximum(self.alpha, 1e-300))))

    def to_dict(self) -> dict:
        return {
            "grid_id": self.grid_id,
            "sigma": [s.tolist() for s in self.sigma],
            "sigma_term": self.sigma_term.tolist(),
            "mu": [m.tolist() for m in self.mu],
            "P_seq": [P.tolist() for P in self.P_seq],
            "L_seq": [L.tolist() for L in self.L_seq],
            "alpha": self.alpha.tolist(),
            "N_np": self.N_np,
            "K_x": self.K_x.tolist() if self.K_x is not None else None,
            "Z_seq": [Z.tolist() for Z in self.Z_seq],
            "Zt_seq": [Z.tolist() for Z in self.Zt_seq],
            "deadbeat_ok": self.deadbeat_ok,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TighteningPlan":
        return cls(
            grid_id=d["grid_id"],
            sigma=[np.asarray(s, float) for s in d["sigma"]],
            sigma_term=np.asarray(d["sigma_term"], float),
            mu=[np.asarray(m, float) for m in d["mu"]],
            P_seq=[np.asarray(P, float) for P in d["P_seq"]],
            L_seq=[np.asarray(L, float) for L in d["L_seq"]],
            alpha=np.asarray(d["alpha"], float),
            N_np=int(d["N_np"]),
            K_x=None if d.get("K_x") is None else np.asarray(d["K_x"], float),
            Z_seq=[np.asarray(Z, float) for Z in d.get("Z_seq", [])],
            Zt_seq=[np.asarray(Z, float) for Z in d.get("Zt_seq", [])],
            deadbeat_ok=bool(d.get("deadbeat_ok", True)),
        )


@dataclass
class TerminalSet:
    set: Polytope          # perturbation coordinates
    K_f: np.ndarray

    def to_dict(self) -> dict:
        return {"set": self.set.to_dict(), "K_f": self.K_f.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "TerminalSet":
        return cls(Polytope.from_dict(d["set"]), np.asarray(d["K_f"], float))


@dataclass
class SwitchMarginSets:
    """Hypercube over-bounds for switching-induced uncertainty.

    N_set[j] bounds the accumulated state prediction error at step j,
    M_set[j] the rejecting input action, S_set[j] the disturbance
    propagation mismatch; dX/dU bound per-sample trim jumps.
    """

    N_set: list
    S_set: list
    M_set: list
    dX: Hypercube
    dU: Hypercube
    e_bound: np.ndarray

    @classmethod
    def zero(cls, N: int, n_x: int = N_STATES, n_u: int = N_INPUTS) -> "SwitchMarginSets":
        zx = Hypercube.zero_centered(np.zeros(n_x))
        zu = Hypercube.zero_centered(np.zeros(n_u))
        return cls([zx] * N, [zx] * N, [zu] * max(N - 1, 0), zx, zu,
                   np.zeros(n_x))

    def to_dict(self) -> dict:
        return {
            "N_set": [h.to_dict() for h in self.N_set],
            "S_set": [h.to_dict() for h in self.S_set],
            "M_set": [h.to_dict() for h in self.M_set],
            "dX": self.dX.to_dict(), "dU": self.dU.to_dict(),
            "e_bound": self.e_bound.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SwitchMarginSets":
        return cls([Hypercube.from_dict(h) for h in d["N_set"]],
                   [Hypercube.from_dict(h) for h in d["S_set"]],
                   [Hypercube.from_dict(h) for h in d["M_set"]],
                   Hypercube.from_dict(d["dX"]), Hypercube.from_dict(d["dU"]),
                   np.asarray(d["e_bound"], float))


# ---------------------------------------------------------------------------
# deadbeat policy synthesis

def _ctrb_rank_profile(A, B):
    n = A.shape[0]
    blocks = [B]
    ranks = [np.linalg.matrix_rank(B, tol=1e-9)]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
        ranks.append(np.linalg.matrix_rank(np.hstack(blocks), tol=1e-9))
    return ranks


def deadbeat_gain(model: LinearModel, tol: float = 1e-9):
    """Static gain K with (A + BK) nilpotent at the smallest index.

    Eigenstructure assignment: Jordan chains at zero are built from the
    null space of [A B]; the block sizes follow the controllability rank
    increments.  Falls back to a near-deadbeat LQR gain (flagged on the
    plan) when the assignment fails.
    """
    A, B = model.A, model.B
    n, m = B.shape
    ranks = _ctrb_rank_profile(A, B)
    if ranks[-1] < n:
        return _near_deadbeat_fallback(A, B)
    nu = next(k + 1 for k, r in enumerate(ranks) if r == n)
    increments = [ranks[0]] + [ranks[k] - ranks[k - 1] for k in range(1, nu)]
    # number of chains of length >= k+1 equals increments[k]
    chain_lengths = []
    for ci in range(increments[0]):
        chain_lengths.append(sum(1 for inc in increments if inc > ci))
    chain_lengths.sort(reverse=True)

    M = np.hstack([A, B])
    _, sv, Vt = np.linalg.svd(M)
    null = Vt[np.sum(sv > 1e-9 * sv[0]):].T          # (n+m, m) null basis
    if null.shape[1] < increments[0]:
        return _near_deadbeat_fallback(A, B)

    rng = np.random.default_rng(0)
    best = None
    for attempt in range(60):
        if attempt == 0:
            coefs = np.eye(null.shape[1])[:, :len(chain_lengths)]
        else:
            coefs = rng.normal(size=(null.shape[1], len(chain_lengths)))
        starts = null @ coefs
        X_cols, W_cols = [], []
        ok = True
        for ci, length in enumerate(chain_lengths):
            v = starts[:, ci]
            nrm = np.linalg.norm(v)
            if nrm < 1e-12:
                ok = False
                break
            v = v / nrm
            x, w = v[:n], v[n:]
            X_cols.append(x)
            W_cols.append(w)
            for _ in range(length - 1):
                sol, res, *_ = np.linalg.lstsq(M, X_cols[-1], rcond=None)
                if np.linalg.norm(M @ sol - X_cols[-1]) > 1e-8:
                    ok = False
                    break
                X_cols.append(sol[:n])
                W_cols.append(sol[n:])
            if not ok:
                break
        if not ok:
            continue
        X = np.column_stack(X_cols)
        if np.linalg.matrix_rank(X, tol=1e-8) < n:
            continue
        cond = np.linalg.cond(X)
        K = np.column_stack(W_cols) @ np.linalg.inv(X)
        Acl = A + B @ K
        P = np.linalg.matrix_power(Acl, nu)
        err = np.abs(P).max() / max(1.0, np.abs(Acl).max() ** nu)
        if np.abs(P).max() <= tol:
            return K, nu
        if best is None or err < best[0]:
            best = (err, K, nu, cond)
    return _near_deadbeat_fallback(A, B)


def _near_deadbeat_fallback(A, B):
    """LQR with cheap input cost; flagged by the caller via the plan."""
    log.warning("deadbeat assignment failed; using near-deadbeat LQR gain")
    P = solve_discrete_are(A, B, np.eye(A.shape[0]), 1e-6 * np.eye(B.shape[1]))
    K = -np.linalg.solve(1e-6 * np.eye(B.shape[1]) + B.T @ P @ B, B.T @ P @ A)
    return K, None  # caller substitutes N_np = N and flags the plan


def nilpotent_policy(model: LinearModel, K_x, N_np: int, N: int):
    """Policy P_j = K (A+BK)^j, zero after the nilpotency index."""
    A, B = model.A, model.B
    n, m = B.shape
    L = np.eye(n)
    P_seq, L_seq = [], [L]
    for j in range(N - 1):
        P = K_x @ L if j < N_np else np.zeros((m, n))
        P_seq.append(P)
        L = A @ L + B @ P
        if j + 1 >= N_np:
            L = np.zeros_like(L)  # clip numerical dust beyond the index
        L_seq.append(L)
    return P_seq, L_seq


# ---------------------------------------------------------------------------
# margin recursions (the set-difference chain, priced facet-wise)

def ct_margins(model: LinearModel, P_seq, W: Hypercube,
               switch: SwitchMarginSets | None, X: Polytope, U: Polytope,
               Xf: Polytope, N: int, check_nonempty: bool = True,
               x_trim=None, u_trim=None) -> TighteningPlan:
    """Margin sequences for the full tightening chain.

    sigma_{j+1} - sigma_j prices L_j W (+) N_j (+) S_j (+) dX against the
    state facets; mu analogously prices P_j W (+) M_j (+) dU against the
    input facets; the terminal margin prices step N-1 against the terminal
    facets.  Raises EmptyTightenedSet when a tightened set has no point.
    """
    A, B = model.A, model.B
    n = A.shape[0]
    sw = switch or SwitchMarginSets.zero(N, n_x=n, n_u=B.shape[1])
    L_seq = [np.eye(n)]
    for j in range(N - 1):
        L_seq.append(A @ L_seq[j] + B @ P_seq[j])

    E, f = X.H, X.b
    G, h = U.H, U.b
    sigma = [np.zeros(E.shape[0])]
    sigma_w = [np.zeros(E.shape[0])]
    mu = [np.zeros(G.shape[0])]
    mu_w = [np.zeros(G.shape[0])]
    Z_seq, Zt_seq = [], []

    for j in range(N - 1):
        V = E @ L_seq[j]
        Z_seq.append(minimal_dual(V))
        w_part = np.array([W.support(v) for v in V])
        sw_part = np.array([sw.N_set[j].support(e) + sw.S_set[j].support(e)
                            + sw.dX.support(e) for e in E])
        sigma_w.append(sigma_w[j] + w_part)
        sigma.append(sigma[j] + w_part + sw_part)

        Vu = G @ P_seq[j]
        Zt_seq.append(minimal_dual(Vu))
        wu_part = np.array([W.support(v) for v in Vu])
        swu_part = np.array([sw.M_set[j].support(g) + sw.dU.support(g)
                             for g in G])
        mu_w.append(mu_w[j] + wu_part)
        mu.append(mu[j] + wu_part + swu_part)

    # terminal step: price step N-1 against the terminal facets
    S, t = Xf.H, Xf.b
    Vt = S @ L_seq[N - 1]
    Z_seq.append(minimal_dual(E @ L_seq[N - 1]))
    term_w = np.array([W.support(v) for v in Vt])
    term_sw = np.array([sw.N_set[N - 1].support(s) + sw.S_set[N - 1].support(s)
                        + sw.dX.support(s) for s in S])
    sigma_term = term_w + term_sw

    N_np = next((j for j, L in enumerate(L_seq)
                 if np.abs(L).max() <= 1e-9), N)


    plan = TighteningPlan(
        grid_id=model.grid_id, sigma=sigma, sigma_term=sigma_term, mu=mu,
        P_seq=list(P_seq), L_seq=L_seq, alpha=hypercube_alpha(W), N_np=N_np,
        Z_seq=Z_seq, Zt_seq=Zt_seq, sigma_w=sigma_w, mu_w=mu_w)

    if check_nonempty:
        audit_nonempty(plan, X, U, Xf, x_trim=x_trim, u_trim=u_trim)
    return plan


def audit_nonempty(plan: TighteningPlan, X, U, Xf, x_trim=None, u_trim=None):
    """Raise EmptyTightenedSet if any tightened set has no point (and, when
    trims are supplied, if a trim leaves its tightened set)."""
    for j in range(1, len(plan.sigma)):
        P = Polytope(X.H, X.b - plan.sigma[j])
        if is_empty(P):
            raise EmptyTightenedSet(j, "state")
        if x_trim is not None and not P.contains(x_trim, tol=1e-9):
            raise EmptyTightenedSet(j, "state-trim")
    for j in range(1, len(plan.mu)):
        P = Polytope(U.H, U.b - plan.mu[j])
        if is_empty(P):
            raise EmptyTightenedSet(j, "input")
        if u_trim is not None and not P.contains(u_trim, tol=1e-9):
            raise EmptyTightenedSet(j, "input-trim")
    if is_empty(Polytope(Xf.H, Xf.b - plan.sigma_term)):
        raise EmptyTightenedSet(len(plan.sigma), "terminal")


# ---------------------------------------------------------------------------
# switching margin estimation

def _adjacent_pairs():
    pairs = []
    for si in range(3):
        for fi in range(4):
            if si + 1 < 3:
                pairs.append(((si, fi), (si + 1, fi)))
            if fi + 1 < 4:
                pairs.append(((si, fi), (si, fi + 1)))
    return pairs


def estimate_switch_margins(grid: ModelGrid, plans: dict,
                            cfg: ToolkitConfig, N: int) -> SwitchMarginSets:
    """Interval-arithmetic over-bounds for all switching uncertainty sets.

    `plans` maps grid id to a plan carrying (K_x, P_seq, L_seq, alpha);
    bounds are maxima over lattice-adjacent model pairs.
    """
    from .engine import lattice_indices, roman_id

    con = cfg.constraints
    x_lo, x_hi = np.asarray(con.x_lower), np.asarray(con.x_upper)
    u_lo, u_hi = np.asarray(con.u_lower), np.asarray(con.u_upper)

    # worst-case perturbation magnitudes within the constraint boxes
    xmax = np.zeros(N_STATES)
    umax = np.zeros(N_INPUTS)
    for m in grid.models:
        xmax = np.maximum(xmax, np.maximum(x_hi - m.trim_x, m.trim_x - x_lo))
        umax = np.maximum(umax, np.maximum(u_hi - m.trim_u, m.trim_u - u_lo))

    e_bound = np.zeros(N_STATES)
    s_steps = np.zeros((N, N_STATES))   # per chain index i: max |L_i' - L_i| w
    w_hat = np.zeros(N_STATES)
    for g in GRID_IDS:
        w_hat = np.maximum(w_hat, alpha_box(plans[g].alpha).half_width
                           + np.abs(alpha_box(plans[g].alpha).center))
    for (a_idx, b_idx) in _adjacent_pairs():
        ga, gb = roman_id(*a_idx), roman_id(*b_idx)
        ma, mb = grid.model(ga), grid.model(gb)
        dA = np.abs(ma.A - mb.A)
        dB = np.abs(ma.B - mb.B)
        e_bound = np.maximum(e_bound, dA @ xmax + dB @ umax)
        # disturbance-propagation mismatch per chain step (nilpotent => short)
        for i in range(1, N):
            dL = np.abs(plans[ga].L_seq[i] - plans[gb].L_seq[i])
            s_steps[i] = np.maximum(s_steps[i], dL @ w_hat)

    absA = np.zeros((N_STATES, N_STATES))
    absIBK = np.zeros((N_STATES, N_STATES))
    absK = np.zeros((N_INPUTS, N_STATES))
    for g in GRID_IDS:
        m = grid.model(g)
        K = plans[g].K_x
        absA = np.maximum(absA, np.abs(m.A))
        absIBK = np.maximum(absIBK, np.abs(np.eye(N_STATES) + m.B @ K))
        absK = np.maximum(absK, np.abs(K))

    n_bar = [np.zeros(N_STATES)]
    m_bar = []
    for j in range(N - 1):
        inner = e_bound + absA @ n_bar[j]
        m_bar.append(absK @ inner)
        n_bar.append(absIBK @ inner)

    # accumulated propagation mismatch along the chain
    s_acc = [np.zeros(N_STATES)]
    for j in range(1, N):
        s_acc.append(s_acc[j - 1] + s_steps[j])

    # trim jumps per sample from the operating-point slew
    dspeed = grid.speeds[1] - grid.speeds[0]
    dfuel = grid.fuels[1] - grid.fuels[0]
    rx_s = np.zeros(N_STATES)
    rx_f = np.zeros(N_STATES)
    ru_s = np.zeros(N_INPUTS)
    ru_f = np.zeros(N_INPUTS)
    for (a_idx, b_idx) in _adjacent_pairs():
        ga, gb = roman_id(*a_idx), roman_id(*b_idx)
        ma, mb = grid.model(ga), grid.model(gb)
        dx = np.abs(ma.trim_x - mb.trim_x)
        du = np.abs(ma.trim_u - mb.trim_u)
        if a_idx[0] != b_idx[0]:   # speed neighbours
            rx_s = np.maximum(rx_s, dx / dspeed)
            ru_s = np.maximum(ru_s, du / dspeed)
        else:
            rx_f = np.maximum(rx_f, dx / dfuel)
            ru_f = np.maximum(ru_f, du / dfuel)
    tc = cfg.tightening
    dX = Hypercube.zero_centered(rx_s * tc.speed_slew + rx_f * tc.fuel_slew)
    dU = Hypercube.zero_centered(ru_s * tc.speed_slew + ru_f * tc.fuel_slew)

    return SwitchMarginSets(
        N_set=[Hypercube.zero_centered(v) for v in n_bar[:N]],
        S_set=[Hypercube.zero_centered(v) for v in s_acc[:N]],
        M_set=[Hypercube.zero_centered(v) for v in m_bar[:N - 1]],
        dX=dX, dU=dU, e_bound=e_bound)


# ---------------------------------------------------------------------------
# feasible initial scaling (stand-in for the nonlinear seed problem)

def switch_margin_offsets(switch: SwitchMarginSets | None, X: Polytope,
                          U: Polytope, N: int):
    """Accumulated switching parts of the margins (no disturbance term)."""
    if switch is None:
        return ([np.zeros(X.H.shape[0])] * (N + 1),
                [np.zeros(U.H.shape[0])] * N)
    sig = [np.zeros(X.H.shape[0])]
    mu = [np.zeros(U.H.shape[0])]
    for j in range(N - 1):
        s_inc = np.array([switch.N_set[j].support(e) + switch.S_set[j].support(e)
                          + switch.dX.support(e) for e in X.H])
        sig.append(sig[j] + s_inc)
        m_inc = np.array([switch.M_set[j].support(g) + switch.dU.support(g)
                          for g in U.H])
        mu.append(mu[j] + m_inc)
    sig.append(sig[-1])  # placeholder slot for the terminal step
    return sig, mu


def init_feasible_alpha(model: LinearModel, X: Polytope, U: Polytope,
                        Xf: Polytope, N: int, W_emp: Hypercube,
                        switch: SwitchMarginSets | None = None,
                        tol: float = 1e-3) -> TighteningPlan:
    """Feasible seed plan: bisection on a uniform scaling of the empirical
    disturbance box under the deadbeat policy."""
    K_x, N_np = deadbeat_gain(model)
    deadbeat_ok = N_np is not None
    if N_np is None:
        N_np = N
    if N_np > N - 1:
        raise InitInfeasible(
            f"nilpotency index {N_np} exceeds horizon headroom {N - 1}")
    P_seq, _ = nilpotent_policy(model, K_x, N_np, N)

    def feasible(scale: float) -> bool:
        W = Hypercube(W_emp.center * scale, W_emp.half_width * scale)
        try:
            ct_margins(model, P_seq, W, switch, X, U, Xf, N,
                       check_nonempty=True, x_trim=model.trim_x,
                       u_trim=model.trim_u)
        except EmptyTightenedSet:
            return False
        return True

    if not feasible(0.0):
        raise NoFeasibleScale(
            f"{model.grid_id}: nominal problem infeasible even with no disturbance")
    if feasible(1.0):
        s_best = 1.0
    else:
        lo, hi = 0.0, 1.0
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if feasible(mid):
                lo = mid
            else:
                hi = mid
        s_best = lo
        if s_best <= 0.0:
            raise NoFeasibleScale(f"{model.grid_id}: no positive scaling feasible")

    W = Hypercube(W_emp.center * s_best, W_emp.half_width * s_best)
    plan = ct_margins(model, P_seq, W, switch, X, U, Xf, N,
                      check_nonempty=True, x_trim=model.trim_x,
                      u_trim=model.trim_u)
    plan.K_x = K_x
    plan.N_np = N_np
    plan.deadbeat_ok = deadbeat_ok
    plan.alpha = np.maximum(hypercube_alpha(W), 1e-9)
    return plan


# ---------------------------------------------------------------------------
# sequential convex program (volume maximisation of the disturbance box)

class _ScpLayout:
    """Index bookkeeping for the flattened subproblem variables."""

    def __init__(self, n, m, q, r, N_np, with_epigraph=True):
        self.n, self.m, self.q, self.r, self.N_np = n, m, q, r, N_np
        a = 2 * n
        self.a = a
        k = 0
        self.alpha = np.arange(k, k + a); k += a
        self.P = []
        for _ in range(N_np):
            self.P.append(np.arange(k, k + m * n).reshape(m, n))
            k += m * n
        self.Z = []
        for _ in range(N_np):
            self.Z.append(np.arange(k, k + a * q).reshape(a, q))
            k += a * q
        self.Zt = []
        for _ in range(N_np):
            self.Zt.append(np.arange(k, k + a * r).reshape(a, r))
            k += a * r
        self.with_epigraph = with_epigraph
        if with_epigraph:
            self.tZ = k; k += 1
            self.tZt = k; k += 1
            self.tA = k; k += 1
        self.n_var = k


def _scp_subproblem(model, X, U, N, N_np, ref, rho, sw_sigma, sw_mu,
                    alpha_min, solver_cfg, t0: float = 1.0):
    """One linearised volume-maximisation subproblem around `ref`."""
    A, B = model.A, model.B
    n, m = B.shape
    E, f = X.H, X.b
    G, h = U.H, U.b
    q, r = E.shape[0], G.shape[0]
    lay = _ScpLayout(n, m, q, r, N_np, with_epigraph=rho > 0)
    alpha0, P0, Z0, Zt0 = ref

    rows_eq, rhs_eq = [], []

    def eq_row(coeffs, rhs):
        rows_eq.append(coeffs)
        rhs_eq.append(rhs)

    # L_j as affine functions of P variables: L_j = A^j + sum A^{j-1-i} B P_i
    # handled implicitly: nilpotency L_{N_np} = 0 and state duality rows
    # E L_j = Z_j' Zeta expand through these expressions.
    Apow = [np.linalg.matrix_power(A, j) for j in range(N_np + 1)]

    def L_coeff(j):
        """Constant term and per-P_i coefficient matrices of L_j."""
        const = Apow[j]
        coefs = {i: Apow[j - 1 - i] @ B for i in range(min(j, N_np))}
        return const, coefs

    # nilpotency: L_{N_np} = 0   (n x n equations)
    constL, coefsL = L_coeff(N_np)
    for a_i in range(n):
        for b_i in range(n):
            row = np.zeros(lay.n_var)
            for i, Mcoef in coefsL.items():
                # (Mcoef @ P_i)[a_i, b_i] = sum_k Mcoef[a_i, k] P_i[k, b_i]
                row[lay.P[i][:, b_i]] += Mcoef[a_i, :]
            eq_row(row, -constL[a_i, b_i])

    # duality: E L_j = Z_j' Zeta  for j < N_np  (q x n each)
    for j in range(N_np):
        constj, coefsj = L_coeff(j)
        Econst = E @ constj
        for qi in range(q):
            for ni in range(n):
                row = np.zeros(lay.n_var)
                for i, Mcoef in coefsj.items():
                    row[lay.P[i][:, ni]] += E[qi, :] @ Mcoef
                # (Z_j' Zeta)[qi, ni] = Z_j[ni, qi] - Z_j[n + ni, qi]
                row[lay.Z[j][ni, qi]] -= 1.0
                row[lay.Z[j][n + ni, qi]] += 1.0
                eq_row(row, -Econst[qi, ni])

    # input duality: G P_j = Zt_j' Zeta  for j < N_np  (r x n each)
    for j in range(N_np):
        for ri in range(r):
            for ni in range(n):
                row = np.zeros(lay.n_var)
                row[lay.P[j][:, ni]] += G[ri, :]
                row[lay.Zt[j][ni, ri]] -= 1.0
                row[lay.Zt[j][n + ni, ri]] += 1.0
                eq_row(row, 0.0)

    rows_in, rhs_in = [], []

    def in_row(coeffs, rhs):
        rows_in.append(coeffs)
        rhs_in.append(rhs)

    # Z, Zt >= 0
    for j in range(N_np):
        for idx in lay.Z[j].ravel():
            row = np.zeros(lay.n_var); row[idx] = -1.0
            in_row(row, 0.0)
        for idx in lay.Zt[j].ravel():
            row = np.zeros(lay.n_var); row[idx] = -1.0
            in_row(row, 0.0)
    # alpha >= alpha_min
    for k_i, idx in enumerate(lay.alpha):
        row = np.zeros(lay.n_var); row[idx] = -1.0
        in_row(row, -alpha_min)

    # linearised margin recursions: sigma_j rows (affine in alpha and Z)
    # increment_i(j) = (Z0_j' alpha + Z_j' alpha0 - Z0_j' alpha0) 1
    def margin_rows(j_steps, Zs, Z0s):
        """Affine coefficient rows for the accumulated linearised margins
        after j_steps: per facet c, sum_i (Z0_i' a + Z_i' a0 - Z0_i' a0) 1."""
        n_facets = Zs[0].shape[1]
        coef = np.zeros((n_facets, lay.n_var))
        const = np.zeros(n_facets)
        for i in range(j_steps):
            Zi0 = Z0s[i]
            for c in range(n_facets):
                coef[c, lay.alpha] += Zi0[:, c]
                coef[c, Zs[i][:, c]] += alpha0
                const[c] -= Zi0[:, c] @ alpha0
        return coef, const

    # state trim rows: E x_bar + sigma_j + sw_sigma_j <= f  for j in 1..N-1
    for j in range(1, N):
        steps = min(j, N_np)
        coef, const = margin_rows(steps, lay.Z, Z0)
        base = E @ model.trim_x + sw_sigma[j] - f
        for qi in range(q):
            in_row(coef[qi], -(base[qi] + const[qi]))

    # input trim rows: G u_bar + mu_j + sw_mu_j <= h  for j in 1..N-1
    for j in range(1, N):
        steps = min(j, N_np)
        coef, const = margin_rows(steps, lay.Zt, Zt0)
        base = G @ model.trim_u + sw_mu[j] - h
        for ri in range(r):
            in_row(coef[ri], -(base[ri] + const[ri]))

    # epigraph rows for the max-norm regulariser (dropped when rho = 0:
    # cost-free epigraph levels would form an unbounded optimal face)
    c = np.zeros(lay.n_var)
    if lay.with_epigraph:
        def epi_rows(indices, ref_vals, t_idx):
            for idx, v0 in zip(indices, ref_vals):
                row = np.zeros(lay.n_var); row[idx] = 1.0; row[t_idx] = -1.0
                in_row(row, v0)
                row = np.zeros(lay.n_var); row[idx] = -1.0; row[t_idx] = -1.0
                in_row(row, -v0)

        for j in range(N_np):
            epi_rows(lay.Z[j].ravel(), Z0[j].ravel(), lay.tZ)
            epi_rows(lay.Zt[j].ravel(), Zt0[j].ravel(), lay.tZt)
        epi_rows(lay.alpha, alpha0, lay.tA)
        c[[lay.tZ, lay.tZt, lay.tA]] = rho

    # Strictly feasible start: shrink alpha a little (loosens every margin
    # row), lift the dual entries uniformly (preserves the duality
    # equalities because the stacked facet normals cancel), and open the
    # epigraph levels.  Falls back to the solver's own phase 1 if this
    # point is not strictly inside.
    tau = 1e-9
    shrink = 1e-4
    x0 = np.zeros(lay.n_var)
    x0[lay.alpha] = np.maximum(alpha0 * (1.0 - shrink), 2.0 * alpha_min)
    for j in range(N_np):
        x0[lay.P[j].ravel()] = P0[j].ravel()
        x0[lay.Z[j].ravel()] = (Z0[j] + tau).ravel()
        x0[lay.Zt[j].ravel()] = (Zt0[j] + tau).ravel()
    if lay.with_epigraph:
        dev = max(shrink * float(alpha0.max()), 10 * tau)
        x0[[lay.tZ, lay.tZt, lay.tA]] = dev + 1e-6

    prog = LogDetProgram(
        c=c, log_idx=lay.alpha,
        A_in=np.array(rows_in), b_in=np.array(rhs_in),
        A_eq=np.array(rows_eq), b_eq=np.array(rhs_eq),
        x0=x0, floor=alpha_min)
    rep = solve_logdet(prog, solver_cfg, t0=t0, t_factor=15.0)
    return rep, lay


def scp_max_disturbance(model: LinearModel, X: Polytope, U: Polytope,
                        Xf: Polytope, N: int, init: TighteningPlan,
                        rho: float = 1e-6, i_max: int = 100,
                        delta_tol: float = 1e-5,
                        switch: SwitchMarginSets | None = None,
                        alpha_min: float = 1e-9,
                        solver_cfg: SolverTolerances | None = None,
                        history: list | None = None) -> TighteningPlan:
    """Iterated linearised volume maximisation of the disturbance box.

    Starts from a feasible plan, re-linearises the bilinear margin terms at
    each solution, and stops when alpha and both dual blocks move less than
    `delta_tol` in max norm.  Hitting `i_max` without settling returns the
    initial plan unchanged.
    """
    N_np = init.N_np
    if N_np > N - 1:
        raise InitInfeasible("nilpotency index exceeds horizon")
    sw_sigma, sw_mu = switch_margin_offsets(switch, X, U, N)
    scfg = solver_cfg or SolverTolerances()

    n, m = model.B.shape
    a = 2 * n
    alpha0 = np.maximum(np.asarray(init.alpha, float), alpha_min)
    P0 = [np.asarray(p, float) for p in init.P_seq[:N_np]]
    Z0 = [np.asarray(z, float) for z in init.Z_seq[:N_np]]
    Zt0 = [np.asarray(z, float) for z in init.Zt_seq[:N_np]]
    q, r = X.H.shape[0], U.H.shape[0]
    # pad duals that the initial plan may not carry
    while len(Z0) < N_np:
        Z0.append(np.zeros((a, q)))
    while len(Zt0) < N_np:
        Zt0.append(np.zeros((a, r)))
    while len(P0) < N_np:
        P0.append(np.zeros((m, n)))

    init_objective = -float(np.sum(np.log(alpha0)))
    if history is not None:
        history.append(init_objective)

    def canonical_duals(P_list):
        """Elementwise-minimal duals for the current policy: a deterministic
        representative of the (possibly degenerate) optimal dual face."""
        A_, B_ = model.A, model.B
        L = np.eye(model.A.shape[0])
        Zc, Ztc = [], []
        for j in range(N_np):
            Zc.append(minimal_dual(X.H @ L))
            Ztc.append(minimal_dual(U.H @ P_list[j]))
            L = A_ @ L + B_ @ P_list[j]
        return Zc, Ztc

    def alpha_rescue(alpha_c, P_list):
        """Largest kappa <= 1 making (kappa*alpha, P) exactly feasible.

        With canonical duals the true margins are linear in alpha, so the
        scaling that absorbs the linearisation error is closed-form.
        """
        Zc, Ztc = canonical_duals(P_list)
        kappa = 1.0
        price_x = np.zeros(X.H.shape[0])
        price_u = np.zeros(U.H.shape[0])
        slack_x0 = X.b - X.H @ model.trim_x
        slack_u0 = U.b - U.H @ model.trim_u
        for j in range(1, N):
            if j <= N_np:
                price_x = price_x + Zc[j - 1].T @ alpha_c
                price_u = price_u + Ztc[j - 1].T @ alpha_c
            for price, slack0, sw in ((price_x, slack_x0, sw_sigma[j]),
                                      (price_u, slack_u0, sw_mu[j])):
                room = slack0 - sw
                if (room < -1e-12).any():
                    return 0.0  # switching margins alone exceed the slack
                hot = price > 1e-300
                if hot.any():
                    kappa = min(kappa, float(np.min(room[hot] / price[hot])))
        return max(kappa, 0.0)

    Z0, Zt0 = canonical_duals(P0)
    converged = False
    i = 0
    while i < i_max:
        i += 1
        # later solves sit near the previous optimum: start the barrier hot
        t0 = 1.0 if i == 1 else 50.0
        rep, lay = _scp_subproblem(model, X, U, N, N_np,
                                   (alpha0, P0, Z0, Zt0), rho,
                                   sw_sigma, sw_mu, alpha_min, scfg, t0=t0)
        if not rep.optimal:
            log.warning("%s: subproblem status %s at iteration %d; keeping init",
                        model.grid_id, rep.status, i)
            return init
        x = rep.z_star
        alpha_full = x[lay.alpha]
        P_full = [x[lay.P[j]] for j in range(N_np)]
        # Damp the step until the true bilinear margins stay feasible.  A
        # blended point may miss feasibility by a sliver of linearisation
        # error, so alpha is scaled back by the closed-form rescue factor;
        # the candidate is accepted only if the volume objective stays
        # monotone, which -log det convexity guarantees for small rescues.
        obj_ref = -float(np.sum(np.log(np.maximum(alpha0, 1e-300))))
        theta = 1.0
        accepted = False
        while theta > 1e-6:
            alpha1 = (1 - theta) * alpha0 + theta * alpha_full
            P1 = [(1 - theta) * p0 + theta * p1 for p0, p1 in zip(P0, P_full)]
            kappa = alpha_rescue(alpha1, P1)
            if kappa > 0.9 and (kappa * alpha1 >= alpha_min - 1e-15).all():
                alpha1 = kappa * alpha1
                obj_cand = -float(np.sum(np.log(np.maximum(alpha1, 1e-300))))
                if obj_cand <= obj_ref + 1e-9:
                    accepted = True
                    break
            theta *= 0.5
        if not accepted:
            log.warning("%s: no damped step restores feasibility at iteration "
                        "%d; stopping", model.grid_id, i)
            break
        Z1, Zt1 = canonical_duals(P1)

        def rel(a, b):
            # channels span 5+ orders of magnitude (kPa vs EGR-rate units):
            # movement is judged relative to the iterate scale
            return float((np.abs(a - b) / (1.0 + np.abs(b))).max())

        dA = rel(alpha1, alpha0)
        dZ = max((rel(a, b) for a, b in zip(Z1, Z0)), default=0.0)
        dZt = max((rel(a, b) for a, b in zip(Zt1, Zt0)), default=0.0)
        alpha0, P0, Z0, Zt0 = alpha1, P1, Z1, Zt1
        if history is not None:
            history.append(-float(np.sum(np.log(np.maximum(alpha0, 1e-300)))))
        if max(dA, dZ, dZt) <= delta_tol:
            converged = True
            break
    if not converged:
        log.warning("%s: SCP hit i_max=%d; returning initial plan",
                    model.grid_id, i_max)
        return init

    # assemble the final plan from the converged point, margins exact
    P_seq = list(P0) + [np.zeros((m, n))] * (N - 1 - N_np)
    W = alpha_box(np.maximum(alpha0, 0.0))
    plan = ct_margins(model, P_seq, W, switch, X, U, Xf, N,
                      check_nonempty=True, x_trim=model.trim_x,
                      u_trim=model.trim_u)
    plan.K_x = init.K_x
    plan.N_np = N_np
    plan.deadbeat_ok = init.deadbeat_ok
    plan.alpha = np.maximum(alpha0, 0.0)
    # keep the converged duals (they satisfy the duality equalities)
    plan.Z_seq = list(Z0) + plan.Z_seq[N_np:]
    plan.Zt_seq = list(Zt0) + plan.Zt_seq[N_np:]
    if plan.log_volume() < init.log_volume() - 1e-9:
        log.warning("%s: SCP volume below init; returning init", model.grid_id)
        return init
    return plan


# ---------------------------------------------------------------------------
# slew bound and terminal set

def slew_bound(plans: dict, floor: float = 0.0) -> float:
    """delta >= max L1 difference of consecutive input margins, with floor."""
    worst = 0.0
    for plan in plans.values():
        for j in range(len(plan.mu) - 1):
            worst = max(worst, float(np.abs(plan.mu[j + 1] - plan.mu[j]).sum()))
    return max(worst, floor)


def build_terminal_set(grid: ModelGrid, X: Polytope, plans: dict,
                       cfg: ToolkitConfig, U: Polytope) -> TerminalSet:
    """Common terminal set in perturbation coordinates.

    K_f is LQR on the element-wise mean model; the invariant set lives in
    X shifted by the worst trim and inside the tightened-input slab of
    every grid point.
    """
    tc = cfg.tightening
    A_mean = np.mean([m.A for m in grid.models], axis=0)
    B_mean = np.mean([m.B for m in grid.models], axis=0)
    Pric = solve_discrete_are(A_mean, B_mean,
                              tc.lqr_q * np.eye(N_STATES),
                              tc.lqr_r * np.eye(N_INPUTS))
    K_f = -np.linalg.solve(tc.lqr_r * np.eye(N_INPUTS) + B_mean.T @ Pric @ B_mean,
                           B_mean.T @ Pric @ A_mean)
    maps = []
    for m in grid.models:
        Acl = m.A + m.B @ K_f
        if np.abs(np.linalg.eigvals(Acl)).max() >= 1.0:
            raise NoCommonStabilizer(
                f"closed loop unstable at {m.grid_id} under the common gain")
        maps.append(Acl)

    # state box in perturbation coordinates, worst trim per facet
    b_x = X.b - np.max([X.H @ m.trim_x for m in grid.models], axis=0)
    rows = [X.H]
    offs = [b_x]
    # tightened-input feasibility of the terminal controller, every grid point
    for g in GRID_IDS:
        m = grid.model(g)
        mu_last = plans[g].mu[-1]
        rhs = U.b - mu_last - U.H @ m.trim_u
        keep = np.abs(U.H @ K_f).sum(axis=1) > 1e-12
        rows.append((U.H @ K_f)[keep])
        offs.append(rhs[keep])
        if (rhs < -1e-12).any():
            raise NoCommonStabilizer(
                f"trim input of {g} violates its tightened input set")
    from .geometry import dedup_facets

    base = dedup_facets(Polytope(np.vstack(rows), np.concatenate(offs),
                                 bounded=True))
    omega = max_invariant_set(maps, base, max_iter=tc.invariant_max_iter)
    return TerminalSet(set=omega, K_f=K_f)


# ---------------------------------------------------------------------------
# pipeline

@dataclass
class TighteningBundle:
    plans: dict                  # grid id -> TighteningPlan
    switch: SwitchMarginSets
    terminal: TerminalSet
    delta: float
    coverage: dict               # grid id -> fraction of residuals in W_max
    N: int

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "delta": self.delta,
            "plans": {g: p.to_dict() for g, p in self.plans.items()},
            "switch": self.switch.to_dict(),
            "terminal": self.terminal.to_dict(),
            "coverage": self.coverage,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TighteningBundle":
        return cls(
            plans={g: TighteningPlan.from_dict(p) for g, p in d["plans"].items()},
            switch=SwitchMarginSets.from_dict(d["switch"]),
            terminal=TerminalSet.from_dict(d["terminal"]),
            delta=float(d["delta"]),
            coverage={g: float(v) for g, v in d["coverage"].items()},
            N=int(d["N"]),
        )


def constraint_polytopes(cfg: ToolkitConfig):
    X = Polytope.from_bounds(cfg.constraints.x_lower, cfg.constraints.x_upper)
    U = Polytope.from_bounds(cfg.constraints.u_lower, cfg.constraints.u_upper)
    return X, U


def compute_tightening(grid: ModelGrid, cfg: ToolkitConfig,
                       scp_iters: int | None = None) -> TighteningBundle:
    """Full offline pipeline over the 12 grid points.

    Two passes: a switch-free pass sizes the disturbance boxes and the
    policies, switching margins are bounded from those, then the final
    pass re-solves with switching headroom reserved in the margins.
    """
    X, U = constraint_polytopes(cfg)
    N = cfg.mpc.N
    tc = cfg.tightening
    i_max = scp_iters if scp_iters is not None else tc.i_max

    W_emp = {}
    residuals = {}
    for g in GRID_IDS:
        W, _, _, res = empirical_disturbance(
            grid, g, seed=grid.seed, noise_half_width=cfg.plant.noise_half_width)
        W_emp[g] = W
        residuals[g] = res

    Xf_placeholder = X  # terminal facets only price nilpotent-zero terms here

    def run_pass(switch, seeds=None):
        plans = {}
        for g in GRID_IDS:
            model = grid.model(g)
            seed_box = W_emp[g] if seeds is None else seeds[g].w_max
            init = init_feasible_alpha(model, X, U, Xf_placeholder, N,
                                       seed_box, switch=switch,
                                       tol=tc.bisect_tol)
            plans[g] = scp_max_disturbance(
                model, X, U, Xf_placeholder, N, init, rho=tc.rho,
                i_max=i_max, delta_tol=tc.delta_tol, switch=switch,
                alpha_min=tc.alpha_min)
        return plans

    plans_free = run_pass(None)
    switch = estimate_switch_margins(grid, plans_free, cfg, N)
    # second pass re-reserves headroom for switching; seeding the bisection
    # with the switch-free boxes keeps the restart close to its optimum
    plans = run_pass(switch, seeds=plans_free)

    delta = slew_bound(plans, floor=tc.slew_floor)
    terminal = build_terminal_set(grid, X, plans, cfg, U)

    final = {}
    coverage = {}
    for g in GRID_IDS:
        model = grid.model(g)
        plan = ct_margins(model, plans[g].P_seq, plans[g].w_max, switch,
                          X, U, terminal.set, N, check_nonempty=True,
                          x_trim=model.trim_x, u_trim=model.trim_u)
        plan.K_x = plans[g].K_x
        plan.N_np = plans[g].N_np
        plan.alpha = plans[g].alpha
        plan.deadbeat_ok = plans[g].deadbeat_ok
        plan.Z_seq = plans[g].Z_seq
        plan.Zt_seq = plans[g].Zt_seq
        final[g] = plan
        W_max = plans[g].w_max
        inside = sum(1 for rr in residuals[g] if W_max.contains(rr, tol=1e-12))
        coverage[g] = inside / len(residuals[g])

    return TighteningBundle(plans=final, switch=switch, terminal=terminal,
                            delta=delta, coverage=coverage, N=N)
