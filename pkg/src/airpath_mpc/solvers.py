"""Dense small-scale convex solvers.

One primal-dual interior-point core serves the LP and QP paths; a
log-barrier path-following method handles the log-det objective used by
the offline tightening subproblem.  Everything is dense numpy: problems
in this toolkit stay under a few hundred variables, and a deterministic
in-repo solver keeps results reproducible across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import SolverTolerances


class SolverError(Exception):
    """Base class for solver failures."""


class Unbounded(SolverError):
    """The objective is unbounded below over the feasible set."""


class NumericalFailure(SolverError):
    """The KKT system became too ill-conditioned to make progress."""


STATUS_OPTIMAL = "optimal"
STATUS_INFEASIBLE = "infeasible"
STATUS_MAXITER = "maxiter"


@dataclass
class SolveReport:
    """Outcome of one solve."""

    status: str
    z_star: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    lam_in: np.ndarray | None = None
    y_eq: np.ndarray | None = None
    farkas: np.ndarray | None = None
    dual_objective: float | None = None
    stage_objectives: list = field(default_factory=list)

    @property
    def optimal(self) -> bool:
        return self.status == STATUS_OPTIMAL


@dataclass
class QuadProgram:
    """min 1/2 z'Qz + c'z  s.t.  A_eq z = b_eq,  A_in z <= b_in."""

    Q: np.ndarray
    c: np.ndarray
    A_in: np.ndarray
    b_in: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.c = np.asarray(self.c, dtype=float).ravel()
        self.A_in = np.atleast_2d(np.asarray(self.A_in, dtype=float))
        self.b_in = np.asarray(self.b_in, dtype=float).ravel()
        n = self.c.size
        if self.Q.shape != (n, n):
            raise ValueError("Q shape inconsistent with c")
        if not np.allclose(self.Q, self.Q.T, atol=1e-10):
            raise ValueError("Q must be symmetric")
        if self.A_in.size and self.A_in.shape[1] != n:
            raise ValueError("A_in column count inconsistent with c")
        if self.A_in.shape[0] != self.b_in.size:
            raise ValueError("A_in/b_in row mismatch")
        if self.A_eq is not None:
            self.A_eq = np.atleast_2d(np.asarray(self.A_eq, dtype=float))
            self.b_eq = np.asarray(self.b_eq, dtype=float).ravel()
            if self.A_eq.shape != (self.b_eq.size, n):
                raise ValueError("A_eq/b_eq shape mismatch")

    def check_psd(self, tol: float = 1e-9):
        if self.Q.size:
            w = np.linalg.eigvalsh(0.5 * (self.Q + self.Q.T))
            if w.min() < -tol:
                raise ValueError(f"Q not PSD (min eigenvalue {w.min():.3e})")


def _empty_eq(n):
    return np.zeros((0, n)), np.zeros(0)


def _kkt_residual(Q, c, A_in, b_in, A_eq, b_eq, z, lam, y):
    r_dual = Q @ z + c + A_in.T @ lam + A_eq.T @ y
    r_pri_in = np.maximum(A_in @ z - b_in, 0.0) if A_in.size else np.zeros(0)
    r_pri_eq = A_eq @ z - b_eq if A_eq.size else np.zeros(0)
    comp = lam * (b_in - A_in @ z) if A_in.size else np.zeros(0)
    parts = [r_dual, r_pri_in, r_pri_eq, comp]
    return max(float(np.linalg.norm(p, np.inf)) if p.size else 0.0 for p in parts)


def _ipm_core(Q, c, A_in, b_in, A_eq, b_eq, cfg: SolverTolerances, z0=None):
    """Mehrotra predictor-corrector on the standard QP KKT system.

    Returns (z, lam, y, iters, converged, diverged).
    """
    n = c.size
    m = b_in.size
    me = b_eq.size

    if m == 0:
        # equality-constrained (or unconstrained) QP: one KKT solve
        K = np.block([[Q, A_eq.T], [A_eq, np.zeros((me, me))]])
        rhs = np.concatenate([-c, b_eq])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError as exc:
            raise NumericalFailure("singular KKT system") from exc
        return sol[:n], np.zeros(0), sol[n:], 1, True, False

    z = np.zeros(n) if z0 is None else np.array(z0, dtype=float)
    if me:
        # least-squares correction onto the equality manifold
        corr, *_ = np.linalg.lstsq(A_eq, b_eq - A_eq @ z, rcond=None)
        z = z + corr
    s = b_in - A_in @ z
    shift = max(1.0, -1.5 * s.min()) if s.min() < 1.0 else 0.0
    s = s + shift
    lam = np.ones(m)
    y = np.zeros(me)

    scale = 1.0 + max(
        np.abs(c).max(initial=0.0),
        np.abs(b_in).max(initial=0.0),
        np.abs(b_eq).max(initial=0.0) if me else 0.0,
    )

    old_err = np.seterr(over="ignore", invalid="ignore", divide="ignore")
    try:
        return _ipm_iterate(Q, c, A_in, b_in, A_eq, b_eq, cfg, z, s, lam, y, scale)
    finally:
        np.seterr(**old_err)


def _ipm_iterate(Q, c, A_in, b_in, A_eq, b_eq, cfg, z, s, lam, y, scale):
    n = c.size
    m = b_in.size
    me = b_eq.size
    for it in range(1, cfg.max_iter + 1):
        r_dual = Q @ z + c + A_in.T @ lam + (A_eq.T @ y if me else 0.0)
        r_eq = (A_eq @ z - b_eq) if me else np.zeros(0)
        r_in = A_in @ z + s - b_in
        mu = float(s @ lam) / m

        pri_inf = max(
            float(np.linalg.norm(r_in, np.inf)),
            float(np.linalg.norm(r_eq, np.inf)) if me else 0.0,
        )
        dual_inf = float(np.linalg.norm(r_dual, np.inf))
        if pri_inf <= cfg.feas_tol * scale and dual_inf <= cfg.opt_tol * scale \
                and mu <= cfg.opt_tol * scale:
            return z, lam, y, it, True, False

        # near convergence, an exact active-set solve often finishes the job
        # (degenerate problems can stall the barrier path before tight tols)
        if pri_inf <= 1e-6 * scale and mu <= 1e-4 * scale:
            z_p, lam_p, y_p = _polish(Q, c, A_in, b_in, A_eq, b_eq, z, lam, y)
            if z_p is not z:
                kkt = _kkt_residual(Q, c, A_in, b_in, A_eq, b_eq, z_p, lam_p, y_p)
                if kkt <= 0.1 * cfg.opt_tol * scale:
                    return z_p, lam_p, y_p, it, True, False

        if not np.isfinite(mu) or np.linalg.norm(z) > 1e12 or mu > 1e14 \
                or s.min() < 1e-250:
            return z, lam, y, it, False, True
        # degenerate stall: complementarity collapsed while the dual is
        # stuck; hand the primal iterate to the sign-constrained polish
        if mu < 1e-18 * scale and pri_inf <= cfg.feas_tol * scale:
            return z, lam, y, it, False, False

        d = lam / s
        M = Q + A_in.T @ (d[:, None] * A_in)
        # static regularisation keeps the KKT factorisable when a variable
        # is (momentarily) unconstrained; polish removes the bias afterwards
        reg = 1e-11 * (1.0 + np.abs(M.diagonal()).max())
        M = M + reg * np.eye(n)
        if me:
            K = np.block([[M, A_eq.T], [A_eq, -reg * np.eye(me)]])
        else:
            K = M

        def solve_kkt(rd, re, ri, rc):
            # eliminate (ds, dlam); rc is the complementarity target residual
            rhs1 = -rd - A_in.T @ (d * ri) - A_in.T @ (rc / s)
            if me:
                rhs = np.concatenate([rhs1, -re])
                try:
                    sol = np.linalg.solve(K, rhs)
                except np.linalg.LinAlgError as exc:
                    raise NumericalFailure("singular KKT system") from exc
                dz, dy = sol[:n], sol[n:]
            else:
                try:
                    dz = np.linalg.solve(K, rhs1)
                except np.linalg.LinAlgError as exc:
                    raise NumericalFailure("singular KKT system") from exc
                dy = np.zeros(0)
            ds = -ri - A_in @ dz
            dlam = (rc - lam * ds) / s
            return dz, dy, ds, dlam

        # affine-scaling (predictor) direction
        dz_a, dy_a, ds_a, dlam_a = solve_kkt(r_dual, r_eq, r_in, -s * lam)
        alpha_p = _max_step(s, ds_a)
        alpha_d = _max_step(lam, dlam_a)
        mu_aff = float((s + alpha_p * ds_a) @ (lam + alpha_d * dlam_a)) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.1

        # corrector
        rc = sigma * mu - s * lam - ds_a * dlam_a
        dz, dy, ds, dlam = solve_kkt(r_dual, r_eq, r_in, rc)
        alpha_p = 0.995 * _max_step(s, ds)
        alpha_d = 0.995 * _max_step(lam, dlam)
        alpha = min(alpha_p, alpha_d, 1.0)
        z = z + alpha * dz
        s = s + alpha * ds
        lam = lam + alpha * dlam
        y = y + alpha * dy if me else y

    return z, lam, y, cfg.max_iter, False, False


def _max_step(v, dv):
    neg = dv < 0
    if not neg.any():
        return 1.0
    return min(1.0, float(np.min(-v[neg] / dv[neg])))


def _polish(Q, c, A_in, b_in, A_eq, b_eq, z, lam, y):
    """Refine an IPM solution by solving the KKT system of its active set.

    Returns (z, lam, y) — polished when the refined point passes feasibility
    and dual-sign checks, otherwise the originals.
    """
    n = c.size
    me = b_eq.size
    s = b_in - A_in @ z if b_in.size else np.zeros(0)
    act = np.flatnonzero(lam > np.maximum(s, 1e-14)) if b_in.size else np.array([], int)
    A_act = A_in[act]
    k = act.size
    K = np.block([
        [Q, A_eq.T, A_act.T],
        [A_eq, np.zeros((me, me + k))],
        [A_act, np.zeros((k, me + k))],
    ])
    rhs = np.concatenate([-c, b_eq, b_in[act]])
    sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    if np.linalg.norm(K @ sol - rhs, np.inf) > 1e-9 * (1 + np.abs(rhs).max()):
        return z, lam, y
    z_p = sol[:n]
    y_p = sol[n:n + me]
    lam_act = sol[n + me:]
    if (lam_act < -1e-9).any():
        return z, lam, y
    if b_in.size and (A_in @ z_p - b_in).max() > 1e-9 * (1 + np.abs(b_in).max()):
        return z, lam, y
    lam_p = np.zeros_like(lam)
    lam_p[act] = np.maximum(lam_act, 0.0)
    return z_p, lam_p, y_p


def _lp_polish_nnls(c, A_in, b_in, z, cfg):
    """Degenerate-vertex rescue for inequality-only LPs.

    The active set is taken from slacks, the multipliers from a
    nonnegative least-squares fit of the stationarity condition, and the
    primal is projected onto the supported facets.  Returns (z, lam) or
    None when the certificate is not tight enough.
    """
    from scipy.optimize import nnls

    scale = 1.0 + max(np.abs(c).max(initial=0.0), np.abs(b_in).max(initial=0.0))
    s = b_in - A_in @ z
    order = np.argsort(s)
    tight = int((s <= 1e-5 * scale).sum())
    for k in (max(tight, 1), 8, 16, 32, 64):
        act = order[:min(k, s.size)]
        try:
            lam_act, res = nnls(A_in[act].T, -c)
        except Exception:
            return None
        if res > 1e-8 * (1.0 + np.linalg.norm(c)):
            continue
        sup = act[lam_act > 1e-12]
        z_p = z
        if sup.size:
            A_sup = A_in[sup]
            corr, *_ = np.linalg.lstsq(A_sup, b_in[sup] - A_sup @ z, rcond=None)
            z_p = z + corr
        if (A_in @ z_p - b_in).max() > 1e-8 * scale:
            continue
        lam = np.zeros(b_in.size)
        lam[act] = lam_act
        if abs(c @ z_p + b_in @ lam) > 1e-7 * scale:
            continue
        return z_p, lam
    return None


def _feasibility_certificate(A_in, b_in, A_eq, b_eq, cfg):
    """Elastic feasibility LP.  Returns (t_star, z, farkas_or_None)."""
    n = A_in.shape[1]
    m = A_in.shape[0]
    # variables (z, t): min t  s.t.  A_in z - t <= b_in,  t >= -1
    c = np.zeros(n + 1)
    c[-1] = 1.0
    Ai = np.hstack([A_in, -np.ones((m, 1))])
    Ai = np.vstack([Ai, np.concatenate([np.zeros(n), [-1.0]])])
    bi = np.concatenate([b_in, [1.0]])
    Ae = np.hstack([A_eq, np.zeros((A_eq.shape[0], 1))])
    Q = np.zeros((n + 1, n + 1))
    z, lam, _, _, converged, _ = _ipm_core(Q, c, Ai, bi, Ae, b_eq, cfg)
    if not converged:
        raise NumericalFailure("feasibility diagnosis did not converge")
    t_star = z[-1]
    farkas = None
    if t_star > cfg.feas_tol:
        y = lam[:m].copy()
        nrm = y.sum()
        if nrm > 0:
            farkas = y / nrm
    return t_star, z[:n], farkas


def _recession_unbounded(c, A_in, A_eq, cfg):
    """Certify unboundedness: a recession direction with negative cost."""
    n = c.size
    box = np.vstack([np.eye(n), -np.eye(n)])
    Ai = np.vstack([A_in, box]) if A_in.size else box
    bi = np.concatenate([np.zeros(A_in.shape[0]), np.ones(2 * n)])
    Q = np.zeros((n, n))
    Ae = A_eq if A_eq.size else np.zeros((0, n))
    be = np.zeros(Ae.shape[0])
    z, _, _, _, converged, _ = _ipm_core(Q, c, Ai, bi, Ae, be, cfg)
    return converged and c @ z < -1e3 * cfg.opt_tol


def solve_lp(c, A_in, b_in, A_eq=None, b_eq=None,
             config: SolverTolerances | None = None) -> SolveReport:
    """Solve min c'z s.t. A_in z <= b_in (and optional equalities).

    Infeasible problems come back with status "infeasible" and a Farkas
    certificate; unbounded problems raise :class:`Unbounded`.
    """
    cfg = config or SolverTolerances()
    c = np.asarray(c, dtype=float).ravel()
    n = c.size
    A_in = np.atleast_2d(np.asarray(A_in, dtype=float)) if A_in is not None \
        else np.zeros((0, n))
    b_in = np.asarray(b_in, dtype=float).ravel() if b_in is not None else np.zeros(0)
    if A_eq is None:
        A_eq, b_eq = _empty_eq(n)
    else:
        A_eq = np.atleast_2d(np.asarray(A_eq, dtype=float))
        b_eq = np.asarray(b_eq, dtype=float).ravel()
    if not (np.isfinite(c).all() and np.isfinite(A_in).all() and np.isfinite(b_in).all()):
        raise ValueError("LP data must be finite")

    # row equilibration: facet sets from invariant-set iterations carry rows
    # spanning orders of magnitude, which stalls the barrier path
    if A_in.size:
        row_scale = np.linalg.norm(A_in, axis=1)
        row_scale[row_scale < 1e-300] = 1.0
        A_s = A_in / row_scale[:, None]
        b_s = b_in / row_scale
    else:
        row_scale = np.ones(0)
        A_s, b_s = A_in, b_in

    Q = np.zeros((n, n))
    try:
        z, lam, y, iters, converged, diverged = _ipm_core(
            Q, c, A_s, b_s, A_eq, b_eq, cfg)
    except NumericalFailure:
        z, lam, y, iters, converged, diverged = None, None, None, 0, False, True
    if converged:
        z, lam, y = _polish(Q, c, A_s, b_s, A_eq, b_eq, z, lam, y)
        lam_orig = lam / row_scale if lam.size else lam
        kkt = _kkt_residual(Q, c, A_in, b_in, A_eq, b_eq, z, lam_orig, y)
        gap = float(lam_orig @ (b_in - A_in @ z)) if b_in.size else 0.0
        return SolveReport(STATUS_OPTIMAL, z, float(c @ z), kkt, iters,
                           lam_in=lam_orig, y_eq=y,
                           dual_objective=float(c @ z) - gap)

    # degenerate-vertex rescue before declaring failure
    if z is not None and not b_eq.size:
        rescue = _lp_polish_nnls(c, A_s, b_s, z, cfg)
        if rescue is not None:
            z_p, lam_p = rescue
            lam_orig = lam_p / row_scale if lam_p.size else lam_p
            kkt = _kkt_residual(Q, c, A_in, b_in, A_eq, b_eq, z_p, lam_orig,
                                np.zeros(0))
            if kkt <= 1e-6 * (1.0 + np.abs(b_in).max(initial=0.0)):
                gap = float(lam_orig @ (b_in - A_in @ z_p)) if b_in.size else 0.0
                return SolveReport(STATUS_OPTIMAL, z_p, float(c @ z_p), kkt,
                                   iters, lam_in=lam_orig, y_eq=np.zeros(0),
                                   dual_objective=float(c @ z_p) - gap)

    # diagnose: infeasible or unbounded
    t_star, z_feas, farkas = _feasibility_certificate(A_s, b_s, A_eq, b_eq, cfg)
    if t_star > cfg.feas_tol:
        if farkas is not None:
            farkas = farkas / row_scale
            total = farkas.sum()
            if total > 0:
                farkas = farkas / total
        return SolveReport(STATUS_INFEASIBLE, z_feas, np.nan, np.nan, iters,
                           farkas=farkas)
    if _recession_unbounded(c, A_s, A_eq, cfg):
        raise Unbounded("LP objective unbounded below")
    if diverged or z is None:
        raise NumericalFailure("LP iterates diverged without certificate")
    return SolveReport(STATUS_MAXITER, z, float(c @ z), np.nan, iters)


def solve_qp(prob: QuadProgram, warm_start=None,
             config: SolverTolerances | None = None) -> SolveReport:
    """Solve a convex QP; Q must be PSD.

    A warm start only seeds the primal iterate: the reported optimum is
    solver-path independent for strictly convex problems.
    """
    cfg = config or SolverTolerances()
    prob.check_psd()
    A_eq = prob.A_eq if prob.A_eq is not None else np.zeros((0, prob.c.size))
    b_eq = prob.b_eq if prob.b_eq is not None else np.zeros(0)
    try:
        z, lam, y, iters, converged, diverged = _ipm_core(
            prob.Q, prob.c, prob.A_in, prob.b_in, A_eq, b_eq, cfg, z0=warm_start)
    except NumericalFailure:
        z, lam, y, iters, converged, diverged = None, None, None, 0, False, True
    if converged:
        z, lam, y = _polish(prob.Q, prob.c, prob.A_in, prob.b_in, A_eq, b_eq, z, lam, y)
        obj = float(0.5 * z @ prob.Q @ z + prob.c @ z)
        kkt = _kkt_residual(prob.Q, prob.c, prob.A_in, prob.b_in, A_eq, b_eq,
                            z, lam, y)
        gap = float(lam @ (prob.b_in - prob.A_in @ z)) if prob.b_in.size else 0.0
        return SolveReport(STATUS_OPTIMAL, z, obj, kkt, iters, lam_in=lam,
                           y_eq=y, dual_objective=obj - gap)
    t_star, z_feas, farkas = _feasibility_certificate(
        prob.A_in, prob.b_in, A_eq, b_eq, cfg)
    if t_star > cfg.feas_tol:
        return SolveReport(STATUS_INFEASIBLE, z_feas, np.nan, np.nan, iters,
                           farkas=farkas)
    if diverged or z is None:
        raise NumericalFailure("QP iterates diverged on a feasible problem")
    obj = float(0.5 * z @ prob.Q @ z + prob.c @ z)
    return SolveReport(STATUS_MAXITER, z, obj, np.nan, iters)


@dataclass
class LogDetProgram:
    """min c'x - sum_{i in log_idx} log(x_i)  s.t.  A_eq x = b_eq, A_in x <= b_in.

    The log indices carry the volume objective (diagonal scaling factors);
    the linear part carries epigraph variables for max-norm regularisers.
    """

    c: np.ndarray
    log_idx: np.ndarray
    A_in: np.ndarray
    b_in: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    x0: np.ndarray | None = None
    floor: float = 1e-9

    def objective(self, x) -> float:
        val = float(self.c @ x)
        if self.log_idx.size:
            val -= float(np.sum(np.log(x[self.log_idx])))
        return val


def _strictly_feasible_start(p: LogDetProgram, cfg) -> np.ndarray:
    n = p.c.size
    A_eq = p.A_eq if p.A_eq is not None else np.zeros((0, n))
    b_eq = p.b_eq if p.b_eq is not None else np.zeros(0)
    if p.x0 is not None:
        x = np.array(p.x0, dtype=float)
        slack_ok = (p.b_in - p.A_in @ x).min() > 1e-10 if p.b_in.size else True
        log_ok = x[p.log_idx].min() > p.floor if p.log_idx.size else True
        # small equality drift is fine: the Newton iteration corrects it
        eq_ok = (np.abs(A_eq @ x - b_eq).max() < 1e-7) if b_eq.size else True
        if slack_ok and log_ok and eq_ok:
            return x
    # phase 1: push the point strictly inside the inequalities
    m = p.A_in.shape[0]
    c1 = np.zeros(n + 1)
    c1[-1] = 1.0
    Ai = np.hstack([p.A_in, -np.ones((m, 1))])
    Ai = np.vstack([Ai, np.concatenate([np.zeros(n), [-1.0]])])
    bi = np.concatenate([p.b_in, [1.0]])
    Ae = np.hstack([A_eq, np.zeros((A_eq.shape[0], 1))]) if A_eq.size else None
    rep = solve_lp(c1, Ai, bi, Ae, b_eq if A_eq.size else None, cfg)
    if rep.status != STATUS_OPTIMAL or rep.z_star[-1] > -1e-10:
        return None
    return rep.z_star[:n]


def solve_logdet(p: LogDetProgram, config: SolverTolerances | None = None,
                 t0: float = 1.0, t_factor: float = 10.0) -> SolveReport:
    """Log-barrier path-following for the log-det subproblem."""
    cfg = config or SolverTolerances()
    n = p.c.size
    p.log_idx = np.asarray(p.log_idx, dtype=int)
    A_eq = p.A_eq if p.A_eq is not None else np.zeros((0, n))
    b_eq = p.b_eq if p.b_eq is not None else np.zeros(0)
    me = A_eq.shape[0]
    m = p.A_in.shape[0]

    x = _strictly_feasible_start(p, cfg)
    if x is None:
        return SolveReport(STATUS_INFEASIBLE, np.full(n, np.nan), np.nan,
                           np.nan, 0)
    if p.log_idx.size:
        x[p.log_idx] = np.maximum(x[p.log_idx], 10 * p.floor)

    mask = np.zeros(n, dtype=bool)
    mask[p.log_idx] = True
    stage_objectives = []
    total_newton = 0
    t = t0
    max_stages = 60

    nu = np.zeros(me)
    eq_tol = 1e-10 * (1.0 + (np.abs(b_eq).max() if me else 0.0))

    def barrier_grad(xx):
        s = p.b_in - p.A_in @ xx
        g = t * p.c.copy()
        if p.log_idx.size:
            g[mask] -= t / xx[mask]
        g += p.A_in.T @ (1.0 / s)
        return g

    def barrier_grad_hess(xx):
        s = p.b_in - p.A_in @ xx
        g = t * p.c.copy()
        hd = np.zeros(n)
        if p.log_idx.size:
            g[mask] -= t / xx[mask]
            hd[mask] = t / xx[mask] ** 2
        g += p.A_in.T @ (1.0 / s)
        H = p.A_in.T @ ((1.0 / s ** 2)[:, None] * p.A_in)
        H[np.diag_indices_from(H)] += hd + 1e-12
        return g, H

    def in_domain(xx):
        if p.b_in.size and (p.b_in - p.A_in @ xx).min() <= 0:
            return False
        if p.log_idx.size and xx[mask].min() <= 0:
            return False
        return True

    def phi(xx):
        val = t * p.c @ xx - np.sum(np.log(p.b_in - p.A_in @ xx))
        if p.log_idx.size:
            val -= t * np.sum(np.log(xx[mask]))
        return val

    for _stage in range(max_stages):
        for _ in range(100):
            total_newton += 1
            grad, H = barrier_grad_hess(x)
            if me:
                # infeasible-start Newton (Boyd 10.3): corrects drift off
                # the equality manifold; line search on the residual norm
                r_dual = grad + A_eq.T @ nu
                r_pri = A_eq @ x - b_eq
                K = np.block([[H, A_eq.T], [A_eq, np.zeros((me, me))]])
                rhs = -np.concatenate([r_dual, r_pri])
                try:
                    sol = np.linalg.solve(K, rhs)
                except np.linalg.LinAlgError:
                    sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
                dx, dnu = sol[:n], sol[n:]
                # scale-free stopping: Newton decrement plus primal drift
                # (lambda^2/2 well below the self-concordance jump threshold)
                lam2 = float(dx @ (H @ dx))
                if np.abs(r_pri).max() <= eq_tol and lam2 / 2 <= 1e-6:
                    break
                res0 = np.linalg.norm(np.concatenate([r_dual, r_pri]))
                step = _domain_max_step(p, mask, x, dx)
                accepted = False
                while step > 1e-14:
                    x_t = x + step * dx
                    nu_t = nu + step * dnu
                    if in_domain(x_t):
                        res_t = np.linalg.norm(np.concatenate(
                            [barrier_grad(x_t) + A_eq.T @ nu_t,
                             A_eq @ x_t - b_eq]))
                        if res_t <= (1.0 - 1e-4 * step) * res0:
                            x, nu = x_t, nu_t
                            accepted = True
                            break
                    step *= 0.5
                if not accepted:
                    break
            else:
                try:
                    dx = np.linalg.solve(H, -grad)
                except np.linalg.LinAlgError:
                    dx, *_ = np.linalg.lstsq(H, -grad, rcond=None)
                decrement = float(-grad @ dx)
                if decrement / 2 <= 1e-6:
                    break
                step = _domain_max_step(p, mask, x, dx)
                f0 = phi(x)
                while step > 1e-14 and (not in_domain(x + step * dx)
                                        or phi(x + step * dx)
                                        > f0 - 1e-4 * step * decrement):
                    step *= 0.5
                if step <= 1e-14:
                    break
                x = x + step * dx
        stage_objectives.append(p.objective(x))
        if (m + p.log_idx.size) / t <= cfg.opt_tol:
            lam = 1.0 / (t * (p.b_in - p.A_in @ x))
            kkt = float(np.linalg.norm(
                t_gradient(p, x, lam, A_eq, b_eq), np.inf))
            return SolveReport(STATUS_OPTIMAL, x, p.objective(x), kkt,
                               total_newton, lam_in=lam,
                               stage_objectives=stage_objectives)
        t *= t_factor
    return SolveReport(STATUS_MAXITER, x, p.objective(x), np.nan, total_newton,
                       stage_objectives=stage_objectives)


def _domain_max_step(p: LogDetProgram, mask, x, dx):
    """Largest step keeping barrier arguments strictly positive (x0.99)."""
    step = 1.0
    if p.b_in.size:
        s = p.b_in - p.A_in @ x
        ds = p.A_in @ dx
        pos = ds > 0
        if pos.any():
            step = min(step, 0.99 * float(np.min(s[pos] / ds[pos])))
    if p.log_idx.size:
        dneg = dx[mask] < 0
        if dneg.any():
            step = min(step, 0.99 * float(
                np.min(-x[mask][dneg] / dx[mask][dneg])))
    return step


def t_gradient(p: LogDetProgram, x, lam, A_eq, b_eq):
    """Stationarity residual of the true problem at (x, lam)."""
    g = p.c.copy()
    if p.log_idx.size:
        g[p.log_idx] -= 1.0 / x[p.log_idx]
    g = g + p.A_in.T @ lam
    if A_eq.size:
        # project out the equality-constraint component
        At = A_eq.T
        coef, *_ = np.linalg.lstsq(At, g, rcond=None)
        g = g - At @ coef
    return g
