"""Solver tests: trivial pins, enumeration oracles, duality properties."""

import itertools

import numpy as np
import pytest

from airpath_mpc.solvers import (
    LogDetProgram,
    QuadProgram,
    SolverTolerances,
    Unbounded,
    solve_logdet,
    solve_lp,
    solve_qp,
)


def lp_vertex_oracle(c, A, b):
    """Enumerate basic solutions of {Az <= b} and minimise c'z over them."""
    m, n = A.shape
    best = None
    for rows in itertools.combinations(range(m), n):
        As = A[list(rows)]
        if abs(np.linalg.det(As)) < 1e-10:
            continue
        v = np.linalg.solve(As, b[list(rows)])
        if (A @ v <= b + 1e-9).all():
            val = c @ v
            if best is None or val < best[0]:
                best = (val, v)
    return best


def qp_active_set_oracle(Q, c, A, b):
    """Brute-force KKT over all active sets of a strictly convex QP."""
    m, n = A.shape
    best = None
    for k in range(0, min(m, n) + 1):
        for rows in itertools.combinations(range(m), k):
            idx = list(rows)
            As = A[idx]
            K = np.block([[Q, As.T], [As, np.zeros((k, k))]])
            rhs = np.concatenate([-c, b[idx]])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            z, lam = sol[:n], sol[n:]
            if (A @ z <= b + 1e-8).all() and (lam >= -1e-8).all():
                val = 0.5 * z @ Q @ z + c @ z
                if best is None or val < best[0] - 1e-12:
                    best = (val, z)
    return best


class TestLp:
    def test_scalar_max(self):
        rep = solve_lp([-1.0], [[1.0]], [3.0])
        assert rep.optimal
        assert rep.z_star[0] == pytest.approx(3.0, abs=1e-8)

    def test_infeasible_with_farkas(self):
        rep = solve_lp([1.0], [[1.0], [-1.0]], [1.0, -2.0])
        assert rep.status == "infeasible"
        y = rep.farkas
        assert y is not None and (y >= -1e-12).all()
        A = np.array([[1.0], [-1.0]])
        b = np.array([1.0, -2.0])
        assert abs(y @ A) < 1e-6
        assert y @ b < -1e-8

    def test_unbounded_raises(self):
        with pytest.raises(Unbounded):
            solve_lp([-1.0, 0.0], [[0.0, 1.0], [0.0, -1.0]], [1.0, 1.0])

    def test_random_lps_match_vertex_enumeration(self):
        rng = np.random.default_rng(7)
        checked = 0
        while checked < 25:
            n, m = 5, 12
            A = rng.normal(size=(m, n))
            # keep the feasible set bounded with a box
            A = np.vstack([A, np.eye(n), -np.eye(n)])
            z0 = rng.normal(size=n) * 0.3
            b = A @ z0 + rng.uniform(0.2, 1.5, size=A.shape[0])
            c = rng.normal(size=n)
            oracle = lp_vertex_oracle(c, A, b)
            if oracle is None:
                continue
            rep = solve_lp(c, A, b)
            assert rep.optimal
            assert rep.objective == pytest.approx(oracle[0], abs=1e-6)
            checked += 1


class TestQp:
    def test_scalar_bound(self):
        p = QuadProgram(Q=[[2.0]], c=[0.0], A_in=[[-1.0]], b_in=[-1.0])
        rep = solve_qp(p)
        assert rep.optimal
        assert rep.z_star[0] == pytest.approx(1.0, abs=1e-7)
        assert rep.objective == pytest.approx(1.0, abs=1e-7)

    def test_simplex_symmetry(self):
        p = QuadProgram(
            Q=2 * np.eye(3), c=np.zeros(3),
            A_in=np.zeros((0, 3)), b_in=np.zeros(0),
            A_eq=np.ones((1, 3)), b_eq=[1.0])
        rep = solve_qp(p)
        assert rep.optimal
        np.testing.assert_allclose(rep.z_star, np.ones(3) / 3, atol=1e-8)

    def test_infeasible_status(self):
        p = QuadProgram(Q=[[2.0]], c=[0.0],
                        A_in=[[1.0], [-1.0]], b_in=[1.0, -2.0])
        rep = solve_qp(p)
        assert rep.status == "infeasible"

    @staticmethod
    def _random_qp(rng, n, m):
        M = rng.normal(size=(n, n))
        Q = M @ M.T + 0.3 * np.eye(n)
        c = rng.normal(size=n)
        A = rng.normal(size=(m, n))
        z0 = rng.normal(size=n) * 0.2
        b = A @ z0 + rng.uniform(0.1, 2.0, size=m)
        return Q, c, A, b

    def test_100_random_qps_match_active_set_oracle(self):
        rng = np.random.default_rng(11)
        for k in range(100):
            n = int(rng.integers(2, 9))
            m = int(rng.integers(max(2, n // 2), n + 7))
            Q, c, A, b = self._random_qp(rng, n, m)
            oracle = qp_active_set_oracle(Q, c, A, b)
            assert oracle is not None
            rep = solve_qp(QuadProgram(Q, c, A, b))
            assert rep.optimal, f"case {k} not optimal"
            assert rep.kkt_residual <= 1e-6 * (1 + abs(rep.objective))
            np.testing.assert_allclose(rep.z_star, oracle[1], atol=1e-6)

    def test_strong_duality_gap(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            Q, c, A, b = self._random_qp(rng, 6, 10)
            rep = solve_qp(QuadProgram(Q, c, A, b))
            assert rep.optimal
            assert abs(rep.objective - rep.dual_objective) <= 1e-6 * (
                1 + abs(rep.objective))

    def test_warm_start_agrees_with_cold(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            Q, c, A, b = self._random_qp(rng, 5, 9)
            prob = QuadProgram(Q, c, A, b)
            cold = solve_qp(prob)
            warm = solve_qp(prob, warm_start=cold.z_star + rng.normal(size=5) * 0.05)
            assert cold.optimal and warm.optimal
            np.testing.assert_allclose(cold.z_star, warm.z_star, atol=1e-6)

    def test_rejects_indefinite_q(self):
        p = QuadProgram(Q=[[-1.0]], c=[0.0], A_in=[[1.0]], b_in=[1.0])
        with pytest.raises(ValueError):
            solve_qp(p)


class TestLogDet:
    def test_monotone_objective_meets_bound(self):
        p = LogDetProgram(
            c=np.zeros(1), log_idx=np.array([0]),
            A_in=np.array([[1.0]]), b_in=np.array([2.0]),
            x0=np.array([0.5]))
        rep = solve_logdet(p)
        assert rep.optimal
        assert rep.z_star[0] == pytest.approx(2.0, abs=1e-5)
        diffs = np.diff(rep.stage_objectives)
        assert (diffs <= 1e-9).all()

    def test_symmetric_split(self):
        p = LogDetProgram(
            c=np.zeros(2), log_idx=np.array([0, 1]),
            A_in=np.array([[1.0, 1.0]]), b_in=np.array([2.0]),
            x0=np.array([0.4, 0.4]))
        rep = solve_logdet(p)
        assert rep.optimal
        np.testing.assert_allclose(rep.z_star, [1.0, 1.0], atol=1e-5)

    def test_two_variable_grid_search(self):
        # margins sigma = 2 a1 + a2 <= 1.2 and a1 + 3 a2 <= 1.5, maximise log vol
        A = np.array([[2.0, 1.0], [1.0, 3.0]])
        b = np.array([1.2, 1.5])
        p = LogDetProgram(c=np.zeros(2), log_idx=np.array([0, 1]),
                          A_in=A, b_in=b, x0=np.array([0.1, 0.1]))
        rep = solve_logdet(p)
        assert rep.optimal
        grid = np.linspace(1e-4, 1.2, 6001)
        best = None
        for a1 in grid:
            a2 = np.minimum(1.2 - 2 * a1, (1.5 - a1) / 3.0)
            if a2 <= 0:
                continue
            val = np.log(a1) + np.log(a2)
            if best is None or val > best[0]:
                best = (val, a1, a2)
        assert rep.z_star[0] == pytest.approx(best[1], abs=1e-3)
        assert rep.z_star[1] == pytest.approx(best[2], abs=1e-3)

    def test_infeasible_when_no_positive_point(self):
        p = LogDetProgram(c=np.zeros(1), log_idx=np.array([0]),
                          A_in=np.array([[1.0], [-1.0]]),
                          b_in=np.array([-1.0, 0.5]))
        rep = solve_logdet(p)
        assert rep.status == "infeasible"


def test_solver_config_tolerances_default():
    cfg = SolverTolerances()
    assert cfg.feas_tol == 1e-7
    assert cfg.opt_tol == 1e-6
    assert cfg.max_iter == 200
