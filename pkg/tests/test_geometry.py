"""Polytope algebra tests: trivial pins, sampling oracles, set properties."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from airpath_mpc.geometry import (
    EmptySet,
    Hypercube,
    Polytope,
    UnboundedDirection,
    contains_polytope,
    is_empty,
    max_invariant_set,
    normalize,
    pontryagin_difference,
    sample_box,
    support,
    vertices_2d,
)


def unit_box(n):
    return Polytope.from_bounds(-np.ones(n), np.ones(n))


def random_full_poly(rng, dim, extra=6):
    """Box facets plus random cuts that keep a ball around the origin."""
    base = unit_box(dim)
    G = rng.normal(size=(extra, dim))
    G /= np.linalg.norm(G, axis=1, keepdims=True)
    g = rng.uniform(0.55, 1.4, size=extra)
    return Polytope(np.vstack([base.H, G]), np.concatenate([base.b, g]),
                    bounded=True)


class TestSupport:
    def test_box_axis(self):
        assert support(unit_box(2), [1.0, 0.0]) == pytest.approx(1.0, abs=1e-8)

    def test_box_diagonal(self):
        assert support(unit_box(2), [1.0, 1.0]) == pytest.approx(2.0, abs=1e-8)

    def test_matches_vertex_enumeration_2d(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            P = random_full_poly(rng, 2)
            d = rng.normal(size=2)
            verts = vertices_2d(P)
            expect = (verts @ d).max()
            assert support(P, d) == pytest.approx(expect, abs=1e-8)

    def test_unbounded_direction_raises(self):
        P = Polytope([[1.0, 0.0]], [1.0])
        with pytest.raises(UnboundedDirection):
            support(P, [0.0, 1.0])

    def test_empty_raises(self):
        P = Polytope([[1.0], [-1.0]], [1.0, -2.0])
        with pytest.raises(EmptySet):
            support(P, [1.0])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_subadditive(self, seed):
        rng = np.random.default_rng(seed)
        P = random_full_poly(rng, 3)
        d1, d2 = rng.normal(size=3), rng.normal(size=3)
        assert support(P, d1 + d2) <= support(P, d1) + support(P, d2) + 1e-7


class TestEmptiness:
    def test_contradiction(self):
        assert is_empty(Polytope([[1.0], [-1.0]], [1.0, -2.0]))

    def test_unit_box(self):
        assert not is_empty(unit_box(3))

    def test_boundary_single_point(self):
        # tighten exactly to the facet slack: {1 <= x <= 1} keeps one point
        P = Polytope([[1.0], [-1.0]], [1.0, -1.0])
        assert not is_empty(P)


class TestPontryagin:
    def test_box_minus_box(self):
        P = unit_box(2)
        Q = Hypercube.zero_centered([0.25, 0.25])
        R = pontryagin_difference(P, Q)
        np.testing.assert_allclose(R.b, 0.75 * np.ones(4), atol=1e-12)

    def test_minus_singleton_is_identity(self):
        P = unit_box(3)
        Q = Hypercube.zero_centered(np.zeros(3))
        M = np.eye(3)
        R = pontryagin_difference(P, Q, M)
        np.testing.assert_allclose(R.b, P.b, atol=1e-12)

    def test_polytope_subtrahend_matches_hypercube(self):
        rng = np.random.default_rng(2)
        P = random_full_poly(rng, 3)
        Q = Hypercube(rng.normal(size=2) * 0.05, [0.1, 0.2])
        M = rng.normal(size=(3, 2)) * 0.4
        R1 = pontryagin_difference(P, Q, M)
        R2 = pontryagin_difference(P, Q.as_polytope(), M)
        np.testing.assert_allclose(R1.b, R2.b, atol=1e-8)

    def test_sampling_oracle_4d(self):
        rng = np.random.default_rng(3)
        for trial in range(6):
            P = random_full_poly(rng, 4, extra=4)
            Q = Hypercube.zero_centered(rng.uniform(0.02, 0.12, size=4))
            # nilpotent-chain style map
            M = np.triu(rng.normal(size=(4, 4)) * 0.3, k=1) + np.eye(4)
            R = pontryagin_difference(P, Q, M)
            assert not is_empty(R)
            xs = sample_box(R, rng, 60)
            qs = Q.center + rng.uniform(-1, 1, size=(10_000, 4)) * Q.half_width
            qs = np.vstack([qs, Q.vertices()])
            for x in xs[:12]:
                worst = (P.H @ (x[:, None] + M @ qs.T)).max(axis=1) - P.b
                assert worst.max() <= 1e-9
            # outward-pushed boundary points must admit a violating q
            for _ in range(4):
                d = rng.normal(size=4)
                rep_x = _argmax_support(R, d)
                row = int(np.argmin(R.b - R.H @ rep_x))
                h = R.H[row] / np.linalg.norm(R.H[row])
                x_out = rep_x + 1e-3 * h
                qworst = Q.center + np.sign(M.T @ R.H[row]) * Q.half_width
                assert (P.H @ (x_out + M @ qworst) - P.b).max() > 0

    def test_result_subset_of_p(self):
        rng = np.random.default_rng(4)
        P = random_full_poly(rng, 3)
        Q = Hypercube.zero_centered([0.1, 0.1, 0.1])
        R = pontryagin_difference(P, Q)
        for x in sample_box(R, rng, 50):
            assert P.contains(x, tol=1e-9)

    def test_monotone_in_subtrahend(self):
        rng = np.random.default_rng(5)
        P = random_full_poly(rng, 3)
        Q1 = Hypercube.zero_centered([0.05, 0.05, 0.05])
        Q2 = Hypercube.zero_centered([0.15, 0.1, 0.2])  # Q1 subset of Q2
        R1 = pontryagin_difference(P, Q1)
        R2 = pontryagin_difference(P, Q2)
        assert contains_polytope(R1, R2, tol=1e-9)
        for x in sample_box(R2, rng, 40):
            assert R1.contains(x, tol=1e-9)


def _argmax_support(P, d):
    from airpath_mpc.solvers import solve_lp

    rep = solve_lp(-np.asarray(d, float), P.H, P.b)
    assert rep.optimal
    return rep.z_star


class TestHypercube:
    def test_as_polytope_facet_count(self):
        hc = Hypercube([1.0, -2.0, 0.5], [0.5, 1.0, 0.0])
        P = hc.as_polytope()
        assert P.n_facets == 6

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_support_formula(self, seed):
        rng = np.random.default_rng(seed)
        c = rng.normal(size=3)
        hw = rng.uniform(0, 2, size=3)
        hc = Hypercube(c, hw)
        d = rng.normal(size=3)
        expect = c @ d + np.abs(d) @ hw
        assert support(hc.as_polytope(), d) == pytest.approx(expect, abs=1e-8)
        assert hc.support(d) == pytest.approx(expect, abs=1e-12)

    def test_negative_half_width_rejected(self):
        with pytest.raises(ValueError):
            Hypercube([0.0], [-0.1])


class TestInvariantSet:
    def test_nilpotent_single_step(self):
        X = unit_box(2)
        O = max_invariant_set([np.zeros((2, 2))], X)
        assert contains_polytope(O, X) and contains_polytope(X, O)

    def test_contraction_keeps_box(self):
        X = unit_box(2)
        O = max_invariant_set([0.5 * np.eye(2)], X)
        assert contains_polytope(O, X, tol=1e-9)
        assert contains_polytope(X, O, tol=1e-9)

    def test_two_rotation_contractions_sampled(self):
        th1, th2 = 0.7, -0.4
        rot = lambda t, r: r * np.array(
            [[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
        A1, A2 = rot(th1, 0.9), rot(th2, 0.85)
        X = Polytope.from_bounds([-1.0, -0.5], [1.0, 1.5])
        O = max_invariant_set([A1, A2], X)
        rng = np.random.default_rng(8)
        pts = sample_box(O, rng, 10_000)
        for A in (A1, A2):
            mapped = pts @ A.T
            assert ((mapped @ O.H.T) <= O.b + 1e-9).all()

    def test_unstable_model_rejected(self):
        from airpath_mpc.geometry import UnstableModel

        with pytest.raises(UnstableModel):
            max_invariant_set([1.1 * np.eye(2)], unit_box(2))


class TestNormalize:
    def test_drops_redundant_row(self):
        P = Polytope([[1.0], [-1.0], [1.0]], [1.0, 1.0, 5.0])
        N = normalize(P)
        assert N.n_facets == 2

    def test_preserves_set(self):
        rng = np.random.default_rng(9)
        P = random_full_poly(rng, 2, extra=10)
        N = normalize(P)
        assert contains_polytope(P, N) and contains_polytope(N, P)


def test_serialization_roundtrip():
    P = unit_box(2)
    Q = Polytope.from_dict(P.to_dict())
    np.testing.assert_array_equal(P.H, Q.H)
    np.testing.assert_array_equal(P.b, Q.b)
