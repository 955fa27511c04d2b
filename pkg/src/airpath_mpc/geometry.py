"""H-representation polytope algebra.

Sets are stored as {x : Hx <= b}.  Support functions run on the in-repo
LP solver; the Pontryagin difference is computed facet-wise from support
values, which is exact when subtracting a compact set from an
H-representation.  Redundant facets are kept unless `normalize` is called
explicitly, so facet ordering stays predictable for margin bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .solvers import STATUS_INFEASIBLE, STATUS_OPTIMAL, SolverTolerances, Unbounded, solve_lp


class GeometryError(Exception):
    pass


class EmptySet(GeometryError):
    """Operation on an empty polytope that requires a point."""


class UnboundedDirection(GeometryError):
    """Support function requested along a direction of recession."""


class DimensionMismatch(GeometryError):
    pass


class NotConverged(GeometryError):
    pass


class UnstableModel(GeometryError):
    pass


_LP_CFG = SolverTolerances(feas_tol=1e-9, opt_tol=1e-9, max_iter=200)


@dataclass(frozen=True)
class Polytope:
    """Convex polyhedron {x : Hx <= b}."""

    H: np.ndarray
    b: np.ndarray
    bounded: bool = False

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        b = np.asarray(self.b, dtype=float).ravel()
        if H.shape[0] < 1:
            raise ValueError("polytope needs at least one facet")
        if H.shape[0] != b.size:
            raise ValueError("H row count must match b length")
        if (np.abs(H).sum(axis=1) == 0).any():
            raise ValueError("zero rows in H are not allowed")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    @property
    def n_facets(self) -> int:
        return self.H.shape[0]

    def contains(self, x, tol: float = 1e-9) -> bool:
        return bool((self.H @ np.asarray(x, dtype=float) <= self.b + tol).all())

    def violation(self, x) -> float:
        """Largest constraint violation at x (<= 0 means inside)."""
        return float((self.H @ np.asarray(x, dtype=float) - self.b).max())

    def to_dict(self) -> dict:
        return {"H": self.H.tolist(), "b": self.b.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "Polytope":
        return cls(np.asarray(data["H"], dtype=float),
                   np.asarray(data["b"], dtype=float))

    @classmethod
    def from_bounds(cls, lower, upper) -> "Polytope":
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        n = lower.size
        if (lower > upper).any():
            raise ValueError("lower bound exceeds upper bound")
        H = np.vstack([np.eye(n), -np.eye(n)])
        return cls(H, np.concatenate([upper, -lower]), bounded=True)


@dataclass(frozen=True)
class Hypercube:
    """Axis-aligned box given by center and per-axis half widths."""

    center: np.ndarray
    half_width: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).ravel()
        hw = np.asarray(self.half_width, dtype=float).ravel()
        if c.size != hw.size:
            raise ValueError("center/half_width size mismatch")
        if (hw < 0).any():
            raise ValueError("half widths must be nonnegative")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_width", hw)

    @property
    def dim(self) -> int:
        return self.center.size

    @classmethod
    def zero_centered(cls, half_width) -> "Hypercube":
        hw = np.asarray(half_width, dtype=float).ravel()
        return cls(np.zeros(hw.size), hw)

    def as_polytope(self) -> Polytope:
        n = self.dim
        H = np.vstack([np.eye(n), -np.eye(n)])
        b = np.concatenate([self.center + self.half_width,
                            -(self.center - self.half_width)])
        return Polytope(H, b, bounded=True)

    def support(self, d) -> float:
        d = np.asarray(d, dtype=float).ravel()
        return float(d @ self.center + np.abs(d) @ self.half_width)

    def contains(self, x, tol: float = 1e-12) -> bool:
        return bool((np.abs(np.asarray(x, dtype=float) - self.center)
                     <= self.half_width + tol).all())

    def vertices(self) -> np.ndarray:
        n = self.dim
        signs = np.array(np.meshgrid(*[[-1.0, 1.0]] * n)).T.reshape(-1, n)
        return self.center + signs * self.half_width

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(),
                "half_width": self.half_width.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "Hypercube":
        return cls(np.asarray(data["center"], dtype=float),
                   np.asarray(data["half_width"], dtype=float))


def box_support(lower, upper, d) -> float:
    """Support of the box [lower, upper] along d."""
    d = np.asarray(d, dtype=float)
    return float(np.sum(np.maximum(d * upper, d * lower)))


def support(P: Polytope, d) -> float:
    """max_{x in P} d'x via LP.

    Raises UnboundedDirection along a recession direction and EmptySet
    when P is empty.
    """
    d = np.asarray(d, dtype=float).ravel()
    if d.size != P.dim:
        raise DimensionMismatch("direction dimension mismatch")
    try:
        rep = solve_lp(-d, P.H, P.b, config=_LP_CFG)
    except Unbounded as exc:
        raise UnboundedDirection(
            "support unbounded along requested direction") from exc
    if rep.status == STATUS_INFEASIBLE:
        raise EmptySet("support of an empty polytope")
    if rep.status != STATUS_OPTIMAL:
        raise GeometryError(f"support LP ended with status {rep.status}")
    return float(-rep.objective)


def is_empty(P: Polytope, tol: float = 1e-8) -> bool:
    """True iff {x : Hx <= b} has no point (elastic feasibility LP)."""
    m, n = P.H.shape
    # variables (x, t): min t  s.t.  Hx - t <= b, t >= -1
    c = np.zeros(n + 1)
    c[-1] = 1.0
    A = np.hstack([P.H, -np.ones((m, 1))])
    A = np.vstack([A, np.concatenate([np.zeros(n), [-1.0]])])
    b = np.concatenate([P.b, [1.0]])
    rep = solve_lp(c, A, b, config=_LP_CFG)
    if rep.status != STATUS_OPTIMAL:
        raise GeometryError("emptiness LP failed to solve")
    return bool(rep.z_star[-1] > tol)


def interior_point(P: Polytope) -> np.ndarray:
    """Chebyshev-style interior point (max-slack LP, slack capped at 1)."""
    m, n = P.H.shape
    norms = np.linalg.norm(P.H, axis=1)
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A = np.hstack([P.H, norms[:, None]])
    A = np.vstack([A, np.concatenate([np.zeros(n), [1.0]])])
    b = np.concatenate([P.b, [1.0]])
    rep = solve_lp(c, A, b, config=_LP_CFG)
    if rep.status != STATUS_OPTIMAL or rep.z_star[-1] <= 0:
        raise EmptySet("no interior point found")
    return rep.z_star[:n]


def pontryagin_difference(P: Polytope, Q, M=None) -> Polytope:
    """P (-) MQ: largest set whose translates by every Mq stay inside P.

    Q may be a Polytope or a Hypercube; M maps Q's space into P's space
    (default identity).  Facet offsets shrink by the support of MQ along
    each facet normal; the result may be empty (check with is_empty).
    """
    if M is None:
        M = np.eye(P.dim)
    M = np.atleast_2d(np.asarray(M, dtype=float))
    qdim = Q.dim
    if M.shape != (P.dim, qdim):
        raise DimensionMismatch(
            f"M must be {P.dim}x{qdim}, got {M.shape[0]}x{M.shape[1]}")
    offsets = np.empty(P.n_facets)
    for i, h in enumerate(P.H):
        d = M.T @ h
        offsets[i] = Q.support(d) if isinstance(Q, Hypercube) else support(Q, d)
    return Polytope(P.H, P.b - offsets, bounded=P.bounded)


def normalize(P: Polytope, tol: float = 1e-9) -> Polytope:
    """Drop redundant facets (LP test per row).  Used before set equality."""
    keep = []
    H, b = P.H, P.b
    active = list(range(P.n_facets))
    for i in range(P.n_facets):
        others = [j for j in active if j != i]
        if not others:
            keep.append(i)
            continue
        try:
            val = support(Polytope(H[others], b[others]), H[i])
        except UnboundedDirection:
            keep.append(i)
            continue
        except EmptySet:
            keep.append(i)
            continue
        if val > b[i] + tol:
            keep.append(i)
        else:
            active.remove(i)
    if not keep:
        keep = [0]
    return Polytope(H[keep], b[keep], bounded=P.bounded)


def contains_polytope(outer: Polytope, inner: Polytope, tol: float = 1e-7) -> bool:
    """inner ⊆ outer by facet-wise support comparison."""
    for h, beta in zip(outer.H, outer.b):
        try:
            if support(inner, h) > beta + tol:
                return False
        except EmptySet:
            return True
    return True


def sets_equal(P: Polytope, Q: Polytope, tol: float = 1e-7) -> bool:
    return contains_polytope(P, Q, tol) and contains_polytope(Q, P, tol)


def max_invariant_set(models, X: Polytope, max_iter: int = 300,
                      tol: float = 1e-7) -> Polytope:
    """Largest O ⊆ X with A O ⊆ O for every map A in `models`.

    Standard pre-set intersection: facets H A are appended whenever they
    cut the current iterate; stationarity of the facet set terminates.
    """
    models = [np.atleast_2d(np.asarray(A, dtype=float)) for A in models]
    for A in models:
        if np.abs(np.linalg.eigvals(A)).max() >= 1.0 - 1e-12:
            raise UnstableModel("closed-loop map is not Schur stable")
    if is_empty(X):
        raise EmptySet("constraint set is empty")

    # facets kept unit-normalised and deduplicated: repeated map application
    # otherwise piles up near-parallel rows that degrade every LP downstream
    norms = np.linalg.norm(X.H, axis=1)
    omega_H = X.H / norms[:, None]
    omega_b = X.b / norms
    frontier = (omega_H.copy(), omega_b.copy())

    def absorb(row, beta):
        nonlocal omega_H, omega_b
        dots = omega_H @ row
        close = np.flatnonzero(dots > 1.0 - 1e-9)
        if close.size:
            k = close[np.argmin(omega_b[close])]
            if beta < omega_b[k] - 1e-12:
                omega_b[k] = beta
                return True   # tightened an existing facet
            return False
        omega_H = np.vstack([omega_H, row])
        omega_b = np.append(omega_b, beta)
        return True

    for _ in range(max_iter):
        cur = Polytope(omega_H, omega_b, bounded=X.bounded)
        new_H, new_b = [], []
        for A in models:
            cand_H = frontier[0] @ A
            for row, beta in zip(cand_H, frontier[1]):
                nrm = np.linalg.norm(row)
                if nrm < 1e-12:
                    continue  # maps everything to the facet interior
                row = row / nrm
                beta = beta / nrm
                if support(cur, row) > beta + tol:
                    if absorb(row, beta):
                        new_H.append(row)
                        new_b.append(beta)
        if not new_H:
            return Polytope(omega_H, omega_b, bounded=X.bounded)
        frontier = (np.array(new_H), np.array(new_b))
    raise NotConverged(f"invariant set not stationary after {max_iter} sweeps")


def dedup_facets(P: Polytope, angle_tol: float = 1e-9) -> Polytope:
    """Unit-normalise rows and collapse same-direction facets to the
    tightest offset.  Cheap (no LPs), unlike full redundancy removal."""
    norms = np.linalg.norm(P.H, axis=1)
    H = P.H / norms[:, None]
    b = P.b / norms
    keep_H, keep_b = [], []
    for row, beta in zip(H, b):
        matched = False
        for i, r in enumerate(keep_H):
            if row @ r > 1.0 - angle_tol:
                keep_b[i] = min(keep_b[i], beta)
                matched = True
                break
        if not matched:
            keep_H.append(row)
            keep_b.append(beta)
    return Polytope(np.array(keep_H), np.array(keep_b), bounded=P.bounded)


def sample_box(P: Polytope, rng: np.random.Generator, n: int,
               max_tries: int = 200) -> np.ndarray:
    """Rejection-sample n points from P using its bounding box."""
    dim = P.dim
    lo = np.array([-support(P, -e) for e in np.eye(dim)])
    hi = np.array([support(P, e) for e in np.eye(dim)])
    out = []
    for _ in range(max_tries):
        cand = rng.uniform(lo, hi, size=(max(4 * n, 64), dim))
        inside = (cand @ P.H.T <= P.b + 1e-12).all(axis=1)
        out.extend(cand[inside])
        if len(out) >= n:
            return np.array(out[:n])
    raise GeometryError("rejection sampling failed; polytope too thin")


def vertices_2d(P: Polytope, tol: float = 1e-9) -> np.ndarray:
    """Vertex enumeration for 2-D polytopes via facet intersections."""
    if P.dim != 2:
        raise DimensionMismatch("vertex enumeration implemented for 2-D only")
    verts = []
    m = P.n_facets
    for i in range(m):
        for j in range(i + 1, m):
            A = np.vstack([P.H[i], P.H[j]])
            if abs(np.linalg.det(A)) < 1e-12:
                continue
            v = np.linalg.solve(A, np.array([P.b[i], P.b[j]]))
            if (P.H @ v <= P.b + tol).all():
                verts.append(v)
    if not verts:
        raise EmptySet("no vertices found (empty or unbounded set)")
    return np.unique(np.round(np.array(verts), 12), axis=0)
