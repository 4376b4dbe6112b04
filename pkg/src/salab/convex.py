"""Compact convex sets and the set-valued maps built from a driver field.

A driver ``h(x, y)`` is scaled as ``h_c(x, y) = h(c x, y) / c``. Its upper limit
as ``c -> inf`` gives ``h_inf(x, y)``, and the closed convex hull of
``h_inf(x, y)`` over all states is ``H(x)``. For affine drivers the limit is the
linear part, evaluated in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._errors import DomainError, UnknownStateError
from .audit import AuditReport

DEFAULT_C_SCHEDULE = tuple(10.0 ** k for k in range(1, 7))
C_MIN = 1e6
CLUSTER_RADIUS = 1e-4
MEMBERSHIP_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class ConvexSet:
    """Convex hull of finitely many generators in R^d.

    Parameters
    ----------
    generators : array_like, shape (k, d)
        Points whose hull is the set. A single 1-d array is read as one point.
    approximate : bool
        True when the generators come from a numeric limit rather than a
        closed form.
    """

    generators: np.ndarray
    approximate: bool = False

    def __post_init__(self):
        g = np.array(self.generators, dtype=float)
        if g.ndim == 1:
            g = g[None, :]
        if g.ndim != 2 or g.shape[0] == 0 or g.shape[1] == 0:
            raise DomainError("a ConvexSet needs at least one generator of positive dimension")
        if not np.all(np.isfinite(g)):
            raise DomainError("generators must be finite")
        g.setflags(write=False)
        object.__setattr__(self, "generators", g)

    @property
    def dim(self) -> int:
        return self.generators.shape[1]

    def __len__(self):
        return self.generators.shape[0]

    @classmethod
    def hull_of(cls, sets: Sequence["ConvexSet"]) -> "ConvexSet":
        """Hull of a union of convex sets, with exact duplicates dropped."""
        if not sets:
            raise DomainError("hull of an empty family")
        g = np.vstack([s.generators for s in sets])
        return cls(_unique_rows(g), approximate=any(s.approximate for s in sets))

    def support(self, direction) -> float:
        return support_function(self, direction)

    def distance(self, point) -> float:
        return distance_to_set(point, self)

    def contains(self, point, tol: float = MEMBERSHIP_TOL) -> bool:
        return distance_to_set(point, self) <= tol

    def project(self, point) -> np.ndarray:
        p = _as_point(point, self.dim)
        w = _min_norm_weights(self.generators - p)
        return w @ self.generators

    def max_norm(self) -> float:
        # norm is convex, so the max over the hull sits at a generator
        return float(np.max(np.linalg.norm(self.generators, axis=1)))

    def __repr__(self):
        return f"ConvexSet(k={len(self)}, dim={self.dim}, approximate={self.approximate})"


def _unique_rows(g: np.ndarray) -> np.ndarray:
    _, idx = np.unique(g, axis=0, return_index=True)
    return g[np.sort(idx)]


def _as_point(p, dim: int | None = None) -> np.ndarray:
    p = np.asarray(p, dtype=float).reshape(-1)
    if dim is not None and p.shape[0] != dim:
        raise DomainError(f"dimension mismatch: point has {p.shape[0]} entries, set has dim {dim}")
    return p


def support_function(cset: ConvexSet, direction) -> float:
    """Largest value of ``<g, direction>`` over the set."""
    d = _as_point(direction, cset.dim)
    if not np.any(d):
        raise DomainError("support function needs a nonzero direction")
    return float(np.max(cset.generators @ d))


def distance_to_set(point, cset: ConvexSet) -> float:
    """Euclidean distance from ``point`` to the hull of ``cset``."""
    p = _as_point(point, cset.dim)
    shifted = cset.generators - p
    w = _min_norm_weights(shifted)
    return float(np.linalg.norm(w @ shifted))


def _affine_min(P: np.ndarray) -> np.ndarray:
    """Weights (summing to one) of the min-norm point of the affine hull of rows."""
    if P.shape[0] == 1:
        return np.ones(1)
    B = (P[1:] - P[0]).T
    beta = np.linalg.lstsq(B, -P[0], rcond=None)[0]
    return np.concatenate([[1.0 - beta.sum()], beta])


def _min_norm_weights(P: np.ndarray, max_iter: int = 1000) -> np.ndarray:
    """Wolfe's minimum-norm-point algorithm on the hull of the rows of ``P``.

    Returns convex weights ``w`` with ``w @ P`` the point of the hull closest
    to the origin.
    """
    k = P.shape[0]
    if k == 1:
        return np.ones(1)
    scale = max(1.0, float(np.max(np.sum(P * P, axis=1))))
    eps = 1e-12 * scale
    zero_tol = 1e-12

    S = [int(np.argmin(np.sum(P * P, axis=1)))]
    lam = np.ones(1)
    x = P[S[0]].copy()
    for _ in range(max_iter):
        g = P @ x
        j = int(np.argmin(g))
        if x @ x - g[j] <= eps or j in S:
            break
        S.append(j)
        lam = np.append(lam, 0.0)
        while True:
            alpha = _affine_min(P[S])
            if np.all(alpha > zero_tol):
                lam = alpha
                break
            neg = alpha <= zero_tol
            denom = lam[neg] - alpha[neg]
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios = np.where(denom > 0, lam[neg] / denom, np.inf)
            theta = min(1.0, float(np.min(ratios)))
            lam = theta * alpha + (1.0 - theta) * lam
            keep = lam > zero_tol
            if not np.any(keep):
                keep[int(np.argmax(lam))] = True
            S = [s for s, kp in zip(S, keep) if kp]
            lam = lam[keep]
            lam = lam / lam.sum()
            if len(S) == 1:
                break
        x = lam @ P[S]
    w = np.zeros(k)
    w[S] = lam
    return w


# --------------------------------------------------------------------------- #
# driver fields


def operator_norm(A, iters: int = 500, tol: float = 1e-14) -> float:
    """Spectral norm of ``A`` by power iteration on ``A^T A``."""
    A = np.asarray(A, dtype=float)
    scale = float(np.max(np.abs(A))) if A.size else 0.0
    if scale == 0.0:
        return 0.0
    A = A / scale
    G = A.T @ A
    v = np.ones(G.shape[0]) / np.sqrt(G.shape[0])
    # a deterministic start can be orthogonal to the top eigenvector
    v = v + 1e-3 * np.arange(1, G.shape[0] + 1)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = G @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        new = float(v @ G @ v)
        if abs(new - lam) <= tol * max(1.0, new):
            lam = new
            break
        lam = new
    return scale * float(np.sqrt(max(lam, 0.0)))


@dataclass(frozen=True, eq=False)
class VectorField:
    """Driver ``h(x, y)`` over a finite state set ``{0, ..., n_states-1}``.

    Build with :meth:`affine` or :meth:`tabulated`. ``lipschitz_L`` and
    ``bound_K`` are the declared constants of the linear growth bound
    ``||h(x, y)|| <= K (1 + ||x||)``.
    """

    dim: int
    kind: str
    n_states: int
    lipschitz_L: float
    bound_K: float
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    func: Callable | None = field(default=None, repr=False)

    @classmethod
    def affine(cls, A_table, b_table, lipschitz_L=None, bound_K=None) -> "VectorField":
        A = np.array(A_table, dtype=float)
        b = np.array(b_table, dtype=float)
        if A.ndim == 2:
            A = A[None]
        if b.ndim == 1:
            b = np.broadcast_to(b, (A.shape[0], b.shape[0])).copy()
        if A.ndim != 3 or A.shape[1] != A.shape[2]:
            raise DomainError("A_table must have shape (n_states, d, d)")
        if b.shape != A.shape[:2]:
            raise DomainError(f"b_table shape {b.shape} does not match A_table {A.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise DomainError("affine tables must be finite")
        L = max(operator_norm(a) for a in A)
        Mb = float(np.max(np.linalg.norm(b, axis=1)))
        if lipschitz_L is None:
            lipschitz_L = L
        elif lipschitz_L < L * (1 - 1e-9):
            raise DomainError(f"declared Lipschitz constant {lipschitz_L} is below max ||A(y)|| = {L}")
        if bound_K is None:
            bound_K = max(lipschitz_L, Mb)
        A.setflags(write=False)
        b.setflags(write=False)
        return cls(A.shape[1], "affine", A.shape[0], float(lipschitz_L), float(bound_K), A, b)

    @classmethod
    def tabulated(cls, func, dim, n_states, lipschitz_L, bound_K) -> "VectorField":
        """Driver given by a callable ``func(x, y) -> d-vector``."""
        if dim < 1 or n_states < 1:
            raise DomainError("dim and n_states must be positive")
        if lipschitz_L < 0 or bound_K < 0:
            raise DomainError("declared constants must be nonnegative")
        return cls(int(dim), "tabulated", int(n_states), float(lipschitz_L), float(bound_K), func=func)

    def with_bound(self, bound_K: float) -> "VectorField":
        """Copy with a different declared growth constant."""
        return VectorField(self.dim, self.kind, self.n_states, self.lipschitz_L, float(bound_K),
                           self.A, self.b, self.func)

    @property
    def states(self) -> range:
        return range(self.n_states)

    def _check_state(self, y):
        if not (isinstance(y, (int, np.integer)) and 0 <= y < self.n_states):
            raise UnknownStateError(f"state {y!r} is not in S = {{0..{self.n_states - 1}}}")

    def __call__(self, x, y) -> np.ndarray:
        self._check_state(y)
        x = _as_point(x, self.dim)
        if self.kind == "affine":
            return self.A[y] @ x + self.b[y]
        return np.asarray(self.func(x, int(y)), dtype=float).reshape(self.dim)

    def eval_batch(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        """Row-wise ``h(X[i], Y[i])``; the arithmetic is identical for any batch size."""
        if self.kind == "affine":
            return (self.A[Y] * X[:, None, :]).sum(axis=-1) + self.b[Y]
        return np.array([self.func(x, int(y)) for x, y in zip(X, Y)], dtype=float).reshape(X.shape)

    def describe(self) -> dict:
        out = {"kind": self.kind, "dim": self.dim, "n_states": self.n_states,
               "lipschitz_L": self.lipschitz_L, "bound_K": self.bound_K}
        if self.kind == "affine":
            out["A"] = self.A.tolist()
            out["b"] = self.b.tolist()
        return out


# --------------------------------------------------------------------------- #
# scaled and limiting maps


def scale_map_eval(field: VectorField, c: float, x, y) -> np.ndarray:
    """``h_c(x, y) = h(c x, y) / c``."""
    if not c >= 1:
        raise DomainError(f"scale factor must be >= 1, got {c}")
    field._check_state(y)
    x = _as_point(x, field.dim)
    if field.kind == "affine":
        return field.A[y] @ x + field.b[y] / c
    return field(c * x, y) / c


def _cluster(points: np.ndarray, radius: float) -> np.ndarray:
    """Greedy clustering; returns the mean of each cluster."""
    reps, members = [], []
    for p in points:
        for i, r in enumerate(reps):
            if np.linalg.norm(p - r) <= radius:
                members[i].append(p)
                break
        else:
            reps.append(p)
            members.append([p])
    return np.array([np.mean(m, axis=0) for m in members])


def limit_map_eval(field: VectorField, x, y, c_schedule=DEFAULT_C_SCHEDULE,
                   c_min: float = C_MIN, radius: float = CLUSTER_RADIUS) -> ConvexSet:
    """Upper limit of ``h_c(x, y)`` as ``c -> inf``.

    Affine drivers give the singleton ``{A(y) x}`` exactly. Other drivers are
    evaluated along ``c_schedule``; outputs within the last two decades of the
    schedule are clustered and the hull of the cluster centres is returned,
    flagged as approximate.
    """
    cs = np.asarray(c_schedule, dtype=float).reshape(-1)
    if cs.size == 0:
        raise DomainError("empty c schedule")
    if np.any(np.diff(cs) <= 0):
        raise DomainError("c schedule must be strictly increasing")
    if cs[-1] < c_min:
        raise DomainError(f"c schedule must reach c_min = {c_min}")
    field._check_state(y)
    x = _as_point(x, field.dim)
    if field.kind == "affine":
        return ConvexSet(field.A[y] @ x)
    tail = cs[cs >= cs[-1] * 1e-2]
    vals = np.array([scale_map_eval(field, c, x, y) for c in tail])
    return ConvexSet(_cluster(vals, radius), approximate=True)


def big_H_eval(field: VectorField, x, states=None, **limit_kw) -> ConvexSet:
    """``H(x)``: hull over states of ``h_inf(x, y)``."""
    states = field.states if states is None else states
    if len(states) == 0:
        raise DomainError("state set is empty")
    x = _as_point(x, field.dim)
    if field.kind == "affine":
        idx = np.asarray(list(states), dtype=int)
        for y in idx:
            field._check_state(int(y))
        return ConvexSet(_unique_rows(field.A[idx] @ x))
    return ConvexSet.hull_of([limit_map_eval(field, x, y, **limit_kw) for y in states])


# --------------------------------------------------------------------------- #
# Marchaud audit


def lipschitz_audit(field: VectorField, sample_xs, rng=None, pairs_per_x: int = 4) -> AuditReport:
    """Sampled check of ``||h(x, y) - h(x', y)|| <= L ||x - x'||`` for every state."""
    rng = np.random.default_rng(0) if rng is None else rng
    xs = np.atleast_2d(np.asarray(sample_xs, dtype=float))
    L = field.lipschitz_L
    worst, witness = 0.0, None
    for x in xs:
        for _ in range(pairs_per_x):
            xp = x + rng.standard_normal(field.dim) * (1.0 + np.linalg.norm(x))
            dx = float(np.linalg.norm(xp - x))
            for y in field.states:
                dh = float(np.linalg.norm(field(xp, y) - field(x, y)))
                worst = max(worst, dh / dx)
                if dh > L * dx * (1 + 1e-9) + 1e-12 and witness is None:
                    witness = {"x": x, "x_prime": xp, "y": y, "ratio": dh / dx, "L": L}
    return AuditReport("Lipschitz in x", witness is None,
                       details={"L": L, "max_observed_ratio": worst}, witness=witness)


def marchaud_audit(field: VectorField, sample_xs, perturbation_count: int = 8,
                   cs=(1.0, 10.0, 1e3, 1e6), tol: float = 1e-6, n_directions: int = 8,
                   levels: int = 10, rng=None) -> AuditReport:
    """Sampled check that ``H`` is a Marchaud map.

    Clause (i) bounds every generator of ``H(x)``, every ``h_c(x, y)`` for
    ``c`` in ``cs`` and the support function of ``H(x)`` along random unit
    directions by ``K (1 + ||x||)``. Clause (ii) holds by representation.
    Clause (iii) is a falsifier for upper semicontinuity: along
    ``x_n = x + 10^-n (1 + ||x||) v`` the generators of ``H(x_n)`` must end
    within ``tol + L ||x_n - x||`` of ``H(x)``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    xs = np.atleast_2d(np.asarray(sample_xs, dtype=float))
    if xs.shape[0] == 0:
        raise DomainError("marchaud_audit needs at least one sample")
    K, L = field.bound_K, field.lipschitz_L
    bound_witness = None
    worst_ratio = 0.0
    usc_witness = None
    worst_usc = 0.0

    for x in xs:
        nx = float(np.linalg.norm(x))
        cap = K * (1.0 + nx)
        slack = 1e-12 * max(1.0, cap)
        H = big_H_eval(field, x)
        vals = [("H generator", u) for u in H.generators]
        for c in cs:
            for y in field.states:
                vals.append((f"h_c c={c:g} y={y}", scale_map_eval(field, c, x, y)))
        for label, u in vals:
            nu = float(np.linalg.norm(u))
            worst_ratio = max(worst_ratio, nu / cap if cap > 0 else np.inf if nu > 0 else 0.0)
            if nu > cap + slack and bound_witness is None:
                bound_witness = {"x": x, "value": u, "norm": nu, "bound": cap, "where": label}
        for _ in range(n_directions):
            e = rng.standard_normal(field.dim)
            e /= np.linalg.norm(e)
            s = support_function(H, e)
            if s > cap + slack and bound_witness is None:
                bound_witness = {"x": x, "direction": e, "support": s, "bound": cap,
                                 "where": "support function"}

        for _ in range(perturbation_count):
            v = rng.standard_normal(field.dim)
            v /= np.linalg.norm(v)
            xn = x + 10.0 ** (-levels) * (1.0 + nx) * v
            Hn = big_H_eval(field, xn)
            allowed = tol + L * float(np.linalg.norm(xn - x))
            for u in Hn.generators:
                dist = distance_to_set(u, H)
                worst_usc = max(worst_usc, dist)
                if dist > allowed and usc_witness is None:
                    usc_witness = {"x": x, "x_n": xn, "u_n": u, "distance": dist, "allowed": allowed}

    bound = AuditReport("pointwise bound", bound_witness is None,
                        details={"K": K, "max_ratio": worst_ratio}, witness=bound_witness)
    convex = AuditReport("convex compact values", True,
                         justification="values are hulls of finitely many points")
    usc = AuditReport("upper semicontinuity", usc_witness is None,
                      details={"max_distance": worst_usc, "tol": tol,
                               "perturbations": perturbation_count * len(xs)},
                      witness=usc_witness,
                      justification="sampling falsifier: absence of a witness is not a proof"
                      + ("" if field.kind == "affine" else "; (S1) for non-affine drivers is only sampled"))
    return AuditReport("Marchaud", bound.passed and usc.passed,
                       clauses={"i": bound, "ii": convex, "iii": usc},
                       witness=bound_witness or usc_witness)
