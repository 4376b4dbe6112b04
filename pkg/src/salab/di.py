"""Selection-based Euler integration of differential inclusions ``x' in F(x)``.

A right-hand side is any callable returning a :class:`~salab.convex.ConvexSet`.
:class:`LinearHullMap` (``F(x) = hull{A_i x}``) additionally evaluates a whole
batch of states at once, which lets bundles of curves advance together.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._errors import BlowUpError, DomainError, EstimationFailed
from .audit import AuditReport
from .convex import ConvexSet, VectorField, big_H_eval

SELECTION_TOL = 1e-9


def default_dt(lipschitz_L: float) -> float:
    return 1e-3 / (1.0 + lipschitz_L)


class LinearHullMap:
    """``x -> hull{A_1 x, ..., A_k x}``."""

    def __init__(self, mats):
        mats = np.array(mats, dtype=float)
        if mats.ndim == 2:
            mats = mats[None]
        _, idx = np.unique(mats.reshape(len(mats), -1), axis=0, return_index=True)
        self.mats = mats[np.sort(idx)]
        self.dim = self.mats.shape[1]

    def __call__(self, x) -> ConvexSet:
        x = np.asarray(x, dtype=float)
        if len(self.mats) == 1:
            return ConvexSet(self.mats[0] @ x)
        return ConvexSet(self.mats @ x)

    def generators_batch(self, X: np.ndarray) -> np.ndarray:
        """Generators for each row of ``X``: shape ``(B, k, d)``."""
        return np.einsum("kij,bj->bki", self.mats, X)

    @property
    def n_generators(self) -> int:
        return len(self.mats)


def linear_rhs(M) -> LinearHullMap:
    return LinearHullMap([M])


def H_rhs(field: VectorField):
    """Right-hand side ``H`` of the limiting inclusion for ``field``."""
    if field.kind == "affine":
        return LinearHullMap(field.A)
    return lambda x: big_H_eval(field, x)


def hat_h_rhs(field: VectorField, model):
    from .markov import hat_h_eval

    return lambda x: hat_h_eval(field, model, x)


@dataclass(frozen=True)
class SelectionRule:
    """How a velocity is picked from the current right-hand set.

    Kinds: ``vertex-random`` (uniformly random generator), ``fixed-vertex``
    (generator ``index``, taken modulo the generator count), ``barycentric``
    (mean of generators), ``custom-weights`` (convex weights over generators).
    """

    kind: str = "barycentric"
    index: int = 0
    weights: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("vertex-random", "fixed-vertex", "barycentric", "custom-weights"):
            raise DomainError(f"unknown selection rule {self.kind!r}")
        if self.kind == "custom-weights":
            w = np.asarray(self.weights, dtype=float)
            if w.ndim != 1 or np.any(w < 0) or not w.sum() > 0:
                raise DomainError("custom weights must be nonnegative with positive sum")

    def weight_vector(self, k: int, u: float | None = None) -> np.ndarray:
        w = np.zeros(k)
        if self.kind == "barycentric":
            w[:] = 1.0 / k
        elif self.kind == "fixed-vertex":
            w[self.index % k] = 1.0
        elif self.kind == "vertex-random":
            w[min(int(u * k), k - 1)] = 1.0
        else:
            cw = np.asarray(self.weights, dtype=float)
            if len(cw) != k:
                raise DomainError(f"custom weights have length {len(cw)}, set has {k} generators")
            w = cw / cw.sum()
        return w

    def select(self, cset: ConvexSet, rng=None) -> np.ndarray:
        G = cset.generators
        if len(G) == 1:
            return G[0]
        u = rng.random() if self.kind == "vertex-random" else None
        return self.weight_vector(len(G), u) @ G

    def __str__(self):
        return self.kind if self.kind != "fixed-vertex" else f"fixed-vertex({self.index})"


BARYCENTRIC = SelectionRule("barycentric")
VERTEX_RANDOM = SelectionRule("vertex-random")


@dataclass(eq=False)
class Curve:
    times: np.ndarray
    states: np.ndarray
    rule: str = "barycentric"
    blew_up_at: float | None = None

    @property
    def start(self) -> np.ndarray:
        return self.states[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]


def _n_steps(dt, horizon) -> int:
    if not dt > 0 or not horizon > 0 or dt > horizon:
        raise DomainError("need 0 < dt <= horizon")
    return int(round(horizon / dt))


def _velocity_set(rhs, x, t: float) -> ConvexSet:
    """``rhs(x)``, with floating-point overflow inside ``rhs`` reported as a blow-up."""
    try:
        with np.errstate(over="raise", invalid="raise"):
            return rhs(x)
    except FloatingPointError as err:
        raise BlowUpError(f"right-hand side overflowed at t = {t:.6g}: {err}", time=t) from err


def integrate_di(rhs: Callable, x0, dt: float, horizon: float,
                 rule: SelectionRule = BARYCENTRIC, rng=None) -> Curve:
    """Explicit Euler with a selection at every step: ``x_{k+1} = x_k + dt v_k``."""
    rng = np.random.default_rng(0) if rng is None else rng
    steps = _n_steps(dt, horizon)
    x = np.asarray(x0, dtype=float).reshape(-1)
    states = np.empty((steps + 1, x.shape[0]))
    states[0] = x
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(steps):
            try:
                v = rule.select(_velocity_set(rhs, x, k * dt), rng)
            except BlowUpError as err:
                err.partial = states[:k + 1].copy()
                raise
            x = x + dt * v
            if not np.all(np.isfinite(x)):
                raise BlowUpError(f"curve became non-finite at t = {(k + 1) * dt:.6g}",
                                  time=(k + 1) * dt, partial=states[:k + 1].copy())
            states[k + 1] = x
    return Curve(dt * np.arange(steps + 1), states, str(rule))


def _integrate_many(rhs, X0, dt, horizon, rules, rngs, record_every=1):
    """Advance all curves together; returns (times, states[T, B, d], blew_up_at)."""
    steps = _n_steps(dt, horizon)
    B, d = X0.shape
    n_rec = steps // record_every + 1
    out = np.empty((n_rec, B, d))
    out[0] = X0
    blew = np.full(B, np.nan)
    alive = np.ones(B, dtype=bool)
    X = X0.copy()
    batch = hasattr(rhs, "generators_batch")
    if batch:
        # a linear hull with a convex selection is x -> (sum_k w_k A_k) x, one matrix per curve
        mats = rhs.mats
        k = len(mats)
        E = np.einsum("bk,kij->bij", np.array([r.weight_vector(k, 0.0) for r in rules]), mats)
        rand = np.flatnonzero([r.kind == "vertex-random" for r in rules]) if k > 1 else np.empty(0, int)
    chunk = 4096
    with np.errstate(over="ignore", invalid="ignore"):
        for s0 in range(0, steps, chunk):
            C = min(chunk, steps - s0)
            U = np.stack([g.random(C) for g in rngs])
            if batch and len(rand):
                picks = np.minimum((U[rand] * k).astype(int), k - 1)
            for j in range(C):
                kstep = s0 + j
                if batch:
                    if len(rand):
                        E[rand] = mats[picks[:, j]]
                    V = np.matmul(E, X[:, :, None])[:, :, 0]
                else:
                    V = np.zeros_like(X)
                    for b in np.flatnonzero(alive):
                        try:
                            S = _velocity_set(rhs, X[b], kstep * dt)
                        except BlowUpError:
                            blew[b] = kstep * dt
                            alive[b] = False
                            continue
                        Gb = S.generators
                        V[b] = Gb[0] if len(Gb) == 1 else rules[b].weight_vector(len(Gb), U[b, j]) @ Gb
                Xn = X + dt * V
                bad = alive & ~np.isfinite(Xn).all(axis=1)
                if bad.any():
                    blew[bad] = (kstep + 1) * dt
                    alive &= ~bad
                X = Xn if alive.all() else np.where(alive[:, None], Xn, X)
                if (kstep + 1) % record_every == 0:
                    out[(kstep + 1) // record_every] = X
    times = dt * record_every * np.arange(n_rec)
    return times, out, blew


@dataclass(eq=False)
class FlowBundle:
    """Finite sample of the set-valued flow from a common initial set."""

    curves: list
    dt: float
    horizon: float
    rules: list
    blowups: list = field(default_factory=list)

    @property
    def times(self) -> np.ndarray:
        return self.curves[0].times

    def max_norm(self) -> np.ndarray:
        """Largest norm across curves at each sampled time."""
        return np.max([np.linalg.norm(c.states, axis=1) for c in self.curves], axis=0)

    def terminal_norms(self) -> np.ndarray:
        return np.array([np.linalg.norm(c.terminal) for c in self.curves])

    def start_norms(self) -> np.ndarray:
        return np.array([np.linalg.norm(c.start) for c in self.curves])


def write_bundle_csv(bundle: FlowBundle, path, stride: int = 1):
    """CSV with columns ``curve_id,t,x_*``, every ``stride``-th sample per curve."""
    d = bundle.curves[0].states.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["curve_id", "t"] + [f"x_{i}" for i in range(d)])
        for cid, c in enumerate(bundle.curves):
            for k in range(0, len(c.times), stride):
                w.writerow([cid, repr(float(c.times[k]))] + [repr(float(v)) for v in c.states[k]])


def _child_rngs(rng, n):
    return [np.random.default_rng(int(s)) for s in rng.integers(0, 2 ** 63 - 1, size=n)]


def flow_bundle(rhs, initial_points, dt: float, horizon: float,
                rules: Sequence[SelectionRule] = (BARYCENTRIC,), rng=None,
                replicates: int = 1, record_every: int = 1) -> FlowBundle:
    """One curve per (initial point, rule, replicate); blow-ups are recorded, not raised."""
    rng = np.random.default_rng(0) if rng is None else rng
    P = np.atleast_2d(np.asarray(initial_points, dtype=float))
    if P.shape[0] == 0 or not rules:
        raise DomainError("flow_bundle needs initial points and at least one rule")
    starts, per_rule = [], []
    for p in P:
        for r in rules:
            for _ in range(replicates):
                starts.append(p)
                per_rule.append(r)
    X0 = np.array(starts)
    times, states, blew = _integrate_many(rhs, X0, dt, horizon, per_rule,
                                          _child_rngs(rng, len(starts)), record_every)
    curves = []
    blowups = []
    for b in range(len(starts)):
        bt = None if np.isnan(blew[b]) else float(blew[b])
        if bt is not None:
            blowups.append((b, bt))
        curves.append(Curve(times, states[:, b], str(per_rule[b]), bt))
    return FlowBundle(curves, dt, horizon, list(rules), blowups)


def ball_samples(dim: int, radius: float, samples: int, rng, interior: bool = True) -> np.ndarray:
    """Axis and diagonal points on the sphere, random sphere points, and some interior points."""
    pts = []
    eye = np.eye(dim)
    for i in range(dim):
        pts += [radius * eye[i], -radius * eye[i]]
    if dim > 1:
        for s in (1.0, -1.0):
            v = np.ones(dim)
            v[1:] *= s
            pts.append(radius * v / np.linalg.norm(v))
            pts.append(-radius * v / np.linalg.norm(v))
    while len(pts) < samples:
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        if interior and len(pts) % 4 == 3:
            v *= rng.uniform(0.1, 1.0) ** (1.0 / dim)
        pts.append(radius * v)
    return np.array(pts)


def _cloud_distance(states: np.ndarray, cloud: np.ndarray) -> np.ndarray:
    """Distance from every state (..., d) to the nearest point of ``cloud``."""
    diff = states[..., None, :] - cloud
    return np.min(np.linalg.norm(diff, axis=-1), axis=-1)


def estimate_T_epsilon(rhs, attractor_points, neighborhood_radius: float, epsilon: float,
                       dt: float, rules: Sequence[SelectionRule] = (BARYCENTRIC, VERTEX_RANDOM),
                       samples: int = 16, rng=None, horizon: float = 50.0,
                       safety: float = 0.25) -> float:
    """Uniform entrance time into the closed ``epsilon``-neighbourhood of the candidate.

    Curves start from the closed ball of ``neighborhood_radius``. The raw
    estimate is the earliest sampled time after which every curve stays within
    ``epsilon`` of the candidate point cloud; the return value is that time
    times ``1 + safety``.

    Raises
    ------
    EstimationFailed
        If some curve is still (or again) outside at the horizon, or blows up.
    """
    if not epsilon > 0:
        raise DomainError("epsilon must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    cloud = np.atleast_2d(np.asarray(attractor_points, dtype=float))
    dim = cloud.shape[1]
    starts = ball_samples(dim, neighborhood_radius, samples, rng)
    bundle = flow_bundle(rhs, starts, dt, horizon, rules, rng)
    if bundle.blowups:
        raise EstimationFailed(f"{len(bundle.blowups)} curves blew up before the horizon")
    states = np.stack([c.states for c in bundle.curves], axis=1)
    dist = _cloud_distance(states, cloud)
    outside = dist > epsilon
    if outside[-1].any():
        raise EstimationFailed(f"curves still farther than {epsilon} from the candidate at t = {horizon}")
    any_out = outside.any(axis=1)
    if not any_out.any():
        T = 0.0
    else:
        last = int(np.flatnonzero(any_out)[-1])
        T = float(bundle.times[last + 1])
    return T * (1.0 + safety)


def limit_set_estimate(bundle: FlowBundle, tail_fraction: float = 0.5, tol: float = 1e-3,
                       max_points: int = 5000) -> np.ndarray:
    """Cluster centres of the tail samples of every curve (an empirical limit set)."""
    if not 0 < tail_fraction < 1:
        raise DomainError("tail_fraction must lie in (0, 1)")
    t = bundle.times
    mask = t >= (1.0 - tail_fraction) * t[-1]
    if mask.sum() < 10:
        raise DomainError("tail window holds fewer than 10 samples")
    pts = np.vstack([c.states[mask] for c in bundle.curves if c.blew_up_at is None])
    if len(pts) > max_points:
        pts = pts[np.linspace(0, len(pts) - 1, max_points).astype(int)]
    reps = []
    remaining = pts
    while len(remaining):
        d = np.linalg.norm(remaining - remaining[0], axis=1)
        near = d <= tol
        reps.append(remaining[near].mean(axis=0))
        remaining = remaining[~near]
    return np.array(reps)


def verify_S2(rhs, attractor_points, dt: float, rng=None, epsilon: float = 0.1,
              samples: int = 16, horizon: float = 50.0) -> AuditReport:
    """Candidate inside the open unit ball, and the closed unit ball flowing into its ``epsilon``-neighbourhood."""
    cloud = np.atleast_2d(np.asarray(attractor_points, dtype=float))
    sup = float(np.max(np.linalg.norm(cloud, axis=1)))
    inside = AuditReport("sup norm < 1", sup < 1.0, details={"sup_norm": sup},
                         witness=None if sup < 1.0 else {"point": cloud[np.argmax(np.linalg.norm(cloud, axis=1))]})
    try:
        T = estimate_T_epsilon(rhs, cloud, 1.0, epsilon, dt, samples=samples, rng=rng, horizon=horizon)
        attract = AuditReport("unit ball attracted", True, details={"T_epsilon": T, "epsilon": epsilon})
    except EstimationFailed as err:
        attract = AuditReport("unit ball attracted", False, details={"epsilon": epsilon},
                              witness={"estimation_failed": str(err)})
    return AuditReport("S2", inside.passed and attract.passed, clauses={"i": inside, "ii": attract},
                       witness=inside.witness or attract.witness)


def _eval_V(V, X: np.ndarray) -> np.ndarray:
    if hasattr(V, "batch"):
        return V.batch(X)
    flat = X.reshape(-1, X.shape[-1])
    return np.array([float(V(x)) for x in flat]).reshape(X.shape[:-1])


def lyapunov_decrease_audit(rhs, V, region_radius: float = 2.0, samples: int = 32,
                            dt: float = 1e-3, rng=None, zero_set=None, horizon: float = 5.0,
                            tol: float = 1e-3, strictness: float = 0.0,
                            invariance: str = "sublevel", rules=(BARYCENTRIC, VERTEX_RANDOM)) -> AuditReport:
    """Sampled Lyapunov conditions on the ball of ``region_radius``.

    (iii) every curve started outside ``N^tol(zero_set)`` satisfies
    ``V(x(t)) < V(x(0)) - strictness (V(x(0)) - min V)`` at every sampled
    ``t > 0``. (ii) ``V`` vanishes on the zero set and is positive at every
    start. (i) the region stays forward invariant: with ``invariance="ball"``
    the ball itself, with ``"sublevel"`` the sublevel set of ``V`` at the
    largest value ``V`` takes on the sampled sphere (equal to the ball for
    ``V = ||x||``).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    zs = np.atleast_2d(np.asarray(zero_set, dtype=float))
    dim = zs.shape[1]
    starts = ball_samples(dim, region_radius, samples, rng)
    extra = [s * f for s in starts[: 2 * dim + 4] for f in (0.5, 0.25)]
    starts = np.vstack([starts, extra])
    keep = _cloud_distance(starts, zs) > tol
    starts = starts[keep]

    Vz = _eval_V(V, zs)
    V0 = _eval_V(V, starts)
    vmin = float(min(Vz.min(), V0.min()))
    zero_ok = bool(np.all(np.abs(Vz) <= tol)) and bool(np.all(V0 > 0))
    zero_clause = AuditReport("V^-1(0) = zero set", zero_ok,
                              details={"max_V_on_zero_set": float(np.max(np.abs(Vz))),
                                       "min_V_at_starts": float(V0.min())},
                              witness=None if zero_ok else {"start": starts[int(np.argmin(V0))]})

    bundle = flow_bundle(rhs, starts, dt, horizon, rules, rng)
    states = np.stack([c.states for c in bundle.curves], axis=1)   # (T, B, d)
    Vt = _eval_V(V, states)
    V0b = Vt[0]
    margin = strictness * (V0b - vmin)
    viol = ~(Vt[1:] < (V0b - margin)[None, :])
    dec_witness = None
    if viol.any():
        ti, bi = np.argwhere(viol)[0]
        dec_witness = {"start": states[0, bi], "t": float(bundle.times[ti + 1]),
                       "V_start": float(V0b[bi]), "V_t": float(Vt[ti + 1, bi]),
                       "rule": bundle.curves[bi].rule}
    decrease = AuditReport("strict decrease", dec_witness is None,
                           details={"samples": int(states.shape[1]), "strictness": strictness,
                                    "max_relative_V": float(np.max(Vt[1:] / np.maximum(V0b, 1e-300)))},
                           witness=dec_witness)

    sphere = ball_samples(dim, region_radius, samples, rng, interior=False)
    if invariance == "ball":
        level = region_radius
        measure = np.linalg.norm(states, axis=-1)
    elif invariance == "sublevel":
        level = float(_eval_V(V, sphere).max())
        measure = Vt
    else:
        raise DomainError(f"unknown invariance mode {invariance!r}")
    start_in = measure[0] <= level * (1 + 1e-9)
    leave = (measure > level * (1 + 1e-9)) & start_in[None, :]
    inv_witness = None
    if leave.any():
        ti, bi = np.argwhere(leave)[0]
        inv_witness = {"start": states[0, bi], "t": float(bundle.times[ti]), "value": float(measure[ti, bi]),
                       "level": level}
    invariant = AuditReport("forward invariance", inv_witness is None,
                            details={"mode": invariance, "level": level}, witness=inv_witness)

    ok = zero_clause.passed and decrease.passed and invariant.passed
    return AuditReport("Lyapunov decrease", ok,
                       clauses={"i": invariant, "ii": zero_clause, "iii": decrease},
                       witness=inv_witness or (zero_clause.witness if not zero_clause.passed else None) or dec_witness,
                       justification="sampled starts and times; not a certificate")
