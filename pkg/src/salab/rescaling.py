"""Segment-wise rescaling of an SA trajectory and the stability diagnostics built on it.

The time axis ``t(n) = a(0) + ... + a(n-1)`` is cut at ``T_0 = 0`` and
``T_n = min{t(m) : t(m) >= T_{n-1} + T}``. On ``[T_n, T_{n+1})`` the
interpolated iterate path is divided by ``r(n) = max(||x(T_n)||, 1)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from ._errors import DomainError
from .audit import AuditReport
from .convex import VectorField
from .engine import SATrajectory

DEFAULT_T_WINDOW = 5.0
DEFAULT_BURN_IN = 10


@dataclass(frozen=True)
class DeltaLadder:
    """Thresholds ``d1 < d2 < d3 < d4 < 1``; ``d1`` bounds the attracting set's norm."""

    d1: float
    d2: float
    d3: float
    d4: float

    def __post_init__(self):
        if not (0 <= self.d1 < self.d2 < self.d3 < self.d4 < 1):
            raise DomainError(f"ladder must satisfy 0 <= d1 < d2 < d3 < d4 < 1, got {self}")

    @classmethod
    def from_delta1(cls, d1: float = 0.0) -> "DeltaLadder":
        gap = 1.0 - d1
        return cls(d1, d1 + 0.3 * gap, d1 + 0.6 * gap, d1 + 0.9 * gap)


def interpolate(traj: SATrajectory, t: float) -> np.ndarray:
    """Piecewise-linear interpolated path ``x(t)`` through ``x(t(n)) = x_n``."""
    times = traj.times
    if not (0 <= t <= times[-1]):
        raise DomainError(f"t = {t} outside [0, {times[-1]}]")
    k = int(np.searchsorted(times, t, side="right")) - 1
    if k >= traj.N or times[k] == t:
        return traj.xs[k].copy()
    lam = (t - times[k]) / (times[k + 1] - times[k])
    return (1.0 - lam) * traj.xs[k] + lam * traj.xs[k + 1]


@dataclass(frozen=True, eq=False)
class SegmentIndex:
    """Boundaries ``T[n] = t(m[n])`` and scale factors ``r[n]``."""

    T_window: float
    m: np.ndarray
    T: np.ndarray
    r: np.ndarray

    def __len__(self):
        return len(self.m)

    @property
    def complete(self) -> int:
        """Number of segments whose right boundary lies inside the horizon."""
        return len(self.m) - 1


def build_segments(traj: SATrajectory, T_window: float) -> SegmentIndex:
    if not T_window > 0:
        raise DomainError("T_window must be positive")
    if traj.stride != 1:
        raise DomainError("rescaling needs an unthinned trajectory")
    times = traj.times
    m = [0]
    while True:
        target = times[m[-1]] + T_window
        k = int(np.searchsorted(times, target, side="left"))
        if k > traj.N:
            break
        m.append(k)
    if len(m) < 2:
        raise DomainError(f"horizon {times[-1]:.6g} is shorter than one window of length {T_window}")
    m = np.asarray(m)
    r = np.maximum(np.linalg.norm(traj.xs[m], axis=1), 1.0)
    return SegmentIndex(float(T_window), m, times[m].copy(), r)


@dataclass(eq=False)
class RescaledView:
    """Rescaled trajectory ``x_hat``, noise sums ``zeta_hat`` and drift ``z_hat``.

    ``seg[k]`` is the segment holding step ``k``; steps past the last
    boundary belong to the last, incomplete segment.
    """

    base: SATrajectory
    segments: SegmentIndex
    seg: np.ndarray
    r_step: np.ndarray
    x_hat_grid: np.ndarray
    zeta_hat: np.ndarray
    _z_cache: dict = field(default_factory=dict, repr=False)

    @property
    def M_hat(self) -> np.ndarray:
        return self.base.noises / self.r_step[:-1, None]

    def x_hat(self, t: float) -> np.ndarray:
        """``x_hat(t) = x(t) / r(n)`` for ``t`` in ``[T_n, T_{n+1})``."""
        times = self.base.times
        if not (0 <= t <= times[-1]):
            raise DomainError(f"t = {t} outside the horizon")
        k = int(np.searchsorted(times, t, side="right")) - 1
        return interpolate(self.base, t) / self.r_step[k]

    def x_hat_left(self, n: int) -> np.ndarray:
        """Left limit ``x_hat(T_{n+1}^-) = x(T_{n+1}) / r(n)``."""
        return self.base.xs[self.segments.m[n + 1]] / self.segments.r[n]

    def z_hat(self, field: VectorField) -> np.ndarray:
        """``z_hat`` on each step: ``h_{r(n)}(x_hat(t(k)), y_k)``."""
        key = id(field)
        if key not in self._z_cache:
            r = self.r_step[:-1, None]
            xh = self.x_hat_grid[:-1]
            self._z_cache[key] = field.eval_batch(r * xh, self.base.ys[:-1]) / r
        return self._z_cache[key]

    def z_hat_at(self, field: VectorField, t: float) -> np.ndarray:
        times = self.base.times
        k = min(int(np.searchsorted(times, t, side="right")) - 1, self.base.N - 1)
        return self.z_hat(field)[k]


def rescaled_view(traj: SATrajectory, segments: SegmentIndex) -> RescaledView:
    seg = np.searchsorted(segments.m, np.arange(traj.N + 1), side="right") - 1
    r_step = segments.r[seg]
    x_hat_grid = traj.xs / r_step[:, None]
    zeta = np.zeros((traj.N + 1, traj.dim))
    np.cumsum(traj.steps[:, None] * traj.noises / r_step[:-1, None], axis=0, out=zeta[1:])
    return RescaledView(traj, segments, seg, r_step, x_hat_grid, zeta)


# --------------------------------------------------------------------------- #
# segment ODE and the gap to the rescaled path


@dataclass(frozen=True, eq=False)
class SegmentCurve:
    """``x^n(s) = x_hat(T_n) + int_0^s z_hat(T_n + u) du`` on ``[0, T_window]``."""

    start: np.ndarray
    knots: np.ndarray      # offsets t(k) - T_n of the grid points inside the window
    values: np.ndarray     # x^n at the knots
    slopes: np.ndarray     # z_hat on [knot_i, knot_{i+1})
    T_window: float

    def __call__(self, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if np.any(s < 0) or np.any(s > self.T_window * (1 + 1e-12)):
            raise DomainError("segment curve evaluated outside [0, T_window]")
        i = np.clip(np.searchsorted(self.knots, s, side="right") - 1, 0, len(self.knots) - 1)
        return self.values[i] + (s - self.knots[i])[:, None] * self.slopes[i]

    def sample(self, grid_dt: float):
        s = np.arange(0.0, self.T_window, grid_dt)
        s = np.append(s, self.T_window)
        return s, self(s)


def _segment_span(view: RescaledView, n: int):
    seg = view.segments
    if not 0 <= n < seg.complete:
        raise DomainError(f"segment {n} is not complete (have {seg.complete})")
    k0 = int(seg.m[n])
    end = seg.T[n] + seg.T_window
    kmax = int(np.searchsorted(view.base.times, end, side="right")) - 1
    return k0, min(kmax, int(seg.m[n + 1])), end


def segment_ode_solution(view: RescaledView, field: VectorField, n: int,
                         grid_dt: float | None = None):
    """Closed-form integral of the piecewise-constant ``z_hat`` over segment ``n``.

    Returns the :class:`SegmentCurve`; with ``grid_dt`` the pair
    ``(offsets, values)`` sampled on that grid is returned instead.
    """
    k0, kmax, _ = _segment_span(view, n)
    z = view.z_hat(field)
    times = view.base.times
    a = view.base.steps
    r = view.segments.r[n]
    start = view.base.xs[k0] / r
    knots = times[k0:kmax + 1] - times[k0]
    incr = a[k0:kmax, None] * z[k0:kmax]
    values = np.vstack([start, start + np.cumsum(incr, axis=0)])
    last = min(kmax, view.base.N - 1)
    slopes = np.vstack([z[k0:kmax], z[last][None]])
    curve = SegmentCurve(start, knots, values, slopes, view.segments.T_window)
    if grid_dt is None:
        return curve
    return curve.sample(grid_dt)


def _x_hat_in_segment(view: RescaledView, n: int, ks: np.ndarray) -> np.ndarray:
    # grid values scaled by r(n); at k = m(n+1) this is the left limit
    return view.base.xs[ks] / view.segments.r[n]


def difftozero_gap(view: RescaledView, field: VectorField, n: int) -> float:
    """``sup_{s in [0, T]} ||x^n(s) - x_hat(T_n + s)||`` from the two paths themselves.

    Both paths are linear between grid points, so the supremum is taken over
    the grid points in the window and the window's right end.
    """
    k0, kmax, end = _segment_span(view, n)
    curve = segment_ode_solution(view, field, n)
    ks = np.arange(k0, kmax + 1)
    diffs = curve.values - _x_hat_in_segment(view, n, ks)
    gap = float(np.max(np.linalg.norm(diffs, axis=1)))
    times = view.base.times
    if end > times[kmax] and kmax < view.base.N:
        s = end - times[k0]
        lam = (end - times[kmax]) / (times[kmax + 1] - times[kmax])
        xh = ((1 - lam) * view.base.xs[kmax] + lam * view.base.xs[kmax + 1]) / view.segments.r[n]
        gap = max(gap, float(np.linalg.norm(curve(s)[0] - xh)))
    return gap


def difftozero_gap_noise(view: RescaledView, n: int) -> float:
    """Same supremum written through the rescaled noise sums only.

    At a grid point ``t(k)`` the difference is ``zeta_hat_k - zeta_hat_{m(n)}``;
    inside ``[t(k), t(k+1))`` it adds ``(t - t(k)) M_hat_{k+1}``.
    """
    k0, kmax, end = _segment_span(view, n)
    zeta = view.zeta_hat
    diffs = zeta[k0:kmax + 1] - zeta[k0]
    gap = float(np.max(np.linalg.norm(diffs, axis=1)))
    times = view.base.times
    if end > times[kmax] and kmax < view.base.N:
        d = diffs[-1] + (end - times[kmax]) * view.base.noises[kmax] / view.segments.r[n]
        gap = max(gap, float(np.linalg.norm(d)))
    return gap


# --------------------------------------------------------------------------- #
# audits


def _extreme_points(P: np.ndarray) -> np.ndarray:
    """Points of ``P`` spanning its convex hull (all of ``P`` when the hull is degenerate)."""
    if P.shape[1] == 1:
        return P[[np.argmin(P[:, 0]), np.argmax(P[:, 0])]]
    if len(P) <= P.shape[1] + 1 or not np.any(np.ptp(P, axis=0)):
        return P
    try:
        return P[ConvexHull(P).vertices]
    except QhullError:
        return P[ConvexHull(P, qhull_options="QJ").vertices]


def _brute_diameter(V: np.ndarray) -> float:
    best = 0.0
    for i in range(len(V) - 1):
        best = max(best, float(np.max(np.linalg.norm(V[i + 1:] - V[i], axis=1))))
    return best


def point_diameter(P: np.ndarray) -> float:
    """Largest pairwise distance in a point set (hull vertices, then brute force)."""
    P = np.asarray(P, dtype=float)
    if len(P) < 2:
        return 0.0
    return _brute_diameter(_extreme_points(P))


def suffix_diameters(P: np.ndarray, starts) -> np.ndarray:
    """``point_diameter(P[s:])`` for every ``s`` in the increasing sequence ``starts``.

    Walks backwards so each block is merged with the hull of the suffix after it.
    """
    P = np.asarray(P, dtype=float)
    starts = [int(s) for s in starts]
    out = np.zeros(len(starts))
    ext = P[:0]
    end = len(P)
    for i in range(len(starts) - 1, -1, -1):
        block = np.vstack([P[starts[i]:end], ext])
        ext = _extreme_points(block) if len(block) > 1 else block
        out[i] = _brute_diameter(ext) if len(ext) > 1 else 0.0
        end = starts[i]
    return out


def noise_cauchy_check(view: RescaledView, tail_start: int, tol: float) -> AuditReport:
    """Pass iff ``sup_{m > n >= tail_start} ||zeta_hat_m - zeta_hat_n|| <= tol``."""
    if not 0 <= tail_start < view.base.N:
        raise DomainError(f"tail_start {tail_start} outside the horizon")
    sup = point_diameter(view.zeta_hat[tail_start:])
    return AuditReport("zeta_hat Cauchy tail", sup <= tol,
                       details={"sup": sup, "tol": tol, "tail_start": tail_start},
                       witness=None if sup <= tol else {"sup": sup})


def stability_ratio_audit(view: RescaledView, ladder: DeltaLadder | None = None,
                          burn_in: int = DEFAULT_BURN_IN, growth_factor: float = 2.0,
                          r_threshold: float = 1.0) -> AuditReport:
    """Contraction ratios ``||x(T_{l+1})|| / ||x(T_l)||`` over segments with ``r(l) > r_threshold``.

    Passes when every ratio past ``burn_in`` is below ``d4`` (vacuously when
    the path never leaves the ball of radius ``r_threshold`` there). The
    contraction is a large-norm property: a run settling at an equilibrium of
    norm above 1 keeps ratios near 1, so raise ``r_threshold`` past that norm.
    ``r`` counts as bounded when its maximum over the later half of the
    segments is at most ``growth_factor`` times its maximum over the earlier
    half.
    """
    if r_threshold < 1:
        raise DomainError("r_threshold must be >= 1")
    ladder = ladder or DeltaLadder.from_delta1(0.0)
    seg = view.segments
    nb = np.linalg.norm(view.base.xs[seg.m], axis=1)
    ratios = {}
    for l in range(len(nb) - 1):
        if seg.r[l] > r_threshold:
            ratios[l] = float(nb[l + 1] / nb[l])
    late = {l: q for l, q in ratios.items() if l >= burn_in}
    bad = [l for l, q in late.items() if not q < ladder.d4]
    r = seg.r
    half = len(r) // 2
    bounded = bool(len(r) < 4 or r[half:].max() <= growth_factor * r[:half].max())
    persistent = float(np.mean([q >= 1.0 for q in late.values()])) if late else 0.0
    witness = {"segment": bad[0], "ratio": late[bad[0]], "d4": ladder.d4} if bad else None
    return AuditReport("stability ratio", not bad,
                       details={"d4": ladder.d4, "burn_in": burn_in, "r_threshold": r_threshold,
                                "ratios": ratios,
                                "late_segments": len(late), "fraction_ratio_ge_1": persistent,
                                "r": r, "r_max": float(r.max()), "r_bounded": bounded},
                       witness=witness,
                       justification="" if late else "vacuous: no late segment starts outside the threshold ball")


def z_hat_bound_ratio(view: RescaledView, field: VectorField) -> float:
    """``max ||z_hat|| / (K (1 + ||x_hat||))`` over recorded steps; at most 1 under the growth bound."""
    z = view.z_hat(field)
    xh = view.x_hat_grid[:-1]
    return float(np.max(np.linalg.norm(z, axis=1) / (field.bound_K * (1 + np.linalg.norm(xh, axis=1)))))


def gronwall_second_moment_bound(K: float, T: float) -> float:
    """``([1 + (K + sqrt K)(T + 1)] exp((K + sqrt K)(T + 1)))^2``."""
    c = (K + math.sqrt(K)) * (T + 1.0)
    return ((1.0 + c) * math.exp(c)) ** 2


def default_T_window(field: VectorField, ladder: DeltaLadder | None = None, dt: float | None = None,
                     rng=None) -> float:
    """Flow time ``T(d2 - d1)`` of ``x' in H(x)`` from the unit ball; 5.0 if the estimate fails."""
    from . import di
    from ._errors import EstimationFailed

    ladder = ladder or DeltaLadder.from_delta1(0.0)
    dt = dt if dt is not None else di.default_dt(field.lipschitz_L)
    try:
        return di.estimate_T_epsilon(di.H_rhs(field), np.zeros((1, field.dim)), 1.0,
                                     ladder.d2 - ladder.d1, dt, samples=16, horizon=50.0,
                                     rng=np.random.default_rng(0) if rng is None else rng)
    except EstimationFailed:
        return DEFAULT_T_WINDOW


def diagnostics_rows(view: RescaledView, field: VectorField, ladder: DeltaLadder | None = None):
    """One row per complete segment: ``segment,T_n,m_n,r_n,ratio,gap,zeta_tail_sup``."""
    seg = view.segments
    nb = np.linalg.norm(view.base.xs[seg.m], axis=1)
    tails = suffix_diameters(view.zeta_hat, seg.m[:seg.complete])
    rows = []
    for n in range(seg.complete):
        ratio = nb[n + 1] / nb[n] if nb[n] > 0 else float("nan")
        rows.append({"segment": n, "T_n": float(seg.T[n]), "m_n": int(seg.m[n]), "r_n": float(seg.r[n]),
                     "ratio": float(ratio), "gap": difftozero_gap(view, field, n),
                     "zeta_tail_sup": float(tails[n])})
    return rows


def write_diagnostics_csv(rows, path):
    cols = ["segment", "T_n", "m_n", "r_n", "ratio", "gap", "zeta_tail_sup"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([row[c] if isinstance(row[c], int) else repr(float(row[c])) for c in cols])
