"""The controlled-Markov SA recursion ``x_{n+1} = x_n + a(n) [h(x_n, y_n) + M_{n+1}]``.

Several seeds are advanced together as a batch. Each seed owns its generator
and draws its randomness in fixed-size chunks, so a seed's trajectory does not
depend on which other seeds share the batch.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import polygamma, zeta

from ._errors import DomainError
from .audit import AuditReport
from .convex import VectorField
from .markov import MarkovModel, StationaryPolicy, draw_index

CHUNK = 4096
DIVERGENCE_THRESHOLD = 1e12
MAX_STORED = 10 ** 6


@dataclass(frozen=True)
class StepSchedule:
    """Step sizes ``a(n)``, clamped to at most 1.

    ``harmonic``: ``alpha / (n + 1 + beta)``. ``power``: ``alpha / (n + 1)^p``
    with ``p`` in (0.5, 1]. ``unchecked=True`` admits exponents outside that
    range for experiments that deliberately break square summability.
    """

    kind: str = "harmonic"
    alpha: float = 1.0
    beta: float = 0.0
    p: float = 1.0
    unchecked: bool = False

    def __post_init__(self):
        if self.kind not in ("harmonic", "power"):
            raise DomainError(f"unknown schedule kind {self.kind!r}")
        if not self.alpha > 0 or self.beta < 0:
            raise DomainError("need alpha > 0 and beta >= 0")
        if self.kind == "power" and not (0.5 < self.p <= 1.0) and not self.unchecked:
            raise DomainError(f"power exponent {self.p} outside (0.5, 1]")
        if self.kind == "power" and not self.p > 0:
            raise DomainError("power exponent must be positive")

    def _raw(self, n):
        n = np.asarray(n, dtype=float)
        if self.kind == "harmonic":
            return self.alpha / (n + 1.0 + self.beta)
        return self.alpha / (n + 1.0) ** self.p

    def values(self, N: int) -> np.ndarray:
        return np.minimum(1.0, self._raw(np.arange(N)))

    def __call__(self, n: int) -> float:
        return schedule_eval(self, n)

    @property
    def square_summable(self) -> bool:
        return self.kind == "harmonic" or self.p > 0.5

    def _first_unclamped(self) -> int:
        if self.kind == "harmonic":
            k = self.alpha - 1.0 - self.beta
        else:
            k = self.alpha ** (1.0 / self.p) - 1.0
        return max(0, math.ceil(k))

    def tail_square_sum(self, n: int) -> float:
        """``sum_{k >= n} a(k)^2`` (closed form past the clamped prefix)."""
        if not self.square_summable:
            return math.inf
        m = max(n, self._first_unclamped())
        head = float(np.sum(self.values(m)[n:] ** 2)) if m > n else 0.0
        if self.kind == "harmonic":
            tail = self.alpha ** 2 * float(polygamma(1, m + 1.0 + self.beta))
        else:
            tail = self.alpha ** 2 * float(zeta(2.0 * self.p, m + 1.0))
        return head + tail

    def tail_start(self, bound: float) -> int:
        """Smallest ``n`` with ``tail_square_sum(n) <= bound``."""
        if not self.square_summable:
            raise DomainError("schedule is not square summable")
        lo, hi = 0, 1
        while self.tail_square_sum(hi) > bound:
            lo, hi = hi, hi * 2
        while lo < hi:
            mid = (lo + hi) // 2
            if self.tail_square_sum(mid) <= bound:
                hi = mid
            else:
                lo = mid + 1
        return lo

    def describe(self) -> dict:
        return {"kind": self.kind, "alpha": self.alpha, "beta": self.beta, "p": self.p}


def schedule_eval(s: StepSchedule, n: int) -> float:
    if n < 0:
        raise DomainError("step index must be nonnegative")
    return float(min(1.0, s._raw(n)))


@dataclass(frozen=True)
class NoiseModel:
    """State-scaled martingale differences ``M = sigma0 sqrt(1 + ||x||^2) xi``.

    ``xi`` has i.i.d. zero-mean, unit-variance coordinates: standard normal
    for ``gaussian``, uniform on ``[-sqrt 3, sqrt 3]`` for ``bounded-uniform``.
    """

    kind: str = "none"
    sigma0: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "gaussian", "bounded-uniform"):
            raise DomainError(f"unknown noise kind {self.kind!r}")
        if self.sigma0 < 0:
            raise DomainError("sigma0 must be nonnegative")

    @property
    def active(self) -> bool:
        return self.kind != "none" and self.sigma0 > 0

    def k_noise(self, d: int) -> float:
        """Constant in ``E[||M||^2 | F_n] <= K (1 + ||x_n||^2)``."""
        return d * self.sigma0 ** 2 if self.active else 0.0

    def innovations(self, rng, shape) -> np.ndarray:
        if self.kind == "gaussian":
            return rng.standard_normal(shape)
        return rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), shape)

    def scale(self, X: np.ndarray) -> np.ndarray:
        return self.sigma0 * np.sqrt(1.0 + (X * X).sum(axis=-1))

    def describe(self) -> dict:
        return {"kind": self.kind, "sigma0": self.sigma0}


def noise_sample(nm: NoiseModel, x, rng) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if not nm.active:
        return np.zeros(x.shape[1])
    return (nm.scale(x)[:, None] * nm.innovations(rng, x.shape))[0]


@dataclass(eq=False)
class SATrajectory:
    """Recorded run: ``xs[n] = x_n``, ``noises[n] = M_{n+1}``, ``times[n] = t(n)``."""

    xs: np.ndarray
    ys: np.ndarray
    zs: np.ndarray
    noises: np.ndarray
    steps: np.ndarray
    times: np.ndarray
    seed: int = 0
    config_hash: str = ""
    diverged_at: int | None = None
    n_states: int = 0
    n_controls: int = 0
    stride: int = 1

    def __post_init__(self):
        n = len(self.steps)
        if not (len(self.xs) == len(self.ys) == len(self.times) == n + 1
                and len(self.zs) == len(self.noises) == n):
            raise DomainError("inconsistent trajectory lengths")

    @property
    def N(self) -> int:
        return len(self.steps)

    @property
    def dim(self) -> int:
        return self.xs.shape[1]

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.xs, axis=1)


def config_hash(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=lambda o: np.asarray(o).tolist())
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_sa_batch(field: VectorField, model: MarkovModel, policy: StationaryPolicy,
                 schedule: StepSchedule, noise: NoiseModel, x0=None, y0: int = 0,
                 N: int = 1000, seeds=(0,),
                 divergence_threshold: float = DIVERGENCE_THRESHOLD) -> list[SATrajectory]:
    """Run the recursion for every seed in ``seeds``.

    A seed whose iterate becomes non-finite or exceeds
    ``divergence_threshold`` in norm stops there; its trajectory is truncated
    after the offending iterate and ``diverged_at`` records that index.
    """
    d = field.dim
    if N < 1:
        raise DomainError("horizon N must be >= 1")
    if model.nS != field.n_states:
        raise DomainError(f"field has {field.n_states} states, model has {model.nS}")
    if policy.probs.shape != (model.nS, model.nU):
        raise DomainError("policy shape does not match model")
    if not 0 <= y0 < model.nS:
        raise DomainError(f"initial state {y0} out of range")
    seeds = [int(s) for s in seeds]
    if len(set(seeds)) != len(seeds):
        raise DomainError("seeds must be distinct")
    x0 = np.zeros(d) if x0 is None else np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape[0] != d:
        raise DomainError("x0 has the wrong dimension")
    if N > MAX_STORED:
        raise DomainError(f"N > {MAX_STORED} exceeds the in-memory trajectory limit")

    B = len(seeds)
    rngs = [np.random.default_rng(s) for s in seeds]
    a = schedule.values(N)
    times = np.empty(N + 1)
    times[0] = 0.0
    np.cumsum(a, out=times[1:])
    xs = np.empty((B, N + 1, d))
    ys = np.empty((B, N + 1), dtype=np.int64)
    zs = np.zeros((B, N), dtype=np.int64)
    Ms = np.zeros((B, N, d))
    x = np.tile(x0, (B, 1))
    y = np.full(B, y0, dtype=np.int64)
    xs[:, 0] = x
    ys[:, 0] = y
    alive = np.ones(B, dtype=bool)
    div_at = np.full(B, -1)
    pol_cum = policy.cumulative
    controlled = model.nU > 1

    with np.errstate(over="ignore", invalid="ignore"):
        for start in range(0, N, CHUNK):
            C = min(CHUNK, N - start)
            Up = np.stack([r.random(C) for r in rngs])
            Us = np.stack([r.random(C) for r in rngs])
            Xi = np.stack([noise.innovations(r, (C, d)) for r in rngs]) if noise.active else None
            for j in range(C):
                n = start + j
                z = draw_index(pol_cum[y], Up[:, j]) if controlled else zs[:, n]
                if Xi is not None:
                    M = noise.scale(x)[:, None] * Xi[:, j]
                else:
                    M = Ms[:, n]
                xn = x + a[n] * (field.eval_batch(x, y) + M)
                yn = draw_index(model.cumulative_rows(y, z, x), Us[:, j])
                zs[:, n] = z
                Ms[:, n] = M
                xs[:, n + 1] = xn
                ys[:, n + 1] = yn
                bad = alive & ~(np.isfinite(xn).all(axis=1)
                                 & (np.sqrt((xn * xn).sum(axis=1)) <= divergence_threshold))
                if bad.any():
                    div_at[bad] = n + 1
                    alive &= ~bad
                    if not alive.any():
                        break
                x = np.where(alive[:, None], xn, x)
                y = np.where(alive, yn, y)
            if not alive.any():
                break

    h = config_hash(field.describe(), model.describe(), policy.probs, schedule.describe(),
                    noise.describe(), x0, y0, N)
    out = []
    for b, seed in enumerate(seeds):
        k = N if div_at[b] < 0 else int(div_at[b])
        out.append(SATrajectory(xs[b, :k + 1], ys[b, :k + 1], zs[b, :k], Ms[b, :k], a[:k],
                                times[:k + 1], seed=seed, config_hash=h,
                                diverged_at=None if div_at[b] < 0 else k,
                                n_states=model.nS, n_controls=model.nU))
    return out


def run_sa(field, model, policy, schedule, noise, x0=None, y0=0, N=1000, seed=0,
           divergence_threshold=DIVERGENCE_THRESHOLD) -> SATrajectory:
    """Single-seed run; identical to the matching entry of :func:`run_sa_batch`."""
    return run_sa_batch(field, model, policy, schedule, noise, x0, y0, N, (seed,),
                        divergence_threshold)[0]


def step_residuals(traj: SATrajectory, field: VectorField) -> np.ndarray:
    """``x_{n+1} - x_n - a(n) (h(x_n, y_n) + M_{n+1})`` recomputed from stored values."""
    X = traj.xs[:-1]
    pred = X + traj.steps[:, None] * (field.eval_batch(X, traj.ys[:-1]) + traj.noises)
    return traj.xs[1:] - pred


def audit_A2(traj: SATrajectory, noise: NoiseModel, window: int = 1000,
             margin: float = 0.2) -> AuditReport:
    """Windowed mean of ``||M_{n+1}||^2 / (1 + ||x_n||^2)`` against ``K_noise (1 + margin)``."""
    ratios = (traj.noises ** 2).sum(axis=1) / (1.0 + (traj.xs[:-1] ** 2).sum(axis=1))
    K = noise.k_noise(traj.dim)
    window = max(1, min(window, len(ratios)))
    nw = max(1, len(ratios) // window)
    means = ratios[: nw * window].reshape(nw, window).mean(axis=1)
    limit = K * (1.0 + margin)
    over = np.flatnonzero(means > limit)
    witness = None
    if over.size:
        w = int(over[0])
        witness = {"window": w, "steps": [w * window, (w + 1) * window], "mean_ratio": means[w],
                   "limit": limit}
    return AuditReport("A2", witness is None,
                       details={"K_noise": K, "max_window_mean": float(means.max()),
                                "overall_mean": float(ratios.mean()), "window": window},
                       witness=witness)


def audit_A3(schedule: StepSchedule, N: int = 10 ** 6) -> AuditReport:
    """Positivity, cap, divergence of the partial sums and square summability."""
    a = schedule.values(N)
    ok_pos = bool(np.all(a > 0))
    ok_cap = bool(np.all(a <= 1.0))
    summable = schedule.square_summable
    witness = None
    if not ok_pos:
        witness = {"n": int(np.argmin(a)), "a": float(a.min())}
    elif not summable:
        witness = {"problem": "sum of a(n)^2 diverges", "p": schedule.p}
    return AuditReport("A3", ok_pos and ok_cap and summable,
                       details={"partial_sum": float(a.sum()),
                                "square_tail_after_N": schedule.tail_square_sum(N) if summable else None,
                                "sup_a": float(a.max())},
                       witness=witness,
                       justification="sum a(n) diverges for harmonic and power kinds with p <= 1")


def write_trajectory_csv(traj: SATrajectory, path, stride: int = 1):
    """CSV with columns ``n,t,a_n,y,z,x_*,M_*``; the final row has no step/control/noise."""
    d = traj.dim
    header = ["n", "t", "a_n", "y", "z"] + [f"x_{i}" for i in range(d)] + [f"M_{i}" for i in range(d)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        rows = list(range(0, traj.N + 1, stride))
        if rows[-1] != traj.N:
            rows.append(traj.N)
        for n in rows:
            last = n == traj.N
            row = [n, _fmt(traj.times[n]), "" if last else _fmt(traj.steps[n]), int(traj.ys[n]),
                   "" if last else int(traj.zs[n])]
            row += [_fmt(v) for v in traj.xs[n]]
            row += [""] * d if last else [_fmt(v) for v in traj.noises[n]]
            w.writerow(row)


def _fmt(v) -> str:
    return repr(float(v))
