"""Finite controlled Markov chains, stationary policies and occupation measures.

States and controls are indexed ``0..nS-1`` and ``0..nU-1``; labels are kept
for reporting only. The kernel ``p(. | y, z, x)`` is either a constant tensor
or the blend ``P0 + clamp(w . x, 0, 1) (P1 - P0)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from ._errors import DomainError, MultichainError, UnknownStateError
from .audit import AuditReport
from .convex import ConvexSet, VectorField

ROW_TOL = 1e-12


def _check_stochastic(P: np.ndarray, what: str):
    if np.any(P < 0):
        raise DomainError(f"{what} has negative entries")
    sums = P.sum(axis=-1)
    bad = np.argwhere(np.abs(sums - 1.0) > ROW_TOL)
    if bad.size:
        idx = tuple(int(i) for i in bad[0])
        raise DomainError(f"{what} row {idx} sums to {sums[idx]!r}, not 1 (row sum)")


@dataclass(frozen=True, eq=False)
class MarkovModel:
    """Controlled Markov chain over finite states and controls.

    Parameters
    ----------
    kernel : array, shape (nS, nU, nS)
        ``kernel[y, z]`` is the distribution of the next state. For the
        parametric form this is ``P0``.
    kernel_alt, weight : optional
        ``P1`` and ``w`` of the x-dependent blend. ``None`` means the kernel
        does not depend on ``x``.
    """

    kernel: np.ndarray
    kernel_alt: np.ndarray | None = None
    weight: np.ndarray | None = None
    states: tuple = ()
    controls: tuple = ()
    label: str = ""
    _cum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        P0 = np.array(self.kernel, dtype=float)
        if P0.ndim == 2:
            P0 = P0[:, None, :]
        if P0.ndim != 3 or P0.shape[0] != P0.shape[2]:
            raise DomainError("kernel must have shape (nS, nU, nS)")
        _check_stochastic(P0, "kernel")
        P0.setflags(write=False)
        object.__setattr__(self, "kernel", P0)
        if (self.kernel_alt is None) != (self.weight is None):
            raise DomainError("parametric kernel needs both kernel_alt and weight")
        if self.kernel_alt is not None:
            P1 = np.array(self.kernel_alt, dtype=float)
            if P1.ndim == 2:
                P1 = P1[:, None, :]
            if P1.shape != P0.shape:
                raise DomainError("kernel_alt shape must match kernel")
            _check_stochastic(P1, "kernel_alt")
            w = np.array(self.weight, dtype=float).reshape(-1)
            P1.setflags(write=False)
            w.setflags(write=False)
            object.__setattr__(self, "kernel_alt", P1)
            object.__setattr__(self, "weight", w)
        nS, nU = P0.shape[:2]
        object.__setattr__(self, "states", tuple(self.states) or tuple(range(nS)))
        object.__setattr__(self, "controls", tuple(self.controls) or tuple(range(nU)))
        if len(self.states) != nS or len(self.controls) != nU:
            raise DomainError("state/control labels do not match kernel shape")
        object.__setattr__(self, "_cum", np.cumsum(P0, axis=-1))

    @classmethod
    def uncontrolled(cls, P, **kw) -> "MarkovModel":
        return cls(np.asarray(P, dtype=float)[:, None, :], **kw)

    @property
    def nS(self) -> int:
        return self.kernel.shape[0]

    @property
    def nU(self) -> int:
        return self.kernel.shape[1]

    @property
    def depends_on_x(self) -> bool:
        return self.kernel_alt is not None

    @property
    def continuity_modulus(self) -> float:
        """Constant ``m`` with ``max |p(.|y,z,x1) - p(.|y,z,x2)| <= m ||x1 - x2||``."""
        if not self.depends_on_x:
            return 0.0
        return float(np.linalg.norm(self.weight) * np.max(np.abs(self.kernel_alt - self.kernel)))

    def _blend(self, x) -> float:
        return float(np.clip(self.weight @ np.asarray(x, dtype=float).reshape(-1), 0.0, 1.0))

    def kernel_at(self, x=None) -> np.ndarray:
        """Full tensor ``p(y' | y, z, x)``."""
        if not self.depends_on_x:
            return self.kernel
        if x is None:
            raise DomainError("this kernel depends on x")
        lam = self._blend(x)
        return self.kernel + lam * (self.kernel_alt - self.kernel)

    def row(self, y, z, x=None) -> np.ndarray:
        self._check(y, z)
        return self.kernel_at(x)[y, z]

    def _check(self, y, z):
        if not (isinstance(y, (int, np.integer)) and 0 <= y < self.nS):
            raise UnknownStateError(f"state index {y!r} out of range")
        if not (isinstance(z, (int, np.integer)) and 0 <= z < self.nU):
            raise UnknownStateError(f"control index {z!r} out of range")

    def cumulative_rows(self, Y, Z, X) -> np.ndarray:
        """Batch of cumulative kernel rows for ``(Y[i], Z[i], X[i])``."""
        if not self.depends_on_x:
            return self._cum[Y, Z]
        lam = np.clip(X @ self.weight, 0.0, 1.0)
        rows = self.kernel[Y, Z] + lam[:, None] * (self.kernel_alt[Y, Z] - self.kernel[Y, Z])
        return np.cumsum(rows, axis=-1)

    def describe(self) -> dict:
        out = {"states": list(self.states), "controls": list(self.controls),
               "kernel": self.kernel.tolist()}
        if self.depends_on_x:
            out["kernel_alt"] = self.kernel_alt.tolist()
            out["weight"] = self.weight.tolist()
        return out


def draw_index(cum: np.ndarray, u) -> np.ndarray:
    """Inverse-CDF draw: number of cumulative entries ``<= u``, capped at the last index."""
    cum = np.atleast_2d(cum)
    u = np.atleast_1d(u)
    idx = (cum <= u[:, None]).sum(axis=-1)
    return np.minimum(idx, cum.shape[-1] - 1)


def sample_step(model: MarkovModel, y, z, x, rng) -> int:
    """Draw ``y_{n+1}`` from ``p(. | y, z, x)``."""
    row = model.row(y, z, x)
    return int(draw_index(np.cumsum(row), rng.random())[0])


@dataclass(frozen=True, eq=False)
class StationaryPolicy:
    """Row-stochastic ``nS x nU`` matrix of control probabilities."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 2:
            raise DomainError("policy must be an nS x nU matrix")
        _check_stochastic(p, "policy")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, nS, nU) -> "StationaryPolicy":
        return cls(np.full((nS, nU), 1.0 / nU))

    @classmethod
    def deterministic(cls, choice, nU) -> "StationaryPolicy":
        choice = [int(c) for c in choice]
        if any(not 0 <= c < nU for c in choice):
            raise DomainError(f"deterministic choices {choice} outside controls 0..{nU - 1}")
        p = np.zeros((len(choice), nU))
        p[np.arange(len(choice)), list(choice)] = 1.0
        return cls(p)

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.probs, axis=-1)


@dataclass(frozen=True, eq=False)
class OccupationMeasure:
    """Joint weights ``Psi(y, z)`` with state marginal ``eta``."""

    weights: np.ndarray
    policy: tuple | None = None

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim == 1:
            w = w[:, None]
        if np.any(w < -1e-15) or abs(w.sum() - 1.0) > 1e-9:
            raise DomainError("occupation weights must be nonnegative and sum to 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def marginal(self) -> np.ndarray:
        return self.weights.sum(axis=1)


# --------------------------------------------------------------------------- #
# chains


def policy_kernel(model: MarkovModel, policy: StationaryPolicy, x=None) -> np.ndarray:
    """``P_phi(y -> y') = sum_z phi(y, z) p(y' | y, z, x)``."""
    if policy.probs.shape != (model.nS, model.nU):
        raise DomainError(f"policy shape {policy.probs.shape} != ({model.nS}, {model.nU})")
    return np.einsum("yz,yzw->yw", policy.probs, model.kernel_at(x))


def recurrent_classes(P: np.ndarray) -> list[list[int]]:
    """Closed communicating classes of the support graph of ``P``."""
    n, labels = connected_components(csr_matrix(P > 0), directed=True, connection="strong")
    classes = []
    for c in range(n):
        members = np.flatnonzero(labels == c)
        outside = np.setdiff1d(np.arange(P.shape[0]), members)
        if not np.any(P[np.ix_(members, outside)] > 0):
            classes.append(members.tolist())
    return classes


def invariant_measure(P, residual_tol: float = 1e-10) -> np.ndarray:
    """Unique invariant distribution of a unichain stochastic matrix.

    Solves ``eta (P - I) = 0, sum(eta) = 1`` directly; falls back to power
    iteration on the lazy chain ``(P + I) / 2`` when the residual is too large.

    Raises
    ------
    MultichainError
        If the chain has two or more recurrent classes.
    """
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise DomainError("transition matrix must be square")
    _check_stochastic(P, "transition matrix")
    classes = recurrent_classes(P)
    if len(classes) > 1:
        raise MultichainError(f"chain has {len(classes)} recurrent classes: {classes}", classes=classes)
    n = P.shape[0]
    A = P.T - np.eye(n)
    A[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    try:
        eta = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        eta = np.full(n, 1.0 / n)
    eta = np.clip(eta, 0.0, None)
    eta /= eta.sum()
    if np.abs(eta @ P - eta).sum() > residual_tol:
        lazy = 0.5 * (P + np.eye(n))
        for _ in range(100000):
            nxt = eta @ lazy
            if np.abs(nxt - eta).sum() <= residual_tol * 1e-2:
                eta = nxt
                break
            eta = nxt
        eta /= eta.sum()
    return eta


def occupation_measure(model: MarkovModel, policy: StationaryPolicy, x=None) -> OccupationMeasure:
    """Ergodic occupation measure ``eta_{x,phi}(y) phi(y, z)``."""
    eta = invariant_measure(policy_kernel(model, policy, x))
    return OccupationMeasure(eta[:, None] * policy.probs)


def occupation_vertices(model: MarkovModel, x=None) -> list[OccupationMeasure]:
    """Occupation measures of every deterministic stationary policy.

    Their convex hull represents ``D(x)`` for unichain models.
    """
    out = []
    for choice in itertools.product(range(model.nU), repeat=model.nS):
        pol = StationaryPolicy.deterministic(choice, model.nU)
        try:
            eta = invariant_measure(policy_kernel(model, pol, x))
        except MultichainError as err:
            raise MultichainError(f"deterministic policy {choice} is multichain: {err}",
                                  classes=err.classes, policy=choice) from err
        out.append(OccupationMeasure(eta[:, None] * pol.probs, policy=choice))
    return out


def tilde_h(field: VectorField, x, nu: OccupationMeasure) -> np.ndarray:
    """State average ``sum_y nu(y, U) h(x, y)``."""
    eta = nu.marginal
    if eta.shape[0] != field.n_states:
        raise DomainError("measure and field disagree on the number of states")
    out = np.zeros(field.dim)
    for y in np.flatnonzero(eta):
        out += eta[y] * field(x, int(y))
    return out


def hat_h_eval(field: VectorField, model: MarkovModel, x) -> ConvexSet:
    """Hull of ``tilde_h(x, nu)`` over the vertices of ``D(x)``."""
    pts = np.array([tilde_h(field, x, nu) for nu in occupation_vertices(model, x)])
    return ConvexSet(pts)


def empirical_occupation(traj, s: float, t: float) -> OccupationMeasure:
    """Time-weighted frequency of ``(y_n, z_n)`` over ``[s, t]``.

    Step ``n`` carries the pair ``(y_n, z_n)`` on ``[t(n), t(n+1))``.
    """
    times = traj.times
    if not (0 <= s < t <= times[-1]):
        raise DomainError(f"window [{s}, {t}] is empty or outside [0, {times[-1]}]")
    lo = np.maximum(times[:-1], s)
    hi = np.minimum(times[1:], t)
    w = np.clip(hi - lo, 0.0, None)
    nS = traj.n_states or int(traj.ys.max()) + 1
    nU = traj.n_controls or int(traj.zs.max()) + 1
    W = np.zeros((nS, nU))
    np.add.at(W, (traj.ys[:-1], traj.zs), w)
    return OccupationMeasure(W / W.sum())


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def audit_B1(model: MarkovModel, dim: int, samples: int = 64, radius: float = 10.0, rng=None) -> AuditReport:
    """Row stochasticity and sampled continuity of the kernel in ``x``."""
    rng = np.random.default_rng(0) if rng is None else rng
    m = model.continuity_modulus
    witness = None
    worst = 0.0
    for _ in range(samples):
        x1 = rng.uniform(-radius, radius, dim)
        x2 = x1 + rng.standard_normal(dim) * 1e-3
        K1, K2 = model.kernel_at(x1), model.kernel_at(x2)
        for K in (K1, K2):
            if np.any(K < -ROW_TOL) or np.max(np.abs(K.sum(-1) - 1)) > ROW_TOL:
                witness = witness or {"x": x1, "problem": "row not stochastic"}
        gap = float(np.max(np.abs(K1 - K2)))
        dx = float(np.linalg.norm(x1 - x2))
        worst = max(worst, gap / dx)
        if gap > m * dx + 1e-12 and witness is None:
            witness = {"x1": x1, "x2": x2, "gap": gap, "modulus": m}
    return AuditReport("B1", witness is None, details={"modulus": m, "max_observed_ratio": worst},
                       witness=witness)


def audit_B2(model: MarkovModel) -> AuditReport:
    """Compactness of ``D(x)``, given that every deterministic policy is unichain.

    A blended kernel ``P0 + lam (P1 - P0)`` has only three support patterns
    (``lam = 0``, ``0 < lam < 1``, ``lam = 1``), so checking ``P0``, the
    midpoint and ``P1`` covers every ``x``.
    """
    if model.depends_on_x:
        kernels = {"lam=0": model.kernel, "0<lam<1": 0.5 * (model.kernel + model.kernel_alt),
                   "lam=1": model.kernel_alt}
    else:
        kernels = {"constant": model.kernel}
    for where, K in kernels.items():
        try:
            occupation_vertices(MarkovModel(K))
        except MultichainError as err:
            return AuditReport("B2", False, details={"kernel": where},
                               witness={"policy": list(err.policy), "classes": err.classes},
                               justification="a deterministic policy is multichain; the vertex "
                                             "representation of D(x) does not apply")
    return AuditReport("B2", True, details={"vertices": model.nU ** model.nS},
                       justification="D(x) is the hull of finitely many deterministic-policy occupation measures")


def audit_B3(model: MarkovModel) -> AuditReport:
    return AuditReport("B3", True, justification="every family of measures on the finite set S x U is tight")
