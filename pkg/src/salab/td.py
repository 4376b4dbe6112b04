"""TD-style recursions with affine drivers ``h(x, y) = A(y) x + b(y)``.

For an affine driver ``h_c = A(y) x + b(y)/c``, ``h_inf = A(y) x`` and
``H(x) = hull{A(y) x}``; with ``A`` constant this is the linear ODE
``x' = M x``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ._errors import ConfigError, DomainError, NumericalError
from .audit import AuditReport
from .convex import VectorField, scale_map_eval
from .di import LinearHullMap, lyapunov_decrease_audit
from .markov import MarkovModel, invariant_measure


@dataclass(frozen=True, eq=False)
class AffineFamily:
    """Tables ``A(y)``, ``b(y)`` over the states ``0..nS-1``.

    Tables may be arrays or mappings keyed by state; :meth:`arrays` raises
    :class:`ConfigError` when a mapping misses a state.
    """

    A_table: object
    b_table: object
    n_states: int | None = None

    @classmethod
    def constant(cls, M, b_table) -> "AffineFamily":
        b = np.asarray(b_table, dtype=float)
        if b.ndim == 1:
            b = b[None]
        return cls(np.repeat(np.asarray(M, dtype=float)[None], len(b), axis=0), b)

    def _table(self, table, what):
        if isinstance(table, dict):
            n = self.n_states if self.n_states is not None else len(table)
            missing = [y for y in range(n) if y not in table]
            if missing:
                raise ConfigError(f"{what} table misses states {missing}")
            return np.array([table[y] for y in range(n)], dtype=float)
        return np.asarray(table, dtype=float)

    def arrays(self):
        A = self._table(self.A_table, "A")
        b = self._table(self.b_table, "b")
        if A.ndim == 2:
            A = A[None]
        if b.ndim == 1:
            b = b[None]
        if A.ndim != 3 or A.shape[1] != A.shape[2] or b.shape != A.shape[:2]:
            raise ConfigError(f"inconsistent table shapes A{A.shape} b{b.shape}")
        if self.n_states is not None and len(A) != self.n_states:
            raise ConfigError(f"tables cover {len(A)} states, expected {self.n_states}")
        return A, b

    @property
    def L(self) -> float:
        A, _ = self.arrays()
        return float(max(np.linalg.norm(a, 2) for a in A))

    @property
    def M_b(self) -> float:
        _, b = self.arrays()
        return float(np.max(np.linalg.norm(b, axis=1)))

    @property
    def is_constant(self) -> bool:
        A, _ = self.arrays()
        return bool(np.all(A == A[0]))

    def field(self) -> VectorField:
        A, b = self.arrays()
        return VectorField.affine(A, b)


def check_T1(fam: AffineFamily) -> AuditReport:
    """Completeness and finiteness of the tables; on a finite state set continuity is automatic."""
    A, b = fam.arrays()
    finite = bool(np.all(np.isfinite(A)) and np.all(np.isfinite(b)))
    details = {"n_states": len(A), "dim": A.shape[1]}
    witness = None
    if finite:
        details["L"] = fam.L
        details["M_b"] = fam.M_b
    else:
        bad = [int(y) for y in range(len(A)) if not (np.all(np.isfinite(A[y])) and np.all(np.isfinite(b[y])))]
        witness = {"non_finite_states": bad}
    return AuditReport("T1", finite, details=details, witness=witness,
                       justification="maps on a finite state set are continuous")


def check_S1_affine(fam: AffineFamily, c_schedule=(1e1, 1e2, 1e3, 1e4, 1e5, 1e6), x=None) -> AuditReport:
    """``h_c(x, y) - A(y) x = b(y)/c`` vanishes at rate ``1/c``; spot-checked along ``c_schedule``."""
    field = fam.field()
    A, b = fam.arrays()
    x = np.ones(field.dim) if x is None else np.asarray(x, dtype=float)
    Mb = fam.M_b
    residuals = []
    for c in c_schedule:
        res = max(float(np.linalg.norm(scale_map_eval(field, c, x, y) - A[y] @ x)) for y in field.states)
        residuals.append(res)
    residuals = np.array(residuals)
    cs = np.asarray(c_schedule, dtype=float)
    if Mb == 0:
        rate_ok = bool(np.all(residuals == 0))
    else:
        scaled = residuals * cs / Mb
        rate_ok = bool(np.all((scaled >= 0.5) & (scaled <= 2.0)))
    return AuditReport("S1", rate_ok,
                       details={"bound_at_c_min": Mb / cs[-1], "c": cs, "residuals": residuals},
                       justification="b is bounded on a finite state set, so b(y)/c -> 0 uniformly")


def hurwitz_check(M, margin: float = 1e-8) -> AuditReport:
    """Pass iff every eigenvalue of ``M`` has real part below ``-margin``."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DomainError("hurwitz_check needs a square matrix")
    try:
        eig = np.linalg.eigvals(M)
    except np.linalg.LinAlgError as err:
        raise NumericalError(f"eigenvalue computation failed: {err}") from err
    abscissa = float(np.max(eig.real))
    return AuditReport("Hurwitz", abscissa < -margin,
                       details={"spectral_abscissa": abscissa, "eigenvalues": [complex(e) for e in eig]},
                       witness=None if abscissa < -margin else {"eigenvalue": complex(eig[np.argmax(eig.real)])})


def lyapunov_matrix(M) -> np.ndarray:
    """Solution ``P`` of ``M^T P + P M = -I``."""
    M = np.asarray(M, dtype=float)
    P = scipy.linalg.solve_continuous_lyapunov(M.T, -np.eye(M.shape[0]))
    return 0.5 * (P + P.T)


@dataclass(frozen=True, eq=False)
class LyapunovCandidate:
    """``V(x) = ||x||`` or ``V(x) = x^T P x`` with zero set ``zero_set``."""

    kind: str = "norm"
    P: np.ndarray | None = None
    zero_set: np.ndarray | None = None
    eps_region: float = 1.0

    def __post_init__(self):
        if self.kind not in ("norm", "quadratic"):
            raise DomainError(f"unknown candidate kind {self.kind!r}")
        if self.eps_region <= 0:
            raise DomainError("eps_region must be positive")
        if self.kind == "quadratic":
            P = np.asarray(self.P, dtype=float)
            if P.ndim != 2 or not np.allclose(P, P.T):
                raise DomainError("P must be symmetric")
            if np.linalg.eigvalsh(P).min() <= 0:
                raise DomainError("P must be positive definite")
            object.__setattr__(self, "P", P)

    @classmethod
    def quadratic_for(cls, M, **kw) -> "LyapunovCandidate":
        return cls("quadratic", P=lyapunov_matrix(M), **kw)

    def zeros(self, dim: int) -> np.ndarray:
        return np.zeros((1, dim)) if self.zero_set is None else np.atleast_2d(self.zero_set)

    def batch(self, X: np.ndarray) -> np.ndarray:
        if self.kind == "norm":
            return np.linalg.norm(X, axis=-1)
        return np.einsum("...i,ij,...j->...", X, self.P, X)

    def __call__(self, x) -> float:
        return float(self.batch(np.asarray(x, dtype=float)))

    @property
    def region_radius(self) -> float:
        return 1.0 + self.eps_region


def build_T2_audit(fam_or_M, cand: LyapunovCandidate, dt: float = 1e-3, samples: int = 32,
                   horizon: float = 3.0, rng=None) -> AuditReport:
    """Clauses (i)-(iii) for ``x' in hull{A(y) x}`` on the ball of radius ``1 + eps``.

    (i) is checked on the sublevel set of ``V`` reaching the sampled sphere of
    that radius; for ``V = ||x||`` this is the ball itself.
    """
    if isinstance(fam_or_M, AffineFamily):
        A, _ = fam_or_M.arrays()
        rhs = LinearHullMap(A)
    else:
        rhs = LinearHullMap([np.asarray(fam_or_M, dtype=float)])
    dim = rhs.dim
    rep = lyapunov_decrease_audit(rhs, cand, region_radius=cand.region_radius, samples=samples, dt=dt,
                                  rng=rng, zero_set=cand.zeros(dim), horizon=horizon)
    rep.name = "T2"
    rep.details["candidate"] = cand.kind
    if cand.kind == "norm":
        # d/dt ||x||^2 = 2 x^T A x along the vertex A; its worst unit direction is analytic
        witness = _norm_growth_witness(rhs.mats)
        rep.clauses["iii"].details["max_xAx_on_unit_sphere"] = witness["xAx"]
        if witness["xAx"] > 0:
            rep.clauses["iii"].details["analytic_witness"] = witness
        if not rep.passed and not rep.clauses["iii"].passed:
            if all(hurwitz_check(A).passed for A in rhs.mats):
                rep.justification = ("V = ||x|| does not decrease along this flow; "
                                     "try a quadratic candidate V = x^T P x with M^T P + P M = -I")
            else:
                rep.justification = "a vertex of H is not Hurwitz, so no decreasing candidate can exist"
    return rep


def _norm_growth_witness(mats) -> dict:
    best = None
    for k, A in enumerate(mats):
        w, v = np.linalg.eigh(0.5 * (A + A.T))
        x = v[:, -1]
        x = x * np.sign(x[np.flatnonzero(np.abs(x) > 1e-12)[0]])
        if best is None or w[-1] > best["xAx"]:
            best = {"vertex": k, "x": x, "xAx": float(x @ A @ x)}
    return best


def td_equilibrium(M, model: MarkovModel, fam: AffineFamily) -> np.ndarray:
    """Zero ``x* = -M^{-1} b_bar`` of the averaged field ``M x + sum_y eta(y) b(y)``."""
    M = np.asarray(M, dtype=float)
    if model.nU != 1:
        raise DomainError("td_equilibrium needs an uncontrolled chain; use markov.hat_h_eval")
    A, b = fam.arrays()
    if not np.all(A == M):
        raise DomainError("family's A table is not the constant matrix M")
    if not hurwitz_check(M).passed:
        raise NumericalError("M is not Hurwitz")
    if model.depends_on_x:
        raise DomainError("td_equilibrium needs a kernel that does not depend on x")
    eta = invariant_measure(model.kernel_at(None)[:, 0, :])
    b_bar = eta @ b
    try:
        x_star = np.linalg.solve(M, -b_bar)
    except np.linalg.LinAlgError as err:
        raise NumericalError(f"singular M: {err}") from err
    if np.linalg.norm(M @ x_star + b_bar) > 1e-9 * max(1.0, np.linalg.norm(b_bar)):
        raise NumericalError("equilibrium residual too large")
    return x_star

