"""Scenario files and the experiment runner behind the ``salab`` command.

A scenario is one JSON document with ``"schema": "salab/1"``. It names an
affine driver, a controlled chain, a policy, steps, noise, a seed list and
the analyses to run. :func:`run_experiment` executes it and writes

``report.json``
    Per-seed outcomes plus the requested analyses. Byte-identical across reruns.
``timing.json``
    Wall-clock seconds per phase, kept apart so the report stays reproducible.
``trajectories/seed_<s>.csv``, ``diagnostics/seed_<s>.csv``, ``bundle.csv``
    Raw dumps for plotting elsewhere.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ._errors import ConfigError, DomainError, MultichainError, SALabError
from .audit import AuditReport, not_applicable
from .convex import VectorField, lipschitz_audit, marchaud_audit
from .di import (BARYCENTRIC, VERTEX_RANDOM, H_rhs, ball_samples, default_dt, flow_bundle,
                 limit_set_estimate, verify_S2, write_bundle_csv)
from .engine import (NoiseModel, StepSchedule, audit_A2, audit_A3, config_hash, run_sa_batch,
                     write_trajectory_csv)
from .markov import MarkovModel, StationaryPolicy, audit_B1, audit_B2, audit_B3
from .rescaling import (DeltaLadder, build_segments, default_T_window, difftozero_gap_noise,
                        diagnostics_rows, noise_cauchy_check, rescaled_view, stability_ratio_audit,
                        write_diagnostics_csv)
from .td import (AffineFamily, LyapunovCandidate, build_T2_audit, check_S1_affine, check_T1,
                 hurwitz_check, td_equilibrium)

SCHEMA = "salab/1"
REPORT_SCHEMA = "salab-report/1"
ANALYSES = ("rescaling", "di", "td", "audits")
BATCH = 25
DEFAULT_OUT = "salab-out"


@dataclass(frozen=True)
class Scenario:
    """Validated, normalised scenario; :meth:`to_dict` and :func:`scenario_from_dict` are inverse."""

    field: dict
    model: dict
    N: int
    seeds: tuple
    name: str = ""
    description: str = ""
    policy: dict = field(default_factory=lambda: {"kind": "uniform"})
    schedule: dict = field(default_factory=lambda: {"kind": "harmonic", "alpha": 1.0, "beta": 0.0,
                                                    "p": 1.0, "unchecked": False})
    noise: dict = field(default_factory=lambda: {"kind": "none", "sigma0": 0.0})
    x0: tuple | None = None
    y0: int = 0
    analyses: tuple = ANALYSES
    delta_ladder: dict | None = None
    T_window: float | None = None
    burn_in: int = 10
    ratio_threshold: float = 1.0
    divergence_threshold: float = 1e12
    attractor: tuple | None = None
    epsilon: float = 0.1
    lyapunov: dict = field(default_factory=lambda: {"kind": "norm", "P": None, "eps_region": 1.0})
    equilibrium_tol: float = 0.05
    tail_bound: float = 1e-4
    cauchy_tol: float = 0.05
    audit_samples: int = 100
    audit_radius: float = 1e3
    audit_seed: int = 0
    output: dict = field(default_factory=lambda: {"dir": DEFAULT_OUT, "trajectory_stride": 100,
                                                  "bundle_stride": 100})

    # -- derived objects ---------------------------------------------------
    @property
    def dim(self) -> int:
        return len(self.field["A"][0])

    def family(self) -> AffineFamily:
        return AffineFamily(np.array(self.field["A"]), np.array(self.field["b"]))

    def vector_field(self) -> VectorField:
        return self.family().field()

    def markov_model(self) -> MarkovModel:
        m = self.model
        return MarkovModel(np.array(m["kernel"]),
                           None if m["kernel_alt"] is None else np.array(m["kernel_alt"]),
                           None if m["weight"] is None else np.array(m["weight"]),
                           tuple(m["states"]), tuple(m["controls"]))

    def stationary_policy(self) -> StationaryPolicy:
        return StationaryPolicy(np.array(self.policy["probs"]))

    def step_schedule(self) -> StepSchedule:
        return StepSchedule(**self.schedule)

    def noise_model(self) -> NoiseModel:
        return NoiseModel(**self.noise)

    def ladder(self) -> DeltaLadder:
        if self.delta_ladder is None:
            return DeltaLadder.from_delta1(0.0)
        return DeltaLadder(**self.delta_ladder)

    def attractor_points(self) -> np.ndarray:
        if self.attractor is None:
            return np.zeros((1, self.dim))
        return np.array(self.attractor, dtype=float)

    def initial_point(self) -> np.ndarray:
        return np.zeros(self.dim) if self.x0 is None else np.array(self.x0, dtype=float)

    def to_dict(self) -> dict:
        out = {"schema": SCHEMA}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        out["seeds"] = list(self.seeds)
        if self.x0 is not None:
            out["x0"] = list(self.x0)
        if self.attractor is not None:
            out["attractor"] = [list(p) for p in self.attractor]
        return out

    def replace(self, **changes) -> "Scenario":
        d = self.to_dict()
        d.update(changes)
        return scenario_from_dict(d)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output")
        return config_hash(json.dumps(d, sort_keys=True))


# --------------------------------------------------------------------------- #
# parsing and validation


def parse_scenario(path) -> Scenario:
    """Read and validate a scenario file.

    Raises
    ------
    ConfigError
        Malformed JSON (with line and column), unknown or missing fields, or
        inconsistent dimensions (naming the fields involved).
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read scenario {path}: {err}") from err
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: line {err.lineno} column {err.colno}: {err.msg}") from err
    return scenario_from_dict(raw)


def _err(where: str, msg: str) -> ConfigError:
    return ConfigError(f"field '{where}': {msg}")


def _number(v, where, positive=False, nonneg=False) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise _err(where, f"expected a number, got {v!r}")
    v = float(v)
    if not math.isfinite(v):
        raise _err(where, "must be finite")
    if positive and not v > 0:
        raise _err(where, "must be positive")
    if nonneg and v < 0:
        raise _err(where, "must be nonnegative")
    return v


def _integer(v, where, minimum=None) -> int:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
        raise _err(where, f"expected an integer, got {v!r}")
    v = int(v)
    if minimum is not None and v < minimum:
        raise _err(where, f"must be >= {minimum}")
    return v


def _array(v, where, ndim_options) -> np.ndarray:
    try:
        arr = np.array(v, dtype=float)
    except (TypeError, ValueError) as err:
        raise _err(where, f"not a rectangular numeric array ({err})") from err
    if arr.ndim not in ndim_options:
        raise _err(where, f"expected {' or '.join(map(str, ndim_options))} dimensions, got {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise _err(where, "entries must be finite")
    return arr


def _keys(d, where, allowed, required=()):
    if not isinstance(d, dict):
        raise _err(where, f"expected an object, got {type(d).__name__}")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise _err(where, f"unknown keys {unknown}")
    missing = [k for k in required if k not in d]
    if missing:
        raise _err(where, f"missing keys {missing}")


def _model(raw) -> dict:
    _keys(raw, "model", ("kernel", "kernel_alt", "weight", "states", "controls"), ("kernel",))
    P = _array(raw["kernel"], "model.kernel", (2, 3))
    if P.ndim == 2:
        P = P[:, None, :]
    alt = raw.get("kernel_alt")
    w = raw.get("weight")
    if alt is not None:
        alt = _array(alt, "model.kernel_alt", (2, 3))
        if alt.ndim == 2:
            alt = alt[:, None, :]
    if w is not None:
        w = _array(w, "model.weight", (1,))
    nS, nU = P.shape[:2]
    states = list(raw.get("states", range(nS)))
    controls = list(raw.get("controls", range(nU)))
    if len(states) != nS:
        raise ConfigError(f"model.states lists {len(states)} labels but model.kernel has {nS} states")
    if len(controls) != nU:
        raise ConfigError(f"model.controls lists {len(controls)} labels but model.kernel has {nU} controls")
    out = {"kernel": P.tolist(), "kernel_alt": None if alt is None else alt.tolist(),
           "weight": None if w is None else w.tolist(), "states": states, "controls": controls}
    try:
        MarkovModel(P, alt, w, tuple(states), tuple(controls))
    except DomainError as err:
        raise _err("model", str(err)) from err
    return out


def _field(raw, nS) -> dict:
    _keys(raw, "field", ("A", "M", "b"), ("b",))
    if ("A" in raw) == ("M" in raw):
        raise _err("field", "give exactly one of 'A' (per-state table) and 'M' (constant matrix)")
    if "M" in raw:
        M = _array(raw["M"], "field.M", (2,))
        A = np.repeat(M[None], nS, axis=0)
        a_name = "field.M"
    else:
        A = _array(raw["A"], "field.A", (2, 3))
        if A.ndim == 2:
            A = np.repeat(A[None], nS, axis=0)
        a_name = "field.A"
    if A.shape[1] != A.shape[2]:
        raise _err(a_name, f"matrices must be square, got {A.shape[1]}x{A.shape[2]}")
    b = _array(raw["b"], "field.b", (1, 2))
    if b.ndim == 1:
        b = np.repeat(b[None], nS, axis=0)
    if len(A) != nS:
        raise ConfigError(f"{a_name} has {len(A)} states but model.kernel has {nS}")
    if len(b) != nS:
        raise ConfigError(f"field.b has {len(b)} states but model.kernel has {nS}")
    if b.shape[1] != A.shape[1]:
        raise ConfigError(f"field.b has dimension {b.shape[1]} but {a_name} is {A.shape[1]}x{A.shape[1]}")
    return {"A": A.tolist(), "b": b.tolist()}


def _policy(raw, nS, nU) -> dict:
    _keys(raw, "policy", ("kind", "choice", "probs"), ("kind",))
    kind = raw["kind"]
    if kind == "uniform":
        probs = StationaryPolicy.uniform(nS, nU).probs
    elif kind == "deterministic":
        choice = raw.get("choice")
        if not isinstance(choice, list) or len(choice) != nS:
            raise ConfigError(f"policy.choice must list one control per state ({nS}, from model.kernel)")
        try:
            probs = StationaryPolicy.deterministic([_integer(c, "policy.choice") for c in choice], nU).probs
        except DomainError as err:
            raise _err("policy.choice", str(err)) from err
    elif kind == "table":
        probs = _array(raw.get("probs"), "policy.probs", (2,))
        if probs.shape != (nS, nU):
            raise ConfigError(f"policy.probs has shape {probs.shape} but model.kernel needs ({nS}, {nU})")
    else:
        raise _err("policy.kind", f"unknown policy kind {kind!r}")
    try:
        StationaryPolicy(np.asarray(probs))
    except DomainError as err:
        raise _err("policy", str(err)) from err
    out = {"kind": kind, "probs": np.asarray(probs, dtype=float).tolist()}
    if kind == "deterministic":
        out["choice"] = [int(c) for c in raw["choice"]]
    return out


def _schedule(raw) -> dict:
    _keys(raw, "schedule", ("kind", "alpha", "beta", "p", "unchecked"), ("kind",))
    d = {"kind": raw["kind"], "alpha": _number(raw.get("alpha", 1.0), "schedule.alpha"),
         "beta": _number(raw.get("beta", 0.0), "schedule.beta"),
         "p": _number(raw.get("p", 1.0), "schedule.p"), "unchecked": bool(raw.get("unchecked", False))}
    try:
        StepSchedule(**d)
    except DomainError as err:
        raise _err("schedule", str(err)) from err
    return d


def _noise(raw) -> dict:
    _keys(raw, "noise", ("kind", "sigma0"), ("kind",))
    d = {"kind": raw["kind"], "sigma0": _number(raw.get("sigma0", 0.0), "noise.sigma0", nonneg=True)}
    try:
        NoiseModel(**d)
    except DomainError as err:
        raise _err("noise", str(err)) from err
    return d


def _ladder(raw) -> dict | None:
    if raw is None:
        return None
    _keys(raw, "delta_ladder", ("delta1", "d1", "d2", "d3", "d4"))
    if "delta1" in raw:
        if len(raw) != 1:
            raise _err("delta_ladder", "give either delta1 alone or all of d1..d4")
        lad = DeltaLadder.from_delta1(_number(raw["delta1"], "delta_ladder.delta1", nonneg=True))
    else:
        _keys(raw, "delta_ladder", ("d1", "d2", "d3", "d4"), ("d1", "d2", "d3", "d4"))
        try:
            lad = DeltaLadder(*(_number(raw[k], f"delta_ladder.{k}") for k in ("d1", "d2", "d3", "d4")))
        except DomainError as err:
            raise _err("delta_ladder", str(err)) from err
    return asdict(lad)


def scenario_from_dict(raw: dict) -> Scenario:
    """Validate a decoded scenario document."""
    allowed = {f.name for f in fields(Scenario)} | {"schema"}
    _keys(raw, "<root>", allowed, ("schema", "field", "model", "N", "seeds"))
    if raw["schema"] != SCHEMA:
        raise _err("schema", f"expected {SCHEMA!r}, got {raw['schema']!r}")
    model = _model(raw["model"])
    nS, nU = len(model["states"]), len(model["controls"])
    fld = _field(raw["field"], nS)
    d = len(fld["A"][0])
    if model["weight"] is not None and len(model["weight"]) != d:
        raise ConfigError(f"model.weight has length {len(model['weight'])} but field.A is {d}x{d}")

    seeds = raw["seeds"]
    if not isinstance(seeds, list) or not seeds:
        raise _err("seeds", "must be a nonempty list")
    seeds = tuple(_integer(s, "seeds", minimum=0) for s in seeds)
    if len(set(seeds)) != len(seeds):
        raise _err("seeds", "seeds must be distinct")

    kw = {"field": fld, "model": model, "seeds": seeds,
          "N": _integer(raw["N"], "N", minimum=1),
          "name": str(raw.get("name", "")), "description": str(raw.get("description", ""))}
    if kw["N"] > 10 ** 6:
        raise _err("N", "horizons above 10^6 steps are not stored")
    kw["policy"] = _policy(raw.get("policy", {"kind": "uniform"}), nS, nU)
    kw["schedule"] = _schedule(raw.get("schedule", {"kind": "harmonic"}))
    kw["noise"] = _noise(raw.get("noise", {"kind": "none"}))
    if raw.get("x0") is not None:
        x0 = _array(raw["x0"], "x0", (1,))
        if len(x0) != d:
            raise ConfigError(f"x0 has length {len(x0)} but field.A is {d}x{d}")
        kw["x0"] = tuple(x0.tolist())
    kw["y0"] = _integer(raw.get("y0", 0), "y0", minimum=0)
    if kw["y0"] >= nS:
        raise ConfigError(f"y0 = {kw['y0']} is not a state of model.kernel ({nS} states)")

    analyses = raw.get("analyses", list(ANALYSES))
    if not isinstance(analyses, list) or any(a not in ANALYSES for a in analyses):
        raise _err("analyses", f"must be a list drawn from {list(ANALYSES)}")
    kw["analyses"] = tuple(a for a in ANALYSES if a in analyses)

    kw["delta_ladder"] = _ladder(raw.get("delta_ladder"))
    if raw.get("T_window") is not None:
        kw["T_window"] = _number(raw["T_window"], "T_window", positive=True)
    kw["burn_in"] = _integer(raw.get("burn_in", 10), "burn_in", minimum=0)
    kw["ratio_threshold"] = _number(raw.get("ratio_threshold", 1.0), "ratio_threshold")
    if kw["ratio_threshold"] < 1:
        raise _err("ratio_threshold", "must be >= 1")
    kw["divergence_threshold"] = _number(raw.get("divergence_threshold", 1e12), "divergence_threshold",
                                         positive=True)
    if raw.get("attractor") is not None:
        att = _array(raw["attractor"], "attractor", (2,))
        if att.shape[1] != d:
            raise ConfigError(f"attractor points have dimension {att.shape[1]} but field.A is {d}x{d}")
        kw["attractor"] = tuple(tuple(p) for p in att.tolist())
    kw["epsilon"] = _number(raw.get("epsilon", 0.1), "epsilon", positive=True)

    lyap = raw.get("lyapunov", {"kind": "norm"})
    _keys(lyap, "lyapunov", ("kind", "P", "eps_region"), ("kind",))
    if lyap["kind"] not in ("norm", "quadratic"):
        raise _err("lyapunov.kind", f"unknown candidate {lyap['kind']!r}")
    P = lyap.get("P")
    if P is not None:
        P = _array(P, "lyapunov.P", (2,))
        if P.shape != (d, d):
            raise ConfigError(f"lyapunov.P has shape {P.shape} but field.A is {d}x{d}")
        P = P.tolist()
    kw["lyapunov"] = {"kind": lyap["kind"], "P": P,
                      "eps_region": _number(lyap.get("eps_region", 1.0), "lyapunov.eps_region", positive=True)}

    for key, default in (("equilibrium_tol", 0.05), ("tail_bound", 1e-4), ("cauchy_tol", 0.05),
                         ("audit_radius", 1e3)):
        kw[key] = _number(raw.get(key, default), key, positive=True)
    kw["audit_samples"] = _integer(raw.get("audit_samples", 100), "audit_samples", minimum=1)
    kw["audit_seed"] = _integer(raw.get("audit_seed", 0), "audit_seed", minimum=0)

    out = raw.get("output", {})
    _keys(out, "output", ("dir", "trajectory_stride", "bundle_stride"))
    kw["output"] = {"dir": str(out.get("dir", DEFAULT_OUT)),
                    "trajectory_stride": _integer(out.get("trajectory_stride", 100), "output.trajectory_stride", 1),
                    "bundle_stride": _integer(out.get("bundle_stride", 100), "output.bundle_stride", 1)}
    return Scenario(**kw)


def write_scenario(s: Scenario, path):
    Path(path).write_text(json.dumps(s.to_dict(), indent=2) + "\n")


# --------------------------------------------------------------------------- #
# running


@dataclass
class RunReport:
    """Deterministic report ``body`` plus wall-clock ``timing`` kept separately."""

    body: dict
    timing: dict = field(default_factory=dict)
    out_dir: Path | None = None

    @property
    def seeds(self) -> list:
        return self.body["seeds"]

    @property
    def audits(self) -> dict:
        return self.body.get("audits", {})

    @property
    def verdict(self) -> dict:
        return self.body["verdict"]

    def failed_audits(self) -> list[str]:
        """Names of audit entries whose status is ``fail``."""
        failed = [k for k, v in self.audits.items() if v["status"] == "fail"]
        for section, key in (("di", "S2"), ("td", "hurwitz")):
            entry = self.body.get(section, {}).get(key)
            if entry is not None and entry["status"] == "fail":
                failed.append(f"{section}.{key}")
        return failed

    @property
    def exit_code(self) -> int:
        return 2 if self.failed_audits() else 0

    def dumps(self) -> str:
        return json.dumps(self.body, indent=2, sort_keys=False) + "\n"


def _plain(obj):
    """JSON-safe copy; non-finite floats become strings so the output stays strict JSON."""
    if isinstance(obj, AuditReport):
        return _plain(obj.to_dict())
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def _combine(name: str, parts: dict, justification: str = "") -> AuditReport:
    passed = all(p.passed is not False for p in parts.values())
    witness = next((p.witness for p in parts.values() if p.witness is not None), None)
    return AuditReport(name, passed, clauses=parts, witness=witness, justification=justification)


def _td_applicable(s: Scenario, fam: AffineFamily, model: MarkovModel) -> str:
    """Empty string when the constant-M TD branch applies, else the reason it does not."""
    if not fam.is_constant:
        return "A(y) varies with y"
    if model.nU != 1:
        return "controlled chain; the averaged field is a set, see hat_h_eval"
    if model.depends_on_x:
        return "kernel depends on x"
    return ""


def _verify_S2(s: Scenario, fld: VectorField) -> AuditReport:
    # own stream, so the run report and the audit-only command agree on S2
    rng = np.random.default_rng([s.audit_seed, 2])
    return verify_S2(H_rhs(fld), s.attractor_points(), default_dt(fld.lipschitz_L), rng=rng,
                     epsilon=s.epsilon)


def static_audits(s: Scenario, rng=None, s2: AuditReport | None = None) -> dict:
    """Checks that need no simulation: A1, A3, S1, S2, B1-B3, T1, T2.

    ``s2`` reuses an S2 report already computed for ``s``.
    """
    rng = np.random.default_rng(s.audit_seed) if rng is None else rng
    fam, fld, model = s.family(), s.vector_field(), s.markov_model()
    xs = ball_samples(s.dim, s.audit_radius, s.audit_samples, rng)
    out = {}
    out["A1"] = _combine("A1", {"lipschitz": lipschitz_audit(fld, xs, rng),
                                "marchaud": marchaud_audit(fld, xs, rng=rng)})
    out["A2"] = not_applicable("A2", "needs simulated noise; see the run report")
    out["A3"] = audit_A3(s.step_schedule(), min(s.N, 10 ** 6))
    out["S1"] = check_S1_affine(fam)
    out["S2"] = _verify_S2(s, fld) if s2 is None else s2
    out["B1"] = audit_B1(model, s.dim, rng=rng)
    out["B2"] = audit_B2(model)
    out["B3"] = audit_B3(model)
    out["T1"] = check_T1(fam)
    out["T2"] = build_T2_audit(fam, _candidate(s, fam), rng=rng)
    return out


def _candidate(s: Scenario, fam: AffineFamily) -> LyapunovCandidate:
    ly = s.lyapunov
    if ly["kind"] == "norm":
        return LyapunovCandidate("norm", eps_region=ly["eps_region"])
    if ly["P"] is not None:
        return LyapunovCandidate("quadratic", P=np.array(ly["P"]), eps_region=ly["eps_region"])
    if not fam.is_constant:
        raise ConfigError("lyapunov.P is required for a quadratic candidate when A(y) varies")
    A, _ = fam.arrays()
    return LyapunovCandidate.quadratic_for(A[0], eps_region=ly["eps_region"])


def resolve_out_dir(s: Scenario, override=None) -> Path:
    """``override`` first, then ``SA_LAB_OUT``, then the scenario's ``output.dir``."""
    return Path(override or os.environ.get("SA_LAB_OUT") or s.output["dir"])


def run_experiment(s: Scenario, out_dir=None, write: bool = True) -> RunReport:
    """Run every seed of ``s``, then the requested analyses; see the module docstring for outputs."""
    from . import __version__

    clock = {}
    t_all = time.perf_counter()
    fam, fld, model = s.family(), s.vector_field(), s.markov_model()
    policy, schedule, noise = s.stationary_policy(), s.step_schedule(), s.noise_model()
    analyses = set(s.analyses)
    out = resolve_out_dir(s, out_dir) if write else None
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "trajectories").mkdir(exist_ok=True)
        if "rescaling" in analyses:
            (out / "diagnostics").mkdir(exist_ok=True)

    ladder = s.ladder()
    T_window = s.T_window
    if T_window is None and "rescaling" in analyses:
        t0 = time.perf_counter()
        T_window = default_T_window(fld, ladder)
        clock["T_window"] = time.perf_counter() - t0

    x_star = None
    td_reason = _td_applicable(s, fam, model)
    td = {}
    if "td" in analyses:
        M = fam.arrays()[0][0]
        hw = hurwitz_check(M) if not td_reason else not_applicable("hurwitz", td_reason)
        td["hurwitz"] = hw
        if not td_reason and hw.passed:
            try:
                x_star = td_equilibrium(M, model, fam)
            except (MultichainError, SALabError) as err:
                td["equilibrium_error"] = str(err)
        elif not td_reason:
            td["equilibrium_error"] = "M is not Hurwitz"
        else:
            td["equilibrium_error"] = td_reason

    seed_rows, a2_reports = [], []
    gaps_by_seed, rescale_rows = [], []
    tail_start = None
    if "rescaling" in analyses:
        tail_start = schedule.tail_start(s.tail_bound)
    t_sim = t_ana = 0.0
    for i in range(0, len(s.seeds), BATCH):
        chunk = s.seeds[i:i + BATCH]
        t0 = time.perf_counter()
        trajs = run_sa_batch(fld, model, policy, schedule, noise, s.initial_point(), s.y0, s.N, chunk,
                             s.divergence_threshold)
        t_sim += time.perf_counter() - t0
        t0 = time.perf_counter()
        for tr in trajs:
            norms = tr.norms()
            row = {"seed": tr.seed, "status": "diverged" if tr.diverged else "stable",
                   "diverged_at": tr.diverged_at, "steps_run": tr.N,
                   "final_x": tr.xs[-1], "sup_norm": float(np.max(norms))}
            if write:
                write_trajectory_csv(tr, out / "trajectories" / f"seed_{tr.seed}.csv",
                                     stride=s.output["trajectory_stride"])
            if x_star is not None:
                err = float(np.linalg.norm(tr.xs[-1] - x_star))
                row["equilibrium_error"] = err
                row["within_tolerance"] = bool(err <= s.equilibrium_tol * (1 + np.linalg.norm(x_star)))
            if "audits" in analyses:
                a2_reports.append((tr.seed, audit_A2(tr, noise)))
            if "rescaling" in analyses:
                rr = _rescale_seed(tr, fld, T_window, ladder, s, tail_start, write, out)
                row["r_max"] = rr.pop("r_max")
                gaps_by_seed.append(rr.pop("gaps"))
                rescale_rows.append(rr)
            seed_rows.append(row)
        t_ana += time.perf_counter() - t0
        del trajs
    clock["simulation"] = t_sim
    clock["per_seed_analysis"] = t_ana

    n_div = sum(r["status"] == "diverged" for r in seed_rows)
    headline = "stable" if n_div == 0 else "diverged" if n_div == len(seed_rows) else "mixed"
    verdict = {"headline": headline, "seeds": len(seed_rows), "diverged_seeds": n_div,
               "max_sup_norm": max(r["sup_norm"] for r in seed_rows)}
    if x_star is not None:
        within = sum(r["within_tolerance"] for r in seed_rows)
        verdict["converged_seeds"] = within
        verdict["converges"] = bool(within >= 0.95 * len(seed_rows))

    body = {"schema": REPORT_SCHEMA, "library_version": __version__, "config_hash": s.hash(),
            "scenario": s.name, "N": s.N, "analyses": list(s.analyses), "seeds": seed_rows,
            "verdict": verdict}

    if "td" in analyses:
        td["x_star"] = x_star
        td["tolerance"] = s.equilibrium_tol
        body["td"] = td
    if "rescaling" in analyses:
        body["rescaling"] = _rescaling_summary(rescale_rows, gaps_by_seed, T_window, tail_start, s)
    if "di" in analyses:
        t0 = time.perf_counter()
        body["di"] = _di_section(s, fld, write, out)
        clock["di"] = time.perf_counter() - t0
    if "audits" in analyses:
        t0 = time.perf_counter()
        audits = static_audits(s, s2=body["di"]["S2"] if "di" in body else None)
        bad = [(seed, r) for seed, r in a2_reports if not r.passed]
        audits["A2"] = AuditReport("A2", not bad,
                                   details={"seeds_checked": len(a2_reports), "seeds_failed": len(bad)},
                                   witness=None if not bad else {"seed": bad[0][0], **bad[0][1].to_dict()})
        body["audits"] = {k: audits[k] for k in ("A1", "A2", "A3", "S1", "S2", "B1", "B2", "B3", "T1", "T2")}
        clock["audits"] = time.perf_counter() - t0

    body = _plain(body)
    clock["total"] = time.perf_counter() - t_all
    report = RunReport(body, clock, out)
    if write:
        (out / "report.json").write_text(report.dumps())
        (out / "timing.json").write_text(json.dumps(clock, indent=2) + "\n")
    return report


def _rescale_seed(tr, fld, T_window, ladder, s, tail_start, write, out) -> dict:
    res = {"seed": tr.seed, "r_max": None, "gaps": []}
    try:
        seg = build_segments(tr, T_window)
    except DomainError as err:
        res["status"] = f"not-applicable: {err}"
        return res
    view = rescaled_view(tr, seg)
    rows = diagnostics_rows(view, fld, ladder)
    gaps = [r["gap"] for r in rows]
    consistency = max((abs(g - difftozero_gap_noise(view, n)) for n, g in enumerate(gaps)), default=0.0)
    stab = stability_ratio_audit(view, ladder, burn_in=s.burn_in, r_threshold=s.ratio_threshold)
    res.update({"status": "ok", "segments": seg.complete, "r_max": float(np.max(seg.r)),
                "gap_formula_mismatch": consistency, "gaps": gaps,
                "stability": stab.status, "fraction_ratio_ge_1": stab.details["fraction_ratio_ge_1"],
                "r_bounded": stab.details["r_bounded"]})
    if tail_start < tr.N:
        cc = noise_cauchy_check(view, tail_start, s.cauchy_tol)
        res["cauchy"] = cc.status
        res["cauchy_sup"] = cc.details["sup"]
    else:
        res["cauchy"] = "not-applicable"
    if write:
        write_diagnostics_csv(rows, out / "diagnostics" / f"seed_{tr.seed}.csv")
    return res


def _rescaling_summary(rows, gaps_by_seed, T_window, tail_start, s) -> dict:
    n_seg = max((len(g) for g in gaps_by_seed), default=0)
    medians = []
    for k in range(n_seg):
        vals = [g[k] for g in gaps_by_seed if len(g) > k]
        medians.append(float(np.median(vals)))
    ok = [r for r in rows if r["status"] == "ok"]
    return {"T_window": T_window, "tail_start": tail_start, "cauchy_tol": s.cauchy_tol,
            "cauchy_pass": sum(r.get("cauchy") == "pass" for r in ok),
            "stability_pass": sum(r["stability"] == "pass" for r in ok),
            "max_gap_formula_mismatch": max((r["gap_formula_mismatch"] for r in ok), default=None),
            "median_gap_by_segment": medians, "per_seed": rows}


def _di_section(s: Scenario, fld: VectorField, write: bool, out) -> dict:
    rng = np.random.default_rng(s.audit_seed)
    rhs = H_rhs(fld)
    dt = default_dt(fld.lipschitz_L)
    starts = ball_samples(s.dim, 1.0, 16, rng)
    s2 = _verify_S2(s, fld)
    section = {"S2": s2, "dt": dt}
    T_eps = s2.clauses["ii"].details.get("T_epsilon")
    horizon = 2.0 * T_eps if T_eps else 5.0
    bundle = flow_bundle(rhs, starts, dt, horizon, (BARYCENTRIC, VERTEX_RANDOM), rng)
    section["bundle"] = {"curves": len(bundle.curves), "horizon": horizon,
                         "max_terminal_norm": float(bundle.terminal_norms().max()),
                         "blowups": len(bundle.blowups)}
    if not bundle.blowups:
        section["limit_set"] = limit_set_estimate(bundle)
    if write:
        write_bundle_csv(bundle, out / "bundle.csv", stride=s.output["bundle_stride"])
    return section
