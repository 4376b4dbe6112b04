"""Acceptance experiments AC-1 .. AC-10.

Each test records one ``AC-k PASS|FAIL  <measurements>`` line, printed in the
pytest terminal summary, and asserts the criterion at its stated tolerance.
"""

import time
from pathlib import Path

import numpy as np
import pytest
import scipy.linalg

from conftest import ACCEPTANCE_LINES, TD_B, TD_M, TD_P, random_hurwitz
from salab import (MarkovModel, StationaryPolicy, VectorField, empirical_occupation, invariant_measure,
                   marchaud_audit, occupation_vertices, parse_scenario, run_experiment, support_function)
from salab.convex import big_H_eval, scale_map_eval
from salab.di import LinearHullMap, estimate_T_epsilon, integrate_di
from salab.engine import NoiseModel, StepSchedule, run_sa
from salab.markov import total_variation
from salab.td import AffineFamily, LyapunovCandidate, build_T2_audit

SCEN = Path(__file__).parent.parent / "scenarios"
pytestmark = pytest.mark.slow


def record(ac: str, ok: bool, detail: str):
    line = f"{ac} {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def oracle_x_star():
    K = np.vstack([TD_P.T - np.eye(3), np.ones(3)])
    eta = np.linalg.lstsq(K, np.r_[0.0, 0.0, 0.0, 1.0], rcond=None)[0]
    return np.linalg.solve(TD_M, -(eta @ TD_B))


@pytest.fixture(scope="module")
def ac1(tmp_path_factory):
    s = parse_scenario(SCEN / "td_hurwitz.json")
    out = tmp_path_factory.mktemp("ac1")
    t0 = time.perf_counter()
    report = run_experiment(s, out_dir=out)
    return s, report, out, time.perf_counter() - t0


def test_ac1_stability_and_convergence(ac1):
    s, rep, _, elapsed = ac1
    x_star = oracle_x_star()
    rows = rep.seeds
    n_div = sum(r["status"] == "diverged" for r in rows)
    sup = max(r["sup_norm"] for r in rows)
    tol = 0.05 * (1 + np.linalg.norm(x_star))
    within = sum(np.linalg.norm(np.array(r["final_x"]) - x_star) <= tol for r in rows)
    ok = (len(rows) == 100 and n_div == 0 and np.isfinite(sup) and sup <= 50 and within >= 95
          and elapsed <= 120 and np.allclose(rep.body["td"]["x_star"], x_star, atol=1e-12))
    record("AC-1", ok, f"seeds={len(rows)} diverged={n_div} max_sup={sup:.4g} within_tol={within}/100 "
                       f"x*={np.round(x_star, 6).tolist()} runtime={elapsed:.1f}s")
    assert ok


def test_ac2_noise_cauchy(ac1):
    _, rep, _, _ = ac1
    summ = rep.body["rescaling"]
    tail = summ["tail_start"]
    k = np.arange(tail, 10 ** 7, dtype=float)
    tail_sum = float(np.sum(1.0 / (k + 1) ** 2)) + 1.0 / 10 ** 7  # integral bound for the rest
    passes = summ["cauchy_pass"]
    worst = max(r["cauchy_sup"] for r in summ["per_seed"])
    ok = tail_sum <= 1e-4 and summ["cauchy_tol"] == 0.05 and passes >= 95
    record("AC-2", ok, f"tail_start={tail} tail_sum={tail_sum:.3g} pass={passes}/100 max_sup={worst:.3g}")
    assert ok


def test_ac3_gap_formulas_and_medians(ac1):
    _, rep, _, _ = ac1
    summ = rep.body["rescaling"]
    mismatch = summ["max_gap_formula_mismatch"]
    med = summ["median_gap_by_segment"]
    segs = min(r["segments"] for r in summ["per_seed"])
    m10, m20, m40 = med[10], med[20], med[40]
    ok = segs > 40 and mismatch <= 1e-9 and m10 >= m20 >= m40
    record("AC-3", ok, f"max_mismatch={mismatch:.2g} segments>={segs} "
                       f"median_gap[10,20,40]=({m10:.3g}, {m20:.3g}, {m40:.3g})")
    assert ok


def test_ac4_marchaud():
    fld = AffineFamily.constant(TD_M, TD_B).field()
    rng = np.random.default_rng(2024)
    v = rng.standard_normal((1000, 2))
    xs = v / np.linalg.norm(v, axis=1, keepdims=True) * 1e3 * rng.uniform(0, 1, (1000, 1)) ** 0.5
    cs = (1.0, 10.0, 1e3, 1e6)
    rep = marchaud_audit(fld, xs, cs=cs, rng=rng)
    K = fld.bound_K
    worst = 0.0
    dirs = rng.standard_normal((16, 2))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    for x in xs:
        bound = K * (1 + np.linalg.norm(x))
        H = big_H_eval(fld, x)
        vals = [support_function(H, u) for u in dirs]
        vals += [np.linalg.norm(scale_map_eval(fld, c, x, y)) for c in cs for y in range(3)]
        worst = max(worst, max(vals) / bound)
    ok = rep.passed and worst <= 1.0
    record("AC-4", ok, f"marchaud={rep.status} samples=1000 max_|x|={np.linalg.norm(xs, axis=1).max():.1f} "
                       f"max_value/K(1+|x|)={worst:.4f}")
    assert ok


def test_ac5_instability(tmp_path):
    s = parse_scenario(SCEN / "unstable.json")
    t0 = time.perf_counter()
    rep = run_experiment(s, out_dir=tmp_path)
    elapsed = time.perf_counter() - t0
    per = rep.body["rescaling"]["per_seed"]
    all_div = all(r["status"] == "diverged" for r in rep.seeds)
    ratios = min(r["fraction_ratio_ge_1"] for r in per)
    unbounded = not any(r["r_bounded"] for r in per)
    s2_fail = rep.body["di"]["S2"]["status"] == "fail"
    ok = all_div and ratios == 1.0 and unbounded and s2_fail and elapsed <= 10
    record("AC-5", ok, f"diverged={sum(r['status'] == 'diverged' for r in rep.seeds)}/{len(rep.seeds)} "
                       f"min_fraction_ratio>=1={ratios} r_unbounded={unbounded} S2_fail={s2_fail} "
                       f"runtime={elapsed:.2f}s (step 4/(n+1))")
    assert ok


def test_ac6_di_euler():
    M = np.diag([-1.0, -2.0])
    x0 = np.array([1.0, 1.0])
    exact = scipy.linalg.expm(M) @ x0
    err = {dt: np.linalg.norm(integrate_di(LinearHullMap([M]), x0, dt, 1.0).terminal - exact)
           for dt in (1e-3, 1e-4)}
    ratio = err[1e-3] / err[1e-4]
    ok = err[1e-4] <= 1e-3 and 10 / 1.5 <= ratio <= 15
    record("AC-6", ok, f"err(dt=1e-3)={err[1e-3]:.3g} err(dt=1e-4)={err[1e-4]:.3g} ratio={ratio:.3f}")
    assert ok


def test_ac7_T_epsilon():
    T = estimate_T_epsilon(LinearHullMap([[[-1.0]]]), [[0.0]], 1.0, 0.1, 1e-3)
    pre = T / 1.25
    ok = 2.2 <= pre <= 2.45
    record("AC-7", ok, f"pre_safety={pre:.4f} returned={T:.4f} ln10={np.log(10):.4f}")
    assert ok


def test_ac8_ergodic():
    P = np.array([[0.9, 0.1], [0.2, 0.8]])
    eta = invariant_measure(P)
    err = np.abs(eta - [2 / 3, 1 / 3]).max()
    m = MarkovModel.uncontrolled(P)
    f = VectorField.affine([np.zeros((1, 1))] * 2, [[0.0], [0.0]])
    pol = StationaryPolicy.uniform(2, 1)
    # unit steps (alpha is clamped to a(n) = 1) make the time weighting uniform over the whole run
    tr = run_sa(f, m, pol, StepSchedule("harmonic", 1e9), NoiseModel(), N=100_000, seed=0)
    tv = total_variation(empirical_occupation(tr, 0.0, tr.horizon).marginal, eta)
    # for reference: harmonic steps weight step n by 1/(n+1), so only a late window is informative
    th = run_sa(f, m, pol, StepSchedule(), NoiseModel(), N=100_000, seed=0)
    tv_h = total_variation(empirical_occupation(th, th.times[1000], th.horizon).marginal, eta)
    K = np.zeros((2, 2, 2))
    K[:, 0] = [[0.9, 0.1], [0.2, 0.8]]
    K[:, 1] = [[0.5, 0.5], [0.6, 0.4]]
    nverts = len(occupation_vertices(MarkovModel(K)))
    ok = err <= 1e-10 and tv <= 0.02 and nverts == 4
    record("AC-8", ok, f"eta_err={err:.2g} occupation_TV={tv:.4f} vertices={nverts} "
                       f"(harmonic steps, window from t(1000): TV={tv_h:.4f})")
    assert ok


def test_ac9_T2():
    rng = np.random.default_rng(99)
    quad = []
    for i in range(20):
        M = random_hurwitz(rng, 1 + i % 3)
        quad.append(build_T2_audit(M, LyapunovCandidate.quadratic_for(M), rng=np.random.default_rng(i)).passed)
    rep = build_T2_audit(np.array([[-1.0, 4.0], [0.0, -1.0]]), LyapunovCandidate())
    w = rep.clauses["iii"].details.get("analytic_witness", {})
    witness_ok = (not rep.clauses["iii"].passed and np.allclose(w.get("x", 0), np.ones(2) / np.sqrt(2))
                  and abs(w.get("xAx", 0) - 1.0) <= 1e-12)
    ok = all(quad) and not rep.passed and witness_ok
    record("AC-9", ok, f"quadratic_pass={sum(quad)}/20 norm_candidate={rep.status} "
                       f"witness_x={np.round(w.get('x', []), 4).tolist()} xMx={w.get('xAx')}")
    assert ok


def test_ac10_determinism(ac1, tmp_path):
    s, first, out1, _ = ac1
    out2 = tmp_path / "again"
    second = run_experiment(s, out_dir=out2)
    files1 = sorted(p.relative_to(out1) for p in out1.rglob("*") if p.is_file() and p.name != "timing.json")
    files2 = sorted(p.relative_to(out2) for p in out2.rglob("*") if p.is_file() and p.name != "timing.json")
    same = files1 == files2 and all((out1 / f).read_bytes() == (out2 / f).read_bytes() for f in files1)
    csvs = sum(f.suffix == ".csv" for f in files1)
    ok = same and first.dumps() == second.dumps() and csvs == 201
    record("AC-10", ok, f"files_compared={len(files1)} csv={csvs} identical={same}")
    assert ok
